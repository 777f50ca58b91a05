"""Oracle, reduction and finite-difference checks shared by the CLI and tests."""

from __future__ import annotations

import time
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from .flow import BlockMatchingFlow, FlowField, FlowSet, neighbor_frames
from .numerics import Tape, Tensor, backward, hold_kinks, l1_loss, record_kinks, zero_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"CHECK {self.name} {status} value={self.value:.3e} tol={self.tolerance:.1e} {self.detail}".rstrip()


# --------------------------------------------------------------------------
# random attention instances
# --------------------------------------------------------------------------


@dataclass
class AttentionCase:
    features: np.ndarray  # (T, C, H, W)
    flows: FlowSet
    params: attn.AttentionParams
    window: int
    radius: int
    flow_kind: str

    @property
    def bounds(self) -> tuple[int, int, int]:
        t, _, h, w = self.features.shape
        return t, h, w

    def describe(self) -> str:
        t, c, h, w = self.features.shape
        return (f"T={t} C={c} H={h} W={w} N={self.params.heads} M={self.window} "
                f"r={self.radius} flow={self.flow_kind}")


def random_flows(rng: np.random.Generator, num_frames: int, hw, radius: int, scale: float = 2.0) -> FlowSet:
    fs = FlowSet(num_frames, hw)
    for t in range(num_frames):
        for f in neighbor_frames(t, radius, num_frames):
            if f != t:
                fs.add(FlowField(t, f, 0, rng.normal(scale=scale, size=(2,) + tuple(hw))))
    return fs


def random_case(rng: np.random.Generator, flow_kind: str | None = None) -> AttentionCase:
    num_frames = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(3, 9, size=2))
    c = int(rng.choice([4, 8]))
    heads = int(rng.choice([1, 2]))
    window = int(rng.choice([1, 3]))
    radius = int(rng.choice([0, 1]))
    flow_kind = flow_kind or str(rng.choice(["random", "block"]))
    feats = rng.normal(size=(num_frames, c, h, w))
    if flow_kind == "block":
        frames = rng.uniform(size=(num_frames, 3, h, w))
        flows = FlowSet.estimate(frames, BlockMatchingFlow(2, 2), radius)
    else:
        flows = random_flows(rng, num_frames, (h, w), radius)
    params = attn.AttentionParams.create(c, heads, rng)
    return AttentionCase(feats, flows, params, window, radius, flow_kind)


def oracle_deviation(case: AttentionCase, corrupt: bool = False) -> float:
    """Max |fgsw_msa - masked dense attention| over all frames of the case."""
    worst = 0.0
    keys = Tensor(case.features)
    for t in range(case.features.shape[0]):
        out = attn.fgsw_msa(Tensor(case.features[t]), keys, t, case.flows, case.params,
                            case.window, case.radius).data
        mask = attn.psi_mask(t, case.flows, case.radius, case.window, case.bounds)
        if corrupt:
            # fault injection: open one query's mask to a key it must not see
            row = mask[0]
            hidden = np.flatnonzero(~row)
            if hidden.size:
                row[hidden[0]] = True
            else:
                row[np.flatnonzero(row)[0]] = False
        ref = attn.dense_masked_attention(case.features[t], case.features, case.params, mask)
        worst = max(worst, float(np.abs(out - ref).max()))
    return worst


def reduction_mismatches(case: AttentionCase) -> int:
    """Pixels where the M=1 windowed output differs bitwise from per-query attention."""
    bad = 0
    keys = Tensor(case.features)
    _, h, w = case.bounds
    for t in range(case.features.shape[0]):
        out = attn.fgsw_msa(Tensor(case.features[t]), keys, t, case.flows, case.params,
                            1, case.radius).data
        for i in range(h):
            for j in range(w):
                omega = attn.build_omega((i, j), t, case.flows, case.radius, case.bounds)
                single = attn.fgs_msa(case.features[t][:, i, j], omega, case.features, case.params)
                bad += not np.array_equal(single, out[:, i, j])
    return bad


def check_oracle(n_configs: int = 50, seed: int = 0, tol: float = 1e-10,
                 corrupt: bool = False) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    kinds = ["random", "block"]
    for k in range(n_configs):
        case = random_case(rng, kinds[k % 2])
        worst = max(worst, oracle_deviation(case, corrupt=corrupt))
    elapsed = time.perf_counter() - start
    return CheckResult("oracle_equivalence", worst < tol, worst, tol,
                       f"configs={n_configs} seconds={elapsed:.2f}")


def check_reduction(n_configs: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    kinds = ["random", "block"]
    for k in range(n_configs):
        bad += reduction_mismatches(random_case(rng, kinds[k % 2]))
    return CheckResult("reduction_identity", bad == 0, float(bad), 0.0, f"configs={n_configs}")


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


@dataclass
class GradCheck:
    name: str
    numeric: float
    analytic: float
    rel_error: float
    tries: int
    held: bool = False  # every direction crossed a kink; evaluated on the held piece


def _rel(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    return 0.0 if denom == 0.0 else abs(a - b) / denom


def gradient_check(loss_fn, params: dict[str, Tensor], h: float = 1e-5, seed: int = 0,
                   max_tries: int = 20) -> list[GradCheck]:
    """Central differences along a random unit direction, one per parameter tensor.

    ``loss_fn()`` must build the scalar loss from the current parameter
    values. A direction is rejected and redrawn when the branch pattern of a
    piecewise op (leaky ReLU, L1 sign) differs at ``theta +- h*u`` from the
    pattern at ``theta``: the difference quotient is then not a derivative
    estimate of the smooth piece the analytic gradient describes. When every
    draw crosses a kink (large layers almost always do for a bias), the last
    direction is evaluated with the pattern at ``theta`` held fixed.
    """
    rng = np.random.default_rng(seed)
    plist = list(params.values())
    zero_grad(plist)
    with Tape() as tape, record_kinks() as base_pattern:
        loss = loss_fn()
    backward(tape, loss)
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for k, p in params.items()}

    def evaluate(hold=False):
        with record_kinks() as pattern, (hold_kinks(base_pattern) if hold else nullcontext()):
            value = float(loss_fn().data)
        return value, pattern

    results = []
    for name, p in params.items():
        base = p.data.copy()
        for tries in range(1, max_tries + 1):
            u = rng.normal(size=p.shape)
            u /= np.linalg.norm(u)
            p.data = base + h * u
            lp, kp = evaluate()
            p.data = base - h * u
            lm, km = evaluate()
            p.data = base
            held = kp != base_pattern or km != base_pattern
            if not held:
                break
        if held:
            p.data = base + h * u
            lp, _ = evaluate(hold=True)
            p.data = base - h * u
            lm, _ = evaluate(hold=True)
            p.data = base
        numeric = (lp - lm) / (2 * h)
        analytic = float(np.sum(grads[name] * u))
        results.append(GradCheck(name, numeric, analytic, _rel(numeric, analytic), tries, held))
    return results


def model_gradient_check(model, video: np.ndarray, target: np.ndarray, flows: FlowSet | None = None,
                         h: float = 1e-5, seed: int = 0) -> list[GradCheck]:
    flows = flows or model.estimate_flows(video)
    tgt = Tensor(target)
    return gradient_check(lambda: l1_loss(model(video, flows), tgt),
                          model.named_parameters(), h=h, seed=seed)


def check_model_gradients(model, video, target, tol: float = 1e-5, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    results = model_gradient_check(model, video, target, seed=seed)
    worst = max(results, key=lambda r: r.rel_error)
    return CheckResult("gradient_soundness", worst.rel_error < tol, worst.rel_error, tol,
                       f"tensors={len(results)} held={sum(r.held for r in results)} worst={worst.name} "
                       f"seconds={time.perf_counter() - start:.1f}")
