"""Acceptance suite: one PASS/FAIL line per criterion, each at its stated tolerance."""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgst import attention as attn
from fgst.checks import check_model_gradients, check_oracle, check_reduction, random_flows
from fgst.cli import EXIT_OK, RunConfig, _fit, _time_attention, main
from fgst.evaluation import FlowCache, evaluate, generate_dataset, train_toy
from fgst.flow import FlowField, FlowSet, round_offset
from fgst.model import FgstModel, ModelConfig
from fgst.numerics import Tensor


def report(capsys, n, name, passed, value, tol):
    with capsys.disabled():
        print(f"\nACCEPT {n:>2} {name:<22} {'PASS' if passed else 'FAIL'} value={value} tol={tol}")


# -- 1, 2: oracle equivalence and reduction identity -----------------------------------


def test_c01_oracle_equivalence(capsys):
    start = time.perf_counter()
    res = check_oracle(n_configs=50, seed=0, tol=1e-10)
    elapsed = time.perf_counter() - start
    ok = res.passed and elapsed < 30
    report(capsys, 1, "oracle_equivalence", ok, f"{res.value:.3e} in {elapsed:.1f}s", "<1e-10, <30s")
    assert res.value < 1e-10, res.detail
    assert elapsed < 30


def test_c02_reduction_identity(capsys):
    res = check_reduction(50, seed=0)
    report(capsys, 2, "reduction_identity", res.passed, res.value, "0 mismatches (bitwise)")
    assert res.passed, res.detail


# -- 3: gradient soundness -------------------------------------------------------------


def test_c03_gradient_soundness(capsys):
    cfg = ModelConfig(T=3, C=8, H=16, W=16, levels=1)
    rng = np.random.default_rng(0)
    video = rng.uniform(size=(cfg.T, 3, cfg.H, cfg.W))
    target = rng.uniform(size=video.shape)
    start = time.perf_counter()
    res = check_model_gradients(FgstModel(cfg), video, target, tol=1e-5, seed=0)
    elapsed = time.perf_counter() - start
    ok = res.passed and elapsed < 300
    report(capsys, 3, "gradient_soundness", ok, f"{res.value:.3e} in {elapsed:.0f}s", "<1e-5, <300s")
    assert res.passed, res.detail
    assert elapsed < 300


# -- 4: complexity formulas ------------------------------------------------------------


def test_c04_complexity(capsys):
    rng = np.random.default_rng(4)
    exact = True
    for kind, m, (T, h, w) in [("fgs", 1, (2, 6, 9)), ("fgsw", 3, (2, 6, 9)),
                               ("fgsw", 3, (3, 9, 12)), ("fgsw", 5, (2, 10, 5))]:
        c, r = 8, 1
        feats = rng.normal(size=(T, c, h, w))
        p = attn.AttentionParams.create(c, 2, rng)
        fs = random_flows(rng, T, (h, w), r)
        counter = attn.MacCounter()
        for t in range(T):
            attn.fgsw_msa(Tensor(feats[t]), Tensor(feats), t, fs, p, m, r, padded=True, counter=counter)
        exact &= counter.total == attn.mac_count(kind, T, h, w, c, r, m)

    sizes = [(1, 16, 32), (2, 16, 32), (4, 16, 32), (8, 16, 32)]
    macs = [attn.mac_count("fgsw", T, h, w, 8, 1, 3) for T, h, w in sizes]
    ratios = [x // macs[0] for x in macs]
    ratio_ok = ratios == [1, 2, 4, 8] and all(x % macs[0] == 0 for x in macs)

    cfg = RunConfig(bench_repeats=5)
    n = np.array([T * h * w for T, h, w in sizes], dtype=float)
    r2 = {}
    for kind in ("fgs", "fgsw"):
        secs = np.array([_time_attention(kind, T, h, w, cfg) for T, h, w in sizes])
        r2[kind] = _fit(n, secs, 1)[1]
    timing_ok = min(r2.values()) >= 0.95
    ok = exact and ratio_ok and timing_ok
    report(capsys, 4, "complexity", ok,
           f"counter_exact={exact} ratios={':'.join(map(str, ratios))} "
           f"r2_fgs={r2['fgs']:.4f} r2_fgsw={r2['fgsw']:.4f}", "exact, 1:2:4:8, R2>=0.95")
    assert exact and ratio_ok and timing_ok


# -- 5: receptive field ----------------------------------------------------------------


def test_c05_receptive_extent(capsys):
    vals = attn.receptive_extent(40, 3), attn.receptive_extent(38, 3)
    report(capsys, 5, "receptive_extent", vals == (83, 79), vals, "(83, 79)")
    assert vals == (83, 79)


# -- 6: residual identity --------------------------------------------------------------


_seen_identity: list[bool] = []


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), T=st.integers(1, 4), scale=st.sampled_from([1.0, 1e-3, 1e6]))
def test_c06_residual_identity_property(seed, T, scale):
    cfg = ModelConfig(T=3, C=8, H=16, W=16)
    v = np.random.default_rng(seed).normal(scale=scale, size=(T, 3, 16, 16))
    same = np.array_equal(FgstModel(cfg, rng=None)(v).data, v)
    _seen_identity.append(same)
    assert same


def test_c06_residual_identity(capsys):
    v = np.random.default_rng(6).uniform(size=(5, 3, 32, 32))
    same = np.array_equal(FgstModel(ModelConfig(), rng=None)(v).data, v)
    ok = same and all(_seen_identity)
    report(capsys, 6, "residual_identity", ok, f"bitwise={same} property_cases={len(_seen_identity)}",
           "V' == V bitwise")
    assert ok


# -- 7, 8: toy training and ablation direction -----------------------------------------


TOY_T, TOY_HW, ITERS, LR = 5, 32, 200, 2e-4


@pytest.fixture(scope="module")
def toy_data():
    train = generate_dataset(1, 16, TOY_T, TOY_HW, TOY_HW)
    test = generate_dataset(2, 4, TOY_T, TOY_HW, TOY_HW)
    return train, test


def _train_and_eval(cfg, data):
    train, test = data
    model = FgstModel(cfg)
    flows = FlowCache(model)
    start = time.perf_counter()
    train_toy(model, train, ITERS, lr=LR, flows=flows)
    elapsed = time.perf_counter() - start
    return evaluate(model, test, flows), elapsed


@pytest.fixture(scope="module")
def full_run(toy_data):
    return _train_and_eval(ModelConfig(T=TOY_T, H=TOY_HW, W=TOY_HW, seed=0), toy_data)


def test_c07_toy_training(capsys, full_run):
    rep, elapsed = full_run
    gain = rep.gain_db
    ok = gain >= 1.0 and elapsed < 900
    report(capsys, 7, "toy_training", ok,
           f"gain={gain:+.3f}dB (blurry {np.mean(rep.psnr_in):.2f}, restored {np.mean(rep.psnr_out):.2f}) "
           f"in {elapsed:.0f}s", ">=+1.0dB, <900s")
    assert elapsed < 900
    assert gain >= 1.0


def test_c08_ablation_direction(capsys, toy_data, full_run):
    rep, _ = full_run
    base, _ = _train_and_eval(ModelConfig(T=TOY_T, H=TOY_HW, W=TOY_HW, seed=0, window=1, use_re=False),
                              toy_data)
    ok = rep.l1_out <= base.l1_out
    report(capsys, 8, "ablation_direction", ok,
           f"l1_fgsw_re={rep.l1_out:.6f} l1_m1_nore={base.l1_out:.6f}", "fgsw+re <= m1/no-re")
    assert ok


# -- 9: hand examples ------------------------------------------------------------------


def _flows(pairs, T, hw):
    fs = FlowSet(T, hw)
    for (t, f), (dx, dy) in pairs.items():
        off = np.empty((2,) + hw)
        off[0], off[1] = dx, dy
        fs.add(FlowField(t, f, 0, off))
    return fs


def test_c09_hand_examples(capsys):
    failures = []

    def expect(name, got, want):
        if got != want:
            failures.append(f"{name}: {got} != {want}")

    for value, want in [((0.0, 0.0), (0, 0)), ((2.4, -1.6), (2, -2)), ((40.0, 0.0), (40, 0)),
                        ((0.5, -0.5), (1, -1)), ((2.5, -2.5), (3, -3))]:
        expect(f"round{value}", round_offset(value), want)

    zero = FlowSet.constant(3, (8, 8), 1, (0.0, 0.0))
    expect("omega_zero", attn.build_omega((5, 5), 1, zero, 1, (3, 8, 8)).as_tuples(),
           [(0, 5, 5), (1, 5, 5), (2, 5, 5)])
    fs = _flows({(1, 2): (2, -1), (1, 0): (-2, 1)}, 3, (8, 8))
    expect("omega_shift", attn.build_omega((4, 4), 1, fs, 1, (3, 8, 8)).as_tuples(),
           [(0, 2, 5), (1, 4, 4), (2, 6, 3)])
    fs = _flows({(1, 2): (1.5, -0.4), (1, 0): (-0.5, 2.6)}, 3, (8, 8))
    expect("omega_round", attn.build_omega((4, 4), 1, fs, 1, (3, 8, 8)).as_tuples(),
           [(0, 3, 7), (1, 4, 4), (2, 6, 4)])
    fs = _flows({(0, 1): (-9, 9)}, 2, (5, 5))
    expect("omega_clamp", attn.build_omega((1, 1), 0, fs, 1, (2, 5, 5)).as_tuples(),
           [(0, 1, 1), (1, 0, 4)])
    expect("omega_r0", attn.build_omega((2, 3), 1, zero, 0, (3, 8, 8)).as_tuples(), [(1, 2, 3)])

    still = FlowSet.constant(3, (9, 9), 0, (0.0, 0.0))
    expect("psi_self", attn.build_psi((4, 4), 1, 3, still, 0, (3, 9, 9)).as_tuples(),
           [(1, i, j) for i in (3, 4, 5) for j in (3, 4, 5)])
    fs = _flows({(1, 2): (1, 0), (1, 0): (-1, 0)}, 3, (9, 9))
    psi = set(attn.build_psi((4, 4), 1, 3, fs, 1, (3, 9, 9)).as_tuples())
    want = {(f, i + f - 1, j) for f in range(3) for i in (3, 4, 5) for j in (3, 4, 5)}
    expect("psi_shift", (len(psi), psi == want), (27, True))

    expect("macs_global", attn.mac_count("global", 2, 4, 4, 8), 24576)
    expect("macs_fgs", attn.mac_count("fgs", 2, 4, 4, 8, r=1), 17920)
    expect("macs_fgsw", attn.mac_count("fgsw", 2, 4, 4, 8, r=1, M=3), 30208)

    report(capsys, 9, "hand_examples", not failures, f"{len(failures)} failures", "all exact")
    assert not failures, failures


# -- 10: determinism -------------------------------------------------------------------


def test_c10_determinism(capsys, tmp_path):
    args = ["train", "--set", "iterations=3", "--set", "train_sequences=2", "--set", "test_sequences=1"]
    for name in ("a", "b"):
        assert main(args + ["--seed", "7", "--out", str(tmp_path / name)]) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    compared = [f for f in files if f.name != "timing.txt"]  # wall-clock column only
    diff = [str(f) for f in compared if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not diff and any(f.parent.name == "checkpoint" for f in compared)
    report(capsys, 10, "determinism", ok, f"{len(compared)} files, {len(diff)} differ", "byte-identical")
    assert ok, diff
