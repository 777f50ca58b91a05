"""Metrics, synthetic blurry video, Adam and the toy training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .flow import FlowSet
from .numerics import Tape, Tensor, backward, l1_loss, zero_grad

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


class Psnr(NamedTuple):
    db: float
    exact: bool  # MSE was zero; ``db`` holds the cap

    def __float__(self) -> float:
        return self.db


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0, cap: float = PSNR_CAP) -> Psnr:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return Psnr(cap, True)
    return Psnr(10.0 * math.log10(peak * peak / mse), False)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation keeping only fully covered positions
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim_map(x: np.ndarray, y: np.ndarray, peak: float = 1.0, size: int = 11,
             sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM of two single-channel images over the valid region."""
    if x.shape[0] < size or x.shape[1] < size:
        raise ValueError(f"image {x.shape} smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM; (C, H, W) inputs are scored per channel and averaged."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        return float(ssim_map(pred, gt, peak).mean())
    return float(np.mean([ssim_map(p, g, peak).mean() for p, g in zip(pred, gt)]))


# --------------------------------------------------------------------------
# synthetic blurry sequences
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "disk"
    center: tuple[float, float]  # (row, col) at time 0
    size: tuple[float, float]  # half extents for rect, (radius, radius) for disk
    velocity: tuple[float, float]  # pixels per frame along (row, col)
    color: tuple[float, float, float]

    def coverage(self, tau: float, ii: np.ndarray, jj: np.ndarray) -> np.ndarray:
        ci = self.center[0] + self.velocity[0] * tau
        cj = self.center[1] + self.velocity[1] * tau
        if self.kind == "rect":
            return (np.abs(ii - ci) <= self.size[0]) & (np.abs(jj - cj) <= self.size[1])
        return (ii - ci) ** 2 + (jj - cj) ** 2 <= self.size[0] ** 2


def render(shapes: Sequence[Shape], tau: float, hw: tuple[int, int],
           background: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Paint shapes in order over a flat background at time ``tau``; (3, H, W)."""
    h, w = hw
    ii, jj = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    img = np.empty((3, h, w))
    img[:] = np.asarray(background, dtype=np.float64)[:, None, None]
    for s in shapes:
        inside = s.coverage(tau, ii, jj)
        img[:, inside] = np.asarray(s.color)[:, None]
    return img


def exposure_offsets(samples: int) -> np.ndarray:
    """Sub-frame times of one exposure, symmetric around the frame time."""
    if samples < 1 or samples % 2 == 0:
        raise ValueError(f"exposure_samples must be odd, got {samples}")
    k = samples // 2
    return (np.arange(samples) - k) / samples


def blur_frame(shapes, t: float, hw, samples: int, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    acc = None
    for off in exposure_offsets(samples):
        frame = render(shapes, t + off, hw, background)
        acc = frame if acc is None else acc + frame
    return acc / samples


@dataclass
class SyntheticSequence:
    sharp: np.ndarray  # (T, 3, H, W)
    blurry: np.ndarray
    seed: int
    shapes: list[Shape]
    background: tuple[float, float, float]


def _level(rng: np.random.Generator, lo: float = 0.0, hi: float = 1.0) -> float:
    # dyadic intensities keep exposure averaging of a static pixel exact
    return float(rng.integers(round(lo * 256), round(hi * 256) + 1)) / 256.0


def generate_sequence(seed: int, T: int, H: int, W: int, n_shapes: int = 4,
                      exposure_samples: int = 7, max_velocity: float = 3.0) -> SyntheticSequence:
    """Moving rectangles and disks on a flat background, blurred by exposure averaging."""
    exposure_offsets(exposure_samples)  # validates
    rng = np.random.default_rng(seed)
    background = tuple(_level(rng, 0.1, 0.9) for _ in range(3))
    shapes = []
    for _ in range(n_shapes):
        kind = "rect" if rng.random() < 0.5 else "disk"
        extent = float(rng.uniform(2.0, max(2.5, min(H, W) / 5)))
        size = (extent, float(rng.uniform(2.0, max(2.5, min(H, W) / 5)))) if kind == "rect" \
            else (extent, extent)
        center = (float(rng.uniform(0, H)), float(rng.uniform(0, W)))
        speed = float(rng.uniform(0.4, 1.0)) * max_velocity
        angle = float(rng.uniform(0, 2 * np.pi))
        velocity = (speed * np.sin(angle), speed * np.cos(angle))
        # start so that the middle frame sits at the drawn centre
        start = (center[0] - velocity[0] * (T - 1) / 2, center[1] - velocity[1] * (T - 1) / 2)
        color = tuple(_level(rng) for _ in range(3))
        shapes.append(Shape(kind, start, size, velocity, color))
    sharp = np.stack([render(shapes, t, (H, W), background) for t in range(T)])
    blurry = np.stack([blur_frame(shapes, t, (H, W), exposure_samples, background)
                       for t in range(T)])
    return SyntheticSequence(sharp, blurry, seed, shapes, background)


def generate_dataset(seed: int, count: int, T: int, H: int, W: int, **kwargs) -> list[SyntheticSequence]:
    return [generate_sequence(seed * 100_003 + i, T, H, W, **kwargs) for i in range(count)]


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    halve_every: int | None = None
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **kwargs)

    def current_lr(self) -> float:
        """Learning rate for the next step after the halving schedule."""
        if not self.halve_every:
            return self.lr
        return self.lr * 0.5 ** (self.step // self.halve_every)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float | None = None) -> None:
    """Bias-corrected Adam update, in place. Rejects the step on non-finite grads."""
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} params but state tracks {len(state.m)}")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch for {p.name}: {g.shape} / {m.shape} / {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {p.name}")
    step_lr = state.current_lr() if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - step_lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainLog:
    iters: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    smoothed: list[float] = field(default_factory=list)
    psnr: list[tuple[int, float]] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [f"{i} {loss:.17g} {lr:.17g}" for i, loss, lr in zip(self.iters, self.losses, self.lrs)]


class FlowCache:
    """Flows are a function of the blurry input only; estimate once per sequence."""

    def __init__(self, model):
        self.model = model
        self._flows: dict[int, FlowSet] = {}

    def __call__(self, seq: SyntheticSequence) -> FlowSet:
        key = id(seq)
        if key not in self._flows:
            self._flows[key] = self.model.estimate_flows(seq.blurry)
        return self._flows[key]


def train_toy(model, dataset: Sequence[SyntheticSequence], iterations: int, lr: float = 2e-4,
              halve_every: int | None = None, eval_every: int = 0,
              state: AdamState | None = None, flows: FlowCache | None = None) -> TrainLog:
    """Fit ``model`` to sharp frames with L1 loss, one sequence per iteration in order."""
    if not dataset:
        raise ValueError("empty dataset")
    params = model.parameters()
    state = state or AdamState.for_params(params, lr=lr, halve_every=halve_every)
    flows = flows or FlowCache(model)
    log = TrainLog()
    ema = None
    for it in range(iterations):
        seq = dataset[it % len(dataset)]
        zero_grad(params)
        with Tape() as tape:
            pred = model(seq.blurry, flows(seq))
            loss = l1_loss(pred, Tensor(seq.sharp))
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at iteration {it}")
        backward(tape, loss)
        step_lr = state.current_lr()
        adam_step(params, [p.grad for p in params], state)
        ema = value if ema is None else 0.9 * ema + 0.1 * value
        log.iters.append(it)
        log.losses.append(value)
        log.lrs.append(step_lr)
        log.smoothed.append(ema)
        if eval_every and (it + 1) % eval_every == 0:
            score = float(np.mean([float(psnr(pred.data[t], seq.sharp[t])) for t in range(len(seq.sharp))]))
            log.psnr.append((it, score))
            logger.info("iter %d loss %.5f psnr %.2f", it, value, score)
    return log


@dataclass
class EvalReport:
    psnr_in: list[float]
    psnr_out: list[float]
    ssim_in: list[float]
    ssim_out: list[float]
    l1_out: float

    @property
    def gain_db(self) -> float:
        return float(np.mean(self.psnr_out) - np.mean(self.psnr_in))

    def lines(self) -> list[str]:
        rows = [f"{t} {p:.6f} {s:.6f}" for t, (p, s) in enumerate(zip(self.psnr_out, self.ssim_out))]
        rows.append(f"mean {np.mean(self.psnr_out):.6f} {np.mean(self.ssim_out):.6f}")
        return rows


def evaluate(model, sequences: Sequence[SyntheticSequence], flows: FlowCache | None = None) -> EvalReport:
    """Per-frame PSNR/SSIM of the restored and the blurry frames against sharp ones."""
    flows = flows or FlowCache(model)
    p_in, p_out, s_in, s_out, l1 = [], [], [], [], []
    for seq in sequences:
        out = model(seq.blurry, flows(seq)).data
        l1.append(float(np.abs(out - seq.sharp).mean()))
        for t in range(len(seq.sharp)):
            p_in.append(float(psnr(seq.blurry[t], seq.sharp[t])))
            p_out.append(float(psnr(out[t], seq.sharp[t])))
            s_in.append(ssim(seq.blurry[t], seq.sharp[t]))
            s_out.append(ssim(out[t], seq.sharp[t]))
    return EvalReport(p_in, p_out, s_in, s_out, float(np.mean(l1)))
