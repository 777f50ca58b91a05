"""Motion offset maps, estimator plug-ins and pyramid rescaling.

Offsets are stored as a (2, H, W) array. Channel 0 displaces the first
spatial index (row ``i``), channel 1 the second (column ``j``): pixel
``(i, j)`` of the reference frame corresponds to ``(i + dx, j + dy)`` in the
neighbour frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import io


class MissingFlowError(KeyError):
    pass


@dataclass(frozen=True)
class FlowField:
    from_frame: int
    to_frame: int
    level: int
    offsets: np.ndarray

    def __post_init__(self):
        if self.offsets.ndim != 3 or self.offsets.shape[0] != 2:
            raise ValueError(f"offsets must be (2, H, W), got {self.offsets.shape}")
        self.offsets.setflags(write=False)

    @property
    def hw(self) -> tuple[int, int]:
        return self.offsets.shape[1], self.offsets.shape[2]

    def save(self, path) -> None:
        """Raw tensor at ``path`` plus a ``path.hdr`` line ``t f level``."""
        io.save_tensor(path, self.offsets)
        Path(f"{path}.hdr").write_text(f"{self.from_frame} {self.to_frame} {self.level}\n")

    @classmethod
    def load(cls, path) -> "FlowField":
        t, f, level = (int(v) for v in Path(f"{path}.hdr").read_text().split())
        return cls(t, f, level, io.load_tensor(path))


class FlowEstimator(Protocol):
    def estimate(self, ref: np.ndarray, nbr: np.ndarray) -> np.ndarray:
        """Return level-0 offsets (2, H, W) from ``ref`` to ``nbr``."""


def _as_planes(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return frame[None] if frame.ndim == 2 else frame


def estimate_constant(shape: tuple[int, int], dx: float, dy: float,
                      from_frame: int = 0, to_frame: int = 0) -> FlowField:
    h, w = shape
    offsets = np.empty((2, h, w))
    offsets[0] = dx
    offsets[1] = dy
    return FlowField(from_frame, to_frame, 0, offsets)


def _candidate_offsets(radius: int) -> list[tuple[int, int]]:
    cands = [(dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)]
    return sorted(cands, key=lambda o: (abs(o[0]) + abs(o[1]), o[0], o[1]))


def block_matching_offsets(ref: np.ndarray, nbr: np.ndarray, block: int,
                           search_radius: int) -> np.ndarray:
    """Integer SAD block matching, returned as a per-pixel (2, H, W) map.

    Candidate displacements that would read outside ``nbr`` are skipped.
    Ties go to the smaller ``|dx| + |dy|``, then lexicographic ``(dx, dy)``.
    """
    if block < 1 or search_radius < 1:
        raise ValueError(f"block={block}, search_radius={search_radius} must be >= 1")
    ref = _as_planes(ref)
    nbr = _as_planes(nbr)
    if ref.shape != nbr.shape:
        raise ValueError(f"frames differ in size: {ref.shape} vs {nbr.shape}")
    _, h, w = ref.shape
    rad = search_radius
    padded = np.pad(nbr, ((0, 0), (rad, rad), (rad, rad)), constant_values=np.nan)
    row_starts = np.arange(0, h, block)
    col_starts = np.arange(0, w, block)

    best = np.full((len(row_starts), len(col_starts)), np.inf)
    best_dx = np.zeros(best.shape, dtype=np.int64)
    best_dy = np.zeros(best.shape, dtype=np.int64)
    for dx, dy in _candidate_offsets(rad):
        shifted = padded[:, rad + dx:rad + dx + h, rad + dy:rad + dy + w]
        diff = np.abs(ref - shifted).sum(axis=0)
        sad = np.add.reduceat(np.add.reduceat(diff, row_starts, axis=0), col_starts, axis=1)
        better = sad < best  # NaN (out-of-frame read) never wins
        best[better] = sad[better]
        best_dx[better] = dx
        best_dy[better] = dy

    out = np.empty((2, h, w))
    out[0] = np.repeat(np.repeat(best_dx, block, axis=0), block, axis=1)[:h, :w]
    out[1] = np.repeat(np.repeat(best_dy, block, axis=0), block, axis=1)[:h, :w]
    return out


def estimate_block_matching(ref: np.ndarray, nbr: np.ndarray, block: int, search_radius: int,
                            from_frame: int = 0, to_frame: int = 0) -> FlowField:
    return FlowField(from_frame, to_frame, 0, block_matching_offsets(ref, nbr, block, search_radius))


@dataclass(frozen=True)
class ConstantFlow:
    dx: float = 0.0
    dy: float = 0.0

    def estimate(self, ref, nbr):
        ref = _as_planes(ref)
        if np.array_equal(ref, _as_planes(nbr)):
            return np.zeros((2,) + ref.shape[1:])
        return estimate_constant(ref.shape[1:], self.dx, self.dy).offsets


@dataclass(frozen=True)
class BlockMatchingFlow:
    block: int = 4
    search_radius: int = 3

    def estimate(self, ref, nbr):
        return block_matching_offsets(ref, nbr, self.block, self.search_radius)


def rescale_to_level(flow: FlowField, level: int) -> FlowField:
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    if flow.level != 0:
        raise ValueError("rescale_to_level expects a level-0 field")
    if level == 0:
        return flow
    s = 2 ** level
    _, h, w = flow.offsets.shape
    if h % s or w % s:
        raise ValueError(f"extents {(h, w)} not divisible by {s}")
    pooled = flow.offsets.reshape(2, h // s, s, w // s, s).mean(axis=(2, 4))
    return FlowField(flow.from_frame, flow.to_frame, level, pooled / s)


def round_half_away(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot round non-finite offsets")
    return (np.sign(values) * np.floor(np.abs(values) + 0.5)).astype(np.int64)


def round_offset(offset: tuple[float, float]) -> tuple[int, int]:
    dx, dy = round_half_away(np.asarray(offset))
    return int(dx), int(dy)


def clamp_frame(f: int, num_frames: int) -> int:
    return min(max(f, 0), num_frames - 1)


def neighbor_frames(t: int, radius: int, num_frames: int) -> list[int]:
    """Distinct replicate-clamped frame indices within ``radius`` of ``t``, ascending."""
    return sorted({clamp_frame(f, num_frames) for f in range(t - radius, t + radius + 1)})


@dataclass
class FlowSet:
    """Level-0 flows for one sequence; rescaled per level on demand."""

    num_frames: int
    hw: tuple[int, int]
    fields: dict[tuple[int, int], FlowField] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def estimate(cls, frames: np.ndarray, estimator: FlowEstimator, radius: int) -> "FlowSet":
        """Estimate every pair ``t -> f`` with ``0 < |f - t| <= radius`` (after clamping)."""
        num = frames.shape[0]
        fs = cls(num, tuple(frames.shape[-2:]))
        for t in range(num):
            for f in neighbor_frames(t, radius, num):
                if f != t:
                    fs.add(FlowField(t, f, 0, estimator.estimate(frames[t], frames[f])))
        return fs

    @classmethod
    def constant(cls, num_frames: int, hw: tuple[int, int], radius: int,
                 per_step: tuple[float, float]) -> "FlowSet":
        """Uniform motion: flow ``t -> f`` is ``(f - t) * per_step``."""
        fs = cls(num_frames, hw)
        for t in range(num_frames):
            for f in neighbor_frames(t, radius, num_frames):
                if f != t:
                    fs.add(estimate_constant(hw, (f - t) * per_step[0], (f - t) * per_step[1], t, f))
        return fs

    def add(self, flow: FlowField) -> None:
        if flow.level != 0 or flow.hw != self.hw:
            raise ValueError(f"expected a level-0 field of size {self.hw}")
        self.fields[(flow.from_frame, flow.to_frame)] = flow
        self._cache.clear()

    def get(self, t: int, f: int, level: int = 0) -> np.ndarray:
        """Offsets (2, H/2^level, W/2^level) from frame ``t`` to frame ``f``."""
        key = (t, f, level)
        if key in self._cache:
            return self._cache[key]
        if t == f:
            s = 2 ** level
            out = np.zeros((2, self.hw[0] // s, self.hw[1] // s))
        else:
            try:
                base = self.fields[(t, f)]
            except KeyError:
                raise MissingFlowError(f"no flow for frame pair ({t}, {f})") from None
            out = rescale_to_level(base, level).offsets
        self._cache[key] = out
        return out

    def rounded(self, t: int, f: int, level: int = 0) -> np.ndarray:
        key = ("round", t, f, level)
        if key not in self._cache:
            self._cache[key] = round_half_away(self.get(t, f, level))
        return self._cache[key]

    def max_abs(self) -> float:
        if not self.fields:
            return 0.0
        return float(max(np.abs(fl.offsets).max() for fl in self.fields.values()))

