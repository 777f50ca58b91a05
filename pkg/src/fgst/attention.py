"""Flow-guided sparse multi-head self-attention.

Keys for a query at ``(i, j)`` of frame ``t`` are sampled at the rounded
flow-displaced positions ``(i + dx_f, j + dy_f)`` of every frame ``f`` with
``|f - t| <= r``. The windowed variant pools those samples over all queries
of an ``M x M`` window and lets each of them attend over the shared pool.

Token index convention for key tables: ``f * H * W + row * W + col``, so
sorting token indices sorts coordinates by (frame, row, col).

The forward kernels reduce over channels, head dims and key slots with
explicit Python loops of elementwise numpy ops. That fixes the summation
order per output element regardless of batch size or padding, which is what
makes the single-query and windowed paths agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowSet, clamp_frame
from .numerics import ShapeError, Tensor, _record, as_tensor, parameter


@dataclass
class MacCounter:
    """Tallies multiply-accumulates executed by the attention kernels."""

    total: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


# --------------------------------------------------------------------------
# key coordinate sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyCoordSet:
    coords: np.ndarray  # (K, 3) int64 rows of (frame, row, col), sorted, unique
    origin: tuple

    def __len__(self) -> int:
        return len(self.coords)

    def as_tuples(self) -> list[tuple[int, int, int]]:
        return [tuple(int(v) for v in c) for c in self.coords]

    def token_indices(self, hw: tuple[int, int]) -> np.ndarray:
        h, w = hw
        return self.coords[:, 0] * h * w + self.coords[:, 1] * w + self.coords[:, 2]


def _canonical(coords) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return np.unique(arr, axis=0)  # lexicographic (frame, row, col)


def _omega_raw(pos, t, flows: FlowSet, r: int, bounds, level: int) -> list[tuple[int, int, int]]:
    num_frames, h, w = bounds
    i, j = pos
    raw = []
    for f in range(t - r, t + r + 1):
        fc = clamp_frame(f, num_frames)
        off = flows.rounded(t, fc, level)
        if off.shape[1:] != (h, w):
            raise ShapeError(f"flow at level {level} is {off.shape[1:]}, features are {(h, w)}")
        row = min(max(i + int(off[0, i, j]), 0), h - 1)
        col = min(max(j + int(off[1, i, j]), 0), w - 1)
        raw.append((fc, row, col))
    return raw


def build_omega(pos: tuple[int, int], t: int, flows: FlowSet, r: int,
                bounds: tuple[int, int, int], level: int = 0) -> KeyCoordSet:
    """Flow-sampled keys of the single query at ``pos`` in frame ``t``.

    ``bounds`` is ``(T, H, W)`` at the given pyramid level.
    """
    _, h, w = bounds
    if not (0 <= pos[0] < h and 0 <= pos[1] < w):
        raise ValueError(f"query position {pos} outside {(h, w)}")
    return KeyCoordSet(_canonical(_omega_raw(pos, t, flows, r, bounds, level)), (t, *pos))


def window_centers(h: int, w: int, window: int) -> list[tuple[int, int]]:
    """Centres of the non-overlapping windows tiling an ``h x w`` map from the origin."""
    half = window // 2
    return [(a + half, b + half) for a in range(0, h, window) for b in range(0, w, window)]


def window_span(center: tuple[int, int], window: int, hw: tuple[int, int]):
    """Row and column ranges of the (possibly truncated) window around ``center``."""
    half = window // 2
    (ci, cj), (h, w) = center, hw
    return range(max(ci - half, 0), min(ci + half + 1, h)), range(max(cj - half, 0), min(cj + half + 1, w))


def build_psi(center: tuple[int, int], t: int, window: int, flows: FlowSet, r: int,
              bounds: tuple[int, int, int], level: int = 0) -> KeyCoordSet:
    """Union of the per-query key sets over the window centred at ``center``."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {window}")
    rows, cols = window_span(center, window, bounds[1:])
    raw = []
    for i in rows:
        for j in cols:
            raw.extend(_omega_raw((i, j), t, flows, r, bounds, level))
    return KeyCoordSet(_canonical(raw), (t, *center))


def receptive_extent(max_abs_flow: int, window: int) -> int:
    """Side of the square region that can feed one windowed query."""
    if window % 2 != 1:
        raise ValueError("window size must be odd")
    return 2 * max_abs_flow + window


def mac_count(kind: str, T: int, H: int, W: int, C: int, r: int = 1, M: int = 1) -> int:
    """Closed-form multiply-accumulate counts of the three attention variants."""
    n = T * H * W
    if kind == "global":
        return 4 * n * C * C + 2 * n * n * C
    if kind == "fgs":
        return 2 * n * C * (2 * (r + 1) * C + 2 * r + 1)
    if kind == "fgsw":
        return 2 * n * C * (C + (2 * r + 1) * (C + M * M))
    raise ValueError(f"unknown attention kind {kind!r}")


# --------------------------------------------------------------------------
# vectorised layout of one frame's windows
# --------------------------------------------------------------------------


@dataclass
class KeyLayout:
    """Key slots of every window of one frame.

    ``slot_idx[w]`` lists token indices into the (T*H*W) key table and
    ``slot_mask[w]`` marks which slots take part in the softmax. In set
    mode slots are the deduplicated sorted union followed by masked padding;
    in padded mode they are the raw per-query samples with repeats masked.
    """

    slot_idx: np.ndarray
    slot_mask: np.ndarray
    query_window: np.ndarray
    centers: list[tuple[int, int]]
    padded: bool

    def query_slots(self) -> tuple[np.ndarray, np.ndarray]:
        return self.slot_idx[self.query_window], self.slot_mask[self.query_window]


def sample_table(t: int, flows: FlowSet, r: int, bounds: tuple[int, int, int],
                 level: int = 0) -> np.ndarray:
    """Token index of every raw key sample, shape (H, W, 2r+1), frames ascending."""
    num_frames, h, w = bounds
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((h, w, 2 * r + 1), dtype=np.int64)
    for k, f in enumerate(range(t - r, t + r + 1)):
        fc = clamp_frame(f, num_frames)
        off = flows.rounded(t, fc, level)
        if off.shape[1:] != (h, w):
            raise ShapeError(f"flow at level {level} is {off.shape[1:]}, features are {(h, w)}")
        rows = np.clip(ii + off[0], 0, h - 1)
        cols = np.clip(jj + off[1], 0, w - 1)
        out[:, :, k] = fc * h * w + rows * w + cols
    return out


def build_layout(t: int, flows: FlowSet, r: int, window: int, bounds: tuple[int, int, int],
                 level: int = 0, padded: bool = False) -> KeyLayout:
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {window}")
    _, h, w = bounds
    table = sample_table(t, flows, r, bounds, level)
    centers = window_centers(h, w, window)
    query_window = np.empty((h, w), dtype=np.int64)
    pools = []
    for wi, c in enumerate(centers):
        rows, cols = window_span(c, window, (h, w))
        query_window[rows.start:rows.stop, cols.start:cols.stop] = wi
        raw = table[rows.start:rows.stop, cols.start:cols.stop].reshape(-1)
        if padded:
            _, first = np.unique(raw, return_index=True)
            keep = np.zeros(raw.shape, dtype=bool)
            keep[first] = True
            pools.append((raw, keep))
        else:
            uniq = np.unique(raw)
            pools.append((uniq, np.ones(uniq.shape, dtype=bool)))
    width = max(len(p[0]) for p in pools)
    slot_idx = np.zeros((len(centers), width), dtype=np.int64)
    slot_mask = np.zeros((len(centers), width), dtype=bool)
    for wi, (idx, keep) in enumerate(pools):
        slot_idx[wi, :len(idx)] = idx
        slot_mask[wi, :len(idx)] = keep
    return KeyLayout(slot_idx, slot_mask, query_window.reshape(-1), centers, padded)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Per-head matrices stacked on a leading head axis.

    query_proj (N,d,C) and key_proj (N,d,C) form the bilinear score,
    value_proj (N,d,C) maps each key into the head space and out_proj (N,C,d)
    maps every head back to C channels, where the heads are summed.
    """

    query_proj: Tensor
    key_proj: Tensor
    value_proj: Tensor
    out_proj: Tensor

    @property
    def heads(self) -> int:
        return self.query_proj.shape[0]

    @property
    def channels(self) -> int:
        return self.query_proj.shape[2]

    @property
    def head_dim(self) -> int:
        return self.query_proj.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"query_proj": self.query_proj, "key_proj": self.key_proj,
                "value_proj": self.value_proj, "out_proj": self.out_proj}

    @classmethod
    def create(cls, channels: int, heads: int, rng: np.random.Generator | None = None,
               name: str = "attn") -> "AttentionParams":
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        d = channels // heads

        def mat(shape, fan_in, tag):
            if rng is None:
                data = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            return parameter(data, f"{name}.{tag}")

        return cls(mat((heads, d, channels), channels, "query_proj"),
                   mat((heads, d, channels), channels, "key_proj"),
                   mat((heads, d, channels), channels, "value_proj"),
                   mat((heads, channels, d), channels, "out_proj"))


# --------------------------------------------------------------------------
# differentiable kernels
# --------------------------------------------------------------------------


def to_tokens(x: Tensor) -> Tensor:
    """(..., C, H, W) -> (tokens, C) with tokens ordered (..., row, col)."""
    shape = x.shape
    c = shape[-3]
    moved = np.moveaxis(x.data, -3, -1)
    out = np.ascontiguousarray(moved).reshape(-1, c)

    def vjp(g):
        return (np.moveaxis(g.reshape(moved.shape), -1, -3),)

    return _record("to_tokens", out, (x,), vjp)


def from_tokens(y: Tensor, hw: tuple[int, int]) -> Tensor:
    """(H*W, C) -> (C, H, W)."""
    h, w = hw
    out = np.ascontiguousarray(y.data.T).reshape(-1, h, w)
    return _record("from_tokens", out, (y,), lambda g: (g.reshape(g.shape[0], -1).T,))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    flat = idx.reshape(-1)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, flat, g.reshape((len(flat),) + x.shape[1:]))
        return (full,)

    return _record("gather", x.data[flat].reshape(idx.shape + x.shape[1:]), (x,), vjp)


def project_tokens(x: Tensor, mats: Tensor, counter: MacCounter | None = None) -> Tensor:
    """Apply every head matrix to every token: (n, C) x (N, d, C) -> (n, N, d)."""
    xd, m = x.data, mats.data
    n_tok, c = xd.shape
    if m.shape[2] != c:
        raise ShapeError(f"projection expects {m.shape[2]} channels, tokens carry {c}")
    acc = xd[:, 0, None, None] * m[:, :, 0]
    for ch in range(1, c):
        acc = acc + xd[:, ch, None, None] * m[:, :, ch]
    if counter is not None:
        counter.add("project", n_tok * m.shape[0] * m.shape[1] * c)

    def vjp(g):
        return (np.einsum("tnd,ndc->tc", g, m, optimize=True),
                np.einsum("tnd,tc->ndc", g, xd, optimize=True))

    return _record("project", acc, (x, mats), vjp)


def _scores(qh: np.ndarray, kg: np.ndarray) -> np.ndarray:
    # qh (Q,N,d), kg (Q,S,N,d) -> (Q,S,N)
    d = qh.shape[-1]
    acc = qh[:, None, :, 0] * kg[:, :, :, 0]
    for e in range(1, d):
        acc = acc + qh[:, None, :, e] * kg[:, :, :, e]
    return acc / math.sqrt(d)


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # softmax over the slot axis (1); masked slots get exactly zero weight
    z = np.where(mask[:, :, None], logits, -np.inf)
    ex = np.exp(z - z.max(axis=1, keepdims=True))
    den = ex[:, 0]
    for s in range(1, ex.shape[1]):
        den = den + ex[:, s]
    return ex / den[:, None]


def attention_weights(qh: np.ndarray, kh: np.ndarray, slot_idx: np.ndarray,
                      slot_mask: np.ndarray) -> np.ndarray:
    """Per-head softmax weights (Q, S, N) of each query over its slots."""
    return _masked_softmax(_scores(qh, kh[slot_idx]), slot_mask)


def sparse_attention(qh: Tensor, kh: Tensor, vh: Tensor, slot_idx: np.ndarray,
                     slot_mask: np.ndarray, counter: MacCounter | None = None) -> Tensor:
    """Each query attends over its own key slots in the projected tables.

    qh is (Q, N, d); kh and vh are (n_tok, N, d); ``slot_idx`` (Q, S) indexes
    the tables; masked slots carry zero weight. Returns (Q, N, d).
    """
    if not slot_mask.any(axis=1).all():
        raise ValueError("every query needs at least one key")
    q, s = slot_idx.shape
    n, d = qh.shape[1:]
    kg = kh.data[slot_idx]
    vg = vh.data[slot_idx]
    a = _masked_softmax(_scores(qh.data, kg), slot_mask)
    out = a[:, 0, :, None] * vg[:, 0]
    for k in range(1, s):
        out = out + a[:, k, :, None] * vg[:, k]
    if counter is not None:
        counter.add("scores", q * s * n * d)
        counter.add("aggregate", q * s * n * d)

    flat = slot_idx.reshape(-1)
    scale = 1.0 / math.sqrt(d)

    def vjp(g):
        ga = np.einsum("qnd,qsnd->qsn", g, vg, optimize=True)
        gvg = a[..., None] * g[:, None]
        glog = a * (ga - (a * ga).sum(axis=1, keepdims=True))
        gq = np.einsum("qsn,qsnd->qnd", glog, kg, optimize=True) * scale
        gkg = glog[..., None] * qh.data[:, None] * scale
        gk = np.zeros_like(kh.data)
        gv = np.zeros_like(vh.data)
        np.add.at(gk, flat, gkg.reshape(-1, n, d))
        np.add.at(gv, flat, gvg.reshape(-1, n, d))
        return gq, gk, gv

    return _record("sparse_attention", out, (qh, kh, vh), vjp)


def merge_heads(h: Tensor, out_proj: Tensor, counter: MacCounter | None = None) -> Tensor:
    """Sum over heads of ``out_proj[n] @ h[:, n]``: (Q, N, d) -> (Q, C)."""
    hd, w = h.data, out_proj.data
    n, _, d = w.shape
    acc = None
    for hn in range(n):
        for e in range(d):
            term = hd[:, hn, e, None] * w[hn, :, e]
            acc = term if acc is None else acc + term
    if counter is not None:
        counter.add("merge", hd.shape[0] * n * d * w.shape[1])

    def vjp(g):
        return (np.einsum("qc,ncd->qnd", g, w, optimize=True),
                np.einsum("qc,qnd->ncd", g, hd, optimize=True))

    return _record("merge_heads", acc, (h, out_proj), vjp)


# --------------------------------------------------------------------------
# public attention entry points
# --------------------------------------------------------------------------


def fgs_msa(query, keys: KeyCoordSet, features, params: AttentionParams) -> np.ndarray:
    """Attention output (C,) of one query vector over an explicit key set.

    ``features`` is the (T, C, H, W) key sequence the coordinates index into.
    """
    if len(keys) == 0:
        raise ValueError("empty key set")
    feats = as_tensor(features)
    qv = np.asarray(query.data if isinstance(query, Tensor) else query, dtype=np.float64)
    c = feats.shape[1]
    if qv.shape != (c,):
        raise ShapeError(f"query has shape {qv.shape}, expected ({c},)")
    co = keys.coords
    kfeat = Tensor(feats.data[co[:, 0], :, co[:, 1], co[:, 2]])
    qh = project_tokens(Tensor(qv[None]), params.query_proj)
    kh = project_tokens(kfeat, params.key_proj)
    vh = project_tokens(kfeat, params.value_proj)
    idx = np.arange(len(co))[None]
    heads = sparse_attention(qh, kh, vh, idx, np.ones(idx.shape, dtype=bool))
    return merge_heads(heads, params.out_proj).data[0]


def fgsw_msa(query_map: Tensor, key_frames: Tensor, t: int, flows: FlowSet,
             params: AttentionParams, window: int, r: int, level: int = 0,
             padded: bool = False, counter: MacCounter | None = None,
             layout: KeyLayout | None = None, key_tables=None) -> Tensor:
    """Windowed flow-guided attention for every query of frame ``t``.

    ``query_map`` is (C, H, W); ``key_frames`` is the whole (T, C, H, W) key
    sequence. Returns a (C, H, W) map. ``padded`` switches to the fixed-shape
    slot layout in which keys are projected once per raw sample.
    ``key_tables`` may carry precomputed ``(k_proj, v_proj)`` for set mode.
    """
    query_map, key_frames = as_tensor(query_map), as_tensor(key_frames)
    num_frames, c, h, w = key_frames.shape
    if query_map.shape != (c, h, w):
        raise ShapeError(f"query map {query_map.shape} vs key frames {key_frames.shape}")
    if layout is None:
        layout = build_layout(t, flows, r, window, (num_frames, h, w), level, padded)
    qh = project_tokens(to_tokens(query_map), params.query_proj, counter)
    if layout.padded:
        # one projection per raw sample; each query sees only its window's slots
        gathered = gather_rows(to_tokens(key_frames), layout.slot_idx.reshape(-1))
        kh = project_tokens(gathered, params.key_proj, counter)
        vh = project_tokens(gathered, params.value_proj, counter)
        width = layout.slot_idx.shape[1]
        local = layout.query_window[:, None] * width + np.arange(width)[None]
        slot_mask = layout.slot_mask[layout.query_window]
        heads = sparse_attention(qh, kh, vh, local, slot_mask, counter)
    else:
        if key_tables is None:
            key_tables = project_keys(key_frames, params, counter)
        kh, vh = key_tables
        slot_idx, slot_mask = layout.query_slots()
        heads = sparse_attention(qh, kh, vh, slot_idx, slot_mask, counter)
    return from_tokens(merge_heads(heads, params.out_proj, counter), (h, w))


def project_keys(key_frames: Tensor, params: AttentionParams,
                 counter: MacCounter | None = None) -> tuple[Tensor, Tensor]:
    """Key and value projections of every token of a (T, C, H, W) sequence."""
    tokens = to_tokens(as_tensor(key_frames))
    return (project_tokens(tokens, params.key_proj, counter),
            project_tokens(tokens, params.value_proj, counter))


# --------------------------------------------------------------------------
# independent reference: dense attention with a key mask
# --------------------------------------------------------------------------


def psi_mask(t: int, flows: FlowSet, r: int, window: int, bounds: tuple[int, int, int],
             level: int = 0) -> np.ndarray:
    """Boolean (H*W, T*H*W) mask: query pixel may attend to token."""
    _, h, w = bounds
    mask = np.zeros((h * w, int(np.prod(bounds))), dtype=bool)
    for center in window_centers(h, w, window):
        psi = build_psi(center, t, window, flows, r, bounds, level)
        tokens = psi.token_indices((h, w))
        rows, cols = window_span(center, window, (h, w))
        for i in rows:
            for j in cols:
                mask[i * w + j, tokens] = True
    return mask


def dense_masked_attention(query_map: np.ndarray, key_frames: np.ndarray,
                           params: AttentionParams, mask: np.ndarray) -> np.ndarray:
    """Full-grid multi-head attention with logits outside ``mask`` set to -inf."""
    c, h, w = query_map.shape
    q = query_map.reshape(c, -1).T
    k = np.moveaxis(key_frames, 1, -1).reshape(-1, c)
    U, V = params.query_proj.data, params.key_proj.data
    Wv, Wo = params.value_proj.data, params.out_proj.data
    d = U.shape[1]
    out = np.zeros_like(q)
    for n in range(U.shape[0]):
        logits = (q @ U[n].T) @ (k @ V[n].T).T / math.sqrt(d)
        logits = np.where(mask, logits, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(axis=1, keepdims=True)
        out += (a @ (k @ Wv[n].T)) @ Wo[n].T
    return out.T.reshape(c, h, w)



# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def dump_attention(query_map, key_frames, t: int, flows: FlowSet, params: AttentionParams,
                   window: int, r: int, level: int = 0) -> list[str]:
    """One text record per window: ``t cy cx | f,i,j ... | w ...``.

    Weights are those of the window's center query, averaged over heads,
    listed in the order of the key triples.
    """
    qm, kf = as_tensor(query_map).data, as_tensor(key_frames).data
    num_frames, c, h, w = kf.shape
    layout = build_layout(t, flows, r, window, (num_frames, h, w), level)
    qh = np.einsum("ndc,qc->qnd", params.query_proj.data, qm.reshape(c, -1).T)
    kh = np.einsum("ndc,qc->qnd", params.key_proj.data, np.moveaxis(kf, 1, -1).reshape(-1, c))
    lines = []
    for wi, (cy, cx) in enumerate(layout.centers):
        mask = layout.slot_mask[wi]
        idx = layout.slot_idx[wi][mask]
        q = cy * w + cx
        a = attention_weights(qh[q:q + 1], kh, idx[None], np.ones((1, len(idx)), dtype=bool))
        weights = a[0].mean(axis=1)
        f, rem = np.divmod(idx, h * w)
        rows, cols = np.divmod(rem, w)
        triples = " ".join(f"{a_},{b_},{c_}" for a_, b_, c_ in zip(f, rows, cols))
        lines.append(f"{t} {cy} {cx} | {triples} | " + " ".join(f"{v:.6f}" for v in weights))
    return lines
