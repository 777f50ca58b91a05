"""Residual blocks, pyramid resampling, feature warping and the attention block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from .flow import FlowSet
from .numerics import (ShapeError, Tensor, _record, add, concat_channels, conv2d, deconv2d,
                       layer_norm, leaky_relu, parameter, stack)

FFN_BLOCKS = 5
LEAKY_SLOPE = 0.1


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor | None

    @classmethod
    def create(cls, c_out: int, c_in: int, k: int, rng: np.random.Generator | None,
               name: str, bias: bool = True, transposed: bool = False) -> "Conv":
        # transposed kernels use the (C_in, C_out, k, k) layout of deconv2d
        shape = (c_in, c_out, k, k) if transposed else (c_out, c_in, k, k)
        if rng is None:
            w = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(c_in * k * k)
            w = rng.uniform(-bound, bound, size=shape)
        b = parameter(np.zeros(c_out), f"{name}.bias") if bias else None
        return cls(parameter(w, f"{name}.weight"), b)

    def tensors(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


@dataclass
class ResBlock:
    conv1: Conv
    conv2: Conv

    @classmethod
    def create(cls, channels: int, rng, name: str) -> "ResBlock":
        return cls(Conv.create(channels, channels, 3, rng, f"{name}.conv1"),
                   Conv.create(channels, channels, 3, rng, f"{name}.conv2"))

    def tensors(self) -> dict[str, Tensor]:
        return {f"conv1.{k}": v for k, v in self.conv1.tensors().items()} | \
               {f"conv2.{k}": v for k, v in self.conv2.tensors().items()}


def residual_block(x: Tensor, params: ResBlock, slope: float = LEAKY_SLOPE) -> Tensor:
    """``x + conv3x3(leaky_relu(conv3x3(x)))``; works on (C,H,W) or (N,C,H,W)."""
    c = x.shape[-3]
    if params.conv1.weight.shape[1] != c:
        raise ShapeError(f"residual block expects {params.conv1.weight.shape[1]} channels, got {c}")
    h = conv2d(x, params.conv1.weight, params.conv1.bias, stride=1, pad=1)
    h = conv2d(leaky_relu(h, slope), params.conv2.weight, params.conv2.bias, stride=1, pad=1)
    return add(x, h)


def residual_stack(x: Tensor, blocks: list[ResBlock]) -> Tensor:
    for b in blocks:
        x = residual_block(x, b)
    return x


def patch_merge(x: Tensor, conv: Conv) -> Tensor:
    """Strided 4x4 convolution: (C, H, W) -> (2C, H/2, W/2)."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"patch merging needs even extents, got {(h, w)}")
    return conv2d(x, conv.weight, conv.bias, stride=2, pad=1)


def patch_expand(x: Tensor, conv: Conv) -> Tensor:
    """Strided 2x2 transposed convolution: (2C, H, W) -> (C, 2H, 2W)."""
    c = x.shape[-3]
    if c % 2:
        raise ShapeError(f"patch expanding needs an even channel count, got {c}")
    return deconv2d(x, conv.weight, conv.bias, stride=2)


def warp_feature(y_prev: Tensor, offsets: np.ndarray) -> Tensor:
    """Backward bilinear warp: out(i, j) = y_prev sampled at (i + dx, j + dy).

    Sample positions are clamped to the map border. The flow is a constant;
    only ``y_prev`` receives gradient.
    """
    c, h, w = y_prev.shape
    if offsets.shape != (2, h, w):
        raise ShapeError(f"flow {offsets.shape} does not match feature map {(h, w)}")
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pi = np.clip(ii + offsets[0], 0, h - 1)
    pj = np.clip(jj + offsets[1], 0, w - 1)
    i0 = np.floor(pi).astype(np.int64)
    j0 = np.floor(pj).astype(np.int64)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fi, fj = pi - i0, pj - j0
    taps = [(i0, j0, (1 - fi) * (1 - fj)), (i0, j1, (1 - fi) * fj),
            (i1, j0, fi * (1 - fj)), (i1, j1, fi * fj)]
    y = y_prev.data
    out = taps[0][2] * y[:, taps[0][0], taps[0][1]]
    for ti, tj, wt in taps[1:]:
        out = out + wt * y[:, ti, tj]

    def vjp(g):
        gy = np.zeros((c, h * w))
        for ti, tj, wt in taps:
            idx = (ti * w + tj).reshape(-1)
            vals = (g * wt).reshape(c, -1)
            for ch in range(c):
                gy[ch] += np.bincount(idx, weights=vals[ch], minlength=h * w)
        return (gy.reshape(c, h, w),)

    return _record("warp", out, (y_prev,), vjp)


# --------------------------------------------------------------------------
# flow-guided attention block
# --------------------------------------------------------------------------


@dataclass
class FgabParams:
    fuse: Conv
    norm_gain: Tensor
    norm_bias: Tensor
    attention: attn.AttentionParams
    ffn: list[ResBlock]

    @classmethod
    def create(cls, channels: int, heads: int, rng, name: str) -> "FgabParams":
        return cls(Conv.create(channels, 2 * channels, 3, rng, f"{name}.fuse"),
                   parameter(np.ones(channels), f"{name}.norm.gain"),
                   parameter(np.zeros(channels), f"{name}.norm.bias"),
                   attn.AttentionParams.create(channels, heads, rng, f"{name}.attn"),
                   [ResBlock.create(channels, rng, f"{name}.ffn{i}") for i in range(FFN_BLOCKS)])

    def tensors(self) -> dict[str, Tensor]:
        out = {f"fuse.{k}": v for k, v in self.fuse.tensors().items()}
        out["norm.gain"] = self.norm_gain
        out["norm.bias"] = self.norm_bias
        out |= {f"attn.{k}": v for k, v in self.attention.tensors().items()}
        for i, b in enumerate(self.ffn):
            out |= {f"ffn{i}.{k}": v for k, v in b.tensors().items()}
        return out


@dataclass(frozen=True)
class BlockOptions:
    window: int = 3
    radius: int = 1
    level: int = 0
    use_re: bool = True
    padded: bool = False
    eps: float = 1e-5


class LayoutCache:
    """Key layouts per (frame, level); they depend only on the flows."""

    def __init__(self, flows: FlowSet, counter: attn.MacCounter | None = None):
        self.flows = flows
        self.counter = counter
        self._layouts: dict = {}

    def get(self, t: int, bounds, opts: BlockOptions) -> attn.KeyLayout:
        key = (t, bounds, opts.window, opts.radius, opts.level, opts.padded)
        if key not in self._layouts:
            self._layouts[key] = attn.build_layout(t, self.flows, opts.radius, opts.window,
                                                   bounds, opts.level, opts.padded)
        return self._layouts[key]


def fgab_step(y_in: Tensor, state: Tensor | None, layer_inputs: Tensor, t: int,
              params: FgabParams, opts: BlockOptions, layouts: LayoutCache,
              normed_keys: Tensor | None = None, key_tables=None) -> Tensor:
    """One time step of one attention block.

    ``y_in`` is the previous layer's output at frame ``t``, ``state`` this
    layer's output at ``t - 1`` (None at the sequence start) and
    ``layer_inputs`` the previous layer's outputs for all frames, from
    which the keys are drawn. ``normed_keys``/``key_tables`` let a caller
    reuse the per-layer key normalisation and projections across steps.
    """
    c, h, w = y_in.shape
    num_frames = layer_inputs.shape[0]
    if layer_inputs.shape[1:] != (c, h, w):
        raise ShapeError(f"key frames {layer_inputs.shape} vs query map {y_in.shape}")
    flows = layouts.flows
    if opts.use_re:
        if state is None:
            emb = Tensor(np.zeros((c, h, w)))
        else:
            emb = warp_feature(state, flows.get(t, t - 1, opts.level))
        q = conv2d(concat_channels([emb, y_in]), params.fuse.weight, params.fuse.bias, pad=1)
    else:
        q = y_in
    if normed_keys is None:
        normed_keys = layer_norm(layer_inputs, params.norm_gain, params.norm_bias, opts.eps)
    qn = layer_norm(q, params.norm_gain, params.norm_bias, opts.eps)
    layout = layouts.get(t, (num_frames, h, w), opts)
    a = attn.fgsw_msa(qn, normed_keys, t, flows, params.attention, opts.window, opts.radius,
                      opts.level, padded=opts.padded, counter=layouts.counter, layout=layout,
                      key_tables=key_tables)
    o = add(a, q)
    # The five residual blocks carry their own identity paths; their stacked
    # branches form the feed-forward term added onto ``o``.
    return residual_stack(o, params.ffn)


def fgab_layer(frames: list[Tensor], params: FgabParams, opts: BlockOptions,
               layouts: LayoutCache) -> list[Tensor]:
    """Run one attention block recurrently over the sequence, first frame to last."""
    layer_inputs = stack(frames)
    normed = layer_norm(layer_inputs, params.norm_gain, params.norm_bias, opts.eps)
    tables = None if opts.padded else attn.project_keys(normed, params.attention, layouts.counter)
    outputs: list[Tensor] = []
    state = None
    for t, y_in in enumerate(frames):
        state = fgab_step(y_in, state if opts.use_re else None, layer_inputs, t, params, opts,
                          layouts, normed_keys=normed, key_tables=tables)
        outputs.append(state)
    return outputs
