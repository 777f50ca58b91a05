"""U-shaped deblurring network built from flow-guided attention blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import attention as attn
from . import io
from .blocks import (BlockOptions, Conv, FgabParams, LayoutCache, ResBlock, fgab_layer,
                     patch_expand, patch_merge, residual_stack)
from .flow import BlockMatchingFlow, FlowSet
from .numerics import ShapeError, Tensor, add, concat_channels, conv2d, stack, unstack


@dataclass(frozen=True)
class ModelConfig:
    T: int = 5
    C: int = 8
    H: int = 32
    W: int = 32
    radius: int = 1
    window: int = 3
    heads: int = 2
    levels: int = 2
    fgabs_per_stage: int = 2
    io_res_blocks: int = 5
    use_re: bool = True
    seed: int = 0
    flow_block: int = 4
    flow_search: int = 3

    def __post_init__(self):
        s = 2 ** self.levels
        if self.H % s or self.W % s:
            raise ValueError(f"H, W = {self.H}, {self.W} must be divisible by 2^levels = {s}")
        if self.C % self.heads:
            raise ValueError(f"C = {self.C} not divisible by heads = {self.heads}")
        if self.window % 2 != 1:
            raise ValueError(f"window size must be odd, got {self.window}")
        if min(self.T, self.C, self.heads, self.window) < 1 or self.radius < 0 or self.levels < 0:
            raise ValueError(f"invalid config {self}")

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**(asdict(self) | changes))

    def to_kv(self) -> dict[str, str]:
        return {k: str(int(v) if isinstance(v, bool) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown model config key {key!r}")
            kwargs[key] = raw.lower() in ("1", "true", "yes") if known[key] in ("bool", bool) else int(raw)
        return cls(**kwargs)


def stage_width(cfg: ModelConfig, level: int) -> int:
    return cfg.C * 2 ** level


class FgstModel:
    """Parameters plus forward pass. ``rng=None`` builds an all-zero model."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = "seed"):
        if isinstance(rng, str):
            rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        c = cfg.C
        self.conv_in = Conv.create(c, 3, 3, rng, "in.conv")
        self.res_in = [ResBlock.create(c, rng, f"in.res{i}") for i in range(cfg.io_res_blocks)]
        self.encoder = []
        self.merges = []
        for s in range(cfg.levels):
            w = stage_width(cfg, s)
            self.encoder.append([FgabParams.create(w, cfg.heads, rng, f"enc{s}.fgab{k}")
                                 for k in range(cfg.fgabs_per_stage)])
            self.merges.append(Conv.create(2 * w, w, 4, rng, f"enc{s}.merge"))
        wb = stage_width(cfg, cfg.levels)
        self.bottleneck = [FgabParams.create(wb, cfg.heads, rng, f"mid.fgab{k}")
                           for k in range(cfg.fgabs_per_stage)]
        self.expands = []
        self.fusions = []
        self.decoder = []
        for s in reversed(range(cfg.levels)):
            w = stage_width(cfg, s)
            self.expands.append(Conv.create(w, 2 * w, 2, rng, f"dec{s}.expand", transposed=True))
            self.fusions.append(Conv.create(w, 2 * w, 1, rng, f"dec{s}.fuse"))
            self.decoder.append([FgabParams.create(w, cfg.heads, rng, f"dec{s}.fgab{k}")
                                 for k in range(cfg.fgabs_per_stage)])
        self.res_out = [ResBlock.create(c, rng, f"out.res{i}") for i in range(cfg.io_res_blocks)]
        self.conv_out = Conv.create(3, c, 3, rng, "out.conv")

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(prefix, tensors):
            for k, v in tensors.items():
                out[f"{prefix}.{k}"] = v

        put("in.conv", self.conv_in.tensors())
        for i, b in enumerate(self.res_in):
            put(f"in.res{i}", b.tensors())
        for s, blocks in enumerate(self.encoder):
            for k, p in enumerate(blocks):
                put(f"enc{s}.fgab{k}", p.tensors())
            put(f"enc{s}.merge", self.merges[s].tensors())
        for k, p in enumerate(self.bottleneck):
            put(f"mid.fgab{k}", p.tensors())
        for idx, s in enumerate(reversed(range(self.cfg.levels))):
            put(f"dec{s}.expand", self.expands[idx].tensors())
            put(f"dec{s}.fuse", self.fusions[idx].tensors())
            for k, p in enumerate(self.decoder[idx]):
                put(f"dec{s}.fgab{k}", p.tensors())
        for i, b in enumerate(self.res_out):
            put(f"out.res{i}", b.tensors())
        put("out.conv", self.conv_out.tensors())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"checkpoint mismatch; missing={missing[:3]} unexpected={extra[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def save(self, directory) -> None:
        io.save_checkpoint(directory, self.state_dict())
        io.write_kv(f"{directory}/config.txt", self.cfg.to_kv())

    @classmethod
    def load(cls, directory) -> "FgstModel":
        cfg = ModelConfig.from_kv(io.read_kv(f"{directory}/config.txt"))
        model = cls(cfg, rng=None)
        model.load_state_dict(io.load_checkpoint(directory))
        return model

    # -- forward ----------------------------------------------------------------

    def estimate_flows(self, video: np.ndarray) -> FlowSet:
        est = BlockMatchingFlow(self.cfg.flow_block, self.cfg.flow_search)
        return FlowSet.estimate(video, est, max(self.cfg.radius, 1))

    def _opts(self, level: int, padded: bool) -> BlockOptions:
        return BlockOptions(self.cfg.window, self.cfg.radius, level, self.cfg.use_re, padded)

    def forward(self, video, flows: FlowSet | None = None, padded: bool = False,
                counter: attn.MacCounter | None = None) -> Tensor:
        """Deblur a (T, 3, H, W) sequence; returns ``video + residual``.

        ``T`` may differ from ``cfg.T`` (whole-video inference); the spatial
        extents must match the config.
        """
        v = video if isinstance(video, Tensor) else Tensor(video)
        cfg = self.cfg
        if v.data.ndim != 4 or v.shape[1] != 3 or v.shape[2:] != (cfg.H, cfg.W):
            raise ShapeError(f"video {v.shape} does not match (T, 3, {cfg.H}, {cfg.W})")
        if flows is None:
            flows = self.estimate_flows(v.data)
        if flows.num_frames != v.shape[0] or flows.hw != (cfg.H, cfg.W):
            raise ShapeError(f"flows cover {flows.num_frames} frames of {flows.hw}")
        layouts = LayoutCache(flows, counter)

        x = conv2d(v, self.conv_in.weight, self.conv_in.bias, pad=1)
        x = residual_stack(x, self.res_in)
        frames = unstack(x)

        skips = []
        for s in range(cfg.levels):
            for p in self.encoder[s]:
                frames = fgab_layer(frames, p, self._opts(s, padded), layouts)
            skips.append(frames)
            frames = unstack(patch_merge(stack(frames), self.merges[s]))
        for p in self.bottleneck:
            frames = fgab_layer(frames, p, self._opts(cfg.levels, padded), layouts)
        for idx, s in enumerate(reversed(range(cfg.levels))):
            up = patch_expand(stack(frames), self.expands[idx])
            fused = conv2d(concat_channels([up, stack(skips[s])]),
                           self.fusions[idx].weight, self.fusions[idx].bias)
            frames = unstack(fused)
            for p in self.decoder[idx]:
                frames = fgab_layer(frames, p, self._opts(s, padded), layouts)

        x = residual_stack(stack(frames), self.res_out)
        residual = conv2d(x, self.conv_out.weight, self.conv_out.bias, pad=1)
        return add(v, residual)

    __call__ = forward


def count_params(model: FgstModel) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def _conv_macs(conv: Conv, h_out: int, w_out: int) -> int:
    return int(np.prod(conv.weight.shape)) * h_out * w_out


def count_macs(model: FgstModel, cfg: ModelConfig | None = None) -> dict[str, int]:
    """Multiply-accumulates of one forward pass, split into conv and attention terms.

    Attention is charged per block with the closed-form windowed count, so
    the ``attention`` entry sums ``mac_count("fgsw", ...)`` over all blocks.
    Convolution counts cover kernels only (no bias adds).
    """
    cfg = cfg or model.cfg
    T, H, W = cfg.T, cfg.H, cfg.W
    conv = 0
    att = 0

    def block_cost(p: FgabParams, level: int) -> tuple[int, int]:
        h, w = H >> level, W >> level
        c = stage_width(model.cfg, level)
        cm = T * sum(_conv_macs(cv, h, w) for b in p.ffn for cv in (b.conv1, b.conv2))
        if model.cfg.use_re:
            cm += T * _conv_macs(p.fuse, h, w)
        return cm, attn.mac_count("fgsw", T, h, w, c, model.cfg.radius, model.cfg.window)

    conv += T * _conv_macs(model.conv_in, H, W) + T * _conv_macs(model.conv_out, H, W)
    for b in model.res_in + model.res_out:
        conv += 2 * T * _conv_macs(b.conv1, H, W)
    for s in range(model.cfg.levels):
        for p in model.encoder[s]:
            cm, am = block_cost(p, s)
            conv, att = conv + cm, att + am
        conv += T * _conv_macs(model.merges[s], H >> (s + 1), W >> (s + 1))
    for p in model.bottleneck:
        cm, am = block_cost(p, model.cfg.levels)
        conv, att = conv + cm, att + am
    for idx, s in enumerate(reversed(range(model.cfg.levels))):
        # transposed conv: every input pixel spreads one kernel
        conv += T * _conv_macs(model.expands[idx], H >> (s + 1), W >> (s + 1))
        conv += T * _conv_macs(model.fusions[idx], H >> s, W >> s)
        for p in model.decoder[idx]:
            cm, am = block_cost(p, s)
            conv, att = conv + cm, att + am
    return {"conv": conv, "attention": att, "total": conv + att}
