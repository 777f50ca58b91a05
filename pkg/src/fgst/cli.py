"""Command-line entry point: check, bench, train, deblur, dump-attention."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attention as attn
from . import checks, io
from .evaluation import FlowCache, evaluate, generate_dataset, psnr, ssim, train_toy
from .model import FgstModel, ModelConfig, count_macs, count_params
from .blocks import residual_stack
from .numerics import ShapeError, Tensor, conv2d, layer_norm, no_tape

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_CHECK_FAILED = 4
EXIT_RUNTIME = 5

logger = logging.getLogger("fgst")


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

MODEL_KEYS = {f.name for f in fields(ModelConfig)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    # data
    data_seed: int = 1
    test_seed: int = 2
    train_sequences: int = 16
    test_sequences: int = 4
    n_shapes: int = 4
    exposure_samples: int = 7
    max_velocity: float = 3.0
    # training
    iterations: int = 200
    lr: float = 2e-4
    halve_every: int = 0
    eval_every: int = 0
    # checks
    oracle_configs: int = 50
    oracle_tol: float = 1e-10
    grad_tol: float = 1e-5
    skip_gradcheck: bool = False
    corrupt_mask: bool = False
    # bench
    sweep: str = "1x16x32,2x16x32,4x16x32,8x16x32"
    bench_channels: int = 8
    bench_heads: int = 1
    bench_radius: int = 1
    bench_window: int = 3
    bench_repeats: int = 3
    # files
    input: str = ""
    target: str = ""
    checkpoint: str = ""
    frame: int = -1

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "RunConfig":
        run_fields = {f.name: f for f in fields(cls) if f.name != "model"}
        model_kv, kwargs = {}, {}
        for key, raw in values.items():
            if key in MODEL_KEYS:
                model_kv[key] = raw
            elif key in run_fields:
                kwargs[key] = _coerce(run_fields[key].type, raw, key)
            else:
                raise UsageError(f"unknown config key {key!r}")
        try:
            model = ModelConfig.from_kv(model_kv)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"bad model config: {exc}") from exc
        return cls(model=model, **kwargs)


def _coerce(kind, raw: str, key: str):
    try:
        if kind in ("bool", bool):
            if raw.lower() not in ("0", "1", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from exc


def parse_sweep(text: str) -> list[tuple[int, int, int]]:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split("x")
        if len(parts) != 3:
            raise UsageError(f"sweep entry {item!r} is not TxHxW")
        try:
            out.append(tuple(int(p) for p in parts))
        except ValueError as exc:
            raise UsageError(f"sweep entry {item!r} is not TxHxW") from exc
    return out


def load_run_config(args) -> RunConfig:
    values: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            values = io.read_kv(path)
        except io.FormatError as exc:
            raise UsageError(str(exc)) from exc
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return RunConfig.from_kv(values)


# --------------------------------------------------------------------------
# frame I/O
# --------------------------------------------------------------------------


def read_frames(path: str) -> np.ndarray:
    """A (T, 3, H, W) sequence from an ``.fgt`` tensor or a directory of frames."""
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"input not found: {p}")
    try:
        if p.is_file():
            video = io.load_tensor(p)
        else:
            files = sorted(p.glob("*.fgt")) or sorted(p.glob("*.ppm"))
            if not files:
                raise ValidationError(f"no .fgt or .ppm frames in {p}")
            load = io.load_tensor if files[0].suffix == ".fgt" else io.load_ppm
            video = np.stack([load(f) for f in files])
    except io.FormatError as exc:
        raise ValidationError(f"unreadable frames in {p}: {exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"frames in {p} disagree in shape: {exc}") from exc
    if video.ndim != 4 or video.shape[1] != 3:
        raise ValidationError(f"expected (T, 3, H, W) frames, got {video.shape}")
    return video


def write_frames(directory: Path, video: np.ndarray, stem: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    io.save_tensor(directory / f"{stem}.fgt", video)
    for t, frame in enumerate(video):
        io.save_ppm(directory / f"{stem}_{t:03d}.ppm", frame)


def write_lines(path: Path, lines) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{line}\n" for line in lines))


def _load_model(cfg: RunConfig) -> FgstModel:
    if cfg.checkpoint:
        ck = Path(cfg.checkpoint)
        if not (ck / "manifest.txt").is_file():
            raise ValidationError(f"missing checkpoint: {ck}")
        try:
            return FgstModel.load(ck)
        except (io.FormatError, KeyError, ValueError) as exc:
            raise ValidationError(f"bad checkpoint {ck}: {exc}") from exc
    return FgstModel(cfg.model)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_check(cfg: RunConfig, out: Path | None) -> int:
    results = [
        checks.check_oracle(cfg.oracle_configs, cfg.model.seed, cfg.oracle_tol, corrupt=cfg.corrupt_mask),
        checks.check_reduction(cfg.oracle_configs, cfg.model.seed),
    ]
    if not cfg.skip_gradcheck:
        toy = ModelConfig(T=3, C=8, H=16, W=16, levels=1, seed=cfg.model.seed)
        model = FgstModel(toy)
        rng = np.random.default_rng(cfg.model.seed)
        video = rng.uniform(size=(toy.T, 3, toy.H, toy.W))
        target = rng.uniform(size=video.shape)
        results.append(checks.check_model_gradients(model, video, target, cfg.grad_tol, cfg.model.seed))
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    if out:
        write_lines(out / "check.txt", lines)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def _time_attention(kind: str, T: int, H: int, W: int, cfg: RunConfig) -> float:
    rng = np.random.default_rng(0)
    c = cfg.bench_channels
    feats = rng.normal(size=(T, c, H, W))
    params = attn.AttentionParams.create(c, cfg.bench_heads, rng)
    flows = checks.random_flows(rng, T, (H, W), cfg.bench_radius)
    keys = Tensor(feats)
    best = np.inf
    for _ in range(max(cfg.bench_repeats, 1)):
        start = time.perf_counter()
        with no_tape():
            if kind == "global":
                mask = np.ones((H * W, T * H * W), dtype=bool)
                for t in range(T):
                    attn.dense_masked_attention(feats[t], feats, params, mask)
            else:
                window = 1 if kind == "fgs" else cfg.bench_window
                for t in range(T):
                    attn.fgsw_msa(Tensor(feats[t]), keys, t, flows, params, window, cfg.bench_radius)
        best = min(best, time.perf_counter() - start)
    return best


def _fit(x: np.ndarray, y: np.ndarray, degree: int) -> tuple[np.ndarray, float]:
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return coef, r2


def cmd_bench(cfg: RunConfig, out: Path | None) -> int:
    sweep = parse_sweep(cfg.sweep)
    c, r, m = cfg.bench_channels, cfg.bench_radius, cfg.bench_window
    header = "kind T H W THW macs seconds*"
    rows = [header]
    timing: dict[str, list[tuple[int, int, float]]] = {}
    for kind in ("global", "fgs", "fgsw"):
        for T, H, W in sweep:
            macs = attn.mac_count(kind, T, H, W, c, r, m if kind == "fgsw" else 1)
            secs = _time_attention(kind, T, H, W, cfg)
            timing.setdefault(kind, []).append((T * H * W, macs, secs))
            rows.append(f"{kind} {T} {H} {W} {T * H * W} {macs} {secs:.6f}")
    fits = []
    for kind, pts in timing.items():
        if len(pts) < 3:
            continue
        n = np.array([p[0] for p in pts], dtype=float)
        secs = np.array([p[2] for p in pts])
        macs = np.array([p[1] for p in pts], dtype=float)
        if kind == "global":
            coef, r2 = _fit(n, macs, 2)
            fits.append(f"fit global macs quadratic_coef={coef[0]:.6g} r2={r2:.6f}")
            _, r2t = _fit(n, secs, 2)
            fits.append(f"fit global seconds* quadratic r2={r2t:.4f}")
        else:
            ratios = macs / macs[0]
            fits.append(f"fit {kind} macs_per_token={macs[0] / n[0]:.6g} ratios="
                        + ":".join(f"{v:g}" for v in ratios))
            coef, r2t = _fit(n, secs, 1)
            fits.append(f"fit {kind} seconds* slope={coef[0]:.6g} r2={r2t:.4f}")
    lines = rows + fits
    for line in lines:
        print(line)
    if out:
        write_lines(out / "bench.txt", lines)
    return EXIT_OK


def _datasets(cfg: RunConfig):
    m = cfg.model
    kw = dict(n_shapes=cfg.n_shapes, exposure_samples=cfg.exposure_samples,
              max_velocity=cfg.max_velocity)
    train = generate_dataset(cfg.data_seed, cfg.train_sequences, m.T, m.H, m.W, **kw)
    test = generate_dataset(cfg.test_seed, cfg.test_sequences, m.T, m.H, m.W, **kw)
    return train, test


def cmd_train(cfg: RunConfig, out: Path | None) -> int:
    if out is None:
        raise UsageError("train needs --out")
    try:
        train, test = _datasets(cfg)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    model = FgstModel(cfg.model)
    flows = FlowCache(model)
    start = time.perf_counter()
    log = train_toy(model, train, cfg.iterations, cfg.lr, cfg.halve_every or None,
                    cfg.eval_every, flows=flows)
    elapsed = time.perf_counter() - start
    model.save(out / "checkpoint")
    write_lines(out / "train_log.txt", ["iter loss lr"] + log.lines())
    metrics = []
    if test:
        report = evaluate(model, test, flows)
        metrics = [f"psnr_blurry {np.mean(report.psnr_in):.6f}",
                   f"psnr_restored {np.mean(report.psnr_out):.6f}",
                   f"ssim_blurry {np.mean(report.ssim_in):.6f}",
                   f"ssim_restored {np.mean(report.ssim_out):.6f}",
                   f"gain_db {report.gain_db:.6f}",
                   f"l1_restored {report.l1_out:.8f}"]
        write_lines(out / "metrics.txt", metrics)
    write_lines(out / "timing.txt", [f"seconds* {elapsed:.3f}", f"params {count_params(model)}"])
    for line in metrics:
        print(line)
    return EXIT_OK


def cmd_deblur(cfg: RunConfig, out: Path | None) -> int:
    if out is None:
        raise UsageError("deblur needs --out")
    if not cfg.input:
        raise UsageError("deblur needs input = <frames>")
    video = read_frames(cfg.input)
    target = read_frames(cfg.target) if cfg.target else None
    model = _load_model(cfg)
    if target is not None and target.shape != video.shape:
        raise ValidationError(f"target {target.shape} does not match input {video.shape}")
    try:
        with no_tape():
            restored = model(video).data
    except ShapeError as exc:
        raise ValidationError(str(exc)) from exc
    write_frames(out, restored, "restored")
    if target is not None:
        lines = ["frame psnr_in psnr_out ssim_in ssim_out"]
        for t in range(len(video)):
            lines.append(f"{t} {float(psnr(video[t], target[t])):.6f} {float(psnr(restored[t], target[t])):.6f} "
                         f"{ssim(video[t], target[t]):.6f} {ssim(restored[t], target[t]):.6f}")
        write_lines(out / "metrics.txt", lines)
        for line in lines:
            print(line)
    return EXIT_OK


def cmd_dump_attention(cfg: RunConfig, out: Path | None) -> int:
    model = _load_model(cfg)
    mc = model.cfg
    if cfg.input:
        video = read_frames(cfg.input)
    else:
        video = _datasets(cfg)[1][0].blurry if cfg.test_sequences else None
        if video is None:
            raise UsageError("dump-attention needs input frames or test_sequences > 0")
    if video.shape[2:] != (mc.H, mc.W):
        raise ValidationError(f"frames {video.shape} do not match model extents {(mc.H, mc.W)}")
    if not mc.fgabs_per_stage:
        raise ValidationError("model has no attention blocks")
    block = model.encoder[0][0] if mc.levels else model.bottleneck[0]
    flows = model.estimate_flows(video)
    with no_tape():
        x = residual_stack(conv2d(Tensor(video), model.conv_in.weight, model.conv_in.bias, pad=1),
                           model.res_in)
        normed = layer_norm(x, block.norm_gain, block.norm_bias).data
    frames = range(len(video)) if cfg.frame < 0 else [cfg.frame]
    lines = []
    for t in frames:
        if not 0 <= t < len(video):
            raise ValidationError(f"frame {t} outside 0..{len(video) - 1}")
        lines += attn.dump_attention(normed[t], normed, t, flows, block.attention, mc.window, mc.radius)
    if out:
        write_lines(out / "attention.txt", lines)
    else:
        for line in lines:
            print(line)
    return EXIT_OK


COMMANDS = {
    "check": cmd_check,
    "bench": cmd_bench,
    "train": cmd_train,
    "deblur": cmd_deblur,
    "dump-attention": cmd_dump_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgst", description="Flow-guided sparse attention deblurring toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="model seed (overrides the config)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args)
        out = Path(args.out) if args.out else None
        if out is not None and out.exists() and not out.is_dir():
            raise UsageError(f"--out {out} is not a directory")
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
