"""File formats: FGT1 raw tensors, PPM frames, key-value configs, checkpoints."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FGT1"


class FormatError(ValueError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8", order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + 8 * rank:
        raise FormatError(f"truncated header for rank {rank}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) - offset != 8 * count:
        raise FormatError(f"payload holds {len(buf) - offset} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# -- PPM (P6, 8-bit) --------------------------------------------------------


def save_ppm(path, frame: np.ndarray) -> None:
    """Write a (3, H, W) frame with values in [0, 1]."""
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise FormatError(f"PPM frames must be (3, H, W), got {frame.shape}")
    _, h, w = frame.shape
    pix = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pix.tobytes())


def load_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError(f"{path}: truncated PPM header")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{path}: truncated PPM header")
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    if len(buf) - (pos + 1) < w * h * 3:
        raise FormatError(f"{path}: pixel data truncated")
    pix = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


# -- key = value config -----------------------------------------------------


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_kv(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


# -- checkpoints ------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(directory, tensors: dict[str, np.ndarray]) -> None:
    """One FGT1 file per tensor plus ``manifest.txt`` lines ``name shape file``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(tensors.items()):
        fname = f"{i:04d}.fgt"
        save_tensor(d / fname, arr)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {fname}\n")
    (d / MANIFEST).write_text("".join(lines))


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    out = {}
    for line in manifest.read_text().splitlines():
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{manifest}: bad manifest line {line!r}")
        name, shape, fname = parts
        arr = load_tensor(d / fname)
        expect = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        if arr.shape != expect:
            raise FormatError(f"{name}: manifest shape {expect} but file holds {arr.shape}")
        out[name] = arr
    return out
