"""Dense float64 tensors, a recording tape, and the differentiable op set.

Every op takes and returns :class:`Tensor`. When a :class:`Tape` is active and
at least one input requires a gradient, the op appends a node holding its
vector-Jacobian product so :func:`backward` can replay the graph in reverse.
Outside a tape the ops are plain numpy computations.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of executed ops. Appending order is a topological order."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


_KINKS: list[list[bytes]] = []


@contextlib.contextmanager
def record_kinks() -> Iterator[list[bytes]]:
    """Collect the branch pattern of every piecewise op evaluated inside.

    Two evaluations with equal patterns lie on the same smooth piece, which
    is what a finite-difference comparison needs.
    """
    log: list[bytes] = []
    _KINKS.append(log)
    try:
        yield log
    finally:
        _KINKS.pop()


_HELD: list[list[bytes]] = []


@contextlib.contextmanager
def hold_kinks(pattern: Sequence[bytes]) -> Iterator[None]:
    """Replay a recorded branch pattern instead of testing the inputs.

    Piecewise ops then evaluate the smooth piece chosen when ``pattern`` was
    recorded, so a perturbed forward pass stays on that piece.
    """
    queue = list(reversed(pattern))
    _HELD.append(queue)
    try:
        yield
    finally:
        _HELD.pop()
        if queue:
            raise RuntimeError(f"{len(queue)} recorded branch sets were not replayed")


def _branches(mask: np.ndarray) -> np.ndarray:
    if _HELD:
        queue = _HELD[-1]
        if not queue:
            raise RuntimeError("more piecewise ops than in the held pattern")
        mask = np.unpackbits(np.frombuffer(queue.pop(), dtype=np.uint8),
                             count=mask.size).astype(bool).reshape(mask.shape)
    if _KINKS:
        _KINKS[-1].append(np.packbits(mask).tobytes())
    return mask


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(tuple(inputs), result, vjp, op))
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reached.

    Leaf gradients add onto whatever is already stored; call
    :func:`zero_grad` between optimisation steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    producers = {id(n.output): i for i, n in enumerate(tape.nodes)}
    if id(loss) not in producers:
        raise ValueError("loss tensor was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: producers[id(loss)] + 1]):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        for inp, g in zip(node.inputs, node.vjp(gout)):
            if g is None or not inp.requires_grad:
                continue
            if id(inp) in producers:
                key = id(inp)
                grads[key] = grads[key] + g if key in grads else g
            else:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar."""
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    positive = _branches(x.data > 0)
    factor = np.where(positive, 1.0, slope)
    return _record("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 0 of C,H,W; axis 1 of N,C,H,W)."""
    axis = tensors[0].data.ndim - 3
    spatial = tensors[0].shape[axis + 1:]
    for t in tensors:
        if t.shape[axis + 1:] != spatial or t.shape[:axis] != tensors[0].shape[:axis]:
            raise ShapeError(f"concat_channels: incompatible shapes {[x.shape for x in tensors]}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", out, tuple(tensors), lambda g: np.split(g, sizes, axis=axis))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    out = np.stack([t.data for t in tensors])
    return _record("stack", out, tuple(tensors), lambda g: list(g))


def unstack(x: Tensor) -> list[Tensor]:
    outs = []
    for i in range(x.shape[0]):
        def vjp(g, i=i):
            full = np.zeros_like(x.data)
            full[i] = g
            return (full,)
        outs.append(_record("index", x.data[i], (x,), vjp))
    return outs


def softmax(logits: Tensor) -> Tensor:
    z = logits.data
    if z.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {z.shape}")
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(z - z.max())
    p = e / e.sum()

    def vjp(g):
        return (p * (g - np.dot(g, p)),)

    return _record("softmax", p, (logits,), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the trailing axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = g2.T @ x2
        gx = g @ weight.data
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each token over channels. Channels are axis -3 (C,H,W layout)."""
    axis = x.data.ndim - 3
    c = x.shape[axis]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs channels {c}")
    bshape = (c, 1, 1)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data.reshape(bshape) + bias.data.reshape(bshape)
    red = tuple(i for i in range(x.data.ndim) if i != axis)

    def vjp(g):
        gg = g * gain.data.reshape(bshape)
        gx = inv * (gg - gg.mean(axis=axis, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record("layer_norm", out, (x, gain, bias), vjp)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sgn = np.sign(diff)
    if _HELD:
        # held sign: |d| is replaced by the linear piece s * d
        sgn = np.where(_branches(sgn > 0), 1.0, -1.0)
        value = np.sum(sgn * diff) / n
    else:
        _branches(sgn > 0)
        value = np.abs(diff).mean()
    return _record("l1_loss", np.array(value), (pred, target),
                   lambda g: (g * sgn / n, -g * sgn / n))


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, pad: int) -> np.ndarray:
    # x: (N, Cin, H, W), k: (Cout, Cin, kh, kw)
    n, _, h, w = x.shape
    kh, kw = k.shape[2:]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, k.shape[0], ho, wo))
    for a in range(kh):
        for b in range(kw):
            patch = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
            out += np.einsum("oc,nchw->nohw", k[:, :, a, b], patch, optimize=True)
    return out


def _conv_adjoint(y: np.ndarray, k: np.ndarray, stride: int, pad: int,
                  in_hw: tuple[int, int]) -> np.ndarray:
    # Transpose of _conv_forward w.r.t. its input.
    n, _, ho, wo = y.shape
    kh, kw = k.shape[2:]
    h, w = in_hw
    xp = np.zeros((n, k.shape[1], h + 2 * pad, w + 2 * pad))
    for a in range(kh):
        for b in range(kw):
            xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += np.einsum(
                "oc,nohw->nchw", k[:, :, a, b], y, optimize=True)
    return xp[:, :, pad:pad + h, pad:pad + w]


def _kernel_grad(x: np.ndarray, g: np.ndarray, kshape, stride: int, pad: int) -> np.ndarray:
    _, _, ho, wo = g.shape
    kh, kw = kshape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gk = np.empty(kshape)
    for a in range(kh):
        for b in range(kw):
            patch = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
            gk[:, :, a, b] = np.einsum("nohw,nchw->oc", g, patch, optimize=True)
    return gk


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; kernel is (C_out, C_in, k, k)."""
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride={stride}, pad={pad}")
    xb, single = _batched(x.data)
    k = kernel.data
    if k.ndim != 4 or xb.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: input channels {xb.shape[1]} vs kernel {k.shape}")
    h, w = xb.shape[2:]
    if h + 2 * pad < k.shape[2] or w + 2 * pad < k.shape[3]:
        raise ShapeError(f"conv2d: padded input {(h + 2 * pad, w + 2 * pad)} smaller than kernel")
    out = _conv_forward(xb, k, stride, pad)
    if bias is not None:
        out += bias.data[:, None, None]

    def vjp(g):
        gb = g[None] if single else g
        gx = _conv_adjoint(gb, k, stride, pad, (h, w))
        gk = _kernel_grad(xb, gb, k.shape, stride, pad)
        grads = [gx[0] if single else gx, gk]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", out[0] if single else out, inputs, vjp)


def deconv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution, the adjoint of ``conv2d(., kernel, stride, pad=0)``.

    ``kernel`` has the conv layout (C_a, C_b, k, k); the input carries C_a
    channels and the output C_b, with spatial extent (H - 1) * stride + k.
    """
    if stride < 1:
        raise ValueError(f"deconv2d: stride={stride}")
    xb, single = _batched(x.data)
    k = kernel.data
    if k.ndim != 4 or xb.shape[1] != k.shape[0]:
        raise ShapeError(f"deconv2d: input channels {xb.shape[1]} vs kernel {k.shape}")
    h, w = xb.shape[2:]
    out_hw = ((h - 1) * stride + k.shape[2], (w - 1) * stride + k.shape[3])
    out = _conv_adjoint(xb, k, stride, 0, out_hw)
    if bias is not None:
        out += bias.data[:, None, None]

    def vjp(g):
        gb = g[None] if single else g
        gx = _conv_forward(gb, k, stride, 0)
        gk = _kernel_grad(gb, xb, k.shape, stride, 0)
        grads = [gx[0] if single else gx, gk]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("deconv2d", out[0] if single else out, inputs, vjp)
