"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the downscaling UNet and the learnable gamma
preprocessor are provided. Every op returns a fresh :class:`Tensor`; when any
input requires a gradient the output carries a :class:`Node` holding the
backward rule, and :func:`backward` walks those nodes in reverse topological
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "UnsupportedConfigError",
    "DomainError",
    "DegenerateStatisticsError",
    "RankError",
    "backward",
    "conv2d",
    "batchnorm2d",
    "relu",
    "upsample_nearest2x",
    "concat_channels",
    "slice_channels",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "signed_pow",
    "exp",
    "neg",
    "channel_affine",
    "tsum",
    "mean",
    "tabs",
    "square",
]


class ShapeError(ValueError):
    pass


class UnsupportedConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DegenerateStatisticsError(ValueError):
    pass


class RankError(ValueError):
    pass


@dataclass
class Node:
    """One recorded operation: its inputs and a rule mapping the output
    gradient to one gradient (or None) per input."""

    op: str
    inputs: tuple["Tensor", ...]
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, inputs, rule) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.node = Node(op, tuple(inputs), rule) if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Tape:
    """Topologically ordered list of the nodes leading to a scalar loss."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Leaf gradients accumulate into any existing ``.grad``; call
    ``zero_grad`` between steps.
    """
    if loss.shape != ():
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RankError("loss does not depend on any tensor requiring a gradient")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- convolution -----------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape (kh*kw*C, N*Ho*Wo) from a padded (C, N, H, W) array."""
    c, n = xp.shape[:2]
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(kh * kw * c, n * ho * wo)


def _conv2d_backward(g, cols, wmat, xshape, wshape, stride, padding, ho, wo):
    """Gradients of conv2d w.r.t. input, weight and bias."""
    cout, cin, kh, kw = wshape
    n, _, h, w = xshape
    gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    dw = (gmat @ cols.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
    db = gmat.sum(axis=1)
    dcols = (wmat.T @ gmat).reshape(kh, kw, cin, n, ho, wo)
    dxp = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3)), np.ascontiguousarray(dw), db


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an NCHW batch."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride not in (1, 2):
        raise UnsupportedConfigError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise UnsupportedConfigError(f"negative padding {padding}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels but weight expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x.data.transpose(1, 0, 2, 3)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    del xp
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = wmat @ cols
    out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def rule(g):
        return _conv2d_backward(g, cols, wmat, x.shape, weight.shape, stride, padding, ho, wo)

    return Tensor._from_op(out, "conv2d", (x, weight, bias), rule)


# -- normalization and activations -----------------------------------------


def batchnorm2d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In train mode the batch statistics are used (biased variance) and the
    running buffers are updated in place with the unbiased variance. In eval
    mode the running buffers are used and nothing is mutated.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    for t, label in ((scale, "scale"), (shift, "shift"), (running_mean, "running_mean"), (running_var, "running_var")):
        if t.shape != (c,):
            raise ShapeError(f"{label} has shape {t.shape}, expected ({c},)")
    if epsilon <= 0:
        raise UnsupportedConfigError("epsilon must be positive")
    if mode not in ("train", "eval"):
        raise UnsupportedConfigError(f"unknown batchnorm mode {mode!r}")

    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var.data + epsilon)
        a = (scale.data * inv).reshape(bshape)
        xhat = (x.data - running_mean.data.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

        def rule_eval(g):
            return g * a, (g * xhat).sum(axis=axes), g.sum(axis=axes), None, None

        return Tensor._from_op(out, "batchnorm2d_eval", (x, scale, shift, running_mean, running_var), rule_eval)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise DegenerateStatisticsError(
            f"train-mode batch norm needs at least 2 values per channel, got batch*H*W = {m}"
        )
    mu = x.data.mean(axis=axes)
    xc = x.data - mu.reshape(bshape)
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    running_mean.data *= 1.0 - momentum
    running_mean.data += momentum * mu
    running_var.data *= 1.0 - momentum
    running_var.data += momentum * var * (m / (m - 1))

    def rule(g):
        dshift = g.sum(axis=axes)
        dscale = (g * xhat).sum(axis=axes)
        dxhat = g * scale.data.reshape(bshape)
        dx = (
            inv.reshape(bshape)
            / m
            * (m * dxhat - dxhat.sum(axis=axes).reshape(bshape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
        )
        return dx, dscale, dshift, None, None

    return Tensor._from_op(out, "batchnorm2d", (x, scale, shift, running_mean, running_var), rule)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return Tensor._from_op(out, "relu", (x,), lambda g: (g * mask,))


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def rule(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, "upsample_nearest2x", (x,), rule)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: N, H, W must match")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor._from_op(out, "concat_channels", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {x.shape}")
    out = x.data[:, start:stop].copy()

    def rule(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return Tensor._from_op(out, "slice_channels", (x,), rule)


# -- elementwise -----------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    return g.sum().reshape(()) if shape == () and g.shape != () else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor._from_op(
        a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor._from_op(
        a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return Tensor._from_op(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scalar_mul(a: Tensor, s: float) -> Tensor:
    return Tensor._from_op(a.data * s, "scalar_mul", (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return scalar_mul(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, "exp", (a,), lambda g: (g * out,))


def channel_affine(x: Tensor, scale, shift) -> Tensor:
    """``x * scale[c] + shift[c]`` with constant per-channel coefficients."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"per-channel coefficients must have shape ({c},)")
    s = scale.reshape(1, c, 1, 1)
    out = x.data * s + shift.reshape(1, c, 1, 1)
    return Tensor._from_op(out, "channel_affine", (x,), lambda g: (g * s,))


def signed_pow(x: Tensor, exponent) -> Tensor:
    """``sign(x) * |x| ** e`` with both partials defined as 0 at ``x == 0``.

    ``exponent`` may be a float or a 0-d Tensor; the latter receives
    ``sum(g * f(x) * ln|x|)``.
    """
    e_t = _as_tensor(exponent)
    if e_t.shape != ():
        raise ShapeError("signed_pow exponent must be a scalar")
    e = float(e_t.data)
    if not e > 0:
        raise DomainError(f"signed_pow exponent must be positive, got {e}")
    ax = np.abs(x.data)
    nz = ax > 0
    safe = np.where(nz, ax, 1.0)
    mag = np.where(nz, safe**e, 0.0)
    out = np.copysign(mag, x.data)
    out[~nz] = 0.0

    def rule(g):
        dx = np.where(nz, g * e * safe ** (e - 1.0), 0.0)
        de = None
        if e_t.requires_grad:
            de = np.asarray(np.sum(g * out * np.log(safe)))
        return dx, de

    return Tensor._from_op(out, "signed_pow", (x, e_t), rule)


# -- reductions ------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.size
    return Tensor._from_op(
        np.asarray(a.data.sum() / n), "mean", (a,), lambda g: (np.full(shape, float(g) / n),)
    )


def tabs(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), "abs", (a,), lambda g: (g * sgn,))


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))
