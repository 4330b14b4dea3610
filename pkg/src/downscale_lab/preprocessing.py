"""Linear normalization and signed gamma correction.

The gamma transform maps ``x -> sign(x) * |x| ** (1 / gamma)``. A learnable
transform keeps ``theta = log(gamma)`` as a tape leaf so the optimizer can
move it freely while gamma stays positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("none", "fixed", "learnable")


class ConfigurationError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


def signed_power(x: np.ndarray, e: float) -> np.ndarray:
    """Plain numpy ``sign(x) * |x| ** e`` (no tape)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.abs(x) ** e, x) * (x != 0)


class GammaTransform:
    """Signed power-law transform in one of three modes.

    ``applies_to`` lists the channel indices that are transformed; the rest
    pass through untouched.
    """

    def __init__(self, mode: str = "none", gamma: float = 1.0, applies_to: Iterable[int] = (0,)):
        if mode not in MODES:
            raise ConfigurationError(f"unknown gamma mode {mode!r}; expected one of {MODES}")
        if not gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {gamma}")
        self.mode = mode
        self.applies_to = tuple(sorted(set(int(c) for c in applies_to)))
        if mode == "none":
            gamma = 1.0
        self.theta = Tensor(np.log(gamma), requires_grad=(mode == "learnable"), name="gamma.theta")

    @classmethod
    def fixed(cls, gamma: float, applies_to: Iterable[int] = (0,)) -> "GammaTransform":
        return cls("fixed", gamma, applies_to)

    @classmethod
    def learnable(cls, gamma0: float = 1.0, applies_to: Iterable[int] = (0,)) -> "GammaTransform":
        return cls("learnable", gamma0, applies_to)

    @property
    def gamma(self) -> float:
        return float(np.exp(self.theta.data))

    @property
    def learnable_param(self) -> Tensor | None:
        return self.theta if self.mode == "learnable" else None

    def parameters(self) -> list[Tensor]:
        return [self.theta] if self.mode == "learnable" else []

    def exponent(self) -> Tensor:
        """``1 / gamma`` as a tensor; differentiable in learnable mode."""
        if self.mode == "learnable":
            return T.exp(T.neg(self.theta))
        return Tensor(np.exp(-self.theta.data))

    def to_config(self) -> dict:
        cfg = {"mode": self.mode, "applies_to": ",".join(str(c) for c in self.applies_to)}
        if self.mode == "fixed":
            cfg["gamma"] = repr(self.gamma)
        return cfg

    def __repr__(self) -> str:
        return f"GammaTransform(mode={self.mode!r}, gamma={self.gamma:.6g}, applies_to={self.applies_to})"


def _apply_channels(x: Tensor, channels: Sequence[int], fn) -> Tensor:
    """Apply ``fn`` to the listed channels of an NCHW tensor, keep the rest."""
    c = x.shape[1]
    if not channels:
        return x
    if x.data.ndim != 4:
        raise T.ShapeError(f"expected NCHW tensor, got {x.shape}")
    parts = []
    for ch in range(c):
        piece = T.slice_channels(x, ch, ch + 1) if c > 1 else x
        parts.append(fn(piece) if ch in channels else piece)
    out = parts[0]
    for p in parts[1:]:
        out = T.concat_channels(out, p)
    return out


def gamma_forward(x: Tensor, t: GammaTransform) -> Tensor:
    if t.mode == "none":
        return x
    e = t.exponent()
    if x.data.ndim != 4:
        return T.signed_pow(x, e)
    return _apply_channels(x, t.applies_to, lambda p: T.signed_pow(p, e))


def gamma_inverse(y: Tensor, t: GammaTransform) -> Tensor:
    if t.mode == "none":
        return y
    g = Tensor(np.exp(t.theta.data))
    if y.data.ndim != 4:
        return T.signed_pow(y, g)
    return _apply_channels(y, t.applies_to, lambda p: T.signed_pow(p, g))


def gamma_forward_array(x: np.ndarray, gamma: float) -> np.ndarray:
    return signed_power(x, 1.0 / gamma)


def gamma_inverse_array(y: np.ndarray, gamma: float) -> np.ndarray:
    return signed_power(y, gamma)


@dataclass
class LinearNormalizer:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape:
            raise ConfigurationError("mean and std must have one entry per channel")
        if np.any(~(self.std > 0)):
            raise ConfigurationError(f"std must be positive, got {self.std}")


def normalize(x: Tensor, n: LinearNormalizer) -> Tensor:
    return T.channel_affine(x, 1.0 / n.std, -n.mean / n.std)


def denormalize(y: Tensor, n: LinearNormalizer) -> Tensor:
    return T.channel_affine(y, n.std, n.mean)


def normalize_array(x: np.ndarray, n: LinearNormalizer) -> np.ndarray:
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return (x - n.mean.reshape(shape)) / n.std.reshape(shape)


def denormalize_array(y: np.ndarray, n: LinearNormalizer) -> np.ndarray:
    shape = (1, -1) + (1,) * (y.ndim - 2)
    return y * n.std.reshape(shape) + n.mean.reshape(shape)


def fit_normalizer(training_fields: Sequence) -> LinearNormalizer:
    """Per-channel mean/std over every pixel of every training field.

    Fields are ``(C, H, W)`` or ``(N, C, H, W)`` arrays or tensors. Sums are
    taken with ``math.fsum`` so the result does not depend on field order.
    """
    import math

    arrays = [np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64) for f in training_fields]
    if not arrays:
        raise DegenerateDataError("cannot fit a normalizer on an empty training set")
    arrays = [a[None] if a.ndim == 3 else a for a in arrays]
    c = arrays[0].shape[1]
    if any(a.ndim != 4 or a.shape[1] != c for a in arrays):
        raise DegenerateDataError("training fields must share a channel count")
    means = np.empty(c)
    stds = np.empty(c)
    for ch in range(c):
        vals = np.concatenate([a[:, ch].reshape(-1) for a in arrays])
        vals = np.sort(vals)
        m = math.fsum(vals) / vals.size
        d = vals - m
        var = math.fsum(np.sort(d * d)) / vals.size
        if not var > 0:
            raise DegenerateDataError(f"channel {ch} has zero variance")
        means[ch] = m
        stds[ch] = math.sqrt(var)
    return LinearNormalizer(means, stds)
