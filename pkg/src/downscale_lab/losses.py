"""Training losses and the two evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class EmptyTestSetError(ValueError):
    pass


def _check(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise T.ShapeError(f"prediction {pred.shape} and target {gt.shape} differ in shape")


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute difference over every element of the batch."""
    _check(pred, gt)
    return T.mean(T.tabs(T.sub(pred, gt)))


def l2_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean squared difference over every element of the batch."""
    _check(pred, gt)
    return T.mean(T.square(T.sub(pred, gt)))


LOSSES = {"L1": l1_loss, "L2": l2_loss}


@dataclass(frozen=True)
class MetricsReport:
    avg_abs_diff: float
    avg_mse: float
    avg_abs_diff_transformed: float
    avg_mse_transformed: float
    n_pixels: int

    def as_dict(self) -> dict:
        return asdict(self)


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def evaluate_metrics(pred_physical, gt_physical, pred_transformed=None, gt_transformed=None) -> MetricsReport:
    """Flat means over every pixel of every sample, in both value spaces.

    Inputs may be arrays, tensors, or sequences of per-sample arrays. When
    the transformed pair is omitted the physical pair is reused.
    """
    pp, gp = _flatten(pred_physical), _flatten(gt_physical)
    if pred_transformed is None:
        pt, gtr = pp, gp
    else:
        pt, gtr = _flatten(pred_transformed), _flatten(gt_transformed)
    if pp.size == 0:
        raise EmptyTestSetError("no pixels to evaluate")
    if pp.shape != gp.shape or pt.shape != gtr.shape or pt.size != pp.size:
        raise T.ShapeError("prediction and ground truth must have the same number of pixels")
    d = pp - gp
    dt = pt - gtr
    return MetricsReport(
        avg_abs_diff=float(np.abs(d).mean()),
        avg_mse=float((d * d).mean()),
        avg_abs_diff_transformed=float(np.abs(dt).mean()),
        avg_mse_transformed=float((dt * dt).mean()),
        n_pixels=int(pp.size),
    )


def _flatten(x) -> np.ndarray:
    if isinstance(x, (list, tuple)):
        if not x:
            return np.empty(0)
        return np.concatenate([_arr(a).reshape(-1) for a in x])
    return _arr(x).reshape(-1)
