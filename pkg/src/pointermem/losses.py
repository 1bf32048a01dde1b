"""Pose and confidence-aware pointmap losses with scale normalisation.

Predicted and ground-truth pointmaps are each divided by a per-sequence
scale (mean norm of valid global points). In metric mode the predicted
scale is replaced by the ground-truth one so absolute scale is learned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import Pointmap
from .tensor import Tensor

__all__ = ["LossConfig", "scale_norm", "scale_norm_tensor", "loss_pose", "loss_conf", "PointmapPrediction"]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    metric_scale: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class PointmapPrediction:
    """Differentiable pointmap with its confidence map, both (H, W, ...)."""

    points: Tensor
    confidence: Tensor


def scale_norm(pointmaps: Sequence[Pointmap]) -> float:
    """Mean Euclidean norm over all valid points of all frames."""
    total, count = 0.0, 0
    for pm in pointmaps:
        pts = pm.valid_points()
        total += float(np.sqrt((pts * pts).sum(axis=1)).sum())
        count += pts.shape[0]
    if count == 0:
        raise ValueError("scale_norm needs at least one valid point")
    return total / count


def scale_norm_tensor(points: Sequence[Tensor], masks: Sequence[np.ndarray]) -> Tensor:
    """Differentiable :func:`scale_norm` over predicted (H, W, 3) tensors."""
    total = None
    count = 0
    for pts, mask in zip(points, masks):
        mask = np.asarray(mask, dtype=bool)
        n = int(mask.sum())
        if n == 0:
            continue
        s = (T.norm(pts, axis=-1) * mask.astype(np.float64)).sum()
        total = s if total is None else total + s
        count += n
    if total is None:
        raise ValueError("scale_norm needs at least one valid point")
    return total * (1.0 / count)


def _as_scale(s) -> Tensor:
    s = s if isinstance(s, Tensor) else Tensor(float(s))
    if s.item() <= 0:
        raise ValueError(f"scale factors must be positive, got {s.item()}")
    return s


def loss_pose(pred_quats, pred_trans, gt_poses, s_pred, s_gt) -> Tensor:
    """Sum over frames of quaternion and normalised translation L2 errors.

    Each predicted quaternion is sign-flipped into the hemisphere of its
    target before differencing.
    """
    if not (len(pred_quats) == len(pred_trans) == len(gt_poses)):
        raise ValueError("pose sequences differ in length")
    s_pred, s_gt = _as_scale(s_pred), _as_scale(s_gt)
    total = Tensor(0.0)
    for q_hat, t_hat, gt in zip(pred_quats, pred_trans, gt_poses):
        q_hat = q_hat if isinstance(q_hat, Tensor) else Tensor(q_hat)
        t_hat = t_hat if isinstance(t_hat, Tensor) else Tensor(t_hat)
        sign = -1.0 if float(np.dot(q_hat.data, gt.quat)) < 0 else 1.0
        total = total + T.norm(q_hat * sign - gt.quat)
        total = total + T.norm(t_hat / s_pred - gt.trans / s_gt.item())
    return total


def loss_conf(
    preds: Sequence[PointmapPrediction],
    gts: Sequence[Pointmap],
    cfg: LossConfig,
    s_pred,
    s_gt,
) -> Tensor:
    """Confidence-weighted regression over every valid pixel.

    ``preds[i]`` is scored against ``gts[i]``; pass self and global branches
    concatenated to weight them equally.
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists differ in length")
    s_gt = _as_scale(s_gt)
    s_pred = s_gt if cfg.metric_scale else _as_scale(s_pred)
    total = Tensor(0.0)
    for pred, gt in zip(preds, gts):
        mask = gt.valid.astype(np.float64)
        target = np.where(gt.valid[..., None], gt.points, 0.0) / s_gt.item()
        err = T.norm(pred.points / s_pred - target, axis=-1)
        c = pred.confidence
        total = total + ((c * err - c.log() * cfg.alpha) * mask).sum()
    return total
