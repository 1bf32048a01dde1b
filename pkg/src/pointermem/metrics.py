"""Reconstruction, depth and trajectory metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraPose, Pointmap, rotation_angle_deg, umeyama_sim3

__all__ = [
    "CloudMetrics",
    "TrajMetrics",
    "median",
    "cloud_metrics",
    "grid_normals",
    "depth_metrics",
    "traj_metrics",
]


@dataclass(frozen=True)
class CloudMetrics:
    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    nc_mean: float
    nc_median: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrajMetrics:
    ate: float
    rpe_trans: float
    rpe_rot: float

    def to_json(self) -> dict:
        return asdict(self)


def median(values) -> float:
    """Median; an even-sized set averages its two central values."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("median of an empty set")
    m = v.size // 2
    return float(v[m]) if v.size % 2 else float(0.5 * (v[m - 1] + v[m]))


def _nn(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist, idx = cKDTree(dst).query(src, k=1)
    return dist, idx


def cloud_metrics(pred_points, gt_points, pred_normals=None, gt_normals=None) -> CloudMetrics:
    """Accuracy, completion and normal consistency between two clouds.

    Normals may contain NaN rows; pairs touching one are left out of NC.
    When normals are missing NC is reported as NaN.
    """
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("cloud_metrics needs two nonempty clouds")
    acc, p2g = _nn(pred, gt)
    comp, g2p = _nn(gt, pred)
    nc_mean = nc_median = float("nan")
    if pred_normals is not None and gt_normals is not None:
        pn = np.asarray(pred_normals, dtype=np.float64).reshape(-1, 3)
        gn = np.asarray(gt_normals, dtype=np.float64).reshape(-1, 3)
        cos_pg = np.abs((pn * gn[p2g]).sum(axis=1))
        cos_gp = np.abs((gn * pn[g2p]).sum(axis=1))
        cos_pg = np.clip(cos_pg[np.isfinite(cos_pg)], 0.0, 1.0)
        cos_gp = np.clip(cos_gp[np.isfinite(cos_gp)], 0.0, 1.0)
        if cos_pg.size and cos_gp.size:
            nc_mean = 0.5 * (float(cos_pg.mean()) + float(cos_gp.mean()))
            nc_median = 0.5 * (median(cos_pg) + median(cos_gp))
    return CloudMetrics(
        float(acc.mean()), median(acc), float(comp.mean()), median(comp), nc_mean, nc_median
    )


def grid_normals(pm: Pointmap) -> np.ndarray:
    """Unit normals from central differences on the point grid.

    Pixels on the border or next to an invalid pixel get NaN normals.
    """
    P = pm.points
    H, W = pm.height, pm.width
    normals = np.full((H, W, 3), np.nan)
    if H < 3 or W < 3:
        return normals
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(dx, dy)
    length = np.linalg.norm(n, axis=-1)
    v = pm.valid
    ok = v[1:-1, 1:-1] & v[1:-1, 2:] & v[1:-1, :-2] & v[2:, 1:-1] & v[:-2, 1:-1] & (length > 0)
    inner = np.full((H - 2, W - 2, 3), np.nan)
    inner[ok] = n[ok] / length[ok][:, None]
    normals[1:-1, 1:-1] = inner
    return normals


def depth_metrics(pred_depth, gt_depth, per_frame_median_scaling: bool = True) -> tuple[float, float]:
    """Abs Rel and the inlier ratio ``max(p/g, g/p) < 1.25``.

    Pixels with non-positive or non-finite depth in either map are masked.
    """
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth maps differ in shape: {pred.shape} vs {gt.shape}")
    mask = np.isfinite(gt) & (gt > 0) & np.isfinite(pred)
    if per_frame_median_scaling:
        mask &= pred > 0
    if not mask.any():
        raise ValueError("no valid depth pixels")
    p, g = pred[mask], gt[mask]
    if per_frame_median_scaling:
        p = p * (median(g) / median(p))
    abs_rel = float(np.mean(np.abs(p - g) / g))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    inlier = float(np.mean(ratio < 1.25))
    return abs_rel, inlier


def _relative(a: CameraPose, b: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    Ra, Rb = a.rotation, b.rotation
    return Ra.T @ Rb, Ra.T @ (b.trans - a.trans)


def traj_metrics(pred: Sequence[CameraPose], gt: Sequence[CameraPose]) -> TrajMetrics:
    """ATE and consecutive-pair RPE after Sim(3) alignment of camera centres.

    Raises:
        AlignmentError: the trajectory is degenerate.
    """
    if len(pred) != len(gt):
        raise ValueError("trajectories differ in length")
    if len(pred) < 3:
        raise ValueError("traj_metrics needs at least 3 poses")
    P = np.array([p.trans for p in pred])
    G = np.array([g.trans for g in gt])
    sim = umeyama_sim3(P, G)
    aligned_pos = sim.apply(P)
    ate = math.sqrt(float(np.mean(np.sum((aligned_pos - G) ** 2, axis=1))))

    aligned_R = [sim.rotation @ p.rotation for p in pred]
    t_err, r_err = [], []
    for i in range(len(pred) - 1):
        dR_p = aligned_R[i].T @ aligned_R[i + 1]
        dt_p = aligned_R[i].T @ (aligned_pos[i + 1] - aligned_pos[i])
        dR_g, dt_g = _relative(gt[i], gt[i + 1])
        # error transform dT_g^-1 * dT_p
        E_R = dR_g.T @ dR_p
        E_t = dR_g.T @ (dt_p - dt_g)
        t_err.append(float(E_t @ E_t))
        r_err.append(rotation_angle_deg(E_R) ** 2)
    return TrajMetrics(ate, math.sqrt(float(np.mean(t_err))), math.sqrt(float(np.mean(r_err))))
