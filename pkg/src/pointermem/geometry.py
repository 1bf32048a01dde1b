"""Pointmaps, rigid and similarity transforms, Umeyama alignment.

Quaternions are stored (w, x, y, z) and compose with the Hamilton product.
A :class:`CameraPose` maps camera-frame points into the global frame:
``p_global = R(quat) @ p_cam + trans``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AlignmentError",
    "Pointmap",
    "CameraPose",
    "Sim3",
    "quat_to_rotmat",
    "rotmat_to_quat",
    "quat_multiply",
    "quat_from_axis_angle",
    "patch_average_positions",
    "apply_pose",
    "umeyama_sim3",
    "rotation_angle_deg",
]


class AlignmentError(RuntimeError):
    """Umeyama alignment could not produce a unique similarity."""


@dataclass
class Pointmap:
    """An H x W grid of 3D points with a validity mask.

    Invalid pixels carry arbitrary coordinates and are ignored everywhere.
    """

    points: np.ndarray
    valid: np.ndarray | None = None
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"pointmap must be HxWx3, got {self.points.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.points).all(axis=2)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.points.shape[:2]:
                raise ValueError("valid mask shape does not match points")
        if not np.isfinite(self.points[self.valid]).all():
            raise ValueError("valid points must be finite")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
            if self.confidence.shape != self.points.shape[:2]:
                raise ValueError("confidence shape does not match points")
            if (self.confidence < 1).any():
                raise ValueError("confidence must be >= 1")

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R) -> np.ndarray:
    """Rotation matrix to a unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b``."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[math.cos(h)], math.sin(h) * axis])


@dataclass(frozen=True)
class CameraPose:
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        t = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"quaternion is not unit norm: {q}")
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t) -> "CameraPose":
        return cls(rotmat_to_quat(R), np.asarray(t, dtype=np.float64))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.trans
        return T

    def inverse(self) -> "CameraPose":
        R = self.rotation
        q = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        return CameraPose(q, -R.T @ self.trans)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self * other``: apply ``other`` first."""
        q = quat_multiply(self.quat, other.quat)
        q /= np.linalg.norm(q)
        return CameraPose(q, self.rotation @ other.trans + self.trans)

    def to_json(self) -> dict:
        return {"quat": self.quat.tolist(), "trans": self.trans.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["quat"]), np.array(d["trans"]))


@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation


def apply_pose(points, pose: CameraPose) -> np.ndarray:
    """Map N x 3 (or ... x 3) camera-frame points into the global frame."""
    points = np.asarray(points, dtype=np.float64)
    return points @ pose.rotation.T + pose.trans


def patch_average_positions(pm: Pointmap, patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean of the valid points inside each ``patch x patch`` cell.

    Edge cells of a grid whose size is not a multiple of ``patch`` cover the
    remaining pixels.

    Returns:
        ``(centers, valid)`` with shapes ``(ceil(H/p), ceil(W/p), 3)`` and
        ``(ceil(H/p), ceil(W/p))``. Cells without any valid pixel are
        flagged invalid and hold zeros.
    """
    if patch < 1:
        raise ValueError("patch must be >= 1")
    H, W = pm.height, pm.width
    gh, gw = -(-H // patch), -(-W // patch)
    ph, pw = gh * patch, gw * patch
    pts = np.zeros((ph, pw, 3))
    mask = np.zeros((ph, pw), dtype=bool)
    pts[:H, :W] = pm.points
    mask[:H, :W] = pm.valid
    cells = pts.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4).reshape(gh, gw, -1, 3)
    cmask = mask.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3).reshape(gh, gw, -1)
    counts = cmask.sum(axis=2)
    valid = counts > 0
    # average offsets from one valid pixel per cell: exact for constant patches
    first = np.argmax(cmask, axis=2)
    ref = np.take_along_axis(cells, first[..., None, None], axis=2)[:, :, 0]
    offsets = np.where(cmask[..., None], cells - ref[:, :, None], 0.0).sum(axis=2)
    centers = np.zeros((gh, gw, 3))
    centers[valid] = ref[valid] + offsets[valid] / counts[valid][:, None]
    return centers, valid


def umeyama_sim3(src, dst) -> Sim3:
    """Least-squares similarity ``dst ~ s R src + t`` (Umeyama, 1991).

    Raises:
        AlignmentError: fewer than 3 points, coincident ``src``, or a
            rank-zero cross-covariance.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching N x 3 arrays, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise AlignmentError(f"need at least 3 points, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = (xs * xs).sum() / n
    scale_ref = max(1.0, float(np.abs(src).max()))
    if var_s <= (1e-12 * scale_ref) ** 2:
        raise AlignmentError("source points are coincident")
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    if D[0] <= 1e-12 * max(1.0, float(np.abs(dst).max())) * math.sqrt(var_s):
        raise AlignmentError("cross-covariance has rank zero")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return Sim3(s, R, t)


def rotation_angle_deg(R) -> float:
    R = np.asarray(R, dtype=np.float64)
    # atan2 keeps small angles accurate where acos of the trace does not
    s = 0.5 * math.sqrt(
        (R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2
    )
    c = 0.5 * (np.trace(R) - 1.0)
    return math.degrees(math.atan2(s, c))
