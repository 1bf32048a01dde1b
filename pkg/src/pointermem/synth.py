"""Deterministic ray-cast scenes with exact ground truth.

World axes follow the camera convention of frame 0 at yaw 0: x right,
y down, z forward. Cameras are pinhole with square pixels and the
principal point at the image centre. Global coordinates are those of the
first camera, so frame 0 always carries the identity pose.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CameraPose, Pointmap, apply_pose, patch_average_positions

__all__ = [
    "Primitive",
    "SceneSpec",
    "Frame",
    "generate",
    "oracle_frontend",
    "camera_world_pose",
    "primitive_sdf",
    "scene_primitives",
    "static_fixture",
    "dynamic_fixture",
    "revisit_fixture",
    "overfit_fixture",
]

TRAJECTORIES = ("orbit", "linear", "revisit-loop")
LIGHT_DIR = np.array([0.4, -0.8, 0.45]) / np.linalg.norm([0.4, -0.8, 0.45])
AMBIENT = 0.25


@dataclass
class Primitive:
    """Analytic surface.

    ``box``: ``center`` and ``size`` (half extents). ``sphere``: ``center`` and
    ``size[0]`` as radius. ``plane``: passes through ``center`` with unit
    ``normal``. ``velocity`` moves the centre by that much per frame.
    """

    kind: str
    center: tuple
    size: tuple = (0.5, 0.5, 0.5)
    normal: tuple = (0.0, -1.0, 0.0)
    color: tuple = (0.8, 0.8, 0.8)
    velocity: tuple = (0.0, 0.0, 0.0)

    def center_at(self, frame: int) -> np.ndarray:
        return np.asarray(self.center, float) + frame * np.asarray(self.velocity, float)

    @property
    def moving(self) -> bool:
        return any(v != 0 for v in self.velocity)


@dataclass
class SceneSpec:
    seed: int = 0
    room: tuple | None = (6.0, 3.0, 6.0)
    n_primitives: int = 4
    kinds: tuple = ("box", "sphere")
    moving: bool = False
    moving_velocity: tuple = (0.06, 0.0, 0.0)
    trajectory: str = "orbit"
    frame_count: int = 8
    image_size: tuple = (64, 64)
    focal: float | None = None
    orbit_radius: float = 0.5
    orbit_arc_deg: float = 60.0
    linear_velocity: tuple = (0.05, 0.0, 0.05)
    revisits: int = 1
    loop_radius: float = 0.3
    loop_yaw_deg: float = 25.0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")
        self.image_size = tuple(int(v) for v in self.image_size)
        self.kinds = tuple(self.kinds)
        if self.room is not None:
            self.room = tuple(float(v) for v in self.room)
        if self.trajectory == "revisit-loop":
            if self.revisits < 1 or self.frame_count % self.revisits:
                raise ValueError("frame_count must be a multiple of revisits")
            if (self.frame_count // 2) % self.period:
                raise ValueError("revisit-loop needs frame_count/2 to be a multiple of the period")

    @property
    def period(self) -> int:
        return self.frame_count // self.revisits

    @property
    def focal_px(self) -> float:
        return float(self.focal) if self.focal else float(self.image_size[1])

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("room", "kinds", "moving_velocity", "image_size", "linear_velocity"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Frame:
    index: int
    pixels: np.ndarray
    gt_self: Pointmap
    gt_global: Pointmap
    gt_pose: CameraPose
    depth: np.ndarray
    surface_id: np.ndarray = field(default=None, repr=False)


def _yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    # columns: right, down, forward
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def camera_world_pose(spec: SceneSpec, t: int) -> CameraPose:
    """Camera-to-world pose of frame ``t``."""
    if spec.trajectory == "orbit":
        span = spec.frame_count - 1
        phi = math.radians(spec.orbit_arc_deg) * (t / span if span else 0.0)
        pos = spec.orbit_radius * np.array([math.sin(phi), 0.0, math.cos(phi)])
        yaw = phi
    elif spec.trajectory == "linear":
        pos = np.array([0.0, 0.0, 0.0]) + t * np.asarray(spec.linear_velocity, float)
        yaw = 0.0
    else:
        k = t % spec.period
        phi = 2.0 * math.pi * k / spec.period
        r = spec.loop_radius
        pos = np.array([r * math.sin(phi), 0.0, r * (1.0 - math.cos(phi))])
        yaw = math.radians(spec.loop_yaw_deg) * math.sin(phi)
        if k == 0:
            pos, yaw = np.zeros(3), 0.0
    return CameraPose.from_matrix(_yaw_rotation(yaw), pos)


def scene_primitives(spec: SceneSpec) -> list[Primitive]:
    """Primitives drawn from ``spec.seed``, placed clear of the camera path."""
    rng = np.random.default_rng(spec.seed)
    prims: list[Primitive] = []
    kinds = [k for k in spec.kinds if k in ("box", "sphere", "plane")]
    for i in range(spec.n_primitives if kinds else 0):
        kind = kinds[i % len(kinds)]
        ang = rng.uniform(-0.6, 2.4)
        rad = rng.uniform(1.6, 2.3)
        y = rng.uniform(-0.4, 0.9)
        center = (rad * math.sin(ang), y, rad * math.cos(ang))
        color = tuple(rng.uniform(0.3, 1.0, size=3))
        if kind == "box":
            prims.append(Primitive("box", center, tuple(rng.uniform(0.15, 0.4, size=3)), color=color))
        elif kind == "sphere":
            r = rng.uniform(0.2, 0.45)
            prims.append(Primitive("sphere", center, (r, r, r), color=color))
        else:
            # horizontal shelf just above the floor
            prims.append(Primitive("plane", (0.0, rng.uniform(1.0, 1.4), 0.0), normal=(0.0, -1.0, 0.0), color=color))
    if spec.moving:
        prims.append(
            Primitive("sphere", (-0.35, 0.3, 1.5), (0.3, 0.3, 0.3), color=(0.9, 0.2, 0.2),
                      velocity=tuple(spec.moving_velocity))
        )
    return prims


def _intersect_box(o, D, lo, hi, inside: bool):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / D
        t2 = (hi - o) / D
    tn = np.nanmax(np.minimum(t1, t2), axis=1)
    tf = np.nanmin(np.maximum(t1, t2), axis=1)
    if inside:
        lam = np.where((tf >= tn) & (tf > 0), tf, np.inf)
    else:
        lam = np.where((tf >= tn) & (tn > 1e-9), tn, np.inf)
    return lam


def _box_normal(x, center, half):
    rel = (x - center) / half
    axis = np.argmax(np.abs(rel), axis=1)
    n = np.zeros_like(x)
    n[np.arange(len(x)), axis] = np.sign(rel[np.arange(len(x)), axis])
    return n


def _intersect_sphere(o, D, c, r):
    oc = o - c
    a = (D * D).sum(axis=1)
    b = 2.0 * (D @ oc)
    cc = oc @ oc - r * r
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    lam = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    return np.where(disc >= 0, lam, np.inf)


def _intersect_plane(o, D, p0, n):
    denom = D @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = ((p0 - o) @ n) / denom
    return np.where(np.isfinite(lam) & (lam > 1e-9), lam, np.inf)


def primitive_sdf(prim: Primitive, x: np.ndarray, frame: int = 0) -> np.ndarray:
    """Signed distance of world points ``x`` (N, 3) to a primitive surface."""
    c = prim.center_at(frame)
    if prim.kind in ("box", "room"):
        q = np.abs(x - c) - np.asarray(prim.size, float)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    if prim.kind == "sphere":
        return np.linalg.norm(x - c, axis=1) - prim.size[0]
    if prim.kind == "plane":
        n = np.asarray(prim.normal, float)
        return (x - c) @ (n / np.linalg.norm(n))
    raise ValueError(f"unknown primitive kind {prim.kind!r}")


def _surfaces(spec: SceneSpec) -> list[Primitive]:
    prims = scene_primitives(spec)
    if spec.room is not None:
        half = tuple(0.5 * v for v in spec.room)
        prims = [Primitive("room", (0.0, 0.0, 0.0), half, color=(0.7, 0.7, 0.65))] + prims
    return prims


def _render(spec: SceneSpec, surfaces: list[Primitive], world_pose: CameraPose, t: int):
    H, W = spec.image_size
    f = spec.focal_px
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    d_cam = np.stack([(u + 0.5 - W / 2) / f, (v + 0.5 - H / 2) / f, np.ones_like(u)], axis=-1).reshape(-1, 3)
    R = world_pose.rotation
    o = world_pose.trans
    D = d_cam @ R.T
    best = np.full(D.shape[0], np.inf)
    sid = np.full(D.shape[0], -1)
    for i, prim in enumerate(surfaces):
        c = prim.center_at(t)
        if prim.kind in ("box", "room"):
            half = np.asarray(prim.size, float)
            lam = _intersect_box(o, D, c - half, c + half, inside=prim.kind == "room")
        elif prim.kind == "sphere":
            lam = _intersect_sphere(o, D, c, prim.size[0])
        else:
            lam = _intersect_plane(o, D, c, np.asarray(prim.normal, float))
        closer = lam < best
        best[closer] = lam[closer]
        sid[closer] = i
    hit = np.isfinite(best)
    lam = np.where(hit, best, 0.0)
    p_cam = d_cam * lam[:, None]
    x_world = o + D * lam[:, None]

    color = np.zeros((D.shape[0], 3))
    for i, prim in enumerate(surfaces):
        m = sid == i
        if not m.any():
            continue
        c = prim.center_at(t)
        if prim.kind in ("box", "room"):
            n = _box_normal(x_world[m], c, np.asarray(prim.size, float))
        elif prim.kind == "sphere":
            n = (x_world[m] - c) / prim.size[0]
        else:
            n = np.broadcast_to(np.asarray(prim.normal, float), (int(m.sum()), 3))
        shade = AMBIENT + (1 - AMBIENT) * np.abs(n @ LIGHT_DIR)
        color[m] = shade[:, None] * np.asarray(prim.color, float)
    return p_cam.reshape(H, W, 3), hit.reshape(H, W), color.reshape(H, W, 3), sid.reshape(H, W)


def generate(spec: SceneSpec) -> list[Frame]:
    """Render every frame of the sequence described by ``spec``."""
    surfaces = _surfaces(spec)
    if not surfaces:
        raise ValueError("scene has no surfaces")
    world0 = camera_world_pose(spec, 0)
    to_global = world0.inverse()
    frames = []
    for t in range(spec.frame_count):
        wp = camera_world_pose(spec, t)
        p_cam, hit, color, sid = _render(spec, surfaces, wp, t)
        pose = CameraPose.identity() if t == 0 else to_global.compose(wp)
        p_cam = np.where(hit[..., None], p_cam, 0.0)
        gt_self = Pointmap(p_cam, hit)
        p_glob = np.where(hit[..., None], apply_pose(p_cam, pose), 0.0)
        gt_global = Pointmap(p_glob, hit.copy())
        depth = np.where(hit, p_cam[..., 2], 0.0)
        frames.append(Frame(t, color, gt_self, gt_global, pose, depth, sid))
    return frames


def oracle_frontend(frame: Frame, noise_sigma: float, seed: int = 0, patch: int = 8):
    """Ground-truth geometry with isotropic noise in place of the network.

    Returns:
        ``(global_pointmap, positions, features, kept)``: the noisy global
        pointmap, one pointer per patch with a valid pixel (patch-mean
        position and patch-mean colour feature), and the kept patch indices.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    gt = frame.gt_global
    pts = gt.points.copy()
    if noise_sigma > 0:
        rng = np.random.default_rng([seed, frame.index])
        noise = rng.normal(0.0, noise_sigma, size=pts.shape)
        pts = np.where(gt.valid[..., None], pts + noise, pts)
    noisy = Pointmap(pts, gt.valid.copy())
    centers, valid = patch_average_positions(noisy, patch)
    H, W = gt.height, gt.width
    gh, gw = centers.shape[:2]
    pad = np.zeros((gh * patch, gw * patch, 3))
    pad[:H, :W] = frame.pixels
    colors = pad.reshape(gh, patch, gw, patch, 3).mean(axis=(1, 3))
    kept = np.flatnonzero(valid.reshape(-1))
    return noisy, centers.reshape(-1, 3)[kept], colors.reshape(-1, 3)[kept], kept


def static_fixture(**overrides) -> SceneSpec:
    base = dict(seed=7, n_primitives=5, trajectory="orbit", frame_count=8, image_size=(64, 64))
    base.update(overrides)
    return SceneSpec(**base)


def dynamic_fixture(**overrides) -> SceneSpec:
    # stationary camera so background patches map to the same pointers
    base = dict(seed=11, n_primitives=4, moving=True, trajectory="linear",
                linear_velocity=(0.0, 0.0, 0.0), frame_count=6, image_size=(64, 64))
    base.update(overrides)
    return SceneSpec(**base)


def revisit_fixture(**overrides) -> SceneSpec:
    base = dict(seed=3, n_primitives=5, trajectory="revisit-loop", frame_count=50, revisits=10,
                image_size=(64, 64))
    base.update(overrides)
    return SceneSpec(**base)


def overfit_fixture(**overrides) -> SceneSpec:
    base = dict(seed=5, n_primitives=3, trajectory="orbit", frame_count=3, orbit_arc_deg=20.0,
                image_size=(16, 16))
    base.update(overrides)
    return SceneSpec(**base)
