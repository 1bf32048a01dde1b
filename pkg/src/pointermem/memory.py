"""Explicit spatial pointer memory and its fusion rule.

Each pointer is a global-frame 3D position plus a feature vector. New
pointers from a frame are matched to their nearest existing pointer; when
the distance is below an extent-dependent threshold they are averaged into
that pointer, otherwise appended.

Fusion uses snapshot semantics: the threshold and every nearest-neighbour
query see the memory as it was before the batch, so the outcome does not
depend on the order of newcomers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DEFAULT_L",
    "PointerMemoryError",
    "Pointer",
    "SpatialPointerMemory",
    "FusionPlan",
    "FusionReport",
    "UniformGrid",
    "fusion_threshold",
    "nearest_neighbor",
    "plan_fusion",
    "apply_plan",
    "fuse",
    "ingest_first_frame",
]

DEFAULT_L = (20.0, 20.0, 20.0)


class PointerMemoryError(RuntimeError):
    """Invalid operation on the pointer memory."""


@dataclass
class Pointer:
    position: np.ndarray | None
    feature: np.ndarray
    last_update: int = 0


class SpatialPointerMemory:
    """Growing set of (position, feature) pointers.

    Positions of null pointers (the first-frame placeholder) are stored as
    NaN and excluded from extents and searches.
    """

    def __init__(self, d_mem: int, l=DEFAULT_L):
        self.d_mem = int(d_mem)
        self.l = tuple(float(v) for v in l)
        if len(self.l) != 3 or any(v <= 0 for v in self.l):
            raise ValueError(f"l must hold three positive divisors, got {l}")
        self.positions = np.zeros((0, 3))
        self.features = np.zeros((0, self.d_mem))
        self.last_update = np.zeros(0, dtype=np.int64)
        self.first_frame_ingested = False
        self.extent: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def with_placeholder(cls, features, l=DEFAULT_L, frame: int = 0) -> "SpatialPointerMemory":
        """Memory holding only position-less features (M_0)."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        mem = cls(features.shape[1], l)
        mem.positions = np.full((features.shape[0], 3), np.nan)
        mem.features = features.copy()
        mem.last_update = np.full(features.shape[0], frame, dtype=np.int64)
        return mem

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def null(self) -> np.ndarray:
        return np.isnan(self.positions).any(axis=1)

    @property
    def n_located(self) -> int:
        return int((~self.null).sum())

    @property
    def pointers(self) -> list[Pointer]:
        null = self.null
        return [
            Pointer(None if null[i] else self.positions[i].copy(), self.features[i].copy(), int(self.last_update[i]))
            for i in range(len(self))
        ]

    def _refresh_extent(self) -> None:
        located = self.positions[~self.null]
        if located.shape[0] == 0:
            self.extent = None
        else:
            self.extent = (located.min(axis=0), located.max(axis=0))

    def append(self, positions, features, frame: int) -> None:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        features = np.asarray(features, dtype=np.float64).reshape(-1, self.d_mem)
        if positions.shape[0] != features.shape[0]:
            raise ValueError("positions and features disagree in count")
        if not np.isfinite(positions).all():
            raise ValueError("appended positions must be finite")
        self.positions = np.concatenate([self.positions, positions])
        self.features = np.concatenate([self.features, features])
        self.last_update = np.concatenate(
            [self.last_update, np.full(positions.shape[0], frame, dtype=np.int64)]
        )
        self._refresh_extent()

    def copy(self) -> "SpatialPointerMemory":
        other = SpatialPointerMemory(self.d_mem, self.l)
        other.positions = self.positions.copy()
        other.features = self.features.copy()
        other.last_update = self.last_update.copy()
        other.first_frame_ingested = self.first_frame_ingested
        other._refresh_extent()
        return other


def fusion_threshold(mem: SpatialPointerMemory) -> float | None:
    """Extent-scaled merge radius; ``None`` when no pointer has a position."""
    if mem.extent is None:
        return None
    lo, hi = mem.extent
    terms = [((hi[a] - lo[a]) / mem.l[a]) ** 2 for a in range(3)]
    return math.sqrt(terms[0] + terms[1] + terms[2])


def _distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points - query
    return np.sqrt((diff * diff).sum(axis=-1))


def nearest_neighbor(mem: SpatialPointerMemory, query) -> tuple[int, float]:
    """Closest located pointer; ties go to the lowest index."""
    query = np.asarray(query, dtype=np.float64).reshape(3)
    located = np.flatnonzero(~mem.null)
    if located.size == 0:
        raise PointerMemoryError("nearest_neighbor on a memory without located pointers")
    d = _distances(mem.positions[located], query)
    j = int(np.argmin(d))
    return int(located[j]), float(d[j])


class UniformGrid:
    """Hash grid over a fixed point set with cubic cells of side ``cell``.

    A query only inspects the 27 cells around it, so it finds the true
    nearest neighbour whenever that neighbour is closer than ``cell``.
    """

    def __init__(self, points: np.ndarray, cell: float, index: np.ndarray | None = None):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.points = np.asarray(points, dtype=np.float64)
        self.index = np.arange(len(self.points)) if index is None else np.asarray(index)
        self.cell = float(cell)
        self.table: dict[tuple, list[int]] = {}
        keys = np.floor(self.points / self.cell).astype(np.int64)
        for row, key in enumerate(map(tuple, keys)):
            self.table.setdefault(key, []).append(row)

    def nearest(self, query) -> tuple[int, float] | None:
        """Nearest point among the neighbouring cells, or ``None`` if empty."""
        query = np.asarray(query, dtype=np.float64)
        cx, cy, cz = np.floor(query / self.cell).astype(np.int64)
        rows: list[int] = []
        for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3):
            rows.extend(self.table.get((cx + dx, cy + dy, cz + dz), ()))
        if not rows:
            return None
        rows.sort()
        rows = np.asarray(rows)
        d = _distances(self.points[rows], query)
        j = int(np.argmin(d))
        return int(self.index[rows[j]]), float(d[j])


@dataclass
class FusionPlan:
    """Where each newcomer goes, decided against a pre-fusion snapshot."""

    n_old: int
    n_new: int
    delta: float | None
    groups: dict[int, list[int]] = field(default_factory=dict)
    appended: list[int] = field(default_factory=list)

    @property
    def fused(self) -> int:
        return sum(len(v) for v in self.groups.values())

    def mixing_matrix(self) -> np.ndarray:
        """Linear map from ``[old; new]`` features to post-fusion features."""
        n_out = self.n_old + len(self.appended)
        S = np.zeros((n_out, self.n_old + self.n_new))
        S[np.arange(self.n_old), np.arange(self.n_old)] = 1.0
        for target, members in self.groups.items():
            S[target, target] = 0.0
            for j in members:
                S[target, self.n_old + j] += 1.0 / len(members)
        for row, j in enumerate(self.appended):
            S[self.n_old + row, self.n_old + j] = 1.0
        return S


@dataclass
class FusionReport:
    fused: int
    appended: int
    delta: float | None = None


def plan_fusion(mem: SpatialPointerMemory, positions, accelerator: str = "brute") -> FusionPlan:
    """Match newcomers to the snapshot without mutating ``mem``.

    Args:
        accelerator: ``"brute"`` for an exhaustive scan or ``"grid"`` for a
            uniform hash grid with cell size equal to the threshold.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(positions).all():
        raise ValueError("new pointers must have finite positions")
    n_new = positions.shape[0]
    delta = fusion_threshold(mem)
    plan = FusionPlan(len(mem), n_new, delta)
    # delta == 0 can never satisfy the strict inequality, so nothing fuses
    if delta is None or delta <= 0 or n_new == 0:
        plan.appended = list(range(n_new))
        return plan
    located = np.flatnonzero(~mem.null)
    snap = mem.positions[located]
    if accelerator == "grid":
        grid = UniformGrid(snap, delta, located)
        hits = [grid.nearest(p) for p in positions]
    elif accelerator == "brute":
        diff = positions[:, None, :] - snap[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
        best = np.argmin(dist, axis=1)
        hits = [(int(located[b]), float(dist[i, b])) for i, b in enumerate(best)]
    else:
        raise ValueError(f"unknown accelerator {accelerator!r}")
    for i, hit in enumerate(hits):
        if hit is not None and hit[1] < delta:
            plan.groups.setdefault(hit[0], []).append(i)
        else:
            plan.appended.append(i)
    return plan


def apply_plan(mem: SpatialPointerMemory, plan: FusionPlan, positions, features, frame: int) -> FusionReport:
    """Overwrite matched pointers with newcomer means, then append the rest."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64).reshape(-1, mem.d_mem)
    for target, members in plan.groups.items():
        p = np.zeros(3)
        f = np.zeros(mem.d_mem)
        for j in members:
            p += positions[j]
            f += features[j]
        mem.positions[target] = p / len(members)
        mem.features[target] = f / len(members)
        mem.last_update[target] = frame
    idx = plan.appended
    mem.append(positions[idx], features[idx], frame)
    return FusionReport(plan.fused, len(idx), plan.delta)


def fuse(mem: SpatialPointerMemory, positions, features, frame: int = 0, accelerator: str = "brute") -> tuple[FusionReport, FusionPlan]:
    """Integrate a batch of new pointers into ``mem`` in place."""
    plan = plan_fusion(mem, positions, accelerator)
    return apply_plan(mem, plan, positions, features, frame), plan


def ingest_first_frame(mem: SpatialPointerMemory, positions, features, frame: int = 0) -> SpatialPointerMemory:
    """Replace the position-less placeholder with the first frame's pointers."""
    if mem.first_frame_ingested:
        raise PointerMemoryError("first frame already ingested")
    if mem.n_located:
        raise PointerMemoryError("memory must hold only the placeholder")
    mem.positions = np.zeros((0, 3))
    mem.features = np.zeros((0, mem.d_mem))
    mem.last_update = np.zeros(0, dtype=np.int64)
    mem.append(positions, features, frame)
    mem.first_frame_ingested = True
    return mem
