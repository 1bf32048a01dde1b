"""3D hierarchical rotary position embedding.

A ``d_head`` vector is read as ``d_head/2`` complex numbers, pair ``j``
occupying channels ``(2j, 2j+1)`` as (real, imag). Complex slot ``j`` is
rotated by ``theta_t * p[axis]`` with ``t = j // 3`` and ``axis = j % 3``,
so every frequency gets one slot per spatial axis. The hierarchical variant
averages the rotated vectors over several frequency bases; since the
average of ``v * R_i`` is ``v * mean(R_i)``, one complex multiplier per
slot suffices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, rotate_pairs

DEFAULT_BASES = (10.0, 100.0, 1000.0, 10000.0)

__all__ = [
    "DEFAULT_BASES",
    "RopeConfig",
    "TokenPosition",
    "frequencies",
    "complex_multipliers",
    "rotate3d",
    "hierarchical_rotate",
    "attention_scores",
    "apply_rope",
    "verify_golden",
]


@dataclass(frozen=True)
class RopeConfig:
    d_head: int = 24
    bases: tuple = DEFAULT_BASES

    def __post_init__(self):
        if self.d_head <= 0 or self.d_head % 6:
            raise ValueError(f"d_head must be a positive multiple of 6, got {self.d_head}")
        bases = tuple(float(b) for b in self.bases)
        if not bases or any(b <= 0 for b in bases):
            raise ValueError(f"bases must be a nonempty list of positive floats, got {self.bases}")
        object.__setattr__(self, "bases", bases)

    @property
    def h(self) -> int:
        return len(self.bases)


@dataclass(frozen=True)
class TokenPosition:
    p: tuple = (0.0, 0.0, 0.0)
    is_null: bool = False

    @classmethod
    def null(cls) -> "TokenPosition":
        return cls((0.0, 0.0, 0.0), True)


def frequencies(cfg: RopeConfig, base: float) -> np.ndarray:
    """``base ** (-t / (d_head/6))`` for ``t = 0 .. d_head/6 - 1``."""
    n = cfg.d_head // 6
    t = np.arange(n, dtype=np.float64)
    return float(base) ** (-t / n)


def _angles(positions: np.ndarray, cfg: RopeConfig, base: float) -> np.ndarray:
    """Rotation angle per (token, complex slot), shape (N, d_head/2)."""
    theta = frequencies(cfg, base)
    # slot j -> theta[j // 3] * p[:, j % 3]
    return (theta[None, :, None] * positions[:, None, :]).reshape(positions.shape[0], -1)


def complex_multipliers(positions, cfg: RopeConfig, null=None, bases=None) -> np.ndarray:
    """Base-averaged complex multiplier per token and slot.

    Args:
        positions: (N, 3) array.
        null: optional (N,) bool mask; null tokens get multiplier 1.
        bases: defaults to ``cfg.bases``.

    Returns:
        complex array of shape (N, d_head/2).
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    bases = cfg.bases if bases is None else tuple(bases)
    mult = np.zeros((positions.shape[0], cfg.d_head // 2), dtype=np.complex128)
    for b in bases:
        mult += np.exp(1j * _angles(positions, cfg, b))
    mult /= len(bases)
    if null is not None:
        mult[np.asarray(null, dtype=bool)] = 1.0
    return mult


def _check_vec(vec, cfg: RopeConfig) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != cfg.d_head:
        raise ValueError(f"expected {cfg.d_head} channels, got {vec.shape[-1]}")
    return vec


def _pos_array(pos) -> tuple[np.ndarray, bool]:
    if isinstance(pos, TokenPosition):
        return np.asarray(pos.p, dtype=np.float64), pos.is_null
    if pos is None:
        return np.zeros(3), True
    return np.asarray(pos, dtype=np.float64), False


def _multiply(vec: np.ndarray, mult: np.ndarray) -> np.ndarray:
    a, b = vec[..., 0::2], vec[..., 1::2]
    out = np.empty_like(vec)
    out[..., 0::2] = a * mult.real - b * mult.imag
    out[..., 1::2] = a * mult.imag + b * mult.real
    return out


def rotate3d(vec, pos, cfg: RopeConfig, base: float) -> np.ndarray:
    """Rotate one ``d_head`` vector with a single frequency base."""
    vec = _check_vec(vec, cfg)
    p, is_null = _pos_array(pos)
    if is_null:
        return vec.copy()
    return _multiply(vec, complex_multipliers(p, cfg, bases=(base,))[0])


def hierarchical_rotate(vec, pos, cfg: RopeConfig) -> np.ndarray:
    """Mean of :func:`rotate3d` over ``cfg.bases``."""
    vec = _check_vec(vec, cfg)
    p, is_null = _pos_array(pos)
    if is_null:
        return vec.copy()
    return _multiply(vec, complex_multipliers(p, cfg)[0])


def _positions_and_null(positions, n: int) -> tuple[np.ndarray, np.ndarray]:
    if positions is None:
        return np.zeros((n, 3)), np.ones(n, dtype=bool)
    if isinstance(positions, (list, tuple)) and any(
        p is None or isinstance(p, TokenPosition) for p in positions
    ):
        arr = np.zeros((n, 3))
        null = np.zeros(n, dtype=bool)
        for i, p in enumerate(positions):
            arr[i], null[i] = _pos_array(p)
        return arr, null
    return np.asarray(positions, dtype=np.float64).reshape(n, 3), np.zeros(n, dtype=bool)


def attention_scores(q, k, pos_q, pos_k, cfg: RopeConfig, null_q=None, null_k=None) -> np.ndarray:
    """Scaled scores ``Re<q', conj(k')> / sqrt(d_head)`` after hierarchical RoPE.

    Positions may be given as an (N, 3) array with optional null masks, a
    list of :class:`TokenPosition`, or ``None`` for all-null.
    """
    q = _check_vec(q, cfg).reshape(-1, cfg.d_head)
    k = _check_vec(k, cfg).reshape(-1, cfg.d_head)
    pq, nq = _positions_and_null(pos_q, q.shape[0])
    pk, nk = _positions_and_null(pos_k, k.shape[0])
    if null_q is not None:
        nq = nq | np.asarray(null_q, dtype=bool)
    if null_k is not None:
        nk = nk | np.asarray(null_k, dtype=bool)
    qr = _multiply(q, complex_multipliers(pq, cfg, nq))
    kr = _multiply(k, complex_multipliers(pk, cfg, nk))
    # Re(sum a conj(b)) is the real dot product of the interleaved pairs
    return qr @ kr.T / math.sqrt(cfg.d_head)


def apply_rope(x: Tensor, mult: np.ndarray) -> Tensor:
    """Apply per-token multipliers to a (N, heads, d_head) tensor.

    ``mult`` is (N, d_head/2) complex and is shared by all heads.
    """
    m = mult[:, None, :]
    return rotate_pairs(x, m.real, m.imag)


def verify_golden(path) -> float:
    """Max abs deviation from a JSON file of frozen rotation vectors.

    The file holds ``{"bases": [...], "cases": [{"d_head", "vec", "pos",
    "per_base": {base: rotated}, "hierarchical": rotated}]}``.
    """
    doc = json.loads(Path(path).read_text())
    worst = 0.0
    for case in doc["cases"]:
        cfg = RopeConfig(case["d_head"], tuple(doc["bases"]))
        for base, expected in case["per_base"].items():
            got = rotate3d(case["vec"], case["pos"], cfg, float(base))
            worst = max(worst, float(np.abs(got - np.asarray(expected)).max()))
        got = hierarchical_rotate(case["vec"], case["pos"], cfg)
        worst = max(worst, float(np.abs(got - np.asarray(case["hierarchical"])).max()))
    return worst
