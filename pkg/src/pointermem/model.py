"""Toy-scale reconstruction network.

Components, in per-frame order:

* patch encoder: flatten patches, project, two self-attention blocks;
* first-frame memory embedding (one linear layer, no positions);
* interaction decoder over image tokens plus a learnable pose token, with
  3D hierarchical RoPE inside the cross-attention to memory;
* pose / self / global heads (linear unpatchify heads, confidence
  ``1 + exp(raw)``; the global head runs pose-modulated blocks first);
* memory encoder producing new pointer features and patch-mean positions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .geometry import CameraPose, Pointmap, patch_average_positions
from .nn import MLP, DecoderBlock, LayerNorm, Linear, ModulatedBlock, Module, SelfAttentionBlock
from .rope3d import RopeConfig, complex_multipliers
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "FrameTokens",
    "PoseOutput",
    "HeadOutput",
    "StreamingModel",
    "patchify",
    "unpatchify",
    "assign_token_positions",
]


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (64, 64)
    patch: int = 8
    d_model: int = 96
    d_head: int = 24
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 4
    n_geo_layers: int = 2
    n_global_layers: int = 2
    mlp_ratio: int = 4
    channels: int = 3
    rope_bases: tuple = (10.0, 100.0, 1000.0, 10000.0)
    alpha: float = 0.2
    seed: int = 0

    def __post_init__(self):
        H, W = self.image_size
        object.__setattr__(self, "image_size", (int(H), int(W)))
        object.__setattr__(self, "rope_bases", tuple(float(b) for b in self.rope_bases))
        if H % self.patch or W % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.d_head % 6:
            raise ValueError("d_head must be divisible by 6")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Small preset used by gradient checks and the overfit run."""
        base = dict(
            image_size=(16, 16), patch=4, d_model=24, d_head=12, n_heads=2,
            n_enc_layers=1, n_dec_layers=2, n_geo_layers=1, n_global_layers=2,
            mlp_ratio=2,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.d_head, self.rope_bases)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("image_size", "rope_bases"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class FrameTokens:
    image_tokens: Tensor
    pose_token: Tensor
    positions: np.ndarray
    null: np.ndarray

    def __post_init__(self):
        if self.positions.shape[0] != self.image_tokens.shape[0]:
            raise ValueError("one position per image token required")


@dataclass
class PoseOutput:
    quat: Tensor
    trans: Tensor
    fallback: bool = False

    def to_pose(self) -> CameraPose:
        return CameraPose(self.quat.data.copy(), self.trans.data.copy())


@dataclass
class HeadOutput:
    points: Tensor
    confidence: Tensor

    def to_pointmap(self) -> Pointmap:
        return Pointmap(self.points.data.copy(), np.ones(self.points.shape[:2], bool), self.confidence.data.copy())


def patchify(grid: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (H/p * W/p, p*p*C), tokens in row-major patch order."""
    H, W, C = grid.shape
    gh, gw = H // patch, W // patch
    return grid.reshape(gh, patch, gw, patch, C).transpose(0, 2, 1, 3, 4).reshape(gh * gw, -1)


def unpatchify(tokens: Tensor, grid: tuple[int, int], patch: int) -> Tensor:
    """Inverse of :func:`patchify` on tensors."""
    gh, gw = grid
    C = tokens.shape[1] // (patch * patch)
    x = tokens.reshape(gh, gw, patch, patch, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * patch, gw * patch, C)


def _patchify_tensor(x: Tensor, patch: int) -> Tensor:
    H, W, C = x.shape
    gh, gw = H // patch, W // patch
    return x.reshape(gh, patch, gw, patch, C).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * C)


def assign_token_positions(prev_global: Pointmap | None, patch: int, n_tokens: int | None = None):
    """Token positions from the previous frame's global pointmap.

    Returns ``(positions, null)``; every token is null when there is no
    previous output, and tokens over all-invalid patches are null.
    """
    if prev_global is None:
        if n_tokens is None:
            raise ValueError("n_tokens is required without a previous pointmap")
        return np.zeros((n_tokens, 3)), np.ones(n_tokens, dtype=bool)
    centers, valid = patch_average_positions(prev_global, patch)
    return centers.reshape(-1, 3), ~valid.reshape(-1)


class StreamingModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, p = cfg.d_model, cfg.patch
        blk = dict(mlp_ratio=cfg.mlp_ratio)
        self.patch_embed = Linear(p * p * cfg.channels, d, rng)
        self.encoder = [SelfAttentionBlock(d, cfg.n_heads, rng, **blk) for _ in range(cfg.n_enc_layers)]
        self.first_memory = Linear(d, d, rng)
        self.pose_token = T.parameter(rng.uniform(-1.0, 1.0, size=(1, d)))
        self.decoder = [DecoderBlock(d, cfg.n_heads, rng, **blk) for _ in range(cfg.n_dec_layers)]
        self.dec_norm = LayerNorm(d)
        self.pose_head = MLP(d, d, 7, rng)
        self.self_head = Linear(d, p * p * 4, rng)
        self.global_blocks = [ModulatedBlock(d, cfg.n_heads, rng, **blk) for _ in range(cfg.n_global_layers)]
        self.global_head = Linear(d, p * p * 4, rng)
        self.mem_feature = MLP(2 * d, d, d, rng)
        self.geo_embed = Linear(p * p * 3, d, rng)
        self.geo_blocks = [SelfAttentionBlock(d, cfg.n_heads, rng, **blk) for _ in range(cfg.n_geo_layers)]
        # pose head starts near the identity rotation
        self.pose_head.fc2.bias = T.parameter(np.array([1.0, 0, 0, 0, 0, 0, 0]))

    # encoder
    def encode_image(self, pixels) -> Tensor:
        pixels = np.asarray(pixels, dtype=np.float64)
        H, W = self.cfg.image_size
        if pixels.shape != (H, W, self.cfg.channels):
            raise ValueError(f"expected image {(H, W, self.cfg.channels)}, got {pixels.shape}")
        x = self.project_patches(pixels)
        for block in self.encoder:
            x = block(x)
        return x

    def project_patches(self, pixels) -> Tensor:
        return self.patch_embed(Tensor(patchify(np.asarray(pixels, dtype=np.float64), self.cfg.patch)))

    def embed_first_memory(self, image_tokens: Tensor, frame_index: int = 0) -> Tensor:
        if frame_index != 0:
            raise ValueError("the first-memory embedding only applies to frame 0")
        return self.first_memory(image_tokens)

    # decoder
    def interaction_decode(
        self,
        tokens: FrameTokens,
        memory_features: Tensor,
        memory_positions: np.ndarray,
        memory_null: np.ndarray | None = None,
    ) -> FrameTokens:
        n = tokens.image_tokens.shape[0]
        rope = self.cfg.rope
        q_pos = np.concatenate([tokens.positions, np.zeros((1, 3))])
        q_null = np.concatenate([tokens.null, [True]])
        mem_pos = np.nan_to_num(np.asarray(memory_positions, dtype=np.float64).reshape(-1, 3))
        if memory_null is None:
            memory_null = np.isnan(np.asarray(memory_positions)).any(axis=1)
        rope_q = complex_multipliers(q_pos, rope, q_null)
        rope_k = complex_multipliers(mem_pos, rope, memory_null)
        x = T.concat([tokens.image_tokens, tokens.pose_token], axis=0)
        for block in self.decoder:
            x = block(x, memory_features, rope_q, rope_k)
        x = self.dec_norm(x)
        return FrameTokens(x[:n], x[n:], tokens.positions, tokens.null)

    # heads
    def head_pose(self, pose_token: Tensor) -> PoseOutput:
        raw = self.pose_head(pose_token).reshape(7)
        q = raw[:4]
        qn = T.norm(q)
        if qn.item() < 1e-12:
            return PoseOutput(Tensor(np.array([1.0, 0.0, 0.0, 0.0])), raw[4:], fallback=True)
        return PoseOutput(q / qn, raw[4:])

    def _unpatch_head(self, head: Linear, x: Tensor) -> HeadOutput:
        out = unpatchify(head(x), self.cfg.grid, self.cfg.patch)
        points = out[:, :, :3]
        conf = out[:, :, 3].exp() + 1.0
        return HeadOutput(points, conf)

    def head_self(self, image_tokens: Tensor) -> HeadOutput:
        return self._unpatch_head(self.self_head, image_tokens)

    def head_global(self, image_tokens: Tensor, pose_token: Tensor) -> HeadOutput:
        x = image_tokens
        for block in self.global_blocks:
            x = block(x, pose_token)
        return self._unpatch_head(self.global_head, x)

    # memory encoder
    def memory_encode(self, F: Tensor, F_dec: Tensor, global_points: Tensor, valid=None):
        """New pointer features and positions for one frame.

        Returns ``(features, positions, kept)`` where ``kept`` indexes the
        tokens whose patch had at least one valid pixel.
        """
        H, W = self.cfg.image_size
        if valid is None:
            valid = np.ones((H, W), dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        feat = self.mem_feature(T.concat([F, F_dec], axis=1))
        masked = global_points * valid[..., None].astype(np.float64)
        g = self.geo_embed(_patchify_tensor(masked, self.cfg.patch))
        for block in self.geo_blocks:
            g = block(g)
        feat = feat + g
        centers, cell_valid = patch_average_positions(Pointmap(global_points.data, valid), self.cfg.patch)
        kept = np.flatnonzero(cell_valid.reshape(-1))
        if kept.size != feat.shape[0]:
            feat = feat[kept]
        return feat, centers.reshape(-1, 3)[kept], kept
