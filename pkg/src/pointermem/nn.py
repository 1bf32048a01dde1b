"""Transformer building blocks over :mod:`pointermem.tensor`.

All blocks are pre-norm. Weights are initialised
``uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`` from a caller-supplied
generator; biases start at zero and layer-norm affines at (1, 0).
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rope3d import apply_rope
from .tensor import Tensor

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "MLP",
    "MultiHeadAttention",
    "SelfAttentionBlock",
    "DecoderBlock",
    "ModulatedBlock",
    "attend",
]


class Module:
    """Parameter container; parameters are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = T.parameter(_uniform(rng, d_in, (d_in, d_out)))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = T.parameter(np.ones(d))
        self.beta = T.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x) * self.gamma + self.beta


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention on (heads, N, d) tensors."""
    d = q.shape[-1]
    scores = T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(d))
    return T.matmul(T.softmax(scores), v)


class MultiHeadAttention(Module):
    """Multi-head attention with optional complex multipliers on q and k."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], self.n_heads, self.d_head)

    def __call__(self, x: Tensor, context: Tensor, rope_q=None, rope_k=None) -> Tensor:
        q = self._split(self.wq(x))
        k = self._split(self.wk(context))
        v = self._split(self.wv(context))
        if rope_q is not None:
            q = apply_rope(q, rope_q)
        if rope_k is not None:
            k = apply_rope(k, rope_k)
        out = attend(q.transpose(1, 0, 2), k.transpose(1, 0, 2), v.transpose(1, 0, 2))
        out = out.transpose(1, 0, 2).reshape(x.shape[0], -1)
        return self.wo(out)


class SelfAttentionBlock(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.mlp = MLP(d_model, mlp_ratio * d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


class DecoderBlock(Module):
    """Self-attention, RoPE cross-attention to memory, then an MLP."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm_self = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm_cross = LayerNorm(d_model)
        self.norm_mem = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm_mlp = LayerNorm(d_model)
        self.mlp = MLP(d_model, mlp_ratio * d_model, d_model, rng)

    def __call__(self, x: Tensor, memory: Tensor, rope_q=None, rope_k=None) -> Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm_cross(x), self.norm_mem(memory), rope_q, rope_k)
        return x + self.mlp(self.norm_mlp(x))


class ModulatedBlock(Module):
    """Self-attention block whose layer-norm affines come from a condition token.

    ``scale = cond @ W_s + b_s`` and ``shift = cond @ W_b + b_b``; with
    ``W = 0, b_s = 1, b_b = 0`` the block reduces to a plain one with
    identity affines.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.mod1 = Linear(d_model, 2 * d_model, rng)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.mod2 = Linear(d_model, 2 * d_model, rng)
        self.mlp = MLP(d_model, mlp_ratio * d_model, d_model, rng)
        d = d_model
        for mod in (self.mod1, self.mod2):
            b = np.zeros(2 * d)
            b[:d] = 1.0
            mod.bias = T.parameter(b)
        self.d_model = d

    def _modulate(self, x: Tensor, cond: Tensor, mod: Linear) -> Tensor:
        ss = mod(cond)
        scale = ss[:, : self.d_model]
        shift = ss[:, self.d_model :]
        return T.layer_norm(x) * scale + shift

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self._modulate(x, cond, self.mod1)
        x = x + self.attn(h, h)
        return x + self.mlp(self._modulate(x, cond, self.mod2))
