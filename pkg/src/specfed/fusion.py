"""Embedding-wise cross-attention and prefix/suffix prompt assembly.

Also holds the ablation stand-ins: FiLM modulation in place of attention and
a token-count-preserving projection in place of prompting.  Every fusion
module maps ``(r, S_g) -> Z`` and every prompt module maps ``(Z, r) -> (r', layout)``
so the rest of the model is agnostic to which variant is active.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigError, ContractError, DimensionError
from .tensor import Module, Tensor, as_tensor, broadcast_to, concat, softmax_rows, swap_last


class TokenLayout(NamedTuple):
    prefix: int
    body: int
    suffix: int

    @property
    def length(self) -> int:
        return self.prefix + self.body + self.suffix


def cross_attention(r: Tensor, S_g: Tensor, W_Q: Tensor, W_K: Tensor, W_V: Tensor) -> Tensor:
    """``softmax(Q K^T / sqrt(d_h)) V`` with queries from ``r`` and keys/values from ``S_g``.

    Accepts ``(L, d)``/``(k, d)`` pairs or batched ``(B, L, d)``/``(B, k, d)``.
    """
    r, S_g = as_tensor(r), as_tensor(S_g)
    if S_g.shape[-2] == 0:
        raise ContractError("cross_attention needs at least one prototype")
    if r.shape[-1] != W_Q.shape[0] or S_g.shape[-1] != W_K.shape[0]:
        raise DimensionError(f"token dim {r.shape[-1]} / prototype dim {S_g.shape[-1]} "
                             f"do not match projections {W_Q.shape}, {W_K.shape}")
    d_h = W_Q.shape[1]
    q = r @ W_Q
    k = S_g @ W_K
    v = S_g @ W_V
    attn = softmax_rows((q @ swap_last(k)) * (1.0 / math.sqrt(d_h)))
    return attn @ v


def attention_weights(r: Tensor, S_g: Tensor, W_Q: Tensor, W_K: Tensor) -> np.ndarray:
    q = as_tensor(r).data @ W_Q.data
    k = as_tensor(S_g).data @ W_K.data
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(W_Q.shape[1])
    return softmax_rows(Tensor(logits)).data


def prefix_suffix_concat(Z: Tensor | None, r: Tensor, c: Tensor | None) -> Tensor:
    """Ordered concatenation ``[Z || r || c]`` along the token axis."""
    parts = [t for t in (Z, r, c) if t is not None and t.shape[-2] > 0]
    dims = {t.shape[-1] for t in parts}
    if len(dims) > 1:
        raise ContractError(f"prompt segments disagree on embedding dimension: {sorted(dims)}")
    if len(parts) == 1:
        return parts[0]
    return concat(parts, axis=-2)


class ECAFusion(Module):
    def __init__(self, dim: int, head_dim: int | None, rng: np.random.Generator):
        super().__init__()
        head_dim = head_dim or dim
        scale = 1.0 / math.sqrt(dim)
        self.param("W_Q", rng.normal(0, scale, (dim, head_dim)))
        self.param("W_K", rng.normal(0, scale, (dim, head_dim)))
        self.param("W_V", rng.normal(0, scale, (dim, head_dim)))
        if head_dim != dim:
            self.param("W_O", rng.normal(0, 1.0 / math.sqrt(head_dim), (head_dim, dim)))

    def __call__(self, r: Tensor, S_g: Tensor) -> Tensor:
        z = cross_attention(r, S_g, self.W_Q, self.W_K, self.W_V)
        if "W_O" in self._params:
            z = z @ self.W_O
        return z


class FiLMFusion(Module):
    """Per-channel affine modulation of ``r`` driven by the mean prototype."""

    def __init__(self, dim: int, rng: np.random.Generator, identity: bool = False):
        super().__init__()
        scale = 0.0 if identity else 0.02
        self.param("W_gamma", rng.normal(0, 1, (dim, dim)) * scale, trainable=not identity)
        self.param("W_beta", rng.normal(0, 1, (dim, dim)) * scale, trainable=not identity)
        self.identity = identity

    def __call__(self, r: Tensor, S_g: Tensor) -> Tensor:
        if self.identity:
            return r
        m = as_tensor(S_g).mean(axis=-2, keepdims=True)
        return r * (1.0 + m @ self.W_gamma) + m @ self.W_beta


class PrefixSuffixPrompt(Module):
    """Prepends fused tokens (pooled or full) and appends client suffix tokens."""

    def __init__(self, dim: int, suffix_count: int, rng: np.random.Generator, prefix_mode: str = "pooled"):
        super().__init__()
        if prefix_mode not in ("pooled", "full"):
            raise ConfigError(f"prefix_mode must be 'pooled' or 'full', got {prefix_mode!r}", "model.prefix_mode")
        if suffix_count < 0:
            raise ConfigError("suffix_count must be >= 0", "model.suffix_tokens")
        self.prefix_mode = prefix_mode
        self.suffix_count = suffix_count
        self.param("suffix", rng.normal(0, 0.02, (suffix_count, dim)))

    def __call__(self, Z: Tensor, r: Tensor) -> tuple[Tensor, TokenLayout]:
        prefix = Z.mean(axis=-2, keepdims=True) if self.prefix_mode == "pooled" else Z
        c = self.suffix
        if self.suffix_count and r.ndim == 3:
            c = broadcast_to(c, (r.shape[0],) + c.shape)
        seq = prefix_suffix_concat(prefix, r, c if self.suffix_count else None)
        return seq, TokenLayout(prefix.shape[-2], r.shape[-2], self.suffix_count)


class ProjectionPrompt(Module):
    """Token-count-preserving stand-in: ``r W_P + mean(Z) W_Z``."""

    def __init__(self, dim: int, identity: bool = False):
        super().__init__()
        self.identity = identity
        self.param("W_P", np.eye(dim), trainable=not identity)
        self.param("W_Z", np.zeros((dim, dim)), trainable=not identity)

    def __call__(self, Z: Tensor, r: Tensor) -> tuple[Tensor, TokenLayout]:
        layout = TokenLayout(0, r.shape[-2], 0)
        if self.identity:
            return r, layout
        return r @ self.W_P + Z.mean(axis=-2, keepdims=True) @ self.W_Z, layout
