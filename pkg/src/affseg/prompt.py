"""Text prompt learning.

Trainable context vectors are shared across affordance classes. For class i
the sequence [v_1 .. v_p, token_i] is mean-pooled, pushed through a frozen
seeded projection, and layer-normalized (no affine) to give one text
embedding row. Only the context vectors train; the projection stands in for
a frozen pretrained text encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .features import ClassTokenTable

LN_EPS = 1e-12


@dataclass
class ContextVectors:
    """p x C_t trainable context matrix, prepended to every class token."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"context must be a p x C_t matrix with p >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite context vector")
        self.vectors = v

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def token_dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class StubTextEncoder:
    """Frozen seeded projection C_t -> C playing the part of a text encoder."""

    proj: np.ndarray = field(repr=False)
    seed: int = 0

    @classmethod
    def create(cls, token_dim: int, embed_dim: int, seed: int) -> "StubTextEncoder":
        rng = np.random.default_rng([seed, 0x7E87])
        proj = rng.standard_normal((token_dim, embed_dim)) / np.sqrt(token_dim)
        proj.flags.writeable = False
        return cls(proj=proj, seed=seed)

    @property
    def token_dim(self) -> int:
        return self.proj.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.proj.shape[1]


def init_context(count: int, token_dim: int, seed: int) -> ContextVectors:
    """Gaussian init, mean 0, std 0.02."""
    if count < 1:
        raise ValueError("need at least one context vector")
    rng = np.random.default_rng([seed, 0xC0DE])
    return ContextVectors(vectors=0.02 * rng.standard_normal((count, token_dim)))


class TextCache(NamedTuple):
    pooled: np.ndarray      # N x C_t
    normed: np.ndarray      # N x C  (the output rows)
    inv_std: np.ndarray     # N
    count: int              # p
    proj: np.ndarray        # C_t x C


def encode_texts(ctx: ContextVectors, table: ClassTokenTable, enc: StubTextEncoder) -> np.ndarray:
    """N x C text embeddings; rows have zero mean and unit variance."""
    out, _ = encode_texts_cached(ctx, table, enc)
    return out


def encode_texts_cached(ctx, table, enc):
    if ctx is not None and ctx.token_dim != table.token_dim:
        raise ValueError(
            f"context dim {ctx.token_dim} does not match token dim {table.token_dim}"
        )
    if table.token_dim != enc.token_dim:
        raise ValueError(
            f"token dim {table.token_dim} does not match encoder input {enc.token_dim}"
        )
    if ctx is None:
        pooled = table.tokens.copy()
        p = 0
    else:
        p = ctx.count
        pooled = (ctx.vectors.sum(axis=0)[None, :] + table.tokens) / (p + 1)
    h = pooled @ enc.proj
    mu = h.mean(axis=1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    normed = (h - mu) * inv_std
    return normed, TextCache(pooled, normed, inv_std[:, 0], p, enc.proj)


def encode_texts_backward(cache: TextCache, d_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the context vectors (p x C_t); zeros-shaped (0, C_t)
    when encoding ran without context."""
    y = cache.normed
    C = y.shape[1]
    row_mean = d_out.mean(axis=1, keepdims=True)
    proj_mean = (d_out * y).mean(axis=1, keepdims=True)
    dh = cache.inv_std[:, None] * (d_out - row_mean - y * proj_mean)
    d_pooled = dh @ cache.proj.T
    if cache.count == 0:
        return np.zeros((0, d_pooled.shape[1]))
    # every context vector contributes 1/(p+1) to every class row
    d_ctx_row = d_pooled.sum(axis=0) / (cache.count + 1)
    return np.tile(d_ctx_row, (cache.count, 1))
