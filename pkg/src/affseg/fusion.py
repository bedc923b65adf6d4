"""Multi-layer feature fusion and the visual embedder.

The last j encoder layers are each linearly projected and combined with a
convex weight vector; the weights live as logits under a softmax so the
simplex constraint holds for any parameter value. The embedder is a single
affine map aligning the fused visual features with the text embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .features import FeatureStack


@dataclass
class FusionParams:
    """Per-layer projections (each C_v x C_v) plus fusion-weight logits."""

    proj: list[np.ndarray]
    alpha_logits: np.ndarray

    def __post_init__(self):
        self.proj = [np.asarray(P, dtype=np.float64) for P in self.proj]
        self.alpha_logits = np.asarray(self.alpha_logits, dtype=np.float64)
        if self.alpha_logits.shape != (len(self.proj),):
            raise ValueError(
                f"{len(self.proj)} projections but {self.alpha_logits.shape} logits"
            )

    @property
    def depth(self) -> int:
        return len(self.proj)

    @property
    def alpha(self) -> np.ndarray:
        return _softmax(self.alpha_logits)


@dataclass
class Embedder:
    """Affine map C_v -> C applied row-wise to fused patch features."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"embedder shapes inconsistent: {self.weight.shape} vs {self.bias.shape}"
            )


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def init_fusion(depth: int, feature_dim: int, seed: int) -> FusionParams:
    """Projections start at identity plus small noise, weights uniform."""
    rng = np.random.default_rng([seed, 0xF05E])
    proj = [
        np.eye(feature_dim) + 0.01 * rng.standard_normal((feature_dim, feature_dim))
        for _ in range(depth)
    ]
    return FusionParams(proj=proj, alpha_logits=np.zeros(depth))


def init_embedder(feature_dim: int, embed_dim: int, seed: int) -> Embedder:
    """Identity block plus small noise keeps early features close to raw."""
    rng = np.random.default_rng([seed, 0xE89D])
    W = 0.01 * rng.standard_normal((feature_dim, embed_dim))
    W[: min(feature_dim, embed_dim), : min(feature_dim, embed_dim)] += np.eye(
        min(feature_dim, embed_dim)
    )
    return Embedder(weight=W, bias=np.zeros(embed_dim))


class FuseCache(NamedTuple):
    layers: tuple[np.ndarray, ...]   # the j used layers, order: last, last-1, ...
    projected: list[np.ndarray]      # layer_i @ proj_i
    alpha: np.ndarray


def fuse(stack: FeatureStack, fp: FusionParams) -> np.ndarray:
    """Weighted sum over the last j projected layers -> L x C_v."""
    out, _ = fuse_cached(stack, fp)
    return out


def fuse_cached(stack: FeatureStack, fp: FusionParams):
    j = fp.depth
    if j > len(stack.layers):
        raise ValueError(f"fusion wants {j} layers but stack has {len(stack.layers)}")
    used = tuple(stack.layers[-i] for i in range(1, j + 1))
    for i, layer in enumerate(used):
        if layer.shape[1] != fp.proj[i].shape[0]:
            raise ValueError(
                f"layer dim {layer.shape[1]} does not match projection {fp.proj[i].shape}"
            )
    alpha = fp.alpha
    projected = [used[i] @ fp.proj[i] for i in range(j)]
    fused = sum(alpha[i] * projected[i] for i in range(j))
    return fused, FuseCache(used, projected, alpha)


def fuse_backward(cache: FuseCache, d_fused: np.ndarray):
    """-> (d_proj list, d_alpha_logits)."""
    alpha = cache.alpha
    d_proj = [alpha[i] * cache.layers[i].T @ d_fused for i in range(len(alpha))]
    d_alpha = np.array([np.sum(d_fused * P) for P in cache.projected])
    d_logits = alpha * (d_alpha - float(d_alpha @ alpha))
    return d_proj, d_logits


class EmbedCache(NamedTuple):
    fused: np.ndarray
    weight: np.ndarray


def embed(fused: np.ndarray, emb: Embedder) -> np.ndarray:
    """Row-wise affine map, no activation -> L x C."""
    out, _ = embed_cached(fused, emb)
    return out


def embed_cached(fused: np.ndarray, emb: Embedder):
    if fused.shape[1] != emb.weight.shape[0]:
        raise ValueError(
            f"feature dim {fused.shape[1]} does not match embedder input {emb.weight.shape[0]}"
        )
    return fused @ emb.weight + emb.bias, EmbedCache(fused, emb.weight)


def embed_backward(cache: EmbedCache, d_out: np.ndarray):
    """-> (d_weight, d_bias, d_fused)."""
    d_weight = cache.fused.T @ d_out
    d_bias = d_out.sum(axis=0)
    d_fused = d_out @ cache.weight.T
    return d_weight, d_bias, d_fused
