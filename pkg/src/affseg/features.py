"""Multi-layer patch-feature containers and their on-disk format.

A :class:`FeatureStack` is the input contract of the whole model: per-image
patch tokens from several encoder layers (last layer last) plus a summary
token, all float64. Stacks are produced either by the synthetic encoders in
:mod:`affseg.synth` or ingested from disk, e.g. features exported offline
from a real vision transformer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .container import CorruptionError, FormatError

__all__ = [
    "FeatureStack",
    "ClassTokenTable",
    "save_features",
    "load_features",
    "synth_text_tokens",
    "FormatError",
    "CorruptionError",
]


@dataclass(frozen=True)
class FeatureStack:
    """Per-image features: ``layers[i]`` is the L x C_v patch matrix of one
    encoder layer (deepest layer last), ``cls`` the length-C_v summary token.

    ``grid`` is the (rows, cols) patch layout with rows*cols == L and
    ``image_size`` the (H, W) pixel size the patches were taken from.
    """

    layers: tuple[np.ndarray, ...]
    cls: np.ndarray
    grid: tuple[int, int]
    image_size: tuple[int, int]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("feature stack needs at least one layer")
        layers = tuple(np.asarray(l, dtype=np.float64) for l in self.layers)
        cls = np.asarray(self.cls, dtype=np.float64)
        shape = layers[0].shape
        if len(shape) != 2:
            raise ValueError(f"layers must be 2-d, got shape {shape}")
        for l in layers:
            if l.shape != shape:
                raise ValueError(f"layer shapes differ: {l.shape} vs {shape}")
            if not np.all(np.isfinite(l)):
                raise ValueError("non-finite values in feature layer")
        if cls.shape != (shape[1],):
            raise ValueError(f"cls shape {cls.shape} does not match feature dim {shape[1]}")
        if not np.all(np.isfinite(cls)):
            raise ValueError("non-finite values in cls token")
        h_p, w_p = self.grid
        if h_p * w_p != shape[0]:
            raise ValueError(f"grid {self.grid} does not tile {shape[0]} patches")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "cls", cls)

    @property
    def num_patches(self) -> int:
        return self.layers[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def last(self) -> np.ndarray:
        return self.layers[-1]


@dataclass(frozen=True)
class ClassTokenTable:
    """Affordance vocabulary: class names and one token embedding per name."""

    names: tuple[str, ...]
    tokens: np.ndarray = field(repr=False)

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ValueError("need at least one affordance name")
        if len(set(names)) != len(names):
            raise ValueError("affordance names must be unique")
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] != len(names):
            raise ValueError(f"tokens shape {tokens.shape} does not match {len(names)} names")
        if not np.all(np.isfinite(tokens)):
            raise ValueError("non-finite token embedding")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "tokens", tokens)

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]


def save_features(stack: FeatureStack, path) -> None:
    """Write *stack* to *path*.

    Header after the magic: (n_layers, L, C_v, h_p, w_p, H, W) as uint32,
    then the layers (first to last, row-major) and the cls vector as raw
    little-endian float64. Round-trips are bit-exact.
    """
    n_layers = len(stack.layers)
    L, C_v = stack.layers[0].shape
    h_p, w_p = stack.grid
    H, W = stack.image_size
    with open(path, "wb") as fh:
        container.write_magic(fh)
        container.write_u32(fh, n_layers, L, C_v, h_p, w_p, H, W)
        for layer in stack.layers:
            container.write_f64(fh, layer)
        container.write_f64(fh, stack.cls)


def load_features(path) -> FeatureStack:
    """Read a stack written by :func:`save_features`."""
    with open(path, "rb") as fh:
        container.read_magic(fh)
        n_layers, L, C_v, h_p, w_p, H, W = container.read_u32(fh, 7)
        if n_layers < 1 or L < 1 or C_v < 1:
            raise CorruptionError(f"implausible header ({n_layers} layers, {L}x{C_v})")
        if h_p * w_p != L:
            raise CorruptionError(f"grid {h_p}x{w_p} does not tile {L} patches")
        layers = tuple(
            container.read_f64(fh, L * C_v).reshape(L, C_v) for _ in range(n_layers)
        )
        cls = container.read_f64(fh, C_v)
        container.expect_eof(fh)
    try:
        return FeatureStack(layers=layers, cls=cls, grid=(h_p, w_p), image_size=(H, W))
    except ValueError as exc:
        raise CorruptionError(str(exc)) from exc


def synth_text_tokens(names, token_dim: int, seed: int) -> ClassTokenTable:
    """Deterministic stand-in for pretrained text token embeddings.

    Each class gets a seeded Gaussian draw normalized to unit length; the
    draw is keyed by the name itself, so equal names give equal rows no
    matter the position or surrounding vocabulary.
    """
    names = tuple(names)
    if not names:
        raise ValueError("names must be non-empty")
    if len(set(names)) != len(names):
        raise ValueError("duplicate affordance names")
    rows = []
    for name in names:
        rng = np.random.default_rng([seed, _stable_hash(name)])
        v = rng.standard_normal(token_dim)
        rows.append(v / math.sqrt(float(v @ v)))
    return ClassTokenTable(names=names, tokens=np.array(rows))


def _stable_hash(text: str) -> int:
    """64-bit FNV-1a; Python's hash() is salted per process."""
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
