"""Per-tile image adapters: LayerNorm -> FC -> GeLU -> FC into the LM embedding space."""
from __future__ import annotations

import numpy as np

from ..datagen import FEATURE_DIM, N_TILES, TILE_DIM
from ..tensor import Tensor, functional as F
from ..tensor.core import ShapeError
from ..tensor.nn import LayerNorm, Linear, Module


def split_tiles(features: np.ndarray, n_tiles: int = N_TILES) -> np.ndarray:
    """(..., n_tiles * tile_dim) -> (..., n_tiles, tile_dim)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != FEATURE_DIM:
        raise ShapeError(f"image features have dim {features.shape[-1]}, expected {FEATURE_DIM}")
    return features.reshape(features.shape[:-1] + (n_tiles, features.shape[-1] // n_tiles))


class TileAdapter(Module):
    """Shared across tiles; maps each (tile_dim,) sub-vector to one d_model embedding."""

    def __init__(self, d_model: int, rng: np.random.Generator, tile_dim: int = TILE_DIM, d_hidden: int = 128):
        self.norm = LayerNorm(tile_dim)
        self.fc1 = Linear(tile_dim, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_model, rng, std=0.02)

    @property
    def d_model(self) -> int:
        return self.fc2.weight.shape[1]

    def __call__(self, tiles) -> Tensor:
        x = tiles if isinstance(tiles, Tensor) else Tensor(np.asarray(tiles, dtype=np.float64))
        if x.shape[-1] != self.norm.gain.shape[0]:
            raise ShapeError(f"tile dim {x.shape[-1]} != adapter input {self.norm.gain.shape[0]}")
        return self.fc2(F.gelu(self.fc1(self.norm(x))))

    def copy_from(self, other: "TileAdapter") -> None:
        self.load_state_dict(other.state_dict())
