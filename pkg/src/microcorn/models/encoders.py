"""Text and image towers sharing an ``e``-dimensional unit-sphere output."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..datagen import FEATURE_DIM
from ..tensor import Tensor, functional as F
from ..tensor.core import ContractError, ShapeError
from ..tensor.nn import MLP, Linear, Module, Parameter

MODES = ("text-only", "image-only", "both")
INIT_LOGIT_SCALE = float(np.log(1.0 / 0.07))
MAX_LOGIT_SCALE = float(np.log(100.0))


def bag_matrix(token_lists: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Row-normalized token counts; an empty list gives a zero row."""
    out = np.zeros((len(token_lists), vocab_size))
    for i, ids in enumerate(token_lists):
        if len(ids):
            np.add.at(out[i], np.asarray(ids, dtype=np.int64), 1.0)
            out[i] /= len(ids)
    return out


class DualEncoder(Module):
    def __init__(self, vocab_size: int, rng: np.random.Generator, e: int = 32, d_word: int = 64,
                 feature_dim: int = FEATURE_DIM, d_hidden: int = 128):
        self.word_emb = Parameter(rng.normal(0.0, 0.1, size=(vocab_size, d_word)))
        self.text_fc = Linear(d_word, e, rng)
        self.image_mlp = MLP(feature_dim, d_hidden, e, rng)
        self.logit_scale = Parameter(np.array([INIT_LOGIT_SCALE]))
        self.vocab_size = vocab_size
        self.e = e

    def text_tower(self, token_lists: Sequence[Sequence[int]]) -> Tensor:
        """Unit vectors (zero rows for empty texts), order-blind."""
        bags = Tensor(bag_matrix(token_lists, self.vocab_size))
        present = np.array([[1.0 if len(t) else 0.0] for t in token_lists])
        return F.l2_normalize(self.text_fc(F.matmul(bags, self.word_emb)) * present)

    def image_tower(self, features: np.ndarray) -> Tensor:
        feats = np.asarray(features, dtype=np.float64)
        if feats.shape[-1] != self.image_mlp.fc1.weight.shape[0]:
            raise ShapeError(f"image features have dim {feats.shape[-1]}, expected {self.image_mlp.fc1.weight.shape[0]}")
        return F.l2_normalize(self.image_mlp(Tensor(feats)))

    def scale(self) -> Tensor:
        return F.exp(self.logit_scale)

    def clamp_scale(self) -> None:
        """Keep the contrastive scale at most 100; call after each update."""
        np.minimum(self.logit_scale.values, MAX_LOGIT_SCALE, out=self.logit_scale.values)

    def encode_parts(self, token_lists, features, mode: str = "both") -> tuple[Tensor, Tensor]:
        """Per-modality unit vectors; the unused or absent modality is all zeros."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        n = len(token_lists) if token_lists is not None else len(features)
        zero = Tensor(np.zeros((n, self.e)))
        use_text = mode != "image-only" and token_lists is not None
        use_image = mode != "text-only" and features is not None
        if use_text and not any(len(t) for t in token_lists):
            use_text = False
        if not (use_text or use_image):
            raise ContractError(f"no modality available for mode {mode!r}")
        text = self.text_tower(token_lists) if use_text else zero
        image = self.image_tower(features) if use_image else zero
        return text, image

    def encode(self, token_lists, features, mode: str = "both") -> Tensor:
        text, image = self.encode_parts(token_lists, features, mode)
        return F.l2_normalize(text + image)


def encode_multimodal(enc: DualEncoder, tokens: Sequence[int] | None, features: np.ndarray | None,
                      mode: str = "both") -> np.ndarray:
    """Single-item convenience wrapper returning a unit vector."""
    toks = None if tokens is None else [list(tokens)]
    feats = None if features is None or len(features) == 0 else np.asarray(features)[None, :]
    return enc.encode(toks, feats, mode).values[0]
