"""Comment-aware retrieval: hidden-state adapter, score fusion, index, and training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models.encoders import DualEncoder
from .models.lm import ToyLM, TrainingError, extract_hidden_states
from .models.tokenizer import Tokenizer
from .records import CoRExample, EntityDocument, MultimodalQuery
from .tensor import Tensor, checkpoint, functional as F, no_grad
from .tensor.core import ContractError, ShapeError
from .tensor.nn import MLP, Module, Parameter
from .tensor.optim import Optimizer

log = logging.getLogger(__name__)

BETA_MODES = ("learned", "zero", "one")


class RetrieverParams(Module):
    """Hidden-state adapter, fusion logit ``b`` (beta = sigmoid(b)) and the dual encoder."""

    def __init__(self, encoder: DualEncoder, d_model: int, rng: np.random.Generator, d_hidden: int = 128):
        self.encoder = encoder
        self.adapter = MLP(d_model, d_hidden, encoder.e, rng)
        self.fusion_logit = Parameter(np.zeros(1))
        self.beta_mode = "learned"

    @property
    def d_model(self) -> int:
        return self.adapter.fc1.weight.shape[0]

    @property
    def beta(self) -> float:
        if self.beta_mode == "zero":
            return 0.0
        if self.beta_mode == "one":
            return 1.0
        return float(1.0 / (1.0 + np.exp(-self.fusion_logit.values[0])))

    def beta_tensor(self) -> Tensor:
        if self.beta_mode == "learned":
            return F.sigmoid(self.fusion_logit)
        return Tensor(np.array([self.beta]))

    def frozen_groups(self) -> dict:
        """Parameter records grouped the way the training stages lock them."""
        state = self.state_dict()
        return {
            "adapter": {k: v for k, v in state.items() if k.startswith("adapter.")},
            "fusion": {k: v for k, v in state.items() if k.startswith("fusion_logit")},
            "encoder": {k: v for k, v in state.items() if k.startswith("encoder.")},
        }


def adapt_hidden_state(params: RetrieverParams, h) -> Tensor:
    """FC-GeLU-FC on the LM hidden state, L2-normalized. Accepts (d,) or (B, d)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.d_model:
        raise ShapeError(f"hidden state dim {h.shape[-1]} != adapter input {params.d_model}")
    x = Tensor(h.reshape(-1, h.shape[-1]))
    return F.l2_normalize(params.adapter(x))


def fuse(params: RetrieverParams, hidden: np.ndarray | None, token_lists, features) -> Tensor:
    """Normalized beta * adapted(h) + (1 - beta) * mm(q), batched."""
    mm = params.encoder.encode(token_lists, features)
    if params.beta_mode == "zero" or hidden is None:
        return mm
    adapted = adapt_hidden_state(params, hidden)
    if params.beta_mode == "one":
        return adapted
    beta = params.beta_tensor()
    return F.l2_normalize(beta * adapted + (1.0 - beta) * mm)


def query_tokens(tok: Tokenizer, q: MultimodalQuery) -> list[int]:
    return tok.encode(q.text)


def _features_or_none(q: MultimodalQuery):
    return None if q.features is None or len(q.features) == 0 else np.asarray(q.features)[None, :]


def embed_query(params: RetrieverParams, lm: ToyLM, tok: Tokenizer, q: MultimodalQuery) -> np.ndarray:
    with no_grad():
        h = extract_hidden_states(lm, tok, [q]) if params.beta_mode != "zero" else None
        return fuse(params, h, [query_tokens(tok, q)], _features_or_none(q)).values[0]


def embed_queries(params: RetrieverParams, hidden: np.ndarray, token_lists, features) -> np.ndarray:
    with no_grad():
        return fuse(params, hidden, token_lists, features).values


def document_text(tok: Tokenizer, d: EntityDocument, text_choice: str = "caption") -> list[int]:
    if text_choice not in ("caption", "comment"):
        raise ValueError(f"unknown text choice {text_choice!r}")
    words = d.comment if text_choice == "comment" and d.comment else d.caption
    return tok.encode(words)


def embed_document(params: RetrieverParams, tok: Tokenizer, d: EntityDocument, text_choice: str = "caption") -> np.ndarray:
    with no_grad():
        return params.encoder.encode([document_text(tok, d, text_choice)], np.asarray(d.features)[None, :]).values[0]


def score(qe: np.ndarray, de: np.ndarray) -> float:
    qe, de = np.asarray(qe), np.asarray(de)
    if qe.shape != de.shape:
        raise ShapeError(f"score: shapes {qe.shape} and {de.shape}")
    return float((qe * de).sum())


# --- index -----------------------------------------------------------------

@dataclass
class EmbeddingIndex:
    embeddings: np.ndarray  # (N, e)
    doc_ids: np.ndarray  # (N,)
    params_digest: str = ""

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.doc_ids = np.asarray(self.doc_ids, dtype=np.int64)
        if len(self.embeddings) != len(self.doc_ids):
            raise ShapeError(f"index has {len(self.embeddings)} rows but {len(self.doc_ids)} ids")

    def __len__(self) -> int:
        return len(self.doc_ids)

    def save(self, path) -> None:
        checkpoint.save(path, {
            "embeddings": self.embeddings,
            "doc_ids": self.doc_ids.astype(np.float64),
            "params_digest": checkpoint.digest_to_array(self.params_digest or "00" * 32),
        })

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        rec = checkpoint.load(path)
        try:
            return cls(rec["embeddings"], rec["doc_ids"].astype(np.int64),
                       checkpoint.array_to_digest(rec["params_digest"]))
        except KeyError as err:
            raise checkpoint.CheckpointError(f"index file lacks record {err.args[0]!r}") from None


def build_index(params: RetrieverParams, tok: Tokenizer, documents: Sequence[EntityDocument]) -> EmbeddingIndex:
    docs = sorted(documents, key=lambda d: d.id)
    with no_grad():
        emb = params.encoder.encode(
            [document_text(tok, d) for d in docs], np.stack([d.features for d in docs])
        ).values
    return EmbeddingIndex(emb, [d.id for d in docs], checkpoint.digest(params.state_dict()))


def rank_scores(scores: np.ndarray, doc_ids: np.ndarray) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending id."""
    return np.lexsort((doc_ids, -scores))


def retrieve(index: EmbeddingIndex, query_embedding: np.ndarray, k: int) -> list[tuple[int, float]]:
    if len(index) == 0:
        raise ContractError("retrieve: index is empty")
    if not 1 <= k <= len(index):
        raise ValueError(f"retrieve: k={k} outside [1, {len(index)}]")
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != index.embeddings.shape[1:]:
        raise ShapeError(f"query dim {q.shape} != index dim {index.embeddings.shape[1:]}")
    # row-wise products keep each score independent of the other rows
    scores = (index.embeddings * q).sum(axis=1)
    order = rank_scores(scores, index.doc_ids)[:k]
    return [(int(index.doc_ids[i]), float(scores[i])) for i in order]


class Retriever:
    """Bundles the frozen LM, tokenizer and retriever parameters for query-time use."""

    def __init__(self, params: RetrieverParams, lm: ToyLM, tok: Tokenizer):
        self.params, self.lm, self.tok = params, lm, tok

    def embed(self, q: MultimodalQuery) -> np.ndarray:
        return embed_query(self.params, self.lm, self.tok, q)

    def embed_many(self, queries: Sequence[MultimodalQuery]) -> np.ndarray:
        hidden = None
        if self.params.beta_mode != "zero":
            hidden = extract_hidden_states(self.lm, self.tok, list(queries))
        feats = np.stack([q.features for q in queries])
        return embed_queries(self.params, hidden, [query_tokens(self.tok, q) for q in queries], feats)

    def retrieve(self, q: MultimodalQuery, index: EmbeddingIndex, k: int) -> list[tuple[int, float]]:
        return retrieve(index, self.embed(q), k)


# --- training --------------------------------------------------------------

def info_nce_loss(q: Tensor, d: Tensor, scale) -> Tensor:
    """Symmetric in-batch cross-entropy over the scaled B x B score matrix."""
    if q.ndim != 2 or q.shape != d.shape:
        raise ShapeError(f"info_nce_loss: shapes {q.shape} and {d.shape}")
    B = q.shape[0]
    if B < 2:
        raise ContractError("info_nce_loss needs a batch of at least 2")
    logits = F.matmul(q, F.transpose(d)) * scale
    labels = np.arange(B)
    rows = F.softmax_cross_entropy(logits, labels)
    cols = F.softmax_cross_entropy(F.transpose(logits), labels)
    return (rows + cols) * 0.5


@dataclass
class RetrievalData:
    """Precomputed per-example inputs for contrastive training."""

    hidden: np.ndarray | None
    query_tokens: list
    query_features: np.ndarray
    doc_features: np.ndarray
    caption_tokens: list
    comment_tokens: list
    target_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.query_tokens)


def make_retrieval_data(examples: Sequence[CoRExample], documents: dict, tok: Tokenizer,
                        lm: ToyLM | None = None) -> RetrievalData:
    queries = [ex.query for ex in examples]
    hidden = extract_hidden_states(lm, tok, queries) if lm is not None else None
    return RetrievalData(
        hidden=hidden,
        query_tokens=[query_tokens(tok, q) for q in queries],
        query_features=np.stack([q.features for q in queries]),
        doc_features=np.stack([documents[ex.target_id].features for ex in examples]),
        caption_tokens=[tok.encode(documents[ex.target_id].caption) for ex in examples],
        comment_tokens=[tok.encode(ex.comment) for ex in examples],
        target_ids=np.array([ex.target_id for ex in examples], dtype=np.int64),
    )


@dataclass
class TrainLog:
    epoch_losses: list = field(default_factory=list)


def _contrastive_epochs(params: RetrieverParams, data: RetrievalData, trainable: list, epochs: int,
                        lr: float, batch_size: int, seed: int, stage: str) -> TrainLog:
    if len(data) < 2:
        raise ContractError("contrastive training needs at least two examples")
    opt = Optimizer(trainable, "adam", lr=lr)
    rng = np.random.default_rng(seed)
    history = TrainLog()
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        # 50/50 caption or comment as the target document's text
        use_comment = rng.random(len(data)) < 0.5
        total, n = 0.0, 0
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            if len(idx) < 2:
                continue
            texts = [data.comment_tokens[i] if use_comment[i] else data.caption_tokens[i] for i in idx]
            d = params.encoder.encode(texts, data.doc_features[idx])
            hidden = None if data.hidden is None else data.hidden[idx]
            q = fuse(params, hidden, [data.query_tokens[i] for i in idx], data.query_features[idx])
            loss = info_nce_loss(q, d, params.encoder.scale())
            if not np.isfinite(loss.item()):
                raise TrainingError(f"{stage} diverged at epoch {epoch}")
            loss.backward()
            for p in trainable:
                if p.grad is None:
                    p.grad = np.zeros_like(p.values)
            opt.step()
            params.encoder.clamp_scale()
            total += loss.item() * len(idx)
            n += len(idx)
        history.epoch_losses.append(total / n)
        log.info("%s epoch %d loss %.4f", stage, epoch, history.epoch_losses[-1])
    return history


def train_retriever_stage1(params: RetrieverParams, data: RetrievalData, epochs: int = 10, lr: float = 1e-3,
                           batch_size: int = 64, seed: int = 0) -> TrainLog:
    """Adapter only; fusion logit and encoder stay bit-identical."""
    if data.hidden is None:
        raise ContractError("stage 1 needs LM hidden states")
    params.set_trainable(False)
    params.adapter.set_trainable(True)
    try:
        return _contrastive_epochs(params, data, params.adapter.parameters(), epochs, lr, batch_size, seed, "stage1")
    finally:
        params.set_trainable(False)


def train_retriever_stage2(params: RetrieverParams, data: RetrievalData, epochs: int = 20, lr: float = 3e-4,
                           batch_size: int = 64, seed: int = 1) -> TrainLog:
    """Adapter, fusion logit, encoder and logit scale together.

    With ``beta_mode == "zero"`` the adapter and fusion logit are left out,
    which gives the no-adapter ablation.
    """
    params.set_trainable(False)
    if params.beta_mode == "zero":
        trainable = params.encoder.parameters()
    else:
        if data.hidden is None:
            raise ContractError("stage 2 needs LM hidden states")
        trainable = params.parameters()
        if params.beta_mode != "learned":
            trainable = [p for p in trainable if p is not params.fusion_logit]
    for p in trainable:
        p.requires_grad = True
    try:
        return _contrastive_epochs(params, data, trainable, epochs, lr, batch_size, seed, "stage2")
    finally:
        params.set_trainable(False)


def train_encoders(enc: DualEncoder, documents: Sequence[EntityDocument], tok: Tokenizer, epochs: int = 10,
                   lr: float = 1e-3, batch_size: int = 64, seed: int = 0) -> TrainLog:
    """CLIP-style image/caption alignment over the document collection."""
    docs = sorted(documents, key=lambda d: d.id)
    feats = np.stack([d.features for d in docs])
    texts = [tok.encode(d.caption) for d in docs]
    enc.set_trainable(True)
    opt = Optimizer(enc.parameters(), "adam", lr=lr)
    rng = np.random.default_rng(seed)
    history = TrainLog()
    zero = [()] * batch_size
    try:
        for epoch in range(epochs):
            order = rng.permutation(len(docs))
            total, n = 0.0, 0
            for s in range(0, len(order), batch_size):
                idx = order[s : s + batch_size]
                if len(idx) < 2:
                    continue
                img = enc.encode(zero[: len(idx)], feats[idx], "image-only")
                txt = enc.encode([texts[i] for i in idx], None, "text-only")
                loss = info_nce_loss(img, txt, enc.scale())
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"encoder training diverged at epoch {epoch}")
                loss.backward()
                opt.step()
                enc.clamp_scale()
                total += loss.item() * len(idx)
                n += len(idx)
            history.epoch_losses.append(total / n)
            log.info("encoders epoch %d loss %.4f", epoch, history.epoch_losses[-1])
    finally:
        enc.set_trainable(False)
    return history
