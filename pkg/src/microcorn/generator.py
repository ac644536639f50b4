"""Retrieval-aware comment generation over the frozen toy LM."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datagen import N_TILES
from .models.lm import (
    SequenceLengthError,
    Tiles,
    Tok,
    ToyLM,
    TrainingError,
    batch_embeddings,
    build_batch,
    prompt_parts,
    sequence_loss,
)
from .models.tokenizer import Tokenizer
from .models.visual import TileAdapter, split_tiles
from .records import CoRExample, EntityDocument, MultimodalQuery
from .retriever import EmbeddingIndex, Retriever, retrieve
from .tensor import Tensor, functional as F, no_grad
from .tensor.core import ContractError
from .tensor.optim import Optimizer

log = logging.getLogger(__name__)

MODES = ("no-retrieval", "rag", "unicorn", "oracle")


class EntityAdapter(TileAdapter):
    """Trainable tile adapter for retrieved entities."""

    @classmethod
    def from_native(cls, lm: ToyLM) -> "EntityAdapter":
        """A copy of the LM's own visual adapter, as the starting point for training."""
        native = lm.visual
        xi = cls(native.d_model, np.random.default_rng(0), tile_dim=native.norm.gain.shape[0],
                 d_hidden=native.fc1.weight.shape[1])
        xi.copy_from(native)
        return xi


def entity_text(tok: Tokenizer, d: EntityDocument) -> list[int]:
    return tok.encode(tuple(d.caption) + tuple(d.metadata))


def adapt_entity(xi: TileAdapter, lm: ToyLM, tok: Tokenizer, d: EntityDocument) -> Tensor:
    """(n_tiles + text length, d_model): adapted image tiles, then caption and metadata embeddings."""
    tiles = xi(split_tiles(d.features))
    ids = entity_text(tok, d)
    if not ids:
        return tiles
    return F.concat([tiles, lm.embed_tokens(np.array(ids))], axis=0)


def entity_parts(tok: Tokenizer, d: EntityDocument, adapter: str = "entity", masked: bool = False) -> list:
    return [Tiles(split_tiles(d.features), adapter, masked), Tok(entity_text(tok, d))]


def unicorn_parts(q: MultimodalQuery, d: EntityDocument, tok: Tokenizer, masked: bool = False) -> list:
    return prompt_parts(q, tok) + entity_parts(tok, d, masked=masked)


def rag_parts(q: MultimodalQuery, d: EntityDocument, tok: Tokenizer) -> list:
    """Static prompt: query, an IMG marker, the document through the native adapter, its text."""
    return prompt_parts(q, tok) + [Tok([tok.img_id])] + entity_parts(tok, d, adapter="native")


def _length(parts: Sequence) -> int:
    return sum(len(p.ids) if isinstance(p, Tok) else len(p.tiles) for p in parts)


@dataclass
class GenerationState:
    committed: list  # parts making up the input sequence so far
    emitted: list = field(default_factory=list)
    retrieval: tuple | None = None  # (trigger position, doc id, rank-1 score)
    finished: bool = False

    @property
    def committed_length(self) -> int:
        return _length(self.committed) + len(self.emitted)


def greedy_decode(lm: ToyLM, tok: Tokenizer, prefixes: Sequence[list], adapters: dict,
                  max_new_tokens: int = 24) -> list[list[int]]:
    """Batched greedy continuation of each prefix until EOS or ``max_new_tokens``."""
    limit = lm.config.max_sequence
    for p in prefixes:
        if _length(p) + max_new_tokens > limit:
            raise SequenceLengthError(
                f"prompt of {_length(p)} plus {max_new_tokens} new tokens exceeds max_sequence {limit}"
            )
    out: list[list[int]] = [[] for _ in prefixes]
    live = list(range(len(prefixes)))
    with no_grad():
        for _ in range(max_new_tokens):
            if not live:
                break
            seqs = [prefixes[i] + [Tok(out[i])] for i in live]
            batch = build_batch(seqs, tok.pad_id)
            logits, _ = lm(batch_embeddings(lm, batch, adapters))
            last = logits.values[np.arange(len(live)), batch.lengths - 1]
            nxt = np.argmax(last, axis=-1)
            still = []
            for i, t in zip(live, nxt):
                if t == tok.eos_id:
                    continue
                out[i].append(int(t))
                still.append(i)
            live = still
    return out


class Generator:
    """Greedy commenting in each evaluation mode, sharing one frozen LM."""

    def __init__(self, lm: ToyLM, tok: Tokenizer, xi: TileAdapter | None = None,
                 retriever: Retriever | None = None, max_new_tokens: int = 24, batch_size: int = 64):
        self.lm, self.tok, self.xi, self.retriever = lm, tok, xi, retriever
        self.max_new_tokens = max_new_tokens
        self.batch_size = batch_size

    def _adapters(self) -> dict:
        adapters = {"native": self.lm.visual}
        if self.xi is not None:
            adapters["entity"] = self.xi
        return adapters

    def _decode(self, prefixes: list) -> list[list[int]]:
        out = []
        for s in range(0, len(prefixes), self.batch_size):
            out.extend(greedy_decode(self.lm, self.tok, prefixes[s : s + self.batch_size],
                                     self._adapters(), self.max_new_tokens))
        return out

    def run(self, mode: str, queries: Sequence[MultimodalQuery], documents: Sequence[EntityDocument | None],
            masked: bool = False) -> list[list[int]]:
        """Comments for ``queries``; ``documents`` holds the conditioning entity per query."""
        if mode not in MODES:
            raise ValueError(f"unknown generation mode {mode!r}")
        if mode == "no-retrieval":
            prefixes = [prompt_parts(q, self.tok) for q in queries]
        elif mode == "rag":
            prefixes = [rag_parts(q, d, self.tok) for q, d in zip(queries, documents)]
        else:
            if self.xi is None:
                raise ContractError(f"mode {mode!r} needs a trained entity adapter")
            prefixes = [unicorn_parts(q, d, self.tok, masked) for q, d in zip(queries, documents)]
        return self._decode(prefixes)


def generate_with_retrieval(lm: ToyLM, tok: Tokenizer, retriever: Retriever, xi: TileAdapter, q: MultimodalQuery,
                            index: EmbeddingIndex, documents: dict, max_new_tokens: int = 24,
                            masked: bool = False) -> tuple[int, list[int], GenerationState]:
    """Force the retrieval token first, splice the top-1 entity, then decode greedily."""
    state = GenerationState(committed=prompt_parts(q, tok))
    # the retrieval token is the forced first emission; it triggers retrieval and is
    # replaced in the input stream by the retrieved entity
    trigger = state.committed_length
    doc_id, top = retrieve(index, retriever.embed(q), 1)[0]
    state.retrieval = (trigger, doc_id, top)
    state.committed = state.committed + entity_parts(tok, documents[doc_id], masked=masked)
    gen = Generator(lm, tok, xi, retriever, max_new_tokens)
    tokens = gen._decode([state.committed])[0]
    state.emitted = tokens
    state.finished = True
    return doc_id, tokens, state


def rag_baseline_generate(lm: ToyLM, tok: Tokenizer, retriever: Retriever, q: MultimodalQuery,
                          index: EmbeddingIndex, documents: dict, max_new_tokens: int = 24) -> tuple[int, list[int]]:
    doc_id, _ = retrieve(index, retriever.embed(q), 1)[0]
    tokens = Generator(lm, tok, None, retriever, max_new_tokens).run("rag", [q], [documents[doc_id]])[0]
    return doc_id, tokens


def generate_without_retrieval(lm: ToyLM, tok: Tokenizer, q: MultimodalQuery, max_new_tokens: int = 24) -> list[int]:
    return Generator(lm, tok, None, None, max_new_tokens).run("no-retrieval", [q], [None])[0]


# --- training --------------------------------------------------------------

def entity_adapter_loss(xi: TileAdapter, lm: ToyLM, tok: Tokenizer, examples: Sequence[CoRExample],
                        conditioning: Sequence[EntityDocument]) -> Tensor:
    """Mean next-token cross-entropy of each comment (and EOS) given query and entity."""
    seqs = [
        unicorn_parts(ex.query, d, tok) + [Tok(tok.encode(ex.comment) + [tok.eos_id], supervised=True)]
        for ex, d in zip(examples, conditioning)
    ]
    batch = build_batch(seqs, tok.pad_id)
    return sequence_loss(lm, batch, {"native": lm.visual, "entity": xi})


@dataclass
class AdapterTrainLog:
    epoch_losses: list = field(default_factory=list)


def train_entity_adapter(xi: TileAdapter, lm: ToyLM, tok: Tokenizer, examples: Sequence[CoRExample],
                         documents: dict, epochs: int = 10, lr: float = 1e-3, batch_size: int = 32,
                         seed: int = 0, retrieved_ids: Sequence[int] | None = None) -> AdapterTrainLog:
    """Updates only ``xi``. Conditions on gold targets unless ``retrieved_ids`` is given."""
    if not lm.frozen:
        raise ContractError("entity adapter training needs a frozen LM")
    if not examples:
        raise ContractError("no training examples")
    cond_ids = [ex.target_id for ex in examples] if retrieved_ids is None else list(retrieved_ids)
    xi.set_trainable(True)
    opt = Optimizer(xi.parameters(), "adam", lr=lr)
    rng = np.random.default_rng(seed)
    history = AdapterTrainLog()
    try:
        for epoch in range(epochs):
            order = rng.permutation(len(examples))
            total, n = 0.0, 0
            for s in range(0, len(order), batch_size):
                idx = order[s : s + batch_size]
                loss = entity_adapter_loss(xi, lm, tok, [examples[i] for i in idx],
                                           [documents[cond_ids[i]] for i in idx])
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"entity adapter training diverged at epoch {epoch}")
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                n += len(idx)
            history.epoch_losses.append(total / n)
            log.info("entity adapter epoch %d loss %.4f", epoch, history.epoch_losses[-1])
    finally:
        xi.set_trainable(False)
    return history
