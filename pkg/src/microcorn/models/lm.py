"""Tiny pre-norm causal transformer that accepts arbitrary input embeddings."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..datagen import N_TILES
from ..records import CoRExample, MultimodalQuery
from ..tensor import Tensor, functional as F, no_grad
from ..tensor.core import ContractError
from ..tensor.nn import LayerNorm, Linear, Module, Parameter
from ..tensor.optim import Optimizer, clip_grad_norm
from .tokenizer import Tokenizer
from .visual import TileAdapter, split_tiles

log = logging.getLogger(__name__)


class SequenceLengthError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ToyLMConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_sequence: int = 96
    d_ff: int = 256
    adapter_hidden: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


class Block(Module):
    def __init__(self, cfg: ToyLMConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng, std=0.02)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, cfg.d_ff, rng)
        self.ff2 = Linear(cfg.d_ff, d, rng, std=0.02)
        self.n_heads = cfg.n_heads

    def __call__(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        H = self.n_heads
        dh = d // H
        qkv = self.qkv(self.ln1(x))  # (B, T, 3d)
        qkv = F.transpose(F.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
        qkv = F.reshape(qkv, (3, B * H, T, dh))
        q, k, v = (F.index(qkv, i) for i in range(3))
        att = F.causal_attention(q, k, v)
        att = F.reshape(F.transpose(F.reshape(att, (B, H, T, dh)), (0, 2, 1, 3)), (B, T, d))
        x = x + self.proj(att)
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


class ToyLM(Module):
    def __init__(self, cfg: ToyLMConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.tok_emb = Parameter(rng.normal(0.0, 0.1, size=(cfg.vocab_size, cfg.d_model)))
        self.pos_emb = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_sequence, cfg.d_model)))
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.vocab_size, rng, std=0.02)
        self.visual = TileAdapter(cfg.d_model, rng, d_hidden=cfg.adapter_hidden)
        self.frozen = False

    def freeze(self) -> None:
        self.set_trainable(False)
        self.frozen = True

    def embed_tokens(self, ids) -> Tensor:
        return F.embedding(self.tok_emb, ids)

    def __call__(self, emb: Tensor) -> tuple[Tensor, Tensor]:
        """(B, T, d) or (T, d) embeddings -> (logits, final-norm hidden states)."""
        squeeze = emb.ndim == 2
        if squeeze:
            emb = F.reshape(emb, (1,) + emb.shape)
        T = emb.shape[1]
        if T > self.config.max_sequence:
            raise SequenceLengthError(f"sequence length {T} exceeds max_sequence {self.config.max_sequence}")
        if T == 0:
            raise ContractError("empty input sequence")
        x = emb + F.index(self.pos_emb, slice(0, T))
        for block in self.blocks:
            x = block(x)
        hidden = self.ln_f(x)
        logits = self.head(hidden)
        if squeeze:
            logits = F.reshape(logits, logits.shape[1:])
            hidden = F.reshape(hidden, hidden.shape[1:])
        return logits, hidden


def lm_forward(lm: ToyLM, embeddings) -> tuple[Tensor, Tensor]:
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(np.asarray(embeddings, dtype=np.float64))
    return lm(emb)


# --- sequence assembly -----------------------------------------------------
# A sequence is a list of parts.  ``Tok(ids, supervised)`` contributes token
# embeddings; ``Tiles(tiles, adapter)`` contributes one embedding per image
# tile, produced by the named adapter.

@dataclass
class Tok:
    ids: Sequence[int]
    supervised: bool = False


@dataclass
class Tiles:
    tiles: np.ndarray  # (n, tile_dim)
    adapter: str = "native"
    masked: bool = False  # zero the embeddings (ablation)


@dataclass
class SequenceBatch:
    ids: np.ndarray  # (B, T) token ids, PAD at tile and padding slots
    keep: np.ndarray  # (B, T, 1) 1 where a token embedding is used
    targets: np.ndarray  # (B, T) next-token targets, -1 = ignored
    lengths: np.ndarray
    tiles: dict = field(default_factory=dict)  # adapter -> (tiles (M, dim), scatter (B*T, M))


def build_batch(seqs: Sequence[Sequence], pad_id: int) -> SequenceBatch:
    lengths = np.array([sum(len(p.ids) if isinstance(p, Tok) else len(p.tiles) for p in s) for s in seqs])
    B, T = len(seqs), int(lengths.max())
    ids = np.full((B, T), pad_id, dtype=np.int64)
    keep = np.zeros((B, T, 1))
    sup = np.zeros((B, T), dtype=bool)
    tile_rows: dict[str, list] = {}
    tile_pos: dict[str, list] = {}
    for b, seq in enumerate(seqs):
        t = 0
        for part in seq:
            if isinstance(part, Tok):
                n = len(part.ids)
                ids[b, t : t + n] = part.ids
                keep[b, t : t + n] = 1.0
                sup[b, t : t + n] = part.supervised
            else:
                n = len(part.tiles)
                tile_rows.setdefault(part.adapter, []).append(np.asarray(part.tiles))
                weight = 0.0 if part.masked else 1.0
                tile_pos.setdefault(part.adapter, []).extend((b * T + t + i, weight) for i in range(n))
            t += n
    targets = np.full((B, T), -1, dtype=np.int64)
    targets[:, :-1] = np.where(sup[:, 1:], ids[:, 1:], -1)
    tiles = {}
    for name, rows in tile_rows.items():
        stacked = np.concatenate(rows, axis=0)
        scatter = np.zeros((B * T, len(stacked)))
        for m, (row, w) in enumerate(tile_pos[name]):
            scatter[row, m] = w
        tiles[name] = (stacked, scatter)
    return SequenceBatch(ids=ids, keep=keep, targets=targets, lengths=lengths, tiles=tiles)


def batch_embeddings(lm: ToyLM, batch: SequenceBatch, adapters: Mapping[str, Callable]) -> Tensor:
    B, T = batch.ids.shape
    emb = lm.embed_tokens(batch.ids) * batch.keep
    for name, (tiles, scatter) in batch.tiles.items():
        vecs = adapters[name](tiles)  # (M, d)
        placed = F.matmul(Tensor(scatter), vecs)
        emb = emb + F.reshape(placed, (B, T, vecs.shape[-1]))
    return emb


def sequence_loss(lm: ToyLM, batch: SequenceBatch, adapters: Mapping[str, Callable]) -> Tensor:
    logits, _ = lm(batch_embeddings(lm, batch, adapters))
    V = logits.shape[-1]
    return F.softmax_cross_entropy(F.reshape(logits, (-1, V)), batch.targets.reshape(-1), ignore_index=-1)


def prompt_parts(query: MultimodalQuery, tok: Tokenizer) -> list:
    """Query image tiles, instruction + question, then BOS."""
    parts = []
    if query.features is not None and len(query.features):
        parts.append(Tiles(split_tiles(query.features), "native"))
    parts.append(Tok(tok.encode(query.text) + [tok.bos_id]))
    return parts


def extract_hidden_state(lm: ToyLM, tok: Tokenizer, query: MultimodalQuery) -> np.ndarray:
    """Final-norm hidden state at the last prompt position (the BOS slot)."""
    return extract_hidden_states(lm, tok, [query])[0]


def extract_hidden_states(lm: ToyLM, tok: Tokenizer, queries: Sequence[MultimodalQuery], batch_size: int = 128) -> np.ndarray:
    if not queries:
        raise ContractError("no queries given")
    out = np.zeros((len(queries), lm.config.d_model))
    with no_grad():
        for s in range(0, len(queries), batch_size):
            chunk = queries[s : s + batch_size]
            batch = build_batch([prompt_parts(q, tok) for q in chunk], tok.pad_id)
            _, hidden = lm(batch_embeddings(lm, batch, {"native": lm.visual}))
            out[s : s + len(chunk)] = hidden.values[np.arange(len(chunk)), batch.lengths - 1]
    return out


# --- pretraining -----------------------------------------------------------

def pretraining_sequence(ex: CoRExample, doc, tok: Tokenizer, rng: np.random.Generator, pose_words: tuple) -> list:
    """Either plain ``prompt + comment`` or a grounded variant with the target's
    caption and metadata (and, half the time, its pose phrase) after ``IMG``."""
    parts = prompt_parts(ex.query, tok)
    if rng.random() < 0.5:
        ctx = [tok.img_id]
        if rng.random() < 0.5:
            ctx += tok.encode(pose_words)
        ctx += tok.encode(doc.caption) + tok.encode(doc.metadata)
        parts.append(Tok(ctx))
    # targets are the next token, so the last context slot predicts the first comment word
    parts.append(Tok(tok.encode(ex.comment) + [tok.eos_id], supervised=True))
    return parts


@dataclass
class PretrainResult:
    lm: ToyLM
    epoch_losses: list


def pretrain_toy_lm(
    examples: Sequence[CoRExample],
    documents: Mapping[int, object],
    tok: Tokenizer,
    config: ToyLMConfig | None = None,
    epochs: int = 30,
    lr: float = 3e-4,
    batch_size: int = 32,
    seed: int = 0,
    clip: float = 1.0,
) -> PretrainResult:
    """Next-token training on comment tokens; returns the frozen model."""
    if not examples:
        raise ContractError("pretraining corpus is empty")
    from ..datagen import POSES

    config = config or ToyLMConfig(vocab_size=len(tok))
    lm = ToyLM(config, seed=seed)
    opt = Optimizer(lm.parameters(), "adam", lr=lr)
    rng = np.random.default_rng(seed + 1)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        total, n = 0.0, 0
        for s in range(0, len(order), batch_size):
            seqs = []
            for i in order[s : s + batch_size]:
                ex = examples[i]
                doc = documents[ex.target_id]
                seqs.append(pretraining_sequence(ex, doc, tok, rng, POSES[doc.attributes["pose"]]))
            batch = build_batch(seqs, tok.pad_id)
            loss = sequence_loss(lm, batch, {"native": lm.visual})
            if not np.isfinite(loss.item()):
                raise TrainingError(f"pretraining diverged at epoch {epoch}")
            loss.backward()
            clip_grad_norm(opt.params, clip)
            opt.step()
            total += loss.item() * len(seqs)
            n += len(seqs)
        losses.append(total / n)
        log.info("pretrain epoch %d loss %.4f", epoch, losses[-1])
    lm.freeze()
    return PretrainResult(lm=lm, epoch_losses=losses)
