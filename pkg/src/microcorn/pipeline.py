"""Pipeline stages with on-disk artifacts under one output directory."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import datagen
from .config import RunConfig
from .generator import MODES, EntityAdapter, Generator, train_entity_adapter
from .metrics import CommentPair, RetrievalResult, comment_metrics, retrieval_metrics
from .models.encoders import DualEncoder
from .models.lm import ToyLM, ToyLMConfig, pretrain_toy_lm
from .models.tokenizer import Tokenizer, default_tokenizer
from .records import MultimodalQuery
from .report import emit_report
from .retriever import (
    BETA_MODES,
    EmbeddingIndex,
    Retriever,
    RetrieverParams,
    build_index,
    make_retrieval_data,
    retrieve,
    train_encoders,
    train_retriever_stage1,
    train_retriever_stage2,
)
from .tensor import checkpoint
from .tensor.checkpoint import CheckpointError

log = logging.getLogger(__name__)

LM_FIELDS = ("vocab_size", "n_layers", "d_model", "n_heads", "max_sequence", "d_ff", "adapter_hidden")
RETRIEVAL_VARIANTS = {"zero-shot": "encoders.ucrn", "w/o adapter": "retriever_no_adapter.ucrn", "fused": "retriever.ucrn"}


class Workspace:
    """Artifact paths and (de)serialization for one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.out_dir

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"missing artifact {p} (run the producing command first)")
        return p

    # dataset and vocabulary

    def corpus(self) -> datagen.Corpus:
        self.require("data/examples.jsonl")
        return datagen.load_dataset(self.path("data"))

    def tokenizer(self) -> Tokenizer:
        return Tokenizer.load(self.require("vocab.txt"))

    # models

    def save_lm(self, lm: ToyLM, name: str = "lm.ucrn") -> None:
        rec = dict(lm.state_dict())
        rec["config"] = np.array([getattr(lm.config, f) for f in LM_FIELDS], dtype=np.float64)
        checkpoint.save(self.path(name), rec)

    def lm(self, name: str = "lm.ucrn") -> ToyLM:
        rec = checkpoint.load(self.require(name))
        cfg = ToyLMConfig(**{f: int(v) for f, v in zip(LM_FIELDS, rec.pop("config"))})
        lm = ToyLM(cfg)
        lm.load_state_dict(rec)
        lm.freeze()
        return lm

    def save_encoder(self, enc: DualEncoder, name: str = "encoders.ucrn") -> None:
        rec = {f"encoder.{k}": v for k, v in enc.state_dict().items()}
        rec["encoder_config"] = np.array([enc.vocab_size, enc.e], dtype=np.float64)
        checkpoint.save(self.path(name), rec)

    def _encoder_from(self, rec: dict) -> DualEncoder:
        vocab, e = (int(v) for v in rec.pop("encoder_config"))
        enc = DualEncoder(vocab, np.random.default_rng(0), e=e)
        enc.load_state_dict({k[len("encoder."):]: rec.pop(k) for k in list(rec) if k.startswith("encoder.")})
        return enc

    def encoder(self, name: str = "encoders.ucrn") -> DualEncoder:
        return self._encoder_from(checkpoint.load(self.require(name)))

    def save_retriever(self, params: RetrieverParams, name: str) -> None:
        rec = dict(params.state_dict())
        rec["encoder_config"] = np.array([params.encoder.vocab_size, params.encoder.e], dtype=np.float64)
        rec["beta_mode"] = np.array([BETA_MODES.index(params.beta_mode)], dtype=np.float64)
        checkpoint.save(self.path(name), rec)

    def retriever_params(self, name: str) -> RetrieverParams:
        rec = checkpoint.load(self.require(name))
        if "adapter.fc1.weight" not in rec:
            # an encoder-only checkpoint is the zero-shot retriever
            params = RetrieverParams(self._encoder_from(rec), 1, np.random.default_rng(0))
            params.beta_mode = "zero"
            return params
        vocab, e = (int(v) for v in rec.pop("encoder_config"))
        mode = BETA_MODES[int(rec.pop("beta_mode")[0])]
        enc = DualEncoder(vocab, np.random.default_rng(0), e=e)
        params = RetrieverParams(enc, rec["adapter.fc1.weight"].shape[0], np.random.default_rng(0))
        params.load_state_dict(rec)
        params.beta_mode = mode
        return params

    def save_adapter(self, xi: EntityAdapter, name: str = "entity_adapter.ucrn") -> None:
        checkpoint.save(self.path(name), xi.state_dict())

    def adapter(self, lm: ToyLM, name: str = "entity_adapter.ucrn") -> EntityAdapter:
        xi = EntityAdapter.from_native(lm)
        xi.load_state_dict(checkpoint.load(self.require(name)))
        return xi

    def file_digest(self, name: str) -> str:
        return checkpoint.digest(checkpoint.load(self.require(name)))

    def write_json(self, name: str, obj) -> None:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def read_json(self, name: str, default=None):
        p = self.path(name)
        if not p.exists():
            return default
        return json.loads(p.read_text(encoding="utf-8"))


def _seed(cfg: RunConfig, offset: int) -> int:
    return cfg.seed * 100 + offset


# --- stages ----------------------------------------------------------------

def run_datagen(ws: Workspace) -> dict:
    c = ws.cfg
    corpus = datagen.build_corpus(datagen.CorpusConfig(
        n_documents=c["data.n_documents"], n_train=c["data.n_train"], n_test=c["data.n_test"],
        n_golden=c["data.n_golden"], noise_rate=c["data.noise_rate"], seed=c.seed,
    ))
    datagen.write_dataset(corpus, ws.path("data"))
    ws.root.mkdir(parents=True, exist_ok=True)
    default_tokenizer().save(ws.path("vocab.txt"))
    return {"documents": len(corpus.documents), "train": len(corpus.train), "test": len(corpus.test),
            "golden": len(corpus.golden), "skipped": corpus.skipped}


def run_pretrain(ws: Workspace) -> dict:
    c, corpus, tok = ws.cfg, ws.corpus(), ws.tokenizer()
    lm_cfg = ToyLMConfig(vocab_size=len(tok), n_layers=c["lm.n_layers"], d_model=c["lm.d_model"],
                         n_heads=c["lm.n_heads"], max_sequence=c["lm.max_sequence"], d_ff=c["lm.d_ff"])
    docs = {d.id: d for d in corpus.documents}
    res = pretrain_toy_lm(corpus.train, docs, tok, lm_cfg, epochs=c["pretrain.epochs"], lr=c["pretrain.lr"],
                          batch_size=c["pretrain.batch_size"], seed=_seed(c, 1))
    ws.save_lm(res.lm)
    return {"first_loss": res.epoch_losses[0], "last_loss": res.epoch_losses[-1]}


def run_train_encoders(ws: Workspace) -> dict:
    c, corpus, tok = ws.cfg, ws.corpus(), ws.tokenizer()
    enc = DualEncoder(len(tok), np.random.default_rng(_seed(c, 2)), e=c["encoder.e"])
    hist = train_encoders(enc, corpus.documents, tok, epochs=c["encoders.epochs"], lr=c["encoders.lr"],
                          batch_size=c["encoders.batch_size"], seed=_seed(c, 3))
    ws.save_encoder(enc)
    return {"first_loss": hist.epoch_losses[0], "last_loss": hist.epoch_losses[-1]}


def run_train_retriever(ws: Workspace, stage: int) -> dict:
    c, corpus, tok = ws.cfg, ws.corpus(), ws.tokenizer()
    lm = ws.lm()
    docs = {d.id: d for d in corpus.documents}
    data = make_retrieval_data(corpus.train, docs, tok, lm)
    if stage == 1:
        params = RetrieverParams(ws.encoder(), lm.config.d_model, np.random.default_rng(_seed(c, 4)))
        lm_before = ws.file_digest("lm.ucrn")
        groups = params.frozen_groups()
        locked_before = checkpoint.digest({**groups["encoder"], **groups["fusion"]})
        hist = train_retriever_stage1(params, data, epochs=c["stage1.epochs"], lr=c["stage1.lr"],
                                      batch_size=c["stage1.batch_size"], seed=_seed(c, 5))
        groups = params.frozen_groups()
        ws.save_retriever(params, "retriever_stage1.ucrn")
        freeze = ws.read_json("freeze.json", {})
        freeze["stage1"] = {
            "lm_before": lm_before, "lm_after": ws.file_digest("lm.ucrn"),
            "locked_before": locked_before,
            "locked_after": checkpoint.digest({**groups["encoder"], **groups["fusion"]}),
        }
        ws.write_json("freeze.json", freeze)
        return {"first_loss": hist.epoch_losses[0], "last_loss": hist.epoch_losses[-1]}
    if stage != 2:
        raise ValueError(f"unknown retriever stage {stage}")
    params = ws.retriever_params("retriever_stage1.ucrn")
    hist = train_retriever_stage2(params, data, epochs=c["stage2.epochs"], lr=c["stage2.lr"],
                                  batch_size=c["stage2.batch_size"], seed=_seed(c, 6))
    ws.save_retriever(params, "retriever.ucrn")
    # the same schedule without the hidden-state adapter
    ablation = RetrieverParams(ws.encoder(), lm.config.d_model, np.random.default_rng(_seed(c, 4)))
    ablation.beta_mode = "zero"
    ab = train_retriever_stage2(ablation, data, epochs=c["stage2.epochs"], lr=c["stage2.lr"],
                                batch_size=c["stage2.batch_size"], seed=_seed(c, 6))
    ws.save_retriever(ablation, "retriever_no_adapter.ucrn")
    return {"first_loss": hist.epoch_losses[0], "last_loss": hist.epoch_losses[-1], "beta": params.beta,
            "ablation_last_loss": ab.epoch_losses[-1]}


def run_build_index(ws: Workspace, name: str = "retriever.ucrn", out: str = "index.ucrn") -> dict:
    corpus, tok = ws.corpus(), ws.tokenizer()
    index = build_index(ws.retriever_params(name), tok, corpus.documents)
    index.save(ws.path(out))
    return {"documents": len(index), "params_digest": index.params_digest}


def _retriever(ws: Workspace, name: str, lm: ToyLM, tok: Tokenizer) -> Retriever:
    return Retriever(ws.retriever_params(name), lm, tok)


def run_eval_retrieval(ws: Workspace, ks: tuple | None = None) -> dict:
    ks = tuple(ks or ws.cfg.ks)
    corpus, tok, lm = ws.corpus(), ws.tokenizer(), ws.lm()
    test = corpus.test
    depth = min(max(ks), len(corpus.documents))
    table = {}
    for row, name in RETRIEVAL_VARIANTS.items():
        r = _retriever(ws, name, lm, tok)
        index = build_index(r.params, tok, corpus.documents)
        emb = r.embed_many([ex.query for ex in test])
        results = [RetrievalResult(ex.id, tuple(d for d, _ in retrieve(index, q, depth)), ex.target_id)
                   for ex, q in zip(test, emb)]
        table[row] = retrieval_metrics(results, ks)
    ws.write_json("metrics/retrieval.json", table)
    emit_report(ws.root, table, ws.read_json("metrics/commenting.json"))
    return table


def run_train_entity_adapter(ws: Workspace) -> dict:
    c, corpus, tok, lm = ws.cfg, ws.corpus(), ws.tokenizer(), ws.lm()
    docs = {d.id: d for d in corpus.documents}
    retrieved = None
    if c["adapter.conditioning"] == "retrieved":
        r = _retriever(ws, "retriever.ucrn", lm, tok)
        index = EmbeddingIndex.load(ws.require("index.ucrn"))
        retrieved = [retrieve(index, q, 1)[0][0] for q in r.embed_many([ex.query for ex in corpus.train])]
    frozen = ["lm.ucrn", "encoders.ucrn", "retriever.ucrn"]
    before = {n: ws.file_digest(n) for n in frozen if ws.path(n).exists()}
    xi = EntityAdapter.from_native(lm)
    hist = train_entity_adapter(xi, lm, tok, corpus.train, docs, epochs=c["adapter.epochs"], lr=c["adapter.lr"],
                                batch_size=c["adapter.batch_size"], seed=_seed(c, 7), retrieved_ids=retrieved)
    ws.save_adapter(xi)
    # the in-memory LM must also be untouched, not only the file
    lm_mem = checkpoint.digest(dict(lm.state_dict(), config=np.array(
        [getattr(lm.config, f) for f in LM_FIELDS], dtype=np.float64)))
    freeze = ws.read_json("freeze.json", {})
    freeze["entity_adapter"] = {
        "before": before, "after": {n: ws.file_digest(n) for n in before}, "lm_in_memory": lm_mem,
    }
    ws.write_json("freeze.json", freeze)
    return {"first_loss": hist.epoch_losses[0], "last_loss": hist.epoch_losses[-1]}


def _transcript(ws: Workspace, name: str, rows: list[dict]) -> None:
    p = ws.path(f"transcripts/{name}.jsonl")
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def run_eval_commenting(ws: Workspace, modes: tuple = MODES) -> dict:
    c, corpus, tok, lm = ws.cfg, ws.corpus(), ws.tokenizer(), ws.lm()
    docs = {d.id: d for d in corpus.documents}
    test = corpus.test
    queries = [ex.query for ex in test]
    r = _retriever(ws, "retriever.ucrn", lm, tok)
    index = EmbeddingIndex.load(ws.require("index.ucrn"))
    top = [retrieve(index, q, 1)[0] for q in r.embed_many(queries)]
    xi = ws.adapter(lm) if any(m in ("unicorn", "oracle") for m in modes) else None
    gen = Generator(lm, tok, xi, r, max_new_tokens=c["generate.max_new_tokens"])
    table = ws.read_json("metrics/commenting.json", {}) or {}
    for mode in modes:
        if mode == "oracle":
            conditioning = [(ex.target_id, None) for ex in test]
        elif mode == "no-retrieval":
            conditioning = [(None, None)] * len(test)
        else:
            conditioning = top
        out = gen.run(mode, queries, [docs[d] if d is not None else None for d, _ in conditioning])
        words = [tok.decode(o, strip_special=True) for o in out]
        pairs = [CommentPair(ex.id, tuple(w), tuple(ex.comment)) for ex, w in zip(test, words)]
        table[mode] = comment_metrics(pairs)
        _transcript(ws, mode, [
            {"query_id": ex.id, "retrieved_doc_id": d, "rank1_score": s, "comment": " ".join(w)}
            for ex, (d, s), w in zip(test, conditioning, words)
        ])
    table = {m: table[m] for m in MODES if m in table}
    ws.write_json("metrics/commenting.json", table)
    emit_report(ws.root, ws.read_json("metrics/retrieval.json"), table)
    return table


def load_queries(path) -> list[MultimodalQuery]:
    """Queries from a JSONL file with ``id``, ``question`` and ``query_features`` fields."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append(MultimodalQuery(
                    features=np.asarray(row.get("query_features") or [], dtype=np.float64),
                    question=tuple(row["question"].split()), id=int(row.get("id", lineno)),
                ))
            except (json.JSONDecodeError, KeyError, ValueError) as err:
                raise datagen.DatasetError(f"{Path(path).name}:{lineno}: bad query ({err})") from None
    return out


def run_generate(ws: Workspace, query_file, index_file) -> list[dict]:
    c, corpus, tok, lm = ws.cfg, ws.corpus(), ws.tokenizer(), ws.lm()
    docs = {d.id: d for d in corpus.documents}
    queries = load_queries(query_file)
    index = EmbeddingIndex.load(index_file)
    r = _retriever(ws, "retriever.ucrn", lm, tok)
    if index.params_digest != checkpoint.digest(r.params.state_dict()):
        raise CheckpointError("index was built from different retriever parameters")
    top = [retrieve(index, q, 1)[0] for q in r.embed_many(queries)]
    gen = Generator(lm, tok, ws.adapter(lm), r, max_new_tokens=c["generate.max_new_tokens"])
    out = gen.run("unicorn", queries, [docs[d] for d, _ in top])
    rows = [
        {"query_id": q.id, "retrieved_doc_id": d, "rank1_score": s, "comment": " ".join(tok.decode(o, True))}
        for q, (d, s), o in zip(queries, top, out)
    ]
    _transcript(ws, "generate", rows)
    return rows
