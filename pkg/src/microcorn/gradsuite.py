"""Finite-difference gradient checks for every differentiable op and both adapters."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .datagen import CorpusConfig, build_corpus
from .generator import EntityAdapter, entity_adapter_loss
from .models.encoders import DualEncoder
from .models.lm import ToyLM, ToyLMConfig
from .models.tokenizer import default_tokenizer
from .retriever import RetrieverParams, fuse, info_nce_loss
from .tensor import Tensor, functional as F
from .tensor.gradcheck import check_gradients

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, *shape, low=None):
    v = rng.normal(size=shape)
    if low is not None:
        v = np.abs(v) + low
    return Tensor(v, requires_grad=True)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable, list]]:
    rng = np.random.default_rng(seed)
    cases = {}

    def add(name, build, *leaves):
        wrng = np.random.default_rng(len(cases) + 100)
        weights = []

        def fn():
            out = build(*leaves)
            if out.size == 1:
                return F.sum(out)
            if not weights:
                weights.append(Tensor(wrng.normal(size=out.shape)))
            return F.sum(out * weights[0])

        cases[name] = (fn, list(leaves))

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    add("add (broadcast)", F.add, a, b)
    add("sub (broadcast)", F.sub, _leaf(rng, 3, 4), _leaf(rng, 1, 4))
    add("mul (broadcast)", F.mul, _leaf(rng, 2, 3, 4), _leaf(rng, 3, 1))
    add("div", F.div, _leaf(rng, 3, 4), _leaf(rng, 3, 4, low=0.5))
    add("matmul 2d", F.matmul, _leaf(rng, 5, 3), _leaf(rng, 3, 4))
    add("matmul single row", F.matmul, _leaf(rng, 1, 3), _leaf(rng, 3, 4))
    add("matmul leading dims", F.matmul, _leaf(rng, 2, 5, 3), _leaf(rng, 3, 4))
    add("matmul batched", F.matmul, _leaf(rng, 2, 5, 3), _leaf(rng, 2, 3, 4))
    add("transpose", lambda x: F.transpose(x, (2, 0, 1)), _leaf(rng, 2, 3, 4))
    add("reshape", lambda x: F.reshape(x, (4, 6)), _leaf(rng, 2, 3, 4))
    add("sum axis", lambda x: F.sum(x, axis=1), _leaf(rng, 3, 4))
    add("sum keepdims", lambda x: F.sum(x, axis=0, keepdims=True), _leaf(rng, 3, 4))
    add("mean", lambda x: F.mean(x, axis=-1), _leaf(rng, 3, 4))
    add("exp", F.exp, _leaf(rng, 3, 4))
    add("log", F.log, _leaf(rng, 3, 4, low=0.5))
    add("sigmoid", F.sigmoid, _leaf(rng, 3, 4))
    add("gelu", F.gelu, _leaf(rng, 4, 5))
    add("layer_norm", F.layer_norm, _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6))
    add("softmax", lambda x: F.softmax(x, axis=-1), _leaf(rng, 3, 5))
    targets = np.array([0, 4, 2, -1])
    add("softmax_cross_entropy", lambda x: F.softmax_cross_entropy(x, targets, ignore_index=-1), _leaf(rng, 4, 5))
    add("l2_normalize", F.l2_normalize, _leaf(rng, 3, 5))
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    add("embedding", lambda t: F.embedding(t, ids), _leaf(rng, 4, 3))
    add("index", lambda x: F.index(x, (slice(0, 2), 1)), _leaf(rng, 3, 4))
    add("index (fancy, repeated)", lambda x: F.index(x, np.array([0, 2, 0])), _leaf(rng, 3, 4))
    add("concat", lambda x, y: F.concat([x, y], axis=1), _leaf(rng, 2, 3), _leaf(rng, 2, 2))
    add("stack", lambda x, y: F.stack([x, y], axis=0), _leaf(rng, 2, 3), _leaf(rng, 2, 3))
    add("causal_attention", F.causal_attention, _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 4))
    qe, de = _leaf(rng, 4, 6), _leaf(rng, 4, 6)
    add("info_nce_loss", lambda q, d, s: info_nce_loss(F.l2_normalize(q), F.l2_normalize(d), s),
        qe, de, Tensor(np.array([2.0]), requires_grad=True))
    return cases


def model_cases(seed: int = 0) -> dict[str, tuple[Callable, list]]:
    """Both adapters at the default toy sizes; the LM stays frozen."""
    tok = default_tokenizer()
    corpus = build_corpus(CorpusConfig(n_documents=256, n_train=16, n_test=8, n_golden=0, seed=seed + 11))
    docs = {d.id: d for d in corpus.documents}
    ex = corpus.train[:2]
    lm = ToyLM(ToyLMConfig(vocab_size=len(tok)), seed=seed)
    lm.freeze()
    rng = np.random.default_rng(seed)
    # perturb the copy away from the native weights so every layer has signal
    xi = EntityAdapter.from_native(lm)
    for p in xi.parameters():
        p.values += rng.normal(0.0, 0.05, size=p.shape)
    xi.set_trainable(True)
    cases = {
        "entity adapter through frozen LM": (
            lambda: entity_adapter_loss(xi, lm, tok, ex[:1], [docs[ex[0].target_id]]), xi.parameters()),
    }
    enc = DualEncoder(len(tok), rng)
    params = RetrieverParams(enc, lm.config.d_model, rng)
    params.fusion_logit.values[:] = 0.3
    params.set_trainable(True)
    hidden = rng.normal(size=(4, lm.config.d_model))
    qtok = [tok.encode(e.query.text) for e in corpus.train[:4]]
    qfeat = np.stack([e.query.features for e in corpus.train[:4]])
    dfeat = np.stack([docs[e.target_id].features for e in corpus.train[:4]])
    dtok = [tok.encode(docs[e.target_id].caption) for e in corpus.train[:4]]

    def fused_loss():
        q = fuse(params, hidden, qtok, qfeat)
        d = params.encoder.encode(dtok, dfeat)
        return info_nce_loss(q, d, params.encoder.scale())

    cases["hidden-state adapter + fusion + encoders"] = (fused_loss, params.parameters())
    return cases


def run_suite(seed: int = 0, max_coords: int = 64) -> list[CheckResult]:
    results = []
    for name, (fn, leaves) in op_cases(seed).items():
        results.append(CheckResult(name, check_gradients(fn, leaves, STEP)))
    rng = np.random.default_rng(seed)
    for name, (fn, leaves) in model_cases(seed).items():
        results.append(CheckResult(name, check_gradients(fn, leaves, STEP, max_coords=max_coords, rng=rng)))
    return results


def main_report(seed: int = 0) -> tuple[bool, str]:
    start = time.perf_counter()
    results = run_suite(seed)
    worst = max(r.max_rel_error for r in results)
    lines = [f"{r.name:<42} {r.max_rel_error:.3e} {'ok' if r.ok else 'FAIL'}" for r in results]
    lines.append(f"max relative error {worst:.3e} over {len(results)} checks in {time.perf_counter() - start:.1f}s")
    return worst < TOLERANCE, "\n".join(lines)
