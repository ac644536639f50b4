"""Retrieval and commenting metrics over closed-vocabulary token sequences."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .tensor.core import ContractError

BLEU_EPS = 1e-9


@dataclass(frozen=True)
class RetrievalResult:
    query_id: int
    ranked: tuple
    target: int

    def __post_init__(self):
        if len(set(self.ranked)) != len(self.ranked):
            raise ValueError(f"query {self.query_id}: duplicate ids in ranked list")


@dataclass(frozen=True)
class CommentPair:
    query_id: int
    hypothesis: tuple
    reference: tuple


def recall_at_k(results: Sequence[RetrievalResult], k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    if not results:
        raise ContractError("recall_at_k on an empty result list")
    return sum(r.target in r.ranked[:k] for r in results) / len(results)


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _overlap(hyp: Counter, ref: Counter) -> int:
    return sum(min(c, ref[g]) for g, c in hyp.items())


def bleu(pairs: Sequence[CommentPair], max_n: int = 4) -> float:
    """Corpus BLEU with uniform weights and brevity penalty.

    A zero modified precision (including an order with no hypothesis n-grams)
    is replaced by ``BLEU_EPS`` so the geometric mean stays defined.
    """
    if not pairs:
        raise ContractError("bleu on an empty pair list")
    hyp_len = sum(len(p.hypothesis) for p in pairs)
    ref_len = sum(len(p.reference) for p in pairs)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        match = total = 0
        for p in pairs:
            h = ngrams(p.hypothesis, n)
            match += _overlap(h, ngrams(p.reference, n))
            total += sum(h.values())
        prec = match / total if match else BLEU_EPS
        log_sum += math.log(prec) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum)


def _f1(hyp: Counter, ref: Counter) -> float:
    common = _overlap(hyp, ref)
    if common == 0:
        return 0.0
    precision = common / sum(hyp.values())
    recall = common / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


def rouge_n(pairs: Sequence[CommentPair], n: int = 1) -> float:
    """Mean per-pair F-measure of clipped n-gram overlap."""
    if not pairs:
        raise ContractError("rouge_n on an empty pair list")
    return sum(_f1(ngrams(p.hypothesis, n), ngrams(p.reference, n)) for p in pairs) / len(pairs)


def token_f1(pairs: Sequence[CommentPair]) -> float:
    """Mean harmonic mean of unigram multiset precision and recall."""
    if not pairs:
        raise ContractError("token_f1 on an empty pair list")
    return sum(_f1(Counter(p.hypothesis), Counter(p.reference)) for p in pairs) / len(pairs)


def exact_match(pairs: Sequence[CommentPair]) -> float:
    if not pairs:
        raise ContractError("exact_match on an empty pair list")
    return sum(tuple(p.hypothesis) == tuple(p.reference) for p in pairs) / len(pairs)


def comment_metrics(pairs: Sequence[CommentPair]) -> dict:
    return {
        "token_f1": token_f1(pairs),
        "bleu": bleu(pairs),
        "rouge1": rouge_n(pairs, 1),
        "rouge2": rouge_n(pairs, 2),
        "exact_match": exact_match(pairs),
    }


def retrieval_metrics(results: Sequence[RetrievalResult], ks: Sequence[int] = (1, 5, 10)) -> dict:
    return {f"recall@{k}": recall_at_k(results, k) for k in ks}
