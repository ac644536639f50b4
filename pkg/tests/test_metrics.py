import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from microcorn.metrics import (
    BLEU_EPS,
    CommentPair,
    RetrievalResult,
    bleu,
    comment_metrics,
    exact_match,
    recall_at_k,
    retrieval_metrics,
    rouge_n,
    token_f1,
)
from microcorn.report import emit_report, ordering_flags, read_report
from microcorn.tensor.core import ContractError


def pair(hyp, ref, qid=0):
    return CommentPair(qid, tuple(hyp.split()), tuple(ref.split()))


words = st.lists(st.sampled_from("abcdef"), min_size=1, max_size=12)


class TestRecall:
    def test_endpoints(self):
        hit = [RetrievalResult(i, (i, 9, 8), i) for i in range(4)]
        miss = [RetrievalResult(i, (7, 9, 8), i) for i in range(4)]
        assert recall_at_k(hit, 1) == 1.0
        assert all(recall_at_k(miss, k) == 0.0 for k in (1, 2, 3))

    def test_contracts(self):
        with pytest.raises(ContractError):
            recall_at_k([], 1)
        with pytest.raises(ValueError):
            recall_at_k([RetrievalResult(0, (1,), 1)], 0)
        with pytest.raises(ValueError):
            RetrievalResult(0, (1, 1), 1)

    @given(st.integers(0, 2**32 - 1))
    def test_counting_oracle_and_monotone(self, seed):
        r = np.random.default_rng(seed)
        results = [
            RetrievalResult(i, tuple(int(x) for x in r.permutation(20)[:10]), int(r.integers(20)))
            for i in range(int(r.integers(1, 30)))
        ]
        prev = 0.0
        for k in range(1, 11):
            direct = 0
            for res in results:
                for doc in res.ranked[:k]:
                    if doc == res.target:
                        direct += 1
                        break
            got = recall_at_k(results, k)
            assert got == direct / len(results) and got >= prev
            prev = got

    def test_metric_names(self):
        out = retrieval_metrics([RetrievalResult(0, tuple(range(10)), 4)], (1, 5, 10))
        assert out == {"recall@1": 0.0, "recall@5": 1.0, "recall@10": 1.0}


class TestBleu:
    def test_identity_and_disjoint(self):
        assert bleu([pair("a b c d e", "a b c d e"), pair("x y z w", "x y z w")]) == pytest.approx(1.0, abs=1e-12)
        assert bleu([pair("a b c d", "e f g h")]) < 1e-8

    def test_short_hypothesis_hand_count(self):
        p = [pair("the cat sat", "the cat sat down")]
        bp = math.exp(1 - 4 / 3)
        # 1-, 2-, 3-gram precisions are 3/3, 2/2, 1/1; there are no 4-grams
        assert abs(bleu(p, max_n=3) - bp) < 1e-9
        assert abs(bleu(p) - bp * BLEU_EPS ** 0.25) < 1e-9

    def test_clipping(self):
        # "the the the" vs "the cat": clipped unigram match 1 of 3
        p = [pair("the the the", "the cat")]
        assert abs(bleu(p, max_n=1) - 1 / 3) < 1e-9

    def test_empty_hypothesis(self):
        assert bleu([CommentPair(0, (), ("a",))]) == 0.0


class TestRougeAndF1:
    def test_hand_counts(self):
        p = [pair("a b c d", "a b d")]
        assert abs(rouge_n(p, 1) - 6 / 7) < 1e-9
        assert abs(rouge_n(p, 2) - 0.4) < 1e-9

    def test_multiset_f1(self):
        assert abs(token_f1([pair("a a b", "a b b")]) - 2 / 3) < 1e-9

    def test_extremes(self):
        same, apart = [pair("a b c", "a b c")], [pair("a b", "c d")]
        for fn in (token_f1, lambda p: rouge_n(p, 1), lambda p: rouge_n(p, 2), exact_match):
            assert fn(same) == 1.0 and fn(apart) == 0.0

    @given(words, words)
    def test_bounds_and_symmetry(self, h, r):
        fwd, back = [CommentPair(0, tuple(h), tuple(r))], [CommentPair(0, tuple(r), tuple(h))]
        for value in comment_metrics(fwd).values():
            assert 0.0 <= value <= 1.0 + 1e-12
        assert token_f1(fwd) == token_f1(back) and exact_match(fwd) == exact_match(back)

    def test_empty_lists(self):
        for fn in (bleu, token_f1, exact_match, lambda p: rouge_n(p, 1)):
            with pytest.raises(ContractError):
                fn([])


RETRIEVAL = {
    "fused": {"recall@10": 0.9, "recall@1": 0.7, "recall@5": 0.8},
    "zero-shot": {"recall@1": 0.1, "recall@5": 0.2, "recall@10": 0.3},
    "w/o adapter": {"recall@1": 0.5, "recall@5": 0.6, "recall@10": 0.7},
}
COMMENTING = {
    "oracle": {"token_f1": 0.95, "bleu": 0.9, "rouge1": 0.95, "rouge2": 0.9, "exact_match": 0.8},
    "unicorn": {"token_f1": 0.9, "bleu": 0.8, "rouge1": 0.9, "rouge2": 0.85, "exact_match": 0.6},
    "rag": {"token_f1": 0.7, "bleu": 0.6, "rouge1": 0.7, "rouge2": 0.6, "exact_match": 0.1},
    "no-retrieval": {"token_f1": 0.6, "bleu": 0.65, "rouge1": 0.6, "rouge2": 0.5, "exact_match": 0.0},
}


class TestReport:
    def test_round_trip(self, tmp_path):
        emit_report(tmp_path, RETRIEVAL, COMMENTING)
        ret, com, flags = read_report(tmp_path / "report.jsonl")
        assert ret == RETRIEVAL and com == COMMENTING
        assert flags == ordering_flags(RETRIEVAL, COMMENTING)

    def test_stable_order(self, tmp_path):
        emit_report(tmp_path / "a", RETRIEVAL, COMMENTING)
        shuffled_r = dict(reversed(list(RETRIEVAL.items())))
        shuffled_c = {k: dict(reversed(list(v.items()))) for k, v in reversed(list(COMMENTING.items()))}
        emit_report(tmp_path / "b", shuffled_r, shuffled_c)
        for name in ("report.jsonl", "report.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rows = [json.loads(line) for line in (tmp_path / "a" / "report.jsonl").read_text().splitlines()]
        assert [r["row"] for r in rows[:7]] == ["zero-shot", "w/o adapter", "fused", "no-retrieval", "rag", "unicorn", "oracle"]
        assert list(rows[0])[2:] == ["recall@1", "recall@5", "recall@10"]

    def test_flags_on_crafted_inputs(self):
        flags = ordering_flags(RETRIEVAL, COMMENTING)
        assert flags["unicorn > rag (token_f1)"] is True
        assert flags["rag > no-retrieval (bleu)"] is False  # 0.6 < 0.65
        assert flags["oracle >= unicorn - 0.01 (token_f1)"] is True
        tight = {**COMMENTING, "oracle": {**COMMENTING["oracle"], "token_f1": 0.885}}
        assert ordering_flags({}, tight)["oracle >= unicorn - 0.01 (token_f1)"] is False

    def test_missing_rows_omit_flags(self):
        assert ordering_flags({"fused": RETRIEVAL["fused"]}, {}) == {}

    def test_needs_a_block(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(tmp_path)

    def test_text_table(self, tmp_path):
        emit_report(tmp_path, RETRIEVAL, None)
        text = (tmp_path / "report.txt").read_text()
        assert text.startswith("[retrieval]") and "fused" in text and "[commenting]" not in text
