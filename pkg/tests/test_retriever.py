import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microcorn.models.encoders import DualEncoder
from microcorn.records import EntityDocument, MultimodalQuery
from microcorn.retriever import (
    EmbeddingIndex,
    Retriever,
    RetrieverParams,
    adapt_hidden_state,
    build_index,
    embed_document,
    embed_query,
    fuse,
    info_nce_loss,
    make_retrieval_data,
    retrieve,
    score,
    train_encoders,
    train_retriever_stage1,
    train_retriever_stage2,
)
from microcorn.tensor import Tensor, checkpoint, functional as F
from microcorn.tensor.core import ContractError, ShapeError


@pytest.fixture
def params(tok):
    rng = np.random.default_rng(11)
    return RetrieverParams(DualEncoder(len(tok), rng), 64, rng)


@pytest.fixture(scope="module")
def data(pretrained, small_corpus, small_docs, tok):
    return make_retrieval_data(small_corpus.train, small_docs, tok, pretrained.lm)


def brute_force(emb, ids, q):
    """Exhaustive oracle: python sort on (-score, id)."""
    rows = [(-float(sum(a * b for a, b in zip(e, q))), int(i)) for e, i in zip(emb, ids)]
    return [i for _, i in sorted(rows)]


class TestAdapter:
    def test_zero_weights_give_zero_vector(self, params):
        for p in params.adapter.parameters():
            p.values[...] = 0.0
        out = adapt_hidden_state(params, np.ones(64)).values
        np.testing.assert_array_equal(out, np.zeros((1, 32)))

    def test_unit_norm(self, params, rng):
        out = adapt_hidden_state(params, rng.normal(size=(5, 64))).values
        assert np.abs(np.linalg.norm(out, axis=1) - 1).max() < 1e-9

    def test_wrong_dim(self, params):
        with pytest.raises(ShapeError):
            adapt_hidden_state(params, np.ones(10))


class TestFusion:
    def test_endpoints(self, params, untrained_lm, tok, small_corpus):
        q = small_corpus.test[0].query
        from microcorn.models import extract_hidden_states

        h = extract_hidden_states(untrained_lm, tok, [q])
        toks, feats = [tok.encode(q.text)], q.features[None]
        params.beta_mode = "zero"
        np.testing.assert_array_equal(embed_query(params, untrained_lm, tok, q), params.encoder.encode(toks, feats).values[0])
        params.beta_mode = "one"
        np.testing.assert_array_equal(embed_query(params, untrained_lm, tok, q), adapt_hidden_state(params, h).values[0])

    def test_half_beta_arithmetic(self, params):
        e1, e2 = np.zeros(32), np.zeros(32)
        e1[0], e2[1] = 1.0, 1.0
        beta = params.beta_tensor()
        assert params.beta == 0.5
        pre = (beta * Tensor(e1[None]) + (1.0 - beta) * Tensor(e2[None])).values[0]
        np.testing.assert_array_equal(pre[:3], [0.5, 0.5, 0.0])

    def test_learned_is_normalized_mix(self, params, rng, tok, small_corpus):
        ex = small_corpus.test[0]
        h = rng.normal(size=(1, 64))
        toks, feats = [tok.encode(ex.query.text)], ex.query.features[None]
        mixed = 0.5 * adapt_hidden_state(params, h).values + 0.5 * params.encoder.encode(toks, feats).values
        np.testing.assert_allclose(fuse(params, h, toks, feats).values, mixed / np.linalg.norm(mixed), atol=1e-15)


class TestDocuments:
    def test_empty_caption_is_image_tower(self, params, tok, small_docs):
        d = next(iter(small_docs.values()))
        bare = EntityDocument(id=d.id, features=d.features, caption=())
        np.testing.assert_array_equal(embed_document(params, tok, bare), params.encoder.image_tower(d.features[None]).values[0])

    def test_caption_vs_comment(self, params, tok, small_docs):
        d = copy.copy(next(iter(small_docs.values())))
        d.comment = ("sits", "calmly", "upright", "near", "deep", "pine", "woods")
        assert not np.allclose(embed_document(params, tok, d, "caption"), embed_document(params, tok, d, "comment"))

    def test_id_independent(self, params, tok, small_docs):
        d = next(iter(small_docs.values()))
        other = copy.copy(d)
        other.id = 999_999
        np.testing.assert_array_equal(embed_document(params, tok, d), embed_document(params, tok, other))


class TestScore:
    def test_reference_values(self):
        e = np.eye(3)
        assert score(e[0], e[0]) == 1.0 and score(e[0], e[1]) == 0.0 and score(e[0], -e[0]) == -1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            score(np.ones(2), np.ones(3))


class TestRetrieve:
    def test_exact_row_ranks_first(self, rng):
        emb = F.l2_normalize(Tensor(rng.normal(size=(10, 8)))).values
        index = EmbeddingIndex(emb, np.arange(100, 110))
        top = retrieve(index, emb[3], 1)[0]
        assert top[0] == 103 and top[1] == pytest.approx(1.0, abs=1e-12)

    def test_tie_goes_to_lower_id(self, rng):
        v = rng.normal(size=4)
        index = EmbeddingIndex(np.stack([v, v, -v]), [9, 2, 5])
        assert [i for i, _ in retrieve(index, v, 3)] == [2, 9, 5]

    def test_bad_k_and_empty(self):
        index = EmbeddingIndex(np.eye(2), [0, 1])
        with pytest.raises(ValueError):
            retrieve(index, np.ones(2), 3)
        with pytest.raises(ContractError):
            retrieve(EmbeddingIndex(np.zeros((0, 2)), []), np.ones(2), 1)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 64), st.integers(0, 2**32 - 1), st.booleans())
    def test_brute_force_equivalence(self, n, seed, coarse):
        r = np.random.default_rng(seed)
        # coarse values force many exact ties
        emb = r.integers(-2, 3, size=(n, 6)).astype(float) if coarse else r.normal(size=(n, 6))
        ids = r.permutation(10 * n)[:n]
        q = r.integers(-2, 3, size=6).astype(float) if coarse else r.normal(size=6)
        got = [i for i, _ in retrieve(EmbeddingIndex(emb, ids), q, n)]
        assert got == brute_force(emb, ids, q)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 2**32 - 1), st.integers(-20, 20))
    def test_positive_scaling_keeps_ranking(self, n, seed, power):
        r = np.random.default_rng(seed)
        emb = r.integers(-2, 3, size=(n, 5)).astype(float)
        index = EmbeddingIndex(emb, r.permutation(n))
        q = r.normal(size=5)
        base = [i for i, _ in retrieve(index, q, n)]
        assert [i for i, _ in retrieve(index, q * 2.0**power, n)] == base

    def test_index_round_trip(self, params, tok, small_corpus, tmp_path):
        index = build_index(params, tok, small_corpus.documents)
        index.save(tmp_path / "i.ucrn")
        back = EmbeddingIndex.load(tmp_path / "i.ucrn")
        np.testing.assert_array_equal(back.embeddings, index.embeddings)
        np.testing.assert_array_equal(back.doc_ids, index.doc_ids)
        assert back.params_digest == index.params_digest == checkpoint.digest(params.state_dict())
        assert list(back.doc_ids) == sorted(d.id for d in small_corpus.documents)


class TestInfoNCE:
    def test_uniform_batch_is_log_b(self):
        x = Tensor(np.tile(np.eye(1, 8), (4, 1)))
        assert abs(info_nce_loss(x, x, 1.0).item() - np.log(4)) < 1e-9

    def test_saturated_diagonal(self):
        x = Tensor(np.eye(4))
        assert info_nce_loss(x, x, 1e4).item() < 1e-12

    def test_matches_direct_oracle(self, rng):
        q, d = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        s = 3.0 * q @ d.T

        def xent(m):
            return np.mean([np.log(np.exp(row).sum()) - row[i] for i, row in enumerate(m)])

        want = 0.5 * (xent(s) + xent(s.T))
        assert abs(info_nce_loss(Tensor(q), Tensor(d), 3.0).item() - want) < 1e-9

    def test_contracts(self):
        with pytest.raises(ContractError):
            info_nce_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), 1.0)
        with pytest.raises(ShapeError):
            info_nce_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 1.0)


class TestTraining:
    def test_stage1_touches_only_adapter(self, params, data, small_docs, tok, pretrained, small_corpus):
        before = {k: checkpoint.digest(v) for k, v in params.frozen_groups().items()}
        targets = np.stack([embed_document(params, tok, small_docs[ex.target_id]) for ex in small_corpus.train])

        def mean_cos():
            return float((adapt_hidden_state(params, data.hidden).values * targets).sum(1).mean())

        cos_before = mean_cos()
        log = train_retriever_stage1(params, data, epochs=6, batch_size=16)
        after = {k: checkpoint.digest(v) for k, v in params.frozen_groups().items()}
        assert after["encoder"] == before["encoder"] and after["fusion"] == before["fusion"]
        assert after["adapter"] != before["adapter"]
        assert log.epoch_losses[-1] < log.epoch_losses[0]
        assert mean_cos() > cos_before
        assert all(not p.requires_grad for p in params.parameters())

    def test_stage2_moves_beta_and_is_repeatable(self, tok, data):
        def run():
            rng = np.random.default_rng(11)
            p = RetrieverParams(DualEncoder(len(tok), rng), 64, rng)
            train_retriever_stage2(p, data, epochs=2, batch_size=16)
            return p

        a, b = run(), run()
        assert a.fusion_logit.values[0] != 0.0
        assert checkpoint.records_to_bytes(a.state_dict()) == checkpoint.records_to_bytes(b.state_dict())

    def test_zero_mode_trains_encoder_only(self, params, data):
        params.beta_mode = "zero"
        before = checkpoint.digest(params.frozen_groups()["adapter"])
        train_retriever_stage2(params, data, epochs=1, batch_size=16)
        assert checkpoint.digest(params.frozen_groups()["adapter"]) == before
        assert params.fusion_logit.values[0] == 0.0

    def test_stage1_needs_hidden(self, params, small_corpus, small_docs, tok):
        with pytest.raises(ContractError):
            train_retriever_stage1(params, make_retrieval_data(small_corpus.train, small_docs, tok))

    def test_encoder_training_aligns_towers(self, tok, small_corpus):
        enc = DualEncoder(len(tok), np.random.default_rng(0))
        log = train_encoders(enc, small_corpus.documents, tok, epochs=3)
        assert log.epoch_losses[-1] < log.epoch_losses[0]
        assert enc.logit_scale.values[0] <= np.log(100.0)


def test_retriever_facade(params, pretrained, tok, small_corpus):
    r = Retriever(params, pretrained.lm, tok)
    index = build_index(params, tok, small_corpus.documents)
    qs = [ex.query for ex in small_corpus.test[:4]]
    many = r.embed_many(qs)
    for q, row in zip(qs, many):
        np.testing.assert_allclose(r.embed(q), row, atol=1e-12)
    hits = r.retrieve(qs[0], index, 5)
    assert len(hits) == 5 and hits[0][1] >= hits[-1][1]
    with pytest.raises(ValueError):
        MultimodalQuery(None, ())
