import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microcorn.datagen import corpus_words
from microcorn.models import ToyLM, ToyLMConfig, Tokenizer, extract_hidden_state, lm_forward, split_tiles
from microcorn.models.encoders import INIT_LOGIT_SCALE, DualEncoder, bag_matrix, encode_multimodal
from microcorn.models.lm import SequenceLengthError, Tiles, Tok, build_batch, pretraining_sequence
from microcorn.models.tokenizer import SPECIALS
from microcorn.records import MultimodalQuery
from microcorn.tensor import Tensor, checkpoint, functional as F
from microcorn.tensor.core import ContractError, ShapeError


class TestTokenizer:
    @given(st.lists(st.sampled_from(corpus_words()), max_size=30))
    def test_round_trip(self, words):
        from microcorn.models import default_tokenizer

        tok = default_tokenizer()
        assert tok.decode(tok.encode(words)) == words

    def test_specials_fixed(self, tok):
        assert [tok.pad_id, tok.bos_id, tok.eos_id, tok.img_id, tok.ret_id] == [0, 1, 2, 3, 4]
        assert len(tok) == len(SPECIALS) + len(corpus_words())

    def test_oov(self, tok):
        with pytest.raises(KeyError, match="zebra"):
            tok.encode(["zebra"])

    def test_save_load(self, tok, tmp_path):
        tok.save(tmp_path / "v.txt")
        assert Tokenizer.load(tmp_path / "v.txt").words == tok.words
        (tmp_path / "bad.txt").write_text("fox\n<pad>\n")
        with pytest.raises(ValueError, match="special"):
            Tokenizer.load(tmp_path / "bad.txt")

    def test_strip_special(self, tok):
        assert tok.decode([tok.bos_id, tok.encode(["fox"])[0], tok.eos_id], strip_special=True) == ["fox"]


class TestToyLM:
    def test_logit_rows(self, untrained_lm, rng):
        for T in (1, 5, 17):
            logits, hidden = lm_forward(untrained_lm, rng.normal(size=(T, 64)))
            assert logits.shape == (T, untrained_lm.config.vocab_size) and hidden.shape == (T, 64)

    def test_appending_leaves_earlier_logits_bit_identical(self, untrained_lm, rng):
        emb = rng.normal(size=(12, 64))
        full, _ = lm_forward(untrained_lm, emb)
        for n in (1, 2, 6, 11):
            part, _ = lm_forward(untrained_lm, emb[:n])
            np.testing.assert_array_equal(part.values, full.values[:n])

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 10), st.integers(0, 2**32 - 1))
    def test_suffix_changes_do_not_leak(self, n, seed):
        lm = ToyLM(ToyLMConfig(vocab_size=20, d_model=16, n_heads=2, d_ff=32, max_sequence=16), seed=1)
        r = np.random.default_rng(seed)
        a = r.normal(size=(12, 16))
        b = a.copy()
        b[n:] = r.normal(size=(12 - n, 16))
        np.testing.assert_array_equal(lm_forward(lm, a)[0].values[:n], lm_forward(lm, b)[0].values[:n])

    def test_softmax_rows(self, untrained_lm, rng):
        logits, _ = lm_forward(untrained_lm, rng.normal(size=(9, 64)))
        z = logits.values - logits.values.max(-1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        assert np.abs(p.sum(-1) - 1).max() < 1e-12

    def test_too_long(self, untrained_lm):
        with pytest.raises(SequenceLengthError):
            lm_forward(untrained_lm, np.zeros((97, 64)))

    def test_config_heads_must_divide(self):
        with pytest.raises(ValueError):
            ToyLMConfig(vocab_size=10, d_model=30, n_heads=4)


class TestHiddenState:
    def test_deterministic_and_sized(self, untrained_lm, tok, small_corpus):
        q = small_corpus.test[0].query
        h = extract_hidden_state(untrained_lm, tok, q)
        assert h.shape == (64,)
        np.testing.assert_array_equal(h, extract_hidden_state(untrained_lm, tok, q))

    def test_last_token_matters(self, untrained_lm, tok, small_corpus):
        q = small_corpus.test[0].query
        other = MultimodalQuery(q.features, q.question[:-1] + ("this",))
        assert not np.array_equal(extract_hidden_state(untrained_lm, tok, q), extract_hidden_state(untrained_lm, tok, other))

    def test_batched_matches_single(self, untrained_lm, tok, small_corpus):
        from microcorn.models import extract_hidden_states

        qs = [ex.query for ex in small_corpus.test[:5]]
        many = extract_hidden_states(untrained_lm, tok, qs)
        for q, h in zip(qs, many):
            np.testing.assert_allclose(h, extract_hidden_state(untrained_lm, tok, q), atol=1e-12)


class TestBatching:
    def test_targets_only_on_supervised_tokens(self, tok):
        seq = [Tiles(np.zeros((4, 20))), Tok([5, 6, tok.bos_id]), Tok([7, 8, tok.eos_id], supervised=True)]
        batch = build_batch([seq, [Tok([5, 6, 7])]], tok.pad_id)
        assert batch.lengths.tolist() == [10, 3]
        # position 6 (BOS) predicts the first supervised token
        assert batch.targets[0].tolist() == [-1] * 6 + [7, 8, tok.eos_id, -1]
        assert (batch.targets[1] == -1).all()
        tiles, scatter = batch.tiles["native"]
        assert tiles.shape == (4, 20) and scatter[:4].sum() == 4 and batch.keep[0, :4].sum() == 0

    def test_pretraining_sequence_formats(self, tok, small_corpus, small_docs):
        rng = np.random.default_rng(0)
        ex = small_corpus.train[0]
        doc = small_docs[ex.target_id]
        seen = set()
        for _ in range(40):
            parts = pretraining_sequence(ex, doc, tok, rng, ("sits", "calmly", "upright"))
            assert parts[-1].supervised and parts[-1].ids[-1] == tok.eos_id
            seen.add(len(parts))
        assert seen == {3, 4}

    def test_split_tiles(self):
        assert split_tiles(np.zeros(80)).shape == (4, 20)
        with pytest.raises(ShapeError):
            split_tiles(np.zeros(32))


class TestPretraining:
    def test_loss_falls_and_model_freezes(self, pretrained):
        assert pretrained.epoch_losses[-1] < pretrained.epoch_losses[0]
        assert pretrained.lm.frozen
        assert all(not p.requires_grad for p in pretrained.lm.parameters())

    def test_checkpoint_round_trip_is_byte_stable(self, pretrained, tmp_path):
        state = pretrained.lm.state_dict()
        checkpoint.save(tmp_path / "a.ucrn", state)
        lm = ToyLM(pretrained.lm.config, seed=99)
        lm.load_state_dict(checkpoint.load(tmp_path / "a.ucrn"))
        checkpoint.save(tmp_path / "b.ucrn", lm.state_dict())
        assert (tmp_path / "a.ucrn").read_bytes() == (tmp_path / "b.ucrn").read_bytes()

    def test_empty_corpus(self, tok):
        from microcorn.models import pretrain_toy_lm

        with pytest.raises(ContractError):
            pretrain_toy_lm([], {}, tok, epochs=1)


class TestDualEncoder:
    @pytest.fixture
    def enc(self, tok):
        return DualEncoder(len(tok), np.random.default_rng(0))

    def test_image_only_matches_image_tower(self, enc, small_corpus):
        d = small_corpus.documents[0]
        np.testing.assert_array_equal(
            encode_multimodal(enc, None, d.features, "image-only"),
            enc.image_tower(d.features[None]).values[0],
        )
        np.testing.assert_array_equal(encode_multimodal(enc, [], d.features), enc.image_tower(d.features[None]).values[0])

    def test_unit_norm_and_modes_differ(self, enc, tok, small_corpus):
        d = small_corpus.documents[0]
        ids = tok.encode(d.caption)
        outs = {m: encode_multimodal(enc, ids, d.features, m) for m in ("text-only", "image-only", "both")}
        for v in outs.values():
            assert abs(np.linalg.norm(v) - 1) < 1e-9
        assert not np.allclose(outs["both"], outs["text-only"]) and not np.allclose(outs["both"], outs["image-only"])

    def test_additive_structure(self, enc, tok, small_corpus):
        d = small_corpus.documents[1]
        text, image = enc.encode_parts([tok.encode(d.caption)], d.features[None])
        pre = (text + image).values
        t_only, _ = enc.encode_parts([tok.encode(d.caption)], None, "text-only")
        _, i_only = enc.encode_parts(None, d.features[None], "image-only")
        np.testing.assert_array_equal(pre, t_only.values + i_only.values)
        np.testing.assert_array_equal(enc.encode([tok.encode(d.caption)], d.features[None]).values, F.l2_normalize(Tensor(pre)).values)

    def test_text_tower_is_order_blind(self, enc, tok):
        a = enc.text_tower([tok.encode(["show", "the", "adult", "form"])]).values
        b = enc.text_tower([tok.encode(["form", "adult", "the", "show"])]).values
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_no_modality(self, enc):
        with pytest.raises(ContractError):
            enc.encode([[]], None)

    def test_scale_init_and_clamp(self, enc):
        assert enc.logit_scale.values[0] == pytest.approx(INIT_LOGIT_SCALE)
        enc.logit_scale.values[0] = 10.0
        enc.clamp_scale()
        assert enc.scale().item() == pytest.approx(100.0)

    def test_bag_matrix(self):
        np.testing.assert_array_equal(bag_matrix([[1, 1, 2], []], 3), [[0, 2 / 3, 1 / 3], [0, 0, 0]])
