import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microcorn.datagen import (
    BLOCKS,
    CATEGORIES,
    COLORS,
    FEATURE_DIM,
    PATTERNS,
    RELATIONS,
    SIZES,
    STAGES,
    TILE_DIM,
    CorpusConfig,
    DatasetError,
    HABITAT_NAMES,
    POSE_NAMES,
    apply_relation,
    build_corpus,
    clean_image,
    comment_for,
    corpus_words,
    decode_image,
    file_digest,
    load_dataset,
    render_image,
    reconstructible,
    write_dataset,
)
from microcorn.records import EntityRecord

SMALL_DIGEST = "a9d0f08341bc11c22cdde80c788f1012085e88acf465912d51c14c303a2ee5db"

entities = st.builds(
    EntityRecord,
    id=st.integers(0, 10_000),
    group=st.just(0),
    category=st.sampled_from(CATEGORIES),
    color=st.sampled_from(COLORS),
    size=st.sampled_from(SIZES),
    stage=st.sampled_from(STAGES),
    pattern=st.sampled_from(PATTERNS),
    pose=st.sampled_from(POSE_NAMES),
    habitat=st.sampled_from(HABITAT_NAMES),
)


class TestImages:
    @given(entities, st.integers(0, 2**31))
    @settings(max_examples=50)
    def test_deterministic(self, e, seed):
        np.testing.assert_array_equal(render_image(e, seed), render_image(e, seed))

    def test_color_change_touches_only_color_block(self):
        a = EntityRecord(0, 0, "fox", "red", "small", "adult", "plain", "sitting", "forest")
        b = EntityRecord(0, 0, "fox", "blue", "small", "adult", "plain", "sitting", "forest")
        diff = np.flatnonzero(clean_image(a) != clean_image(b))
        _, tile, offset, values = next(blk for blk in BLOCKS if blk[0] == "color")
        start = tile * TILE_DIM + offset
        assert diff.min() >= start and diff.max() < start + len(values)

    def test_decode_ten_thousand_renders(self):
        rng = np.random.default_rng(0)
        for i in range(10_000):
            e = EntityRecord(
                i, 0, CATEGORIES[rng.integers(16)], COLORS[rng.integers(8)], SIZES[rng.integers(3)],
                STAGES[rng.integers(2)], PATTERNS[rng.integers(3)], POSE_NAMES[rng.integers(4)],
                HABITAT_NAMES[rng.integers(4)],
            )
            x = render_image(e, int(rng.integers(2**31)))
            assert x.shape == (FEATURE_DIM,)
            assert decode_image(x) == e.attributes()


class TestCorpus:
    def test_counts(self, small_corpus):
        assert len(small_corpus.documents) == 384
        assert len(small_corpus.train) == 96
        assert len(small_corpus.test) == 32 and len(small_corpus.golden) == 8

    def test_referential_integrity(self, small_corpus, small_docs):
        assert all(ex.target_id in small_docs for ex in small_corpus.examples)

    def test_splits_disjoint_by_query_entity(self, small_corpus):
        train = {ex.query_entity for ex in small_corpus.train}
        test = {ex.query_entity for ex in small_corpus.test}
        assert not train & test

    def test_test_targets_never_seen_in_train(self, small_corpus):
        train = {ex.query_entity for ex in small_corpus.train} | {ex.target_id for ex in small_corpus.train}
        assert not train & {ex.target_id for ex in small_corpus.test}

    def test_unique_target(self, small_corpus):
        by_id = {e.id: e for e in small_corpus.entities}
        for ex in small_corpus.examples:
            q = by_id[ex.query_entity]
            matches = [
                e for e in small_corpus.entities
                if _satisfies(q, e, ex.relation, ex.query.question)
            ]
            assert [m.id for m in matches] == [ex.target_id]

    def test_stage_change_inverse(self, small_corpus):
        by_id = {e.id: e for e in small_corpus.entities}
        by_key = {e.key: e for e in small_corpus.entities}
        checked = 0
        for e in small_corpus.entities:
            if e.stage != "juvenile":
                continue
            t = apply_relation(e, "stage-change", {"target": "adult"}, by_key)
            if t is None:
                continue
            checked += 1
            assert (t.group, t.category, t.color, t.size, t.stage) == (e.group, e.category, e.color, e.size, "adult")
            assert apply_relation(t, "stage-change", {"target": "juvenile"}, by_key) is by_id[e.id]
        assert checked > 0

    def test_complementarity(self, small_corpus):
        for ex in small_corpus.examples:
            assert not set(ex.comment) <= set(ex.query.question)

    def test_golden_is_reconstructible_subset_of_test(self, small_corpus):
        by_id = {e.id: e for e in small_corpus.entities}
        assert all(reconstructible(ex, by_id) for ex in small_corpus.golden)
        assert {ex.id for ex in small_corpus.golden} <= {ex.id for ex in small_corpus.test}

    def test_vocabulary_covers_every_text(self, small_corpus, tok):
        for ex in small_corpus.examples:
            tok.encode(ex.comment + ex.query.text)
        assert len(set(corpus_words())) == len(corpus_words())

    def test_comment_layout(self):
        q = EntityRecord(0, 0, "fox", "red", "small", "adult", "plain", "sitting", "forest")
        t = EntityRecord(1, 0, "owl", "red", "small", "adult", "plain", "eating", "river")
        assert comment_for(q, t, "same-group-other-category") == (
            "red", "small", "adult", "owl", "plain", "eats", "fresh", "berries",
            "near", "muddy", "river", "banks", "kin", "of", "fox",
        )

    def test_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            build_corpus(CorpusConfig(n_test=4, n_golden=8))


def _satisfies(q, e, relation, question):
    same = lambda *names: all(getattr(q, n) == getattr(e, n) for n in names)  # noqa: E731
    if relation == "stage-change":
        return same("category", "color", "size", "pattern") and e.stage == question[2] != q.stage
    if relation == "color-change":
        return same("category", "size", "stage", "pattern") and e.color == question[3] != q.color
    if relation == "size-change":
        return same("category", "color", "stage", "pattern") and e.size == question[2] != q.size
    i = CATEGORIES.index(q.category)
    return same("color", "size", "stage", "pattern") and e.category == CATEGORIES[i ^ 1]


class TestFiles:
    def test_round_trip(self, small_corpus, tmp_path):
        write_dataset(small_corpus, tmp_path)
        back = load_dataset(tmp_path)
        assert [d.id for d in back.documents] == sorted(d.id for d in small_corpus.documents)
        orig = {ex.id: ex for ex in small_corpus.examples}
        for ex in back.examples:
            o = orig[ex.id]
            assert (ex.comment, ex.target_id, ex.split, ex.relation) == (o.comment, o.target_id, o.split, o.relation)
            assert ex.query.question == o.query.question
            np.testing.assert_array_equal(ex.query.features, o.query.features)
        assert back.entities == small_corpus.entities

    def test_lf_and_utf8(self, small_corpus, tmp_path):
        write_dataset(small_corpus, tmp_path)
        raw = (tmp_path / "examples.jsonl").read_bytes()
        assert b"\r\n" not in raw
        assert set(json.loads(raw.decode("utf-8").splitlines()[0])) >= {"id", "query_features", "question", "target_id", "comment", "split"}

    def test_truncated_file_names_line(self, small_corpus, tmp_path):
        write_dataset(small_corpus, tmp_path)
        path = tmp_path / "examples.jsonl"
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:5] + [lines[5][:40]]) + "\n")
        with pytest.raises(DatasetError, match=r"examples\.jsonl:6"):
            load_dataset(tmp_path)

    def test_digest_frozen(self, tmp_path):
        cfg = CorpusConfig(n_documents=384, n_train=96, n_test=32, n_golden=8, seed=3)
        write_dataset(build_corpus(cfg), tmp_path / "a")
        write_dataset(build_corpus(cfg), tmp_path / "b")
        assert file_digest(tmp_path / "a") == file_digest(tmp_path / "b") == SMALL_DIGEST


@pytest.mark.parametrize("relation", RELATIONS)
def test_every_relation_is_present(small_corpus, relation):
    assert any(ex.relation == relation for ex in small_corpus.examples)
