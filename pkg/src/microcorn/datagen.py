"""Deterministic synthetic Micro-CoR corpus.

Entities are animals described by identity attributes (category, color,
size, stage, pattern) plus two per-entity extras: a pose, visible only in the
image, and a habitat, visible in the image and the document metadata. Every
document has a distinct identity, so a relation applied to a query entity
names exactly one target.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import INSTRUCTION, CoRExample, EntityDocument, EntityRecord, MultimodalQuery

CATEGORIES = (
    "fox", "owl", "frog", "moth", "bear", "crab", "deer", "wolf",
    "hawk", "toad", "wasp", "seal", "lynx", "newt", "swan", "mole",
)
COLORS = ("red", "blue", "green", "yellow", "black", "white", "brown", "gray")
SIZES = ("small", "medium", "large")
STAGES = ("juvenile", "adult")
PATTERNS = ("plain", "spotted", "striped")
POSES = {
    "sitting": ("sits", "calmly", "upright"),
    "running": ("runs", "swiftly", "ahead"),
    "sleeping": ("sleeps", "curled", "tight"),
    "eating": ("eats", "fresh", "berries"),
}
HABITATS = {
    "forest": ("deep", "pine", "woods"),
    "desert": ("hot", "dry", "dunes"),
    "river": ("muddy", "river", "banks"),
    "meadow": ("open", "grassy", "meadow"),
}
RELATIONS = ("stage-change", "color-change", "size-change", "same-group-other-category")
TEMPLATE_WORDS = (
    "show", "the", "form", "of", "this", "?", "in", "not", "a", "one",
    "what", "lives", "with", "near", "kin",
)

# image layout: 4 tiles of 16 content dims + 4 tile-marker dims
N_TILES = 4
TILE_CONTENT = 16
TILE_DIM = TILE_CONTENT + N_TILES
FEATURE_DIM = N_TILES * TILE_DIM
NOISE_SIGMA = 0.05
POSE_NAMES = tuple(POSES)
HABITAT_NAMES = tuple(HABITATS)

# (attribute, tile, offset within tile, value list)
BLOCKS = (
    ("category", 0, 0, CATEGORIES),
    ("color", 1, 0, COLORS),
    ("size", 1, 8, SIZES),
    ("stage", 1, 11, STAGES),
    ("pattern", 1, 13, PATTERNS),
    ("pose", 2, 0, POSE_NAMES),
    ("habitat", 3, 0, HABITAT_NAMES),
)


def corpus_words() -> list[str]:
    """Every word the generator can emit, in a fixed order."""
    words = list(TEMPLATE_WORDS) + list(INSTRUCTION)
    for group in (CATEGORIES, COLORS, SIZES, STAGES, PATTERNS):
        words.extend(group)
    for phrases in (POSES, HABITATS):
        for phrase in phrases.values():
            words.extend(phrase)
    seen, out = set(), []
    for w in words:
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def partner_category(category: str) -> str:
    i = CATEGORIES.index(category)
    return CATEGORIES[i ^ 1]


def group_of(category: str, pattern: str) -> int:
    return (CATEGORIES.index(category) // 2) * len(PATTERNS) + PATTERNS.index(pattern)


def render_image(entity: EntityRecord, seed: int) -> np.ndarray:
    """One-hot attribute blocks laid out in tiles, plus Gaussian noise."""
    clean = clean_image(entity)
    rng = np.random.default_rng([int(seed), int(entity.id)])
    return clean + rng.normal(0.0, NOISE_SIGMA, size=FEATURE_DIM)


def clean_image(entity: EntityRecord) -> np.ndarray:
    x = np.zeros(FEATURE_DIM)
    attrs = entity.attributes()
    for name, tile, offset, values in BLOCKS:
        x[tile * TILE_DIM + offset + values.index(attrs[name])] = 1.0
    for tile in range(N_TILES):
        x[tile * TILE_DIM + TILE_CONTENT + tile] = 1.0
    return x


def decode_image(features: np.ndarray) -> dict:
    """Block-wise argmax back to attribute values."""
    out = {}
    for name, tile, offset, values in BLOCKS:
        start = tile * TILE_DIM + offset
        out[name] = values[int(np.argmax(features[start : start + len(values)]))]
    return out


def caption_of(e: EntityRecord) -> tuple:
    return (e.size, e.color, e.stage, e.category, e.pattern)


def metadata_of(e: EntityRecord) -> tuple:
    return HABITATS[e.habitat]


def question_for(relation: str, params: dict) -> tuple:
    if relation == "stage-change":
        return ("show", "the", params["target"], "form", "of", "this", "?")
    if relation == "color-change":
        return ("show", "this", "in", params["target"], "not", params["distractor"], "?")
    if relation == "size-change":
        return ("show", "a", params["target"], "one", "not", "a", params["distractor"], "?")
    if relation == "same-group-other-category":
        return ("show", "what", "lives", "with", "this", "?")
    raise ValueError(f"unknown relation {relation!r}")


def comment_for(query: EntityRecord, target: EntityRecord, relation: str) -> tuple:
    """Template comment: target identity, its pose and habitat, then a nod to the query."""
    head = (target.color, target.size, target.stage, target.category, target.pattern)
    body = POSES[target.pose] + ("near",) + HABITATS[target.habitat]
    if relation == "stage-change":
        tail = ("not", query.stage)
    elif relation == "color-change":
        tail = ("not", query.color)
    elif relation == "size-change":
        tail = ("not", query.size)
    else:
        tail = ("kin", "of", query.category)
    return head + body + tail


@dataclass
class CorpusConfig:
    n_documents: int = 2048
    n_train: int = 4096
    n_test: int = 512
    n_golden: int = 128
    noise_rate: float = 0.15
    seed: int = 7


@dataclass
class Corpus:
    entities: list
    documents: list
    examples: list
    skipped: int = 0

    def split(self, *names: str) -> list:
        return [ex for ex in self.examples if ex.split in names]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def test(self) -> list:
        return self.split("test", "golden")

    @property
    def golden(self) -> list:
        return self.split("golden")

    def document(self, doc_id: int) -> EntityDocument:
        return self._by_id[doc_id]

    def __post_init__(self):
        self._by_id = {d.id: d for d in self.documents}


def _make_entities(cfg: CorpusConfig, rng: np.random.Generator) -> list:
    keys = [
        (c, col, s, st, p)
        for c in CATEGORIES for col in COLORS for s in SIZES for st in STAGES for p in PATTERNS
    ]
    if cfg.n_documents > len(keys):
        raise ValueError(f"at most {len(keys)} distinct documents are available")
    chosen = rng.choice(len(keys), size=cfg.n_documents, replace=False)
    ids = rng.permutation(cfg.n_documents)
    entities = []
    for doc_id, ki in zip(ids, sorted(chosen)):
        c, col, s, st, p = keys[ki]
        entities.append(EntityRecord(
            id=int(doc_id), group=group_of(c, p), category=c, color=col, size=s, stage=st,
            pattern=p, pose=POSE_NAMES[rng.integers(len(POSE_NAMES))],
            habitat=HABITAT_NAMES[rng.integers(len(HABITAT_NAMES))],
        ))
    entities.sort(key=lambda e: e.id)
    return entities


def apply_relation(entity: EntityRecord, relation: str, params: dict, by_key: dict):
    """The unique entity that answers ``relation`` for ``entity``, or None."""
    c, col, s, st, p = entity.key
    if relation == "stage-change":
        key = (c, col, s, params["target"], p)
    elif relation == "color-change":
        key = (c, params["target"], s, st, p)
    elif relation == "size-change":
        key = (c, col, params["target"], st, p)
    elif relation == "same-group-other-category":
        key = (partner_category(c), col, s, st, p)
    else:
        raise ValueError(f"unknown relation {relation!r}")
    return by_key.get(key)


def _draw_params(entity: EntityRecord, relation: str, rng: np.random.Generator, by_key: dict) -> dict | None:
    if relation == "stage-change":
        return {"target": STAGES[1 - STAGES.index(entity.stage)]}
    if relation == "same-group-other-category":
        return {}
    if relation == "color-change":
        pool, own = COLORS, entity.color
    else:
        pool, own = SIZES, entity.size
    targets = [v for v in pool if v != own]
    targets = [v for v in targets if apply_relation(entity, relation, {"target": v}, by_key)]
    if not targets:
        return None
    target = targets[rng.integers(len(targets))]
    distractors = [v for v in pool if v not in (own, target)]
    # prefer distractors that also exist, so word order is the only cue
    present = [v for v in distractors if apply_relation(entity, relation, {"target": v}, by_key)]
    options = present or distractors
    return {"target": target, "distractor": options[rng.integers(len(options))]}


def build_corpus(cfg: CorpusConfig | None = None) -> Corpus:
    cfg = cfg or CorpusConfig()
    if min(cfg.n_documents, cfg.n_train, cfg.n_test) <= 0 or cfg.n_golden > cfg.n_test:
        raise ValueError("corpus counts must be positive and golden <= test")
    rng = np.random.default_rng(cfg.seed)
    entities = _make_entities(cfg, rng)
    by_key = {e.key: e for e in entities}
    doc_seed = cfg.seed * 1000 + 1
    documents = [
        EntityDocument(
            id=e.id, features=render_image(e, doc_seed), caption=caption_of(e),
            metadata=metadata_of(e), group=e.group, attributes=e.attributes(),
        )
        for e in entities
    ]
    skipped = 0
    order = rng.permutation(len(entities))
    pending: list[tuple] = []  # (split, entity, relation, params, target)

    test_entities = set()
    pos = 0
    while sum(1 for p in pending if p[0] == "test") < cfg.n_test:
        e = entities[order[pos]]
        pos += 1
        test_entities.add(e.id)
        for relation in RELATIONS:
            params = _draw_params(e, relation, rng, by_key)
            target = None if params is None else apply_relation(e, relation, params, by_key)
            if target is None:
                skipped += 1
                continue
            pending.append(("test", e, relation, params, target))
    pending = pending[: cfg.n_test]

    # train never touches a test target, so per-entity details cannot be memorized
    test_targets = {p[4].id for p in pending}
    held = test_entities | test_targets
    train_pool = [entities[i] for i in order[pos:] if entities[i].id not in held]
    seen = set()
    n_train = 0
    while n_train < cfg.n_train:
        e = train_pool[rng.integers(len(train_pool))]
        relation = RELATIONS[rng.integers(len(RELATIONS))]
        params = _draw_params(e, relation, rng, by_key)
        target = None if params is None else apply_relation(e, relation, params, by_key)
        if target is None:
            skipped += 1
            continue
        if target.id in test_targets:
            continue
        sig = (e.id, relation, tuple(sorted(params.items())))
        if sig in seen:
            continue
        seen.add(sig)
        pending.append(("train", e, relation, params, target))
        n_train += 1

    examples = []
    for ex_id, (split, e, relation, params, target) in enumerate(pending):
        comment = comment_for(e, target, relation)
        if rng.random() < cfg.noise_rate:
            comment = _paraphrase(comment, relation)
        query = MultimodalQuery(
            features=render_image(e, cfg.seed * 1000 + 2 + ex_id),
            question=question_for(relation, params), id=ex_id,
        )
        examples.append(CoRExample(
            id=ex_id, query=query, target_id=target.id, comment=comment,
            caption=caption_of(target), split=split, relation=relation, query_entity=e.id,
        ))

    test = [ex for ex in examples if ex.split == "test"]
    by_id = {e.id: e for e in entities}
    verified = [ex for ex in test if reconstructible(ex, by_id)]
    pick = rng.permutation(len(verified))[: cfg.n_golden]
    for i in sorted(pick):
        verified[i].split = "golden"
    return Corpus(entities=entities, documents=documents, examples=examples, skipped=skipped)


def _paraphrase(comment: tuple, relation: str) -> tuple:
    # annotator-style variation: the closing reference to the query is dropped
    cut = 3 if relation == "same-group-other-category" else 2
    return comment[:-cut]


def reconstructible(ex: CoRExample, entities_by_id: dict) -> bool:
    """True when the stored comment is exactly the template output."""
    query = entities_by_id[ex.query_entity]
    target = entities_by_id[ex.target_id]
    return tuple(ex.comment) == comment_for(query, target, ex.relation)


# --- serialization ---------------------------------------------------------

class DatasetError(ValueError):
    pass


def _doc_to_json(d: EntityDocument) -> dict:
    return {
        "id": d.id, "group": d.group, "attributes": d.attributes,
        "features": [float(v) for v in d.features],
        "caption": " ".join(d.caption), "metadata": " ".join(d.metadata),
    }


def _example_to_json(ex: CoRExample) -> dict:
    return {
        "id": ex.id, "split": ex.split, "relation": ex.relation, "query_entity": ex.query_entity,
        "query_features": [float(v) for v in ex.query.features],
        "question": " ".join(ex.query.question), "target_id": ex.target_id,
        "comment": " ".join(ex.comment), "caption": " ".join(ex.caption),
    }


def write_dataset(corpus: Corpus, path) -> None:
    """Write ``documents.jsonl`` and ``examples.jsonl`` under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "documents.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for d in sorted(corpus.documents, key=lambda d: d.id):
            fh.write(json.dumps(_doc_to_json(d)) + "\n")
    with open(path / "examples.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for ex in sorted(corpus.examples, key=lambda ex: ex.id):
            fh.write(json.dumps(_example_to_json(ex)) + "\n")


def _read_jsonl(file: Path, required: tuple) -> list[dict]:
    rows = []
    with open(file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"{file.name}:{lineno}: malformed JSON ({err.msg})") from None
            missing = [k for k in required if k not in row]
            if missing:
                raise DatasetError(f"{file.name}:{lineno}: missing fields {missing}")
            rows.append(row)
    return rows


def _words(text: str) -> tuple:
    return tuple(text.split()) if text else ()


def load_dataset(path) -> Corpus:
    path = Path(path)
    doc_rows = _read_jsonl(path / "documents.jsonl", ("id", "features", "caption", "metadata"))
    ex_rows = _read_jsonl(
        path / "examples.jsonl",
        ("id", "query_features", "question", "target_id", "comment", "split"),
    )
    documents = [
        EntityDocument(
            id=int(r["id"]), features=np.asarray(r["features"], dtype=np.float64),
            caption=_words(r["caption"]), metadata=_words(r["metadata"]),
            group=int(r.get("group", -1)), attributes=dict(r.get("attributes", {})),
        )
        for r in doc_rows
    ]
    entities = []
    for d in documents:
        if d.attributes:
            entities.append(EntityRecord(id=d.id, group=d.group, **d.attributes))
    by_id = {d.id: d for d in documents}
    examples = []
    for r in ex_rows:
        target = by_id.get(int(r["target_id"]))
        caption = _words(r["caption"]) if "caption" in r else (target.caption if target else ())
        examples.append(CoRExample(
            id=int(r["id"]),
            query=MultimodalQuery(
                features=np.asarray(r["query_features"], dtype=np.float64),
                question=_words(r["question"]), id=int(r["id"]),
            ),
            target_id=int(r["target_id"]), comment=_words(r["comment"]), caption=caption,
            split=r["split"], relation=r.get("relation", ""), query_entity=int(r.get("query_entity", -1)),
        ))
    return Corpus(entities=entities, documents=documents, examples=examples)


def file_digest(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    for name in ("documents.jsonl", "examples.jsonl"):
        h.update((path / name).read_bytes())
    return h.hexdigest()
