"""Closed-vocabulary word tokenizer."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

from ..datagen import corpus_words

PAD, BOS, EOS, IMG, RET = "<pad>", "<bos>", "<eos>", "<img>", "<ret>"
SPECIALS = (PAD, BOS, EOS, IMG, RET)


class Tokenizer:
    """Bijection between words and ids; specials always occupy ids 0-4."""

    def __init__(self, words: Iterable[str]):
        words = list(words)
        if tuple(words[: len(SPECIALS)]) != SPECIALS:
            words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.words = tuple(words)
        self.ids = {w: i for i, w in enumerate(self.words)}

    pad_id = property(lambda self: self.ids[PAD])
    bos_id = property(lambda self: self.ids[BOS])
    eos_id = property(lambda self: self.ids[EOS])
    img_id = property(lambda self: self.ids[IMG])
    ret_id = property(lambda self: self.ids[RET])

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.ids[w] for w in words]
        except KeyError as err:
            raise KeyError(f"out-of-vocabulary word {err.args[0]!r}") from None

    def decode(self, ids: Sequence[int], strip_special: bool = False) -> list[str]:
        out = [self.words[int(i)] for i in ids]
        if strip_special:
            out = [w for w in out if w not in SPECIALS]
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        tok = cls(lines)
        if tok.words != tuple(lines):
            raise ValueError(f"{path}: special tokens must occupy the first {len(SPECIALS)} lines")
        return tok


def default_tokenizer() -> Tokenizer:
    return Tokenizer(list(SPECIALS) + corpus_words())
