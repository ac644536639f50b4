"""Record types shared by the dataset, retriever and generator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INSTRUCTION = ("find", "image", "that", "answers", ":")


@dataclass(frozen=True)
class EntityRecord:
    id: int
    group: int
    category: str
    color: str
    size: str
    stage: str
    pattern: str
    pose: str
    habitat: str

    @property
    def key(self) -> tuple:
        """Identity attributes; unique per entity within a corpus."""
        return (self.category, self.color, self.size, self.stage, self.pattern)

    def attributes(self) -> dict:
        return {
            "category": self.category, "color": self.color, "size": self.size,
            "stage": self.stage, "pattern": self.pattern, "pose": self.pose,
            "habitat": self.habitat,
        }


@dataclass
class EntityDocument:
    id: int
    features: np.ndarray
    caption: tuple
    metadata: tuple = ()
    comment: tuple = ()
    group: int = -1
    attributes: dict = field(default_factory=dict)


@dataclass
class MultimodalQuery:
    features: np.ndarray | None
    question: tuple
    instruction: tuple = INSTRUCTION
    id: int = -1

    @property
    def text(self) -> tuple:
        return tuple(self.instruction) + tuple(self.question)

    def __post_init__(self):
        if (self.features is None or len(self.features) == 0) and not self.question:
            raise ValueError("a query needs an image or question tokens")


@dataclass
class CoRExample:
    id: int
    query: MultimodalQuery
    target_id: int
    comment: tuple
    caption: tuple
    split: str
    relation: str = ""
    query_entity: int = -1
