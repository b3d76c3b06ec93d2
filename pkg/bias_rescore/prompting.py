# stdlib
import logging
from enum import Enum
from pathlib import Path
from typing import Sequence

# 3p
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

# project
from bias_rescore.tokenizer import SpecialToken, Vocab, encode


log = logging.getLogger(__name__)


class EntityClass(str, Enum):
    PER = "PER"
    LOC = "LOC"
    ORG = "ORG"
    NONE = "NONE"

    @property
    def class_id(self) -> int:
        return _CLASS_ORDER.index(self)

    @classmethod
    def from_id(cls, class_id: int) -> "EntityClass":
        return _CLASS_ORDER[class_id]


_CLASS_ORDER = [EntityClass.PER, EntityClass.LOC, EntityClass.ORG, EntityClass.NONE]

# Classes that may key a biasing list, in prompt order.
BIASING_CLASSES = [EntityClass.PER, EntityClass.LOC, EntityClass.ORG]

_TAGS = {
    EntityClass.PER: (SpecialToken.OPEN_PER, SpecialToken.CLOSE_PER),
    EntityClass.LOC: (SpecialToken.OPEN_LOC, SpecialToken.CLOSE_LOC),
    EntityClass.ORG: (SpecialToken.OPEN_ORG, SpecialToken.CLOSE_ORG),
}


class BiasingList(BaseModel):
    """Per-class entity lists. Serializes as {"PER": [...], "LOC": [...], "ORG": [...]}."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    PER: list[str] = []
    LOC: list[str] = []
    ORG: list[str] = []

    @field_validator("PER", "LOC", "ORG")
    @classmethod
    def _no_duplicates(cls, entities: list[str]) -> list[str]:
        seen = set()
        for entity in entities:
            if not entity:
                raise ValueError("empty entity string")
            if entity in seen:
                raise ValueError(f"duplicate entity {entity!r}")
            seen.add(entity)
        return entities

    def get(self, cls: EntityClass) -> list[str]:
        if cls == EntityClass.NONE:
            return []
        return list(getattr(self, cls.value))

    def entities(self) -> list[str]:
        return [e for cls in BIASING_CLASSES for e in self.get(cls)]

    def total(self) -> int:
        return sum(len(self.get(cls)) for cls in BIASING_CLASSES)

    @classmethod
    def from_classes(cls, entries: dict[EntityClass, list[str]]) -> "BiasingList":
        if EntityClass.NONE in entries:
            raise ValueError("NONE cannot key a biasing list")
        return cls(**{c.value: list(v) for c, v in entries.items()})

    def to_json(self) -> str:
        return self.model_dump_json()

    @classmethod
    def from_json(cls, data: str) -> "BiasingList":
        return cls.model_validate_json(data)


def load_biasing_list(path: str | Path) -> BiasingList:
    with open(path, "r", encoding="utf-8") as f:
        return BiasingList.from_json(f.read())


class FewShotExample(BaseModel):
    model_config = ConfigDict(frozen=True)

    biasing_list: BiasingList
    sentence: str

    @field_validator("sentence")
    @classmethod
    def _non_empty(cls, sentence: str) -> str:
        if not sentence:
            raise ValueError("few-shot sentence must be non-empty")
        return sentence


Span = tuple[int, int]


class Prompt(BaseModel):
    """Token ids of a prompt with [start, end) spans for each region.

    Position 0 is BOS. The INPUT_MARK token between the biasing and input
    regions belongs to no region.
    """

    model_config = ConfigDict(frozen=True)

    ids: list[int]
    text: str
    few_shot: Span
    biasing: Span
    input: Span

    @model_validator(mode="after")
    def _check_regions(self) -> "Prompt":
        spans = [self.few_shot, self.biasing, self.input]
        prev_end = 1
        for start, end in spans:
            if start < prev_end or end < start:
                raise ValueError(f"prompt regions out of order: {spans}")
            prev_end = end
        if self.input[1] != len(self.ids):
            raise ValueError("input region must end the prompt")
        if self.input[0] == self.input[1]:
            raise ValueError("input region is empty")
        return self

    def region_ids(self, region: str) -> list[int]:
        start, end = getattr(self, region)
        return self.ids[start:end]

    def __len__(self) -> int:
        return len(self.ids)


def prompt_length(prompt: Prompt) -> int:
    return len(prompt.ids)


def build_biasing_segment(biasing_list: BiasingList) -> str:
    parts = []
    for cls in BIASING_CLASSES:
        entities = biasing_list.get(cls)
        if not entities:
            continue
        open_tag, close_tag = _TAGS[cls]
        parts.append(f"{open_tag.value}{' '.join(entities)}{close_tag.value}")
    return "".join(parts)


def _render_example(example: FewShotExample) -> str:
    return (
        f"{build_biasing_segment(example.biasing_list)}"
        f"{SpecialToken.INPUT_MARK.value}{example.sentence} "
    )


def render_prompt_text(
    examples: Sequence[FewShotExample], biasing_list: BiasingList, input_text: str
) -> str:
    return (
        "".join(_render_example(e) for e in examples)
        + build_biasing_segment(biasing_list)
        + SpecialToken.INPUT_MARK.value
        + input_text
    )


def build_prompt(
    examples: Sequence[FewShotExample],
    biasing_list: BiasingList,
    input_text: str,
    vocab: Vocab,
) -> Prompt:
    if not input_text:
        raise ValueError("empty input")

    few_shot_ids: list[int] = []
    for example in examples:
        few_shot_ids.extend(encode(_render_example(example), vocab))
    biasing_ids = encode(build_biasing_segment(biasing_list), vocab)
    input_ids = encode(input_text, vocab)

    ids = [vocab.special_id(SpecialToken.BOS)]
    few_shot = (len(ids), len(ids) + len(few_shot_ids))
    ids.extend(few_shot_ids)
    biasing = (len(ids), len(ids) + len(biasing_ids))
    ids.extend(biasing_ids)
    ids.append(vocab.special_id(SpecialToken.INPUT_MARK))
    input_span = (len(ids), len(ids) + len(input_ids))
    ids.extend(input_ids)

    return Prompt(
        ids=ids,
        text=render_prompt_text(examples, biasing_list, input_text),
        few_shot=few_shot,
        biasing=biasing,
        input=input_span,
    )


def select_class_context(biasing_list: BiasingList, cls: EntityClass) -> BiasingList:
    if cls == EntityClass.NONE:
        return BiasingList()
    return BiasingList.from_classes({cls: biasing_list.get(cls)})
