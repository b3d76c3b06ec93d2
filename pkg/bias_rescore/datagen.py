# stdlib
import json
import logging
import re
from enum import Enum
from pathlib import Path
from typing import Iterable, Literal, NamedTuple, Sequence

# 3p
import editdistance
import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

# project
from bias_rescore.prompting import BIASING_CLASSES, BiasingList, EntityClass, FewShotExample
from bias_rescore.rescoring import Hypothesis, NBestList


log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Random stream ids mixed into the per-utterance seed sequence.
_TRAIN_STREAM = 0
_TEST_STREAM = 1
_INGEST_STREAM = 2
_INVENTORY_STREAM = 3
_LIST_SUBSTREAM = 1

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
CODAS = "lnrs"
SYLLABLES = [c + v for c in CONSONANTS for v in VOWELS]

# CMD-style templates (calling, messaging, navigation) with sampling weights.
CMD_TEMPLATES: list[tuple[str, int]] = [
    ("call {PER}", 4),
    ("call {PER} on mobile", 1),
    ("send a message to {PER} about {ORG}", 2),
    ("text {PER} that i am at {LOC}", 2),
    ("navigate to {LOC}", 2),
    ("book a table near {LOC}", 1),
    ("email {PER} at {ORG}", 1),
    ("set up a meeting with {PER} from {ORG} in {LOC}", 1),
    ("what is the weather in {LOC}", 1),
    ("open the {ORG} app", 1),
]

DICTATION_SENTENCES = [
    "remind me to buy milk tomorrow",
    "i will be late for dinner tonight",
    "turn off the lights in the kitchen",
    "play some music please",
    "what time is it now",
    "set an alarm for seven in the morning",
    "add eggs to the shopping list",
    "how long will the drive take",
    "send my location",
    "read my new messages",
    "i am on my way home",
    "cancel the last reminder",
]

TEMPLATE_SETS = {"cmd": (CMD_TEMPLATES, DICTATION_SENTENCES)}
DICTATION_PROB = 0.3

_SLOT_RE = re.compile(r"\{(PER|LOC|ORG)\}")

# External NER label -> entity class. Labels mapped to None are known and dropped.
LABEL_MAP: dict[str, EntityClass | None] = {
    "PER": EntityClass.PER,
    "PERSON": EntityClass.PER,
    "LOC": EntityClass.LOC,
    "GPE": EntityClass.LOC,
    "PLACE": EntityClass.LOC,
    "FAC": EntityClass.LOC,
    "ORG": EntityClass.ORG,
    "ORGANIZATION": EntityClass.ORG,
    **{
        label: None
        for label in [
            "NORP",
            "LAW",
            "DATE",
            "WHEN",
            "QUANT",
            "CARDINAL",
            "ORDINAL",
            "MONEY",
            "PERCENT",
            "TIME",
            "EVENT",
            "WORK_OF_ART",
            "LANGUAGE",
            "PRODUCT",
            "MISC",
        ]
    },
}


class AblationMode(str, Enum):
    GT = "GT"
    NGT = "NGT"


class NoiseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    entity_confusion_prob: float = Field(default=0.6, ge=0, le=1)
    word_edit_prob: float = Field(default=0.05, ge=0, le=1)
    char_edit_prob: float = Field(default=0.02, ge=0, le=1)
    # Probability that the reference itself is one of the n-best entries.
    reference_prob: float = Field(default=0.8, ge=0, le=1)
    score_scale: float = Field(default=1.0, ge=0)
    score_noise: float = Field(default=0.6, ge=0)

    def is_silent(self) -> bool:
        return not (self.entity_confusion_prob or self.word_edit_prob or self.char_edit_prob)


class InventorySizes(BaseModel):
    model_config = ConfigDict(extra="forbid")

    PER: int = Field(default=2000, gt=0)
    LOC: int = Field(default=1000, gt=0)
    ORG: int = Field(default=1000, gt=0)


class GenConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_train: int = Field(default=2000, ge=0)
    n_test: int = Field(default=300, ge=0)
    inventory: InventorySizes = InventorySizes()
    template_set: Literal["cmd"] = "cmd"
    nbest_size: int = Field(default=5, ge=1)
    noise: NoiseConfig = NoiseConfig()
    ablation_mode: AblationMode = AblationMode.GT
    # Entities per class in each biasing list.
    biasing_list_size: int = Field(default=3, ge=0)
    seed: int = 0


class EntitySpan(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    start: int = Field(ge=0)
    end: int
    label: EntityClass = Field(alias="class")

    @model_validator(mode="after")
    def _check_order(self) -> "EntitySpan":
        if self.end <= self.start:
            raise ValueError(f"span [{self.start}, {self.end}) is empty")
        if self.label == EntityClass.NONE:
            raise ValueError("entity spans cannot carry the NONE class")
        return self


def check_spans(text: str, spans: Sequence[EntitySpan]) -> None:
    prev_end = 0
    for span in sorted(spans, key=lambda s: s.start):
        if span.end > len(text):
            raise ValueError(
                f"span [{span.start}, {span.end}) out of bounds for text of length {len(text)}"
            )
        if span.start < prev_end:
            raise ValueError(f"span [{span.start}, {span.end}) overlaps a previous span")
        prev_end = span.end


class AnnotatedUtterance(BaseModel):
    model_config = ConfigDict(frozen=True)

    schema_version: int = SCHEMA_VERSION
    utterance_id: str
    text: str
    entities: list[EntitySpan] = []
    biasing_list: BiasingList = BiasingList()
    nbest: NBestList
    ablation_mode: AblationMode | None = None

    @field_validator("schema_version")
    @classmethod
    def _check_version(cls, version: int) -> int:
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported corpus schema version {version}")
        return version

    @model_validator(mode="after")
    def _check(self) -> "AnnotatedUtterance":
        check_spans(self.text, self.entities)
        listed = set(self.biasing_list.entities())
        truth = {self.entity_text(span) for span in self.entities}
        if self.ablation_mode == AblationMode.GT and not truth <= listed:
            raise ValueError(f"{self.utterance_id}: GT biasing list misses {truth - listed}")
        if self.ablation_mode == AblationMode.NGT and truth & listed:
            raise ValueError(f"{self.utterance_id}: NGT biasing list holds {truth & listed}")
        return self

    def entity_text(self, span: EntitySpan) -> str:
        return self.text[span.start : span.end]

    def entities_by_class(self) -> dict[EntityClass, list[str]]:
        found: dict[EntityClass, list[str]] = {cls: [] for cls in BIASING_CLASSES}
        for span in sorted(self.entities, key=lambda s: s.start):
            entity = self.entity_text(span)
            if entity not in found[span.label]:
                found[span.label].append(entity)
        return found


class Corpus(NamedTuple):
    train: list[AnnotatedUtterance]
    test: list[AnnotatedUtterance]


Inventory = dict[EntityClass, list[str]]


def _utterance_rng(seed: int, stream: int, index: int, sub: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index, sub])


def _name_from_index(cls: EntityClass, index: int) -> str:
    n = len(SYLLABLES)
    if cls == EntityClass.PER:
        return SYLLABLES[index // n] + SYLLABLES[index % n]
    if cls == EntityClass.LOC:
        return SYLLABLES[index // (n * n)] + SYLLABLES[(index // n) % n] + SYLLABLES[index % n]
    # ORG: CV + CVC
    first, rest = divmod(index, n * len(CODAS))
    second, coda = divmod(rest, len(CODAS))
    return SYLLABLES[first] + SYLLABLES[second] + CODAS[coda]


_INVENTORY_CAPACITY = {
    EntityClass.PER: len(SYLLABLES) ** 2,
    EntityClass.LOC: len(SYLLABLES) ** 3,
    EntityClass.ORG: len(SYLLABLES) ** 2 * len(CODAS),
}


def build_inventory(cfg: GenConfig) -> Inventory:
    """Pseudo-name inventories; fixed syllable shapes keep the classes disjoint."""
    inventory: Inventory = {}
    for i, cls in enumerate(BIASING_CLASSES):
        size = getattr(cfg.inventory, cls.value)
        capacity = _INVENTORY_CAPACITY[cls]
        if size > capacity:
            raise ValueError(f"{cls.value} inventory of {size} exceeds capacity {capacity}")
        if size <= cfg.biasing_list_size:
            raise ValueError(
                f"{cls.value} inventory of {size} too small for biasing lists of "
                f"{cfg.biasing_list_size}"
            )
        rng = _utterance_rng(cfg.seed, _INVENTORY_STREAM, i)
        picks = rng.choice(capacity, size=size, replace=False)
        inventory[cls] = [_name_from_index(cls, int(p)) for p in picks]
    return inventory


def _render_template(
    template: str, inventory: Inventory, rng: np.random.Generator
) -> tuple[str, list[EntitySpan]]:
    text = ""
    spans: list[EntitySpan] = []
    pos = 0
    for match in _SLOT_RE.finditer(template):
        text += template[pos : match.start()]
        cls = EntityClass(match.group(1))
        pool = inventory[cls]
        entity = pool[int(rng.integers(len(pool)))]
        spans.append(EntitySpan(start=len(text), end=len(text) + len(entity), label=cls))
        text += entity
        pos = match.end()
    text += template[pos:]
    return text, spans


def _sample_utterance(
    cfg: GenConfig, inventory: Inventory, rng: np.random.Generator
) -> tuple[str, list[EntitySpan]]:
    templates, dictation = TEMPLATE_SETS[cfg.template_set]
    if rng.random() < DICTATION_PROB:
        return dictation[int(rng.integers(len(dictation)))], []
    weights = np.array([w for _, w in templates], dtype=float)
    index = int(rng.choice(len(templates), p=weights / weights.sum()))
    return _render_template(templates[index][0], inventory, rng)


def filler_words(template_set: str = "cmd") -> list[str]:
    templates, dictation = TEMPLATE_SETS[template_set]
    words = set()
    for text in [t for t, _ in templates] + dictation:
        words.update(w for w in text.split() if not _SLOT_RE.fullmatch(w))
    return sorted(words)


def confusion_variants(entity: str) -> list[str]:
    """Single-character spelling variants, swapping vowels for vowels and
    consonants for consonants."""
    variants = []
    for i, ch in enumerate(entity):
        if ch in VOWELS:
            alphabet = VOWELS
        elif ch in CONSONANTS:
            alphabet = CONSONANTS
        elif ch.isalpha():
            alphabet = VOWELS + CONSONANTS
        else:
            continue
        for repl in alphabet:
            if repl != ch:
                variants.append(entity[:i] + repl + entity[i + 1 :])
    return variants


def _confuse(entity: str, rng: np.random.Generator, exclude: set[str]) -> str:
    variants = confusion_variants(entity)
    preferred = [v for v in variants if v not in exclude] or variants
    if not preferred:
        return entity
    return preferred[int(rng.integers(len(preferred)))]


def _char_edit(word: str, rng: np.random.Generator) -> str:
    variants = confusion_variants(word)
    if not variants:
        return word
    return variants[int(rng.integers(len(variants)))]


def _units(utt: AnnotatedUtterance) -> list[tuple[str, EntityClass | None]]:
    """Split a reference into words, keeping each entity span as one unit."""
    units: list[tuple[str, EntityClass | None]] = []
    pos = 0
    for span in sorted(utt.entities, key=lambda s: s.start):
        units.extend((w, None) for w in utt.text[pos : span.start].split())
        units.append((utt.entity_text(span), span.label))
        pos = span.end
    units.extend((w, None) for w in utt.text[pos:].split())
    return units


def _corrupt(
    units: list[tuple[str, EntityClass | None]],
    cfg: GenConfig,
    rng: np.random.Generator,
    fillers: list[str],
    inventory: Inventory | None,
    force: bool,
) -> str:
    noise = cfg.noise
    out: list[str] = []
    entity_indices = [i for i, (_, cls) in enumerate(units) if cls is not None]
    forced = int(rng.choice(entity_indices)) if force and entity_indices else -1
    forced_word = int(rng.integers(len(units))) if force and not entity_indices else -1
    for i, (text, cls) in enumerate(units):
        if cls is not None:
            if i == forced or rng.random() < noise.entity_confusion_prob:
                exclude = set(inventory[cls]) if inventory else set()
                text = _confuse(text, rng, exclude)
            out.append(text)
            continue
        if i == forced_word:
            out.append(_substitute_word(text, fillers, rng))
            continue
        if rng.random() < noise.word_edit_prob:
            op = rng.choice(["sub", "del", "ins"], p=[0.6, 0.2, 0.2])
            if op == "sub":
                out.append(_substitute_word(text, fillers, rng))
            elif op == "ins":
                out.extend([text, fillers[int(rng.integers(len(fillers)))]])
            continue
        if rng.random() < noise.char_edit_prob:
            text = _char_edit(text, rng)
        out.append(text)
    return " ".join(out)


def _substitute_word(word: str, fillers: list[str], rng: np.random.Generator) -> str:
    choices = [f for f in fillers if f != word]
    return choices[int(rng.integers(len(choices)))]


def edit_magnitude(reference: str, hypothesis: str) -> int:
    return int(editdistance.eval(reference.lower().split(), hypothesis.lower().split()))


def simulate_nbest(
    utt: AnnotatedUtterance,
    cfg: GenConfig,
    rng: np.random.Generator,
    inventory: Inventory | None = None,
) -> NBestList:
    """Noise-channel stand-in for first-pass ASR output.

    Every corrupted entry carries at least one edit unless all noise
    probabilities are zero; the reference takes one slot with probability
    `reference_prob`.
    """
    noise = cfg.noise
    units = _units(utt)
    fillers = filler_words(cfg.template_set)
    texts: list[str] = []
    for _ in range(cfg.nbest_size):
        if noise.is_silent():
            texts.append(utt.text)
            continue
        hyp = ""
        for attempt in range(20):
            hyp = _corrupt(units, cfg, rng, fillers, inventory, force=attempt == 19)
            if hyp and edit_magnitude(utt.text, hyp) > 0:
                break
        texts.append(hyp or utt.text)
    if not noise.is_silent() and rng.random() < noise.reference_prob:
        texts[int(rng.integers(len(texts)))] = utt.text

    hypotheses = []
    for text in texts:
        magnitude = edit_magnitude(utt.text, text)
        score = -noise.score_scale * magnitude + float(rng.normal(0.0, noise.score_noise))
        hypotheses.append(
            Hypothesis(text=text, first_pass_score=score, edit_magnitude=magnitude)
        )
    return NBestList(
        utterance_id=utt.utterance_id, reference=utt.text, hypotheses=hypotheses
    )


def build_biasing_list(
    utt: AnnotatedUtterance,
    cfg: GenConfig,
    rng: np.random.Generator,
    inventory: Inventory,
    mode: AblationMode | None = None,
) -> BiasingList:
    """GT: the utterance's entities plus random distractors; NGT: distractors only."""
    mode = mode or cfg.ablation_mode
    truth = utt.entities_by_class()
    entries: dict[EntityClass, list[str]] = {}
    for cls in BIASING_CLASSES:
        gt = truth[cls]
        keep = list(gt) if mode == AblationMode.GT else []
        need = max(cfg.biasing_list_size - len(keep), 0)
        pool = inventory[cls]
        excluded = set(gt)
        available = len(set(pool) - excluded)
        if available < need:
            raise ValueError(
                f"{cls.value} inventory exhausted: need {need} distractors, "
                f"{available} available"
            )
        distractors: list[str] = []
        chosen = set(excluded)
        while len(distractors) < need:
            pick = pool[int(rng.integers(len(pool)))]
            if pick not in chosen:
                chosen.add(pick)
                distractors.append(pick)
        combined = keep + distractors
        entries[cls] = [combined[int(i)] for i in rng.permutation(len(combined))]
    return BiasingList.from_classes(entries)


def _make_utterance(
    utterance_id: str,
    cfg: GenConfig,
    inventory: Inventory,
    rng: np.random.Generator,
    list_rng: np.random.Generator,
    mode: AblationMode,
) -> AnnotatedUtterance:
    text, spans = _sample_utterance(cfg, inventory, rng)
    placeholder = NBestList(
        utterance_id=utterance_id,
        reference=text,
        hypotheses=[Hypothesis(text=text, first_pass_score=0.0, edit_magnitude=0)],
    )
    utt = AnnotatedUtterance(
        utterance_id=utterance_id, text=text, entities=spans, nbest=placeholder
    )
    nbest = simulate_nbest(utt, cfg, rng, inventory)
    biasing = build_biasing_list(utt, cfg, list_rng, inventory, mode)
    return AnnotatedUtterance.model_validate(
        utt.model_dump(by_alias=True)
        | {
            "nbest": nbest.model_dump(),
            "biasing_list": biasing.model_dump(),
            "ablation_mode": mode,
        }
    )


def generate_corpus(cfg: GenConfig) -> Corpus:
    """Training utterances always carry GT lists; the test split follows
    `cfg.ablation_mode`. Text and n-best lists do not depend on the mode."""
    inventory = build_inventory(cfg)
    train = [
        _make_utterance(
            f"train-{i:05d}",
            cfg,
            inventory,
            _utterance_rng(cfg.seed, _TRAIN_STREAM, i),
            _utterance_rng(cfg.seed, _TRAIN_STREAM, i, _LIST_SUBSTREAM),
            AblationMode.GT,
        )
        for i in range(cfg.n_train)
    ]
    test = [
        _make_utterance(
            f"test-{i:05d}",
            cfg,
            inventory,
            _utterance_rng(cfg.seed, _TEST_STREAM, i),
            _utterance_rng(cfg.seed, _TEST_STREAM, i, _LIST_SUBSTREAM),
            cfg.ablation_mode,
        )
        for i in range(cfg.n_test)
    ]
    log.info(
        f"Generated {len(train)} train / {len(test)} test utterances "
        f"({cfg.ablation_mode.value} test lists, seed {cfg.seed})"
    )
    return Corpus(train=train, test=test)


class _IngestSpan(BaseModel):
    start: int
    end: int
    label: str = Field(alias="class")


class _IngestRecord(BaseModel):
    id: str | None = None
    text: str
    entities: list[_IngestSpan] = []


def ingest_annotated(
    path: str | Path,
    filter_classes: Iterable[EntityClass] = BIASING_CLASSES,
    label_map: dict[str, EntityClass | None] = LABEL_MAP,
) -> list[AnnotatedUtterance]:
    """Read JSON lines of {text, entities: [{start, end, class}]}."""
    keep = set(filter_classes)
    utterances = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = _IngestRecord.model_validate(json.loads(line))
            except (json.JSONDecodeError, ValidationError) as e:
                raise ValueError(f"line {lineno}: malformed record: {e}") from e
            if not record.text:
                raise ValueError(f"line {lineno}: empty text")

            spans = []
            for raw in record.entities:
                label = raw.label.upper()
                if label not in label_map:
                    raise ValueError(f"line {lineno}: unknown entity class label {raw.label!r}")
                cls = label_map[label]
                if raw.start < 0 or raw.end > len(record.text) or raw.end <= raw.start:
                    raise ValueError(
                        f"line {lineno}: span [{raw.start}, {raw.end}) out of bounds "
                        f"for text of length {len(record.text)}"
                    )
                if cls is None or cls not in keep:
                    continue
                spans.append(EntitySpan(start=raw.start, end=raw.end, label=cls))
            try:
                check_spans(record.text, spans)
            except ValueError as e:
                raise ValueError(f"line {lineno}: {e}") from e

            utterance_id = record.id or f"ingest-{lineno:05d}"
            utterances.append(
                AnnotatedUtterance(
                    utterance_id=utterance_id,
                    text=record.text,
                    entities=spans,
                    nbest=NBestList(
                        utterance_id=utterance_id,
                        reference=record.text,
                        hypotheses=[
                            Hypothesis(
                                text=record.text, first_pass_score=0.0, edit_magnitude=0
                            )
                        ],
                    ),
                )
            )
    log.info(f"Ingested {len(utterances)} utterances from {path}")
    return utterances


def entity_pool(utterances: Iterable[AnnotatedUtterance]) -> Inventory:
    """Every entity seen in spans or biasing lists, per class, sorted."""
    pool: dict[EntityClass, set[str]] = {cls: set() for cls in BIASING_CLASSES}
    for utt in utterances:
        for span in utt.entities:
            pool[span.label].add(utt.entity_text(span))
        for cls in BIASING_CLASSES:
            pool[cls].update(utt.biasing_list.get(cls))
    return {cls: sorted(entities) for cls, entities in pool.items()}


def prepare_ingested(
    utterances: Sequence[AnnotatedUtterance],
    cfg: GenConfig,
    inventory: Inventory | None = None,
    mode: AblationMode | None = None,
    stream: int = _INGEST_STREAM,
) -> list[AnnotatedUtterance]:
    """Attach biasing lists and simulated n-best lists to ingested utterances.

    The inventory defaults to the utterances' own entities.
    """
    inventory = inventory or entity_pool(utterances)
    mode = mode or cfg.ablation_mode
    prepared = []
    for i, utt in enumerate(utterances):
        nbest = simulate_nbest(utt, cfg, _utterance_rng(cfg.seed, stream, i), inventory)
        biasing = build_biasing_list(
            utt, cfg, _utterance_rng(cfg.seed, stream, i, _LIST_SUBSTREAM), inventory, mode
        )
        prepared.append(
            AnnotatedUtterance.model_validate(
                utt.model_dump(by_alias=True)
                | {
                    "nbest": nbest.model_dump(),
                    "biasing_list": biasing.model_dump(),
                    "ablation_mode": mode,
                }
            )
        )
    return prepared


def split_ingested(utterances: Sequence[AnnotatedUtterance], cfg: GenConfig) -> Corpus:
    """Shuffle ingested utterances into train/test (at most half go to test,
    capped by `cfg.n_test`) and prepare both against one shared inventory."""
    if not utterances:
        raise ValueError("no utterances to split")
    order = np.random.default_rng([cfg.seed, _INGEST_STREAM]).permutation(len(utterances))
    n_test = min(cfg.n_test, len(utterances) // 2)
    test = [utterances[int(i)] for i in order[:n_test]]
    train = [utterances[int(i)] for i in order[n_test:]]
    inventory = entity_pool(utterances)
    return Corpus(
        train=prepare_ingested(train, cfg, inventory, AblationMode.GT, _INGEST_STREAM),
        test=prepare_ingested(test, cfg, inventory, cfg.ablation_mode, _TEST_STREAM),
    )


def write_corpus(path: str | Path, utterances: Iterable[AnnotatedUtterance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt in utterances:
            f.write(utt.model_dump_json(by_alias=True) + "\n")


def read_corpus(path: str | Path) -> list[AnnotatedUtterance]:
    if not Path(path).exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    utterances = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                utterances.append(AnnotatedUtterance.model_validate_json(line))
            except ValidationError as e:
                raise ValueError(f"{path} line {lineno}: {e}") from e
    return utterances


def few_shot_pool(utterances: Iterable[AnnotatedUtterance]) -> list[FewShotExample]:
    return [
        FewShotExample(biasing_list=utt.biasing_list, sentence=utt.text) for utt in utterances
    ]


def sample_few_shot(
    pool: Sequence[FewShotExample],
    k: int,
    rng: np.random.Generator,
    exclude: str | None = None,
) -> list[FewShotExample]:
    """k examples drawn uniformly without replacement, skipping sentences equal
    to `exclude` (the utterance being trained on or scored)."""
    if k == 0:
        return []
    picked: list[FewShotExample] = []
    for i in rng.permutation(len(pool)):
        example = pool[int(i)]
        if example.sentence == exclude:
            continue
        picked.append(example)
        if len(picked) == k:
            return picked
    raise ValueError(f"few-shot pool too small: need {k} examples, found {len(picked)}")


def token_classes(text: str, spans: Sequence[EntitySpan]) -> list[EntityClass]:
    """Class of each character-token of `text`."""
    check_spans(text, spans)
    classes = [EntityClass.NONE] * len(text)
    for span in spans:
        classes[span.start : span.end] = [span.label] * (span.end - span.start)
    return classes
