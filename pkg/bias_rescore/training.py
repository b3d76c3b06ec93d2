# stdlib
import json
import logging
import math
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Sequence

# 3p
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

# project
from bias_rescore.datagen import (
    AnnotatedUtterance,
    EntitySpan,
    few_shot_pool,
    sample_few_shot,
    token_classes,
)
from bias_rescore.evaluation import class_f1
from bias_rescore.model import (
    IGNORE_INDEX,
    ModelConfig,
    MultiTaskLM,
    apply_lora,
    eval_mode,
    multitask_loss,
)
from bias_rescore.prompting import BiasingList, EntityClass, FewShotExample, build_prompt
from bias_rescore.tokenizer import SpecialToken, Vocab, build_vocab, encode


log = logging.getLogger(__name__)

# Always in the vocab so simulated spelling variants stay encodable.
BASE_ALPHABET = " " + string.ascii_lowercase + string.digits

_MARKUP_RE = re.compile(r"\[([^\[\]:]+):(PER|LOC|ORG)\]")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    lr_schedule: Literal["constant", "linear"] = "linear"
    warmup_steps: int = Field(default=100, ge=0)
    weight_decay: float = Field(default=0.01, ge=0)
    grad_clip_norm: float | None = Field(default=1.0, gt=0)
    # PER, LOC, ORG, NONE
    class_weights: list[float] = [0.33, 0.33, 0.33, 0.01]
    # None falls back to ModelConfig.task_weight_alpha.
    alpha: float | None = Field(default=None, ge=0, le=1)
    biasing_in_training: bool = True
    biasing_dropout: float = Field(default=0.1, ge=0, le=1)
    few_shot_k: int = Field(default=0, ge=0)
    holdout_fraction: float = Field(default=0.1, ge=0, lt=1)
    seed: int = 0

    @field_validator("class_weights")
    @classmethod
    def _check_weights(cls, weights: list[float]) -> list[float]:
        if len(weights) != 4:
            raise ValueError(f"expected 4 class weights (PER, LOC, ORG, NONE), got {len(weights)}")
        if any(w < 0 for w in weights):
            raise ValueError("class weights must be non-negative")
        return weights


def parse_annotated(markup: str) -> tuple[str, list[EntitySpan]]:
    """Split "call [amy:PER]" into ("call amy", [span over "amy"])."""
    text = ""
    spans = []
    pos = 0
    for match in _MARKUP_RE.finditer(markup):
        text += markup[pos : match.start()]
        entity, label = match.group(1), match.group(2)
        spans.append(
            EntitySpan(start=len(text), end=len(text) + len(entity), label=EntityClass(label))
        )
        text += entity
        pos = match.end()
    text += markup[pos:]
    if "[" in text or "]" in text:
        raise ValueError(f"malformed or overlapping annotation in {markup!r}")
    return text, spans


def class_targets_from_spans(text: str, spans: Sequence[EntitySpan]) -> list[EntityClass]:
    """Next-token classes: target t is the class of token t+1; the last token
    is followed by EOS, whose class is NONE."""
    return token_classes(text, spans)[1:] + [EntityClass.NONE]


def derive_class_targets(annotated_text: str) -> list[EntityClass]:
    return class_targets_from_spans(*parse_annotated(annotated_text))


@dataclass
class TrainExample:
    """Model input `ids` (the prompt) with next-token and next-class targets.

    The training sequence is the prompt followed by EOS, so target t is the
    sequence token at t+1. Only positions whose next token is an input token
    or the trailing EOS carry targets.
    """

    utterance_id: str
    ids: list[int]
    token_targets: list[int]
    class_targets: list[int]

    def __len__(self) -> int:
        return len(self.ids)


def build_train_example(
    utt: AnnotatedUtterance,
    vocab: Vocab,
    few_shot: Sequence[FewShotExample] = (),
    use_biasing: bool = True,
) -> TrainExample:
    biasing = utt.biasing_list if use_biasing else BiasingList()
    prompt = build_prompt(few_shot, biasing, utt.text, vocab)
    start, end = prompt.input
    if end - start != len(utt.text):
        raise ValueError(
            f"utterance {utt.utterance_id}: text contains special-token markup"
        )

    sequence = prompt.ids + [vocab.special_id(SpecialToken.EOS)]
    classes = token_classes(utt.text, utt.entities) + [EntityClass.NONE]
    token_targets = [IGNORE_INDEX] * len(prompt.ids)
    class_targets = [IGNORE_INDEX] * len(prompt.ids)
    for t in range(start - 1, end):
        token_targets[t] = sequence[t + 1]
        class_targets[t] = classes[t + 1 - start].class_id
    return TrainExample(
        utterance_id=utt.utterance_id,
        ids=prompt.ids,
        token_targets=token_targets,
        class_targets=class_targets,
    )


def corpus_texts(utterances: Iterable[AnnotatedUtterance]) -> list[str]:
    texts = [BASE_ALPHABET]
    for utt in utterances:
        texts.append(utt.text)
        texts.extend(h.text for h in utt.nbest.hypotheses)
        texts.extend(utt.biasing_list.entities())
    return texts


def collate(examples: Sequence[TrainExample], pad_id: int) -> tuple[torch.Tensor, ...]:
    """Right-pad to the longest example; padding never reaches real positions
    under causal attention."""
    width = max(len(e) for e in examples)
    ids = torch.full((len(examples), width), pad_id, dtype=torch.long)
    token_targets = torch.full((len(examples), width), IGNORE_INDEX, dtype=torch.long)
    class_targets = torch.full((len(examples), width), IGNORE_INDEX, dtype=torch.long)
    for i, e in enumerate(examples):
        ids[i, : len(e)] = torch.tensor(e.ids)
        token_targets[i, : len(e)] = torch.tensor(e.token_targets)
        class_targets[i, : len(e)] = torch.tensor(e.class_targets)
    return ids, token_targets, class_targets


def lr_lambda(schedule: str, warmup_steps: int, total_steps: int, offset: int = 0):
    def factor(step: int) -> float:
        step += offset
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        if schedule == "constant":
            return 1.0
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup_steps))

    return factor


def holdout_class_f1(
    model: MultiTaskLM, vocab: Vocab, utterances: Sequence[AnnotatedUtterance]
) -> float | None:
    """Macro F1 of next-token class predictions over the input positions."""
    if not utterances:
        return None
    predicted: list[list[EntityClass]] = []
    gold: list[list[EntityClass]] = []
    with eval_mode(model):
        for utt in utterances:
            example = build_train_example(utt, vocab)
            if len(example) > model.config.max_seq_len:
                continue
            logits = model(torch.tensor(example.ids, dtype=torch.long)).class_logits
            argmax = logits.argmax(dim=-1).tolist()
            scored = [t for t, c in enumerate(example.class_targets) if c != IGNORE_INDEX]
            predicted.append([EntityClass.from_id(argmax[t]) for t in scored])
            gold.append([EntityClass.from_id(example.class_targets[t]) for t in scored])
    if not gold:
        return None
    return class_f1(predicted, gold).macro_f1


@dataclass
class TrainResult:
    model: MultiTaskLM
    vocab: Vocab
    history: list[dict[str, Any]] = field(default_factory=list)
    step: int = 0
    epoch: int = 0
    optimizer_state: dict[str, Any] | None = None
    skipped: int = 0


def train(
    corpus: Sequence[AnnotatedUtterance],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    vocab: Vocab | None = None,
    model: MultiTaskLM | None = None,
    log_path: str | Path | None = None,
    start_step: int = 0,
    start_epoch: int = 0,
    optimizer_state: dict[str, Any] | None = None,
    progress: bool = False,
) -> TrainResult:
    """Jointly train the token and class heads on reference transcripts.

    With `mcfg.lora_rank > 0` a base `model` is required; adapters are added
    if missing and only they are optimized.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    vocab = vocab or build_vocab(corpus_texts(corpus))
    alpha = tcfg.alpha if tcfg.alpha is not None else mcfg.task_weight_alpha

    torch.manual_seed(tcfg.seed)
    gumbel_gen = torch.Generator().manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)

    if model is None:
        if mcfg.lora_rank:
            raise ValueError("LoRA fine-tuning needs a base model checkpoint")
        model = MultiTaskLM(mcfg.model_copy(update={"vocab_size": vocab.vocab_size}))
    elif mcfg.lora_rank and not model.has_adapters:
        apply_lora(model, mcfg.lora_rank)
    if model.config.vocab_size != vocab.vocab_size:
        raise ValueError(
            f"model vocab size {model.config.vocab_size} does not match vocab "
            f"size {vocab.vocab_size}"
        )

    order = rng.permutation(len(corpus))
    n_holdout = int(round(len(corpus) * tcfg.holdout_fraction))
    if n_holdout >= len(corpus):
        n_holdout = 0
    holdout = [corpus[int(i)] for i in order[:n_holdout]]
    train_set = [corpus[int(i)] for i in order[n_holdout:]]
    pool = few_shot_pool(train_set)

    max_len = model.config.max_seq_len
    fits = sum(
        len(build_train_example(u, vocab, use_biasing=tcfg.biasing_in_training)) <= max_len
        for u in train_set
    )
    if fits == 0:
        raise ValueError(f"all {len(train_set)} training examples exceed max_seq_len {max_len}")
    total_steps = start_step + tcfg.epochs * math.ceil(fits / tcfg.batch_size)

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(
        params, lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay
    )
    if optimizer_state:
        optimizer.load_state_dict(optimizer_state)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lr_lambda(tcfg.lr_schedule, tcfg.warmup_steps, total_steps, offset=start_step),
    )
    pad_id = vocab.special_id(SpecialToken.PAD)

    log.info(
        f"Training on {len(train_set)} utterances ({len(holdout)} held out), "
        f"{sum(p.numel() for p in params)} trainable parameters, alpha {alpha}"
    )
    result = TrainResult(model=model, vocab=vocab, step=start_step, epoch=start_epoch)
    # A fresh run truncates the log; a resumed run continues it.
    log_mode = "a" if start_step else "w"
    log_file = open(log_path, log_mode, encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch + 1, start_epoch + tcfg.epochs + 1):
            examples = []
            skipped = 0
            for i in rng.permutation(len(train_set)):
                utt = train_set[int(i)]
                use_biasing = tcfg.biasing_in_training and rng.random() >= tcfg.biasing_dropout
                few_shot = sample_few_shot(pool, tcfg.few_shot_k, rng, exclude=utt.text)
                example = build_train_example(utt, vocab, few_shot, use_biasing)
                if len(example) > max_len:
                    skipped += 1
                    continue
                examples.append(example)
            if skipped:
                log.warning(f"Epoch {epoch}: skipped {skipped} examples longer than {max_len}")
            result.skipped = skipped

            model.train()
            sums = {"l_token": 0.0, "l_class": 0.0, "total": 0.0}
            batches = range(0, len(examples), tcfg.batch_size)
            for b in tqdm(batches, desc=f"epoch {epoch}", disable=not progress):
                ids, token_targets, class_targets = collate(
                    examples[b : b + tcfg.batch_size], pad_id
                )
                out = model(ids, generator=gumbel_gen)
                loss = multitask_loss(
                    out, token_targets, class_targets, alpha, tcfg.class_weights
                )
                optimizer.zero_grad()
                loss.total.backward()
                if tcfg.grad_clip_norm:
                    torch.nn.utils.clip_grad_norm_(params, tcfg.grad_clip_norm)
                optimizer.step()
                scheduler.step()
                result.step += 1
                sums["l_token"] += loss.token.item()
                sums["l_class"] += loss.klass.item()
                sums["total"] += loss.total.item()

            record: dict[str, Any] = {"epoch": epoch, "step": result.step}
            record.update({k: v / max(len(batches), 1) for k, v in sums.items()})
            record["class_f1"] = holdout_class_f1(model, vocab, holdout)
            result.history.append(record)
            result.epoch = epoch
            log.info(
                f"Epoch {epoch}: total {record['total']:.4f} token {record['l_token']:.4f} "
                f"class {record['l_class']:.4f} holdout F1 {record['class_f1']}"
            )
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()

    model.eval()
    result.optimizer_state = optimizer.state_dict()
    return result
