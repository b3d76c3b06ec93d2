# stdlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Any, Callable, NamedTuple, Sequence

# 3p
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

# project
from bias_rescore.model import MultiTaskLM, eval_mode, token_log_probs
from bias_rescore.prompting import (
    BiasingList,
    EntityClass,
    FewShotExample,
    build_biasing_segment,
    build_prompt,
    prompt_length,
    select_class_context,
)
from bias_rescore.tokenizer import Vocab


log = logging.getLogger(__name__)


class RescoreMode(str, Enum):
    PLAIN = "plain"
    STATIC = "static"
    FEW_SHOT = "few_shot"
    DYNAMIC = "dynamic"


class Hypothesis(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    # Log-domain, higher is better.
    first_pass_score: float
    # Word edit distance to the reference, when the hypothesis was simulated.
    edit_magnitude: int | None = None

    @field_validator("text")
    @classmethod
    def _non_empty(cls, text: str) -> str:
        if not text:
            raise ValueError("hypothesis text must be non-empty")
        return text


class NBestList(BaseModel):
    """Hypotheses for one utterance, kept sorted by first-pass score (rank 0 first)."""

    model_config = ConfigDict(frozen=True)

    utterance_id: str
    reference: str
    hypotheses: list[Hypothesis] = Field(min_length=1)

    @field_validator("hypotheses")
    @classmethod
    def _sort(cls, hypotheses: list[Hypothesis]) -> list[Hypothesis]:
        return sorted(hypotheses, key=lambda h: -h.first_pass_score)


class ScoredHypothesis(BaseModel):
    hypothesis: Hypothesis
    rank: int
    second_pass_ll: float
    combined_score: float
    per_token_classes: list[EntityClass] | None = None
    # Token count of the longest prompt used to score the hypothesis.
    prompt_length: int = 0


class HypothesisScore(NamedTuple):
    ll: float
    per_token_classes: list[EntityClass] | None = None
    prompt_length: int = 0


ScoreFn = Callable[[Hypothesis], HypothesisScore]


class RescoreResult(BaseModel):
    utterance_id: str
    mode: str
    selected: Hypothesis
    selected_rank: int
    scored: list[ScoredHypothesis]

    def to_record(self) -> dict[str, Any]:
        best = self.scored[self.selected_rank]
        return {
            "utterance_id": self.utterance_id,
            "mode": self.mode,
            "selected_text": self.selected.text,
            "scores": [
                {
                    "text": s.hypothesis.text,
                    "rank": s.rank,
                    "first_pass_score": s.hypothesis.first_pass_score,
                    "second_pass_ll": s.second_pass_ll,
                    "combined_score": s.combined_score,
                    "prompt_length": s.prompt_length,
                }
                for s in self.scored
            ],
            "per_token_classes": (
                [c.value for c in best.per_token_classes]
                if best.per_token_classes is not None
                else None
            ),
        }


class RescoreJob(NamedTuple):
    nbest: NBestList
    biasing_list: BiasingList
    few_shot: Sequence[FewShotExample] = ()


def _scored(
    hyp: Hypothesis, rank: int, score: HypothesisScore, beta: float
) -> ScoredHypothesis:
    return ScoredHypothesis(
        hypothesis=hyp,
        rank=rank,
        second_pass_ll=score.ll,
        combined_score=beta * hyp.first_pass_score + score.ll,
        per_token_classes=score.per_token_classes,
        prompt_length=score.prompt_length,
    )


def _static_score(
    model: MultiTaskLM,
    vocab: Vocab,
    biasing_list: BiasingList,
    few_shot: Sequence[FewShotExample],
    hyp: Hypothesis,
) -> HypothesisScore:
    prompt = build_prompt(few_shot, biasing_list, hyp.text, vocab)
    return HypothesisScore(
        ll=math.fsum(token_log_probs(model, prompt)),
        prompt_length=prompt_length(prompt),
    )


def score_static(
    model: MultiTaskLM,
    vocab: Vocab,
    biasing_list: BiasingList,
    few_shot: Sequence[FewShotExample],
    hyp: Hypothesis,
    beta: float = 0.0,
) -> ScoredHypothesis:
    return _scored(hyp, 0, _static_score(model, vocab, biasing_list, few_shot, hyp), beta)


def predict_classes(model: MultiTaskLM, vocab: Vocab, hyp: Hypothesis) -> list[EntityClass]:
    """Predicted class of each hypothesis token, read off the class head at the
    preceding position of a context-free prompt. Ties go to the lowest class id."""
    prompt = build_prompt([], BiasingList(), hyp.text, vocab)
    start, end = prompt.input
    with eval_mode(model):
        class_logits = model(torch.tensor(prompt.ids, dtype=torch.long)).class_logits
        # torch.argmax returns the first maximal index.
        predicted = class_logits[start - 1 : end - 1].argmax(dim=-1).tolist()
    return [EntityClass.from_id(c) for c in predicted]


def _dynamic_score(
    model: MultiTaskLM, vocab: Vocab, biasing_list: BiasingList, hyp: Hypothesis
) -> HypothesisScore:
    classes = predict_classes(model, vocab, hyp)
    # One pass per distinct context; NONE and empty classes share the bare prompt.
    passes: dict[str, list[float]] = {}
    lengths: list[int] = []
    terms: dict[EntityClass, list[float]] = {}
    for cls in dict.fromkeys(classes):
        context = select_class_context(biasing_list, cls)
        segment = build_biasing_segment(context)
        if segment not in passes:
            prompt = build_prompt([], context, hyp.text, vocab)
            passes[segment] = token_log_probs(model, prompt)
            lengths.append(prompt_length(prompt))
        terms[cls] = passes[segment]
    ll = math.fsum(terms[cls][j] for j, cls in enumerate(classes))
    return HypothesisScore(ll=ll, per_token_classes=classes, prompt_length=max(lengths))


def score_dynamic(
    model: MultiTaskLM,
    vocab: Vocab,
    biasing_list: BiasingList,
    hyp: Hypothesis,
    beta: float = 0.0,
) -> ScoredHypothesis:
    return _scored(hyp, 0, _dynamic_score(model, vocab, biasing_list, hyp), beta)


def rescore_with(nbest: NBestList, score_fn: ScoreFn, beta: float = 0.0) -> RescoreResult:
    """Score every hypothesis and select the best combined score.

    Ties fall back to the higher first-pass score, then to the text, so the
    selection does not depend on the input order of the hypotheses.
    """
    scored = [
        _scored(hyp, rank, score_fn(hyp), beta) for rank, hyp in enumerate(nbest.hypotheses)
    ]
    best = min(
        scored,
        key=lambda s: (-s.combined_score, -s.hypothesis.first_pass_score, s.hypothesis.text),
    )
    return RescoreResult(
        utterance_id=nbest.utterance_id,
        mode="",
        selected=best.hypothesis,
        selected_rank=best.rank,
        scored=scored,
    )


def make_score_fn(
    model: MultiTaskLM,
    vocab: Vocab,
    mode: RescoreMode,
    biasing_list: BiasingList,
    few_shot: Sequence[FewShotExample] = (),
) -> ScoreFn:
    if mode == RescoreMode.PLAIN:
        return lambda hyp: _static_score(model, vocab, BiasingList(), [], hyp)
    if mode == RescoreMode.STATIC:
        return lambda hyp: _static_score(model, vocab, biasing_list, [], hyp)
    if mode == RescoreMode.FEW_SHOT:
        return lambda hyp: _static_score(model, vocab, biasing_list, few_shot, hyp)
    if mode == RescoreMode.DYNAMIC:
        return lambda hyp: _dynamic_score(model, vocab, biasing_list, hyp)
    raise ValueError(f"unknown rescoring mode {mode}")


def rescore(
    model: MultiTaskLM,
    vocab: Vocab,
    nbest: NBestList,
    biasing_list: BiasingList,
    mode: RescoreMode,
    beta: float = 0.0,
    few_shot: Sequence[FewShotExample] = (),
) -> RescoreResult:
    score_fn = make_score_fn(model, vocab, RescoreMode(mode), biasing_list, few_shot)
    try:
        result = rescore_with(nbest, score_fn, beta)
    except ValueError as e:
        raise ValueError(f"utterance {nbest.utterance_id}: {e}") from e
    return result.model_copy(update={"mode": RescoreMode(mode).value})


def rescore_corpus(
    model: MultiTaskLM,
    vocab: Vocab,
    jobs: Sequence[RescoreJob],
    mode: RescoreMode,
    beta: float = 0.0,
    threads: int = 1,
    progress: bool = False,
) -> list[RescoreResult]:
    """Rescore many n-best lists; results come back in input order."""
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    # Concurrent scorers must not toggle the train/eval flag under each other.
    model.eval()

    def run(job: RescoreJob) -> RescoreResult:
        return rescore(model, vocab, job.nbest, job.biasing_list, mode, beta, job.few_shot)

    desc = f"rescoring ({RescoreMode(mode).value})"
    if threads == 1:
        return [run(job) for job in tqdm(jobs, desc=desc, disable=not progress)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(tqdm(pool.map(run, jobs), total=len(jobs), desc=desc, disable=not progress))
