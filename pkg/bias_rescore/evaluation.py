# stdlib
import csv
import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

# 3p
import jinja2
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, computed_field

# project
from bias_rescore.datagen import (
    AnnotatedUtterance,
    Inventory,
    sample_few_shot,
    token_classes,
)
from bias_rescore.model import MultiTaskLM, eval_mode
from bias_rescore.prompting import (
    BIASING_CLASSES,
    BiasingList,
    EntityClass,
    FewShotExample,
    Prompt,
)
from bias_rescore.rescoring import (
    Hypothesis,
    HypothesisScore,
    NBestList,
    RescoreJob,
    RescoreMode,
    RescoreResult,
    ScoreFn,
    predict_classes,
    rescore_corpus,
)
from bias_rescore.tokenizer import Vocab


log = logging.getLogger(__name__)

SWEEP_CSV_HEADER = ["list_length", "mode", "wer"]


class WerBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True)

    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @computed_field  # type: ignore[misc]
    @property
    def wer(self) -> float:
        return self.errors / self.ref_len if self.ref_len else 0.0

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(
            substitutions=self.substitutions + other.substitutions,
            deletions=self.deletions + other.deletions,
            insertions=self.insertions + other.insertions,
            ref_len=self.ref_len + other.ref_len,
        )


def wer(reference: str, hypothesis: str) -> WerBreakdown:
    """Word-level Levenshtein alignment over case-folded, whitespace-split words.

    The backtrace prefers substitution, then deletion, then insertion.
    """
    ref = reference.lower().split()
    hyp = hypothesis.lower().split()
    if not ref:
        raise ValueError("empty reference")

    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)

    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if d[i, j] == d[i - 1, j - 1] + cost:
                s += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(substitutions=s, deletions=dl, insertions=ins, ref_len=n)


def corpus_wer(breakdowns: Iterable[WerBreakdown]) -> WerBreakdown:
    """Summed errors over summed reference lengths."""
    return sum(breakdowns, WerBreakdown())


def oracle_wer(nbest: NBestList) -> WerBreakdown:
    """Lowest-WER hypothesis; ties go to the lowest first-pass rank."""
    scored = [wer(nbest.reference, h.text) for h in nbest.hypotheses]
    rank = min(range(len(scored)), key=lambda r: (scored[r].errors, r))
    return scored[rank]


def oracle_score_fn(nbest: NBestList) -> ScoreFn:
    """Scores a hypothesis by its negated word errors against the reference."""
    return lambda hyp: HypothesisScore(ll=-float(wer(nbest.reference, hyp.text).errors))


def relative_improvement(baseline: float, value: float) -> float:
    return (baseline - value) / baseline if baseline else 0.0


class ClassScores(BaseModel):
    precision: float
    recall: float
    f1: float
    support: int


class ClassF1(BaseModel):
    per_class: dict[str, ClassScores]
    macro_f1: float


def class_f1(
    predicted: Sequence[Sequence[EntityClass]], gold: Sequence[Sequence[EntityClass]]
) -> ClassF1:
    """Token-level P/R/F1 for PER, LOC and ORG.

    Classes absent from both gold and predictions are left out of the macro
    average; with no entity classes at all the macro F1 is 1.0.
    """
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predicted sequences for {len(gold)} gold sequences")
    tp = {cls: 0 for cls in BIASING_CLASSES}
    fp = {cls: 0 for cls in BIASING_CLASSES}
    fn = {cls: 0 for cls in BIASING_CLASSES}
    for i, (pred_seq, gold_seq) in enumerate(zip(predicted, gold)):
        if len(pred_seq) != len(gold_seq):
            raise ValueError(
                f"sequence {i}: {len(pred_seq)} predictions for {len(gold_seq)} gold labels"
            )
        for p, g in zip(pred_seq, gold_seq):
            if p == g and g != EntityClass.NONE:
                tp[g] += 1
                continue
            if p != EntityClass.NONE:
                fp[p] += 1
            if g != EntityClass.NONE:
                fn[g] += 1

    per_class = {}
    for cls in BIASING_CLASSES:
        if tp[cls] + fp[cls] + fn[cls] == 0:
            continue
        precision = tp[cls] / (tp[cls] + fp[cls]) if tp[cls] + fp[cls] else 0.0
        recall = tp[cls] / (tp[cls] + fn[cls]) if tp[cls] + fn[cls] else 0.0
        f1 = 2 * tp[cls] / (2 * tp[cls] + fp[cls] + fn[cls])
        per_class[cls.value] = ClassScores(
            precision=precision, recall=recall, f1=f1, support=tp[cls] + fn[cls]
        )
    macro = (
        sum(s.f1 for s in per_class.values()) / len(per_class) if per_class else 1.0
    )
    return ClassF1(per_class=per_class, macro_f1=macro)


class ModeResult(BaseModel):
    wer: float
    relative_improvement: float
    mean_prompt_length: float


class EvalReport(BaseModel):
    n_utterances: int
    ablation_mode: str | None = None
    baseline_wer: float
    oracle_wer: float
    modes: dict[str, ModeResult] = {}
    class_f1: float | None = None
    per_class_f1: dict[str, ClassScores] = {}


def few_shot_examples(
    utterances: Sequence[AnnotatedUtterance],
    pool: Sequence[FewShotExample],
    k: int,
    seed: int,
) -> list[list[FewShotExample]]:
    return [
        sample_few_shot(pool, k, np.random.default_rng([seed, i]), exclude=utt.text)
        for i, utt in enumerate(utterances)
    ]


def _mean_prompt_length(results: Sequence[RescoreResult]) -> float:
    lengths = [s.prompt_length for r in results for s in r.scored]
    return float(np.mean(lengths)) if lengths else 0.0


def evaluate_class_predictions(
    model: MultiTaskLM, vocab: Vocab, utterances: Sequence[AnnotatedUtterance]
) -> ClassF1:
    """Class-head predictions on the references against their span labels."""
    predicted, gold = [], []
    for utt in utterances:
        hyp = Hypothesis(text=utt.text, first_pass_score=0.0)
        predicted.append(predict_classes(model, vocab, hyp))
        gold.append(token_classes(utt.text, utt.entities))
    return class_f1(predicted, gold)


def evaluate(
    model: MultiTaskLM,
    vocab: Vocab,
    utterances: Sequence[AnnotatedUtterance],
    modes: Sequence[RescoreMode],
    beta: float = 0.0,
    few_shot_pool: Sequence[FewShotExample] = (),
    few_shot_k: int = 2,
    seed: int = 0,
    threads: int = 1,
    progress: bool = False,
) -> tuple[EvalReport, dict[str, list[RescoreResult]]]:
    if not utterances:
        raise ValueError("evaluation corpus is empty")
    baseline = corpus_wer(wer(u.nbest.reference, u.nbest.hypotheses[0].text) for u in utterances)
    oracle = corpus_wer(oracle_wer(u.nbest) for u in utterances)

    few_shot: list[list[FewShotExample]] = [[] for _ in utterances]
    if RescoreMode.FEW_SHOT in modes:
        few_shot = few_shot_examples(utterances, few_shot_pool, few_shot_k, seed)

    report = EvalReport(
        n_utterances=len(utterances),
        ablation_mode=utterances[0].ablation_mode.value if utterances[0].ablation_mode else None,
        baseline_wer=baseline.wer,
        oracle_wer=oracle.wer,
    )
    outputs: dict[str, list[RescoreResult]] = {}
    for mode in modes:
        mode = RescoreMode(mode)
        jobs = [
            RescoreJob(u.nbest, u.biasing_list, examples)
            for u, examples in zip(utterances, few_shot)
        ]
        results = rescore_corpus(model, vocab, jobs, mode, beta, threads, progress)
        mode_wer = corpus_wer(
            wer(u.nbest.reference, r.selected.text) for u, r in zip(utterances, results)
        ).wer
        report.modes[mode.value] = ModeResult(
            wer=mode_wer,
            relative_improvement=relative_improvement(baseline.wer, mode_wer),
            mean_prompt_length=_mean_prompt_length(results),
        )
        outputs[mode.value] = results
        log.info(f"{mode.value}: WER {mode_wer:.4f} (baseline {baseline.wer:.4f})")

    if modes:
        f1 = evaluate_class_predictions(model, vocab, utterances)
        report.class_f1 = f1.macro_f1
        report.per_class_f1 = f1.per_class
    return report, outputs


def _template_env() -> jinja2.Environment:
    return jinja2.Environment(
        loader=jinja2.PackageLoader("bias_rescore", "templates"),
        autoescape=False,
        trim_blocks=True,
        lstrip_blocks=True,
    )


def render_report(report: EvalReport) -> str:
    return _template_env().get_template("report.md.j2").render(report=report)


def write_report(
    report: EvalReport, out_dir: str | Path, outputs: dict[str, list[RescoreResult]] | None = None
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    (out_dir / "report.md").write_text(render_report(report), encoding="utf-8")
    for mode, results in (outputs or {}).items():
        with open(out_dir / f"rescored_{mode}.jsonl", "w", encoding="utf-8") as f:
            for result in results:
                f.write(json.dumps(result.to_record()) + "\n")
    log.info(f"Wrote evaluation report to {out_dir}")


def resize_biasing_list(
    utt: AnnotatedUtterance,
    total: int,
    pool: Inventory,
    rng: np.random.Generator,
) -> BiasingList:
    """Pad or trim an utterance's list to `total` entities with balanced
    per-class quotas. Ground-truth entities are never dropped and the
    existing order is kept."""
    if total < 1:
        raise ValueError(f"list length must be >= 1, got {total}")
    truth = utt.entities_by_class()
    base, extra = divmod(total, len(BIASING_CLASSES))
    entries: dict[EntityClass, list[str]] = {}
    for i, cls in enumerate(BIASING_CLASSES):
        quota = base + (1 if i < extra else 0)
        current = utt.biasing_list.get(cls)
        gt = set(truth[cls])
        while len(current) > quota:
            drop = next((e for e in reversed(current) if e not in gt), None)
            if drop is None:
                break
            current.remove(drop)
        taken = set(current) | gt
        candidates = [e for e in pool.get(cls, []) if e not in taken]
        need = quota - len(current)
        if need > len(candidates):
            raise ValueError(
                f"{cls.value} distractor pool exhausted: need {need}, have {len(candidates)}"
            )
        if need > 0:
            current += [candidates[int(j)] for j in rng.choice(len(candidates), need, replace=False)]
        entries[cls] = current
    return BiasingList.from_classes(entries)


class SweepRow(BaseModel):
    list_length: int
    mode: str
    wer: float
    mean_prompt_length: float


def sweep_list_length(
    model: MultiTaskLM,
    vocab: Vocab,
    utterances: Sequence[AnnotatedUtterance],
    lengths: Sequence[int],
    modes: Sequence[RescoreMode],
    pool: Inventory,
    beta: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    progress: bool = False,
) -> list[SweepRow]:
    rows = []
    for length in lengths:
        lists = [
            resize_biasing_list(utt, length, pool, np.random.default_rng([seed, length, i]))
            for i, utt in enumerate(utterances)
        ]
        for mode in modes:
            mode = RescoreMode(mode)
            jobs = [RescoreJob(u.nbest, bl) for u, bl in zip(utterances, lists)]
            results = rescore_corpus(model, vocab, jobs, mode, beta, threads, progress)
            mode_wer = corpus_wer(
                wer(u.nbest.reference, r.selected.text) for u, r in zip(utterances, results)
            ).wer
            rows.append(
                SweepRow(
                    list_length=length,
                    mode=mode.value,
                    wer=mode_wer,
                    mean_prompt_length=_mean_prompt_length(results),
                )
            )
            log.info(f"L={length} {mode.value}: WER {mode_wer:.4f}")
    return rows


def write_sweep(rows: Sequence[SweepRow], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_CSV_HEADER)
        for row in rows:
            writer.writerow([row.list_length, row.mode, row.wer])
    (out_dir / "sweep.json").write_text(
        json.dumps([row.model_dump() for row in rows], indent=2), encoding="utf-8"
    )
    return csv_path


def export_attention(
    model: MultiTaskLM,
    vocab: Vocab,
    prompt: Prompt,
    layers: Sequence[int],
    out_dir: str | Path,
) -> list[Path]:
    """Write one CSV per (layer, head); row and column labels are the prompt tokens."""
    n_layers = model.config.n_layers
    for layer in layers:
        if not 0 <= layer < n_layers:
            raise ValueError(f"layer {layer} out of range for a {n_layers}-layer model")

    with eval_mode(model):
        out = model(torch.tensor(prompt.ids, dtype=torch.long), retain_attention=True)
        attention = [w.tolist() for w in out.attention_weights]

    labels = [vocab.surface(i) for i in prompt.ids]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer in layers:
        for head, matrix in enumerate(attention[layer]):
            path = out_dir / f"attention_layer{layer}_head{head}.csv"
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["", *labels])
                for label, row in zip(labels, matrix):
                    writer.writerow([label, *row])
            paths.append(path)
    log.info(f"Exported {len(paths)} attention matrices to {out_dir}")
    return paths
