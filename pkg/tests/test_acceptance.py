"""End-to-end direction checks on the default synthetic corpus.

These train the default model (several minutes on one CPU core) and are
deselected unless run with `-m slow`.
"""

from pathlib import Path

import pytest

from bias_rescore.config import load_config
from bias_rescore.datagen import AblationMode, build_inventory, few_shot_pool, generate_corpus
from bias_rescore.evaluation import evaluate, sweep_list_length
from bias_rescore.rescoring import RescoreMode
from bias_rescore.training import train

pytestmark = pytest.mark.slow

BIASED_MODES = ["static", "few_shot", "dynamic"]


@pytest.fixture(scope="module")
def config():
    return load_config(Path(__file__).parent.parent / "configs" / "default.yaml")


@pytest.fixture(scope="module")
def corpus(config):
    return generate_corpus(config.gen)


@pytest.fixture(scope="module")
def trained(config, corpus):
    result = train(corpus.train, config.model, config.train)
    return result.model, result.vocab


def _evaluate(config, trained, corpus):
    model, vocab = trained
    report, _ = evaluate(
        model,
        vocab,
        corpus.test,
        list(RescoreMode),
        few_shot_pool=few_shot_pool(corpus.train),
        few_shot_k=config.rescoring.few_shot_k,
        beta=config.rescoring.beta,
        seed=config.seed,
    )
    return report


@pytest.fixture(scope="module")
def gt_report(config, corpus, trained):
    return _evaluate(config, trained, corpus)


def test_mode_ordering(gt_report):
    modes = gt_report.modes
    for result in modes.values():
        assert gt_report.oracle_wer < result.wer
    assert modes["static"].wer <= 0.95 * modes["plain"].wer
    assert modes["dynamic"].wer <= modes["static"].wer
    assert modes["dynamic"].wer <= gt_report.baseline_wer
    assert gt_report.class_f1 >= 0.9


def test_ngt_lists_do_not_hurt(config, corpus, trained, gt_report):
    ngt_gen = config.gen.model_copy(update={"ablation_mode": AblationMode.NGT})
    ngt = generate_corpus(ngt_gen)
    # Same utterances and n-best lists; only the test biasing lists differ.
    assert [u.nbest for u in ngt.test] == [u.nbest for u in corpus.test]
    report = _evaluate(config, trained, ngt)
    plain = report.modes["plain"].wer
    for mode in BIASED_MODES:
        assert report.modes[mode].wer <= 1.02 * plain
        assert gt_report.modes[mode].wer <= 0.95 * report.modes[mode].wer


def test_list_length_sweep(config, corpus, trained):
    model, vocab = trained
    rows = sweep_list_length(
        model,
        vocab,
        corpus.test,
        lengths=[6, 30, 60],
        modes=[RescoreMode.STATIC, RescoreMode.DYNAMIC],
        pool=build_inventory(config.gen),
        beta=config.rescoring.beta,
        seed=config.seed,
    )

    def spread(mode):
        wers = [r.wer for r in rows if r.mode == mode]
        return max(wers) - min(wers)

    assert spread("dynamic") <= spread("static")
    at_60 = {r.mode: r.mean_prompt_length for r in rows if r.list_length == 60}
    assert at_60["dynamic"] <= 0.45 * at_60["static"]
