import math

import pytest
import torch

from bias_rescore.datagen import generate_corpus
from bias_rescore.evaluation import oracle_score_fn, oracle_wer, wer
from bias_rescore.model import MultiTaskLM, sentence_log_likelihood, token_log_probs
from bias_rescore.prompting import (
    BiasingList,
    EntityClass,
    FewShotExample,
    build_prompt,
    select_class_context,
)
from bias_rescore.rescoring import (
    Hypothesis,
    HypothesisScore,
    NBestList,
    RescoreJob,
    RescoreMode,
    predict_classes,
    rescore,
    rescore_corpus,
    rescore_with,
    score_dynamic,
    score_static,
)


@pytest.fixture
def biasing_list():
    return BiasingList(PER=["amy", "kalo"], LOC=["paris"], ORG=["acme", "tivor"])


@pytest.fixture
def nbest():
    return NBestList(
        utterance_id="u1",
        reference="call amy now",
        hypotheses=[
            Hypothesis(text="call emmy now", first_pass_score=-1.0),
            Hypothesis(text="call amy now", first_pass_score=-1.5),
            Hypothesis(text="fall amy now", first_pass_score=-2.5),
        ],
    )


def test_nbest_sorted_by_first_pass_score():
    nbest = NBestList(
        utterance_id="u",
        reference="a",
        hypotheses=[
            Hypothesis(text="b", first_pass_score=-3.0),
            Hypothesis(text="a", first_pass_score=-1.0),
            Hypothesis(text="c", first_pass_score=-2.0),
        ],
    )
    assert [h.text for h in nbest.hypotheses] == ["a", "c", "b"]


def test_nbest_rejects_empty_list():
    with pytest.raises(ValueError):
        NBestList(utterance_id="u", reference="a", hypotheses=[])


def test_hypothesis_rejects_empty_text():
    with pytest.raises(ValueError):
        Hypothesis(text="", first_pass_score=0.0)


def test_score_static_is_deterministic(tiny_model, vocab, biasing_list):
    hyp = Hypothesis(text="call amy", first_pass_score=0.0)
    a = score_static(tiny_model, vocab, biasing_list, [], hyp)
    b = score_static(tiny_model, vocab, biasing_list, [], hyp)
    assert a.second_pass_ll == b.second_pass_ll
    assert a.second_pass_ll < 0


def test_score_static_matches_sentence_log_likelihood(tiny_model, vocab, biasing_list):
    hyp = Hypothesis(text="navigate to paris", first_pass_score=-2.0)
    scored = score_static(tiny_model, vocab, biasing_list, [], hyp, beta=0.5)
    prompt = build_prompt([], biasing_list, hyp.text, vocab)
    assert scored.second_pass_ll == pytest.approx(sentence_log_likelihood(tiny_model, prompt))
    assert scored.combined_score == pytest.approx(0.5 * -2.0 + scored.second_pass_ll)
    assert scored.prompt_length == len(prompt)


def test_empty_list_scores_like_plain(tiny_model, vocab):
    hyp = Hypothesis(text="call amy", first_pass_score=0.0)
    static = score_static(tiny_model, vocab, BiasingList(), [], hyp)
    dynamic = score_dynamic(tiny_model, vocab, BiasingList(), hyp)
    plain = sentence_log_likelihood(tiny_model, build_prompt([], BiasingList(), hyp.text, vocab))
    assert static.second_pass_ll == pytest.approx(plain)
    assert dynamic.second_pass_ll == pytest.approx(plain)


def test_predict_classes_one_per_token(tiny_model, vocab):
    hyp = Hypothesis(text="call amy", first_pass_score=0.0)
    classes = predict_classes(tiny_model, vocab, hyp)
    assert len(classes) == len(hyp.text)
    assert all(isinstance(c, EntityClass) for c in classes)


def test_dynamic_equals_static_when_every_token_is_one_class(tiny_model, vocab, biasing_list):
    with torch.no_grad():
        tiny_model.class_head.weight.zero_()
        tiny_model.class_head.bias.copy_(torch.tensor([5.0, 0.0, 0.0, 0.0]))
    hyp = Hypothesis(text="call amy", first_pass_score=0.0)

    dynamic = score_dynamic(tiny_model, vocab, biasing_list, hyp)
    per_only = BiasingList(PER=biasing_list.PER)
    static = score_static(tiny_model, vocab, per_only, [], hyp)

    assert dynamic.per_token_classes == [EntityClass.PER] * len(hyp.text)
    assert dynamic.second_pass_ll == static.second_pass_ll


def test_dynamic_matches_per_token_recomputation(tiny_model, vocab, biasing_list):
    hyp = Hypothesis(text="text kalo at acme", first_pass_score=0.0)
    scored = score_dynamic(tiny_model, vocab, biasing_list, hyp)
    classes = scored.per_token_classes

    expected = []
    for j, cls in enumerate(classes):
        context = select_class_context(biasing_list, cls)
        prompt = build_prompt([], context, hyp.text, vocab)
        expected.append(token_log_probs(tiny_model, prompt)[j])
    assert scored.second_pass_ll == pytest.approx(math.fsum(expected))


def test_dynamic_prompt_no_longer_than_static(tiny_model, vocab, biasing_list):
    hyp = Hypothesis(text="call amy", first_pass_score=0.0)
    dynamic = score_dynamic(tiny_model, vocab, biasing_list, hyp)
    static = score_static(tiny_model, vocab, biasing_list, [], hyp)
    assert dynamic.prompt_length <= static.prompt_length


def test_single_hypothesis_always_selected(tiny_model, vocab, biasing_list):
    nbest = NBestList(
        utterance_id="u",
        reference="call amy",
        hypotheses=[Hypothesis(text="call emmy", first_pass_score=-4.0)],
    )
    for mode in RescoreMode:
        result = rescore(tiny_model, vocab, nbest, biasing_list, mode)
        assert result.selected_rank == 0
        assert result.mode == mode.value


def test_large_beta_keeps_first_pass_best(tiny_model, vocab, nbest, biasing_list):
    result = rescore(tiny_model, vocab, nbest, biasing_list, RescoreMode.STATIC, beta=1e9)
    assert result.selected_rank == 0
    assert result.selected.text == "call emmy now"


def test_selection_independent_of_input_order(nbest):
    reversed_nbest = NBestList(
        utterance_id=nbest.utterance_id,
        reference=nbest.reference,
        hypotheses=list(reversed(nbest.hypotheses)),
    )

    def constant(hyp):
        return HypothesisScore(ll=-1.0)

    assert rescore_with(nbest, constant).selected == rescore_with(reversed_nbest, constant).selected
    # Equal scores fall back to the higher first-pass score.
    assert rescore_with(nbest, constant).selected_rank == 0


def test_oracle_scorer_reaches_oracle_wer(nbest):
    result = rescore_with(nbest, oracle_score_fn(nbest))
    assert wer(nbest.reference, result.selected.text).errors == oracle_wer(nbest).errors
    assert result.selected.text == "call amy now"


def test_rescore_corpus_threads_match_serial(tiny_model, vocab, nbest, biasing_list):
    other = NBestList(
        utterance_id="u2",
        reference="navigate to paris",
        hypotheses=[
            Hypothesis(text="navigate to pars", first_pass_score=-1.0),
            Hypothesis(text="navigate to paris", first_pass_score=-1.2),
        ],
    )
    jobs = [RescoreJob(nbest, biasing_list), RescoreJob(other, biasing_list)] * 3
    serial = rescore_corpus(tiny_model, vocab, jobs, RescoreMode.DYNAMIC, threads=1)
    threaded = rescore_corpus(tiny_model, vocab, jobs, RescoreMode.DYNAMIC, threads=2)
    assert [r.utterance_id for r in threaded] == [j.nbest.utterance_id for j in jobs]
    assert [r.selected_rank for r in serial] == [r.selected_rank for r in threaded]
    for a, b in zip(serial, threaded):
        assert [s.second_pass_ll for s in a.scored] == pytest.approx(
            [s.second_pass_ll for s in b.scored]
        )


def test_few_shot_mode_uses_examples(tiny_model, vocab, nbest, biasing_list):
    few_shot = [FewShotExample(biasing_list=BiasingList(LOC=["rome"]), sentence="go to rome")]
    plain = rescore(tiny_model, vocab, nbest, biasing_list, RescoreMode.STATIC)
    shot = rescore(tiny_model, vocab, nbest, biasing_list, RescoreMode.FEW_SHOT, few_shot=few_shot)
    assert all(
        b.prompt_length > a.prompt_length for a, b in zip(plain.scored, shot.scored)
    )


def test_overlong_hypothesis_names_utterance(tiny_model, vocab, biasing_list):
    nbest = NBestList(
        utterance_id="long-1",
        reference="a",
        hypotheses=[Hypothesis(text="a" * 300, first_pass_score=0.0)],
    )
    with pytest.raises(ValueError, match="utterance long-1"):
        rescore(tiny_model, vocab, nbest, biasing_list, RescoreMode.PLAIN)


def test_result_record_keys(tiny_model, vocab, nbest, biasing_list):
    record = rescore(tiny_model, vocab, nbest, biasing_list, RescoreMode.DYNAMIC).to_record()
    assert set(record) == {"utterance_id", "mode", "selected_text", "scores", "per_token_classes"}
    assert len(record["scores"]) == 3
    assert record["mode"] == "dynamic"
    assert len(record["per_token_classes"]) == len(record["selected_text"])

    static = rescore(tiny_model, vocab, nbest, biasing_list, RescoreMode.STATIC).to_record()
    assert static["per_token_classes"] is None


def test_rescore_corpus_rejects_zero_threads(tiny_model, vocab):
    with pytest.raises(ValueError, match="threads"):
        rescore_corpus(tiny_model, vocab, [], RescoreMode.PLAIN, threads=0)


def test_dynamic_matches_recomputation_on_generated_corpus(
    small_gen_config, tiny_config, vocab
):
    model = MultiTaskLM(tiny_config.model_copy(update={"max_seq_len": 512})).eval()
    cfg = small_gen_config.model_copy(update={"n_train": 0, "n_test": 50})
    for utt in generate_corpus(cfg).test:
        hyp = utt.nbest.hypotheses[0]
        scored = score_dynamic(model, vocab, utt.biasing_list, hyp)
        expected = []
        for j, cls in enumerate(scored.per_token_classes):
            context = select_class_context(utt.biasing_list, cls)
            prompt = build_prompt([], context, hyp.text, vocab)
            expected.append(token_log_probs(model, prompt)[j])
        assert scored.second_pass_ll == math.fsum(expected)
