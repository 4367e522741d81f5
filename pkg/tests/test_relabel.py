import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfaug.corpus import AspectSpan, Polarity, Sample
from cfaug.generation import GenerationCandidate
from cfaug.relabel import (
    NoViableCandidate,
    RelabelConfig,
    Rule,
    assign_label,
    candidate_sample,
    locate_aspect,
    relabel,
    select_candidate,
)

SOURCE = Sample("src", ("the", "fan", "is", "loud"), (AspectSpan(1, 2, "fan"),), Polarity.NEGATIVE, 0)


def cand(text, prompt_id="positive-0", seed=0):
    return GenerationCandidate(text, Polarity.POSITIVE, prompt_id, "lexicon", seed)


@pytest.mark.parametrize("probs,target,thr,expected", [
    ((0.1, 0.1, 0.8), Polarity.POSITIVE, 0.7, (Polarity.POSITIVE, Rule.KEPT_TARGET)),
    ((0.1, 0.2, 0.7), Polarity.POSITIVE, 0.7, (Polarity.POSITIVE, Rule.ARGMAX_OVERRIDE)),
    ((0.6, 0.1, 0.3), Polarity.POSITIVE, 0.7, (Polarity.NEGATIVE, Rule.ARGMAX_OVERRIDE)),
    ((0.2, 0.5, 0.3), Polarity.NEUTRAL, 0.4, (Polarity.NEUTRAL, Rule.KEPT_TARGET)),
])
def test_assign_label_cases(probs, target, thr, expected):
    assert assign_label(probs, target, thr) == expected


@given(st.lists(st.floats(0.001, 1.0), min_size=3, max_size=3), st.sampled_from(list(Polarity)), st.floats(0.01, 0.99))
def test_assign_label_always_returns_target_or_argmax(raw, target, thr):
    probs = np.array(raw) / sum(raw)
    label, rule = assign_label(probs, target, thr)
    if rule is Rule.KEPT_TARGET:
        assert label is target and probs[target] > thr
    else:
        assert label == int(np.argmax(probs))


@pytest.mark.parametrize("thr", [0.0, 1.0, 1.5])
def test_relabel_config_bounds(thr):
    with pytest.raises(ValueError):
        RelabelConfig(thr)


def test_locate_aspect_prefers_nearest_occurrence():
    toks = ["fan", "and", "the", "fan", "x", "fan"]
    assert locate_aspect(toks, ["fan"], 3).start == 3
    assert locate_aspect(toks, ["fan"], 4).start == 3  # tie 3 vs 5 goes to the earlier
    assert locate_aspect(toks, ["battery"], 0) is None


def test_candidate_sample_reanchors_aspect():
    s = candidate_sample(cand("great , the fan is quiet"), SOURCE)
    assert s.aspect == AspectSpan(3, 4, "fan")
    assert s.label is Polarity.POSITIVE
    assert s.id == "src~positive~positive-0~0"
    assert candidate_sample(cand("the motor is quiet"), SOURCE) is None


def test_select_candidate_max_shift_first_on_ties_and_skips_lost_aspect():
    table = {"the fan is quiet": 0.6, "the fan is nice": 0.9, "the fan is good": 0.9, "the motor is good": 1.0}

    def scorer(sample):
        p = table[" ".join(sample.tokens)]
        return np.array([(1 - p) / 2, (1 - p) / 2, p])

    cands = [cand(t, seed=i) for i, t in enumerate(table)]
    sel = select_candidate(cands, SOURCE, [0.8, 0.1, 0.1], Polarity.POSITIVE, scorer)
    assert sel.candidate.text == "the fan is nice"
    assert sel.fluctuation == pytest.approx(0.8)
    with pytest.raises(NoViableCandidate):
        select_candidate([cands[-1]], SOURCE, [0.8, 0.1, 0.1], Polarity.POSITIVE, scorer)


def test_relabel_records_provenance():
    sel = select_candidate([cand("the fan is quiet")], SOURCE, [0.8, 0.1, 0.1], Polarity.POSITIVE,
                           lambda s: np.array([0.1, 0.3, 0.6]))
    aug = relabel(sel, SOURCE, RelabelConfig(0.7))
    assert aug.rule is Rule.ARGMAX_OVERRIDE and aug.label is Polarity.POSITIVE
    assert aug.source_id == "src" and aug.target is Polarity.POSITIVE
    assert aug.prob_shift == pytest.approx(0.5)
    assert aug.probs == (0.1, 0.3, 0.6) and aug.prob_threshold == 0.7
    strict = relabel(sel, SOURCE, RelabelConfig(0.5))
    assert strict.rule is Rule.KEPT_TARGET
