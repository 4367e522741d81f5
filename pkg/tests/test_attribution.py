import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfaug.attribution import IGConfig, attribute, integrated_gradients, make_baseline, rank_tokens
from cfaug.classifier import EmbeddedInput, ModelParams, embed, grad_wrt_input
from cfaug.corpus import AspectSpan, Polarity, Sample, build_vocab, encode


def loop_ig(params, x, baseline, steps, c):
    """Token-level IG with an explicit trapezoid loop over full interpolated inputs."""
    total_s = np.zeros_like(x.sentence_vecs)
    for j in range(steps + 1):
        a = j / steps
        point = EmbeddedInput(baseline.sentence_vecs + a * (x.sentence_vecs - baseline.sentence_vecs),
                              baseline.aspect_vecs + a * (x.aspect_vecs - baseline.aspect_vecs))
        gs, _ = grad_wrt_input(params, point, c)
        w = 0.5 if j in (0, steps) else 1.0
        total_s += w * gs / steps
    return (x.sentence_vecs - baseline.sentence_vecs) * total_s


@pytest.mark.parametrize("rule,steps", [("trapezoid", 1), ("trapezoid", 4), ("right", 4)])
def test_nodes_weights_sum_to_one(rule, steps):
    alphas, weights = IGConfig(steps=steps, rule=rule).nodes()
    assert weights.sum() == pytest.approx(1.0)
    assert alphas[-1] == 1.0
    assert len(alphas) == steps + (rule == "trapezoid")


def test_config_validation():
    with pytest.raises(ValueError):
        IGConfig(steps=0)
    with pytest.raises(ValueError):
        IGConfig(rule="simpson")


def test_matches_explicit_loop(trained, synth_train, vocab):
    params, _ = trained
    for sample in list(synth_train)[:5]:
        enc = encode(sample, vocab)
        x = embed(params, enc)
        base = make_baseline(x, params.E[0], enc)
        res = integrated_gradients(params, x, base, IGConfig(steps=16))
        np.testing.assert_allclose(res.signed_components, loop_ig(params, x, base, 16, int(sample.label)),
                                   rtol=1e-9, atol=1e-15)


def test_completeness_and_convergence(trained, synth_train, vocab):
    params, _ = trained
    for sample in list(synth_train)[:10]:
        enc = encode(sample, vocab)
        gaps = [attribute(params, enc, IGConfig(steps=s)).completeness_gap for s in (32, 64, 128)]
        assert gaps[2] < 1e-3
        assert gaps[2] <= gaps[1] + 1e-9 <= gaps[0] + 2e-9
        right = [attribute(params, enc, IGConfig(steps=s, rule="right")).completeness_gap for s in (64, 1024)]
        assert right[1] < right[0] or right[0] < 1e-12


def test_opinion_word_ranks_first(trained, synth_train, vocab):
    params, _ = trained
    hits = 0
    samples = list(synth_train)[:40]
    for s in samples:
        res = attribute(params, encode(s, vocab))
        hits += rank_tokens(res)[0][0] == s.aspect.end + 1
    assert hits >= 0.9 * len(samples)


def test_baseline_keeps_aspect_and_pads_the_rest():
    s = Sample("a", ("the", "fan", "is", "loud"), (AspectSpan(1, 2, "fan"),), Polarity.NEGATIVE, 0)
    vocab = build_vocab([s])
    enc = encode(s, vocab)
    params = ModelParams.init(len(vocab), 3, 2, seed=0)
    x = embed(params, enc)
    base = make_baseline(x, params.E[0], enc)
    assert np.array_equal(base.sentence_vecs[1], x.sentence_vecs[1])
    for i in (0, 2, 3):
        assert np.array_equal(base.sentence_vecs[i], params.E[0])
    assert np.array_equal(base.aspect_vecs, x.aspect_vecs)


def test_baseline_needs_aspect_positions():
    x = EmbeddedInput(np.ones((2, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        make_baseline(x, np.zeros(3))


def _random_case(seed, length, aspect_start, aspect_len):
    aspect_len = min(aspect_len, length - aspect_start)
    tokens = tuple(f"w{i}" for i in range(length))
    span = AspectSpan(aspect_start, aspect_start + aspect_len, " ".join(tokens[aspect_start:aspect_start + aspect_len]))
    sample = Sample("s", tokens, (span,), Polarity(seed % 3), 0)
    vocab = build_vocab([sample])
    params = ModelParams.init(len(vocab), 5, 4, seed=seed)
    return params, encode(sample, vocab)


case = st.tuples(st.integers(0, 10_000), st.integers(1, 12), st.integers(0, 11), st.integers(1, 3)).filter(
    lambda t: t[2] < t[1]
)


@settings(max_examples=60, deadline=None)
@given(case)
def test_aspect_positions_score_zero(args):
    params, enc = _random_case(*args)
    res = attribute(params, enc, IGConfig(steps=8))
    for p in enc.aspect_positions:
        assert res.token_scores[p] == 0.0


@settings(max_examples=60, deadline=None)
@given(case)
def test_input_equal_to_baseline_scores_zero(args):
    params, enc = _random_case(*args)
    x = embed(params, enc)
    res = integrated_gradients(params, x, x, IGConfig(steps=8))
    assert np.all(res.token_scores == 0.0)
    assert res.completeness_gap == 0.0


def test_rank_tokens_breaks_ties_by_position():
    assert rank_tokens([0.1, 0.5, 0.5, 0.0]) == [(1, 0.5), (2, 0.5), (0, 0.1), (3, 0.0)]


def test_shape_mismatch_rejected():
    params = ModelParams.init(4, 3, 2, seed=0)
    x = EmbeddedInput(np.ones((2, 3)), np.ones((1, 3)))
    y = EmbeddedInput(np.ones((3, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        integrated_gradients(params, x, y, target_class=0)
