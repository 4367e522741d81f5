import threading

import pytest
from hypothesis import given, strategies as st

from cfaug.corpus import MASK, AspectSpan, Polarity, Sample, load_lexicon, tokenize
from cfaug.corruption import CorruptedSample, MaskStrategy
from cfaug.generation import (
    BackendTransportError,
    Discard,
    GenerationError,
    LexiconBackend,
    MalformedBackendError,
    PromptTemplate,
    RemoteBackend,
    attach_prompt,
    generate,
    infill,
    load_templates,
    strip_prompt,
)
from cfaug.stub_server import StubInfillServer

GREAT = PromptTemplate("positive-0", Polarity.POSITIVE, "which is great!")


class EchoBackend:
    name = "echo"

    def fill(self, text, mask_token, max_words_per_mask, hint_polarity, seed):
        return text


@pytest.fixture
def worked():
    tokens = tokenize("Maximum sound isn't nearly as loud as it should be")
    sample = Sample("w", tuple(tokens), (AspectSpan(0, 2, "maximum sound"),), Polarity.NEGATIVE, 0)
    return sample, CorruptedSample.from_positions(tokens, [2, 4, 5, 6, 10], [0, 1], sample_id="w")


def test_bundled_templates_cover_every_polarity():
    templates = load_templates()
    assert {t.polarity for t in templates} == set(Polarity)
    assert GREAT in templates
    assert len({t.id for t in templates}) == len(templates)


def test_attach_prompt(worked):
    _, c = worked
    assert attach_prompt(c, GREAT) == f"maximum sound {MASK} 't {MASK} as it should {MASK}, which is great!"


def test_attach_prompt_needs_masks():
    c = CorruptedSample(("a", "b"), (), 1, MaskStrategy.INTEGRATED_GRADIENTS)
    with pytest.raises(GenerationError):
        attach_prompt(c, GREAT)


@pytest.mark.parametrize("filled,expected", [
    ("maximum sound quality 'thumping' as it should be, which is great!", "maximum sound quality 'thumping' as it should be"),
    ("the fan is quiet ,  Which  IS great", "the fan is quiet"),
    ("the fan is quiet, which is great !  ", "the fan is quiet"),
])
def test_strip_prompt_recovers_text(filled, expected):
    assert strip_prompt(filled, GREAT) == expected


@pytest.mark.parametrize("filled,reason", [
    ("which is great! the fan is quiet", "prompt_not_found"),
    ("the fan is quiet, which was great!", "prompt_not_found"),
    (", which is great!", "empty_after_strip"),
])
def test_strip_prompt_discards(filled, reason):
    assert strip_prompt(filled, GREAT) == Discard(reason)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.sampled_from(list(Polarity)))
def test_lexicon_backend_fills_every_sentinel(seed, max_words, polarity):
    backend = LexiconBackend()
    text = f"a {MASK} b {MASK}, which is okay."
    out = backend.fill(text, MASK, max_words, polarity, seed)
    assert MASK not in out
    assert out == backend.fill(text, MASK, max_words, polarity, seed)
    words = set(load_lexicon()[polarity])
    middle, tail = out[2:].split(" b ", 1)
    fills = [middle, tail.split(",")[0]]
    for f in fills:
        assert 1 <= len(f.split()) <= max_words
        assert set(f.split()) <= words


def test_lexicon_backend_requires_all_polarities():
    with pytest.raises(ValueError):
        LexiconBackend({Polarity.POSITIVE: ("good",)})


def test_infill_rejects_leftover_sentinels():
    with pytest.raises(MalformedBackendError):
        infill(EchoBackend(), f"a {MASK}, which is great!", MASK, Polarity.POSITIVE, 0)
    with pytest.raises(GenerationError):
        infill(EchoBackend(), "no sentinel here", MASK, Polarity.POSITIVE, 0)


def test_generate_seeds_and_candidates(worked):
    sample, c = worked
    templates = [t for t in load_templates() if t.polarity == Polarity.POSITIVE]
    cands, discards = generate(sample, c, Polarity.POSITIVE, templates, LexiconBackend(), n_per_template=3, seed=1)
    assert len(cands) == 3 * len(templates) and not discards
    assert len({x.seed for x in cands}) == len(cands)
    again, _ = generate(sample, c, Polarity.POSITIVE, templates, LexiconBackend(), n_per_template=3, seed=1)
    assert again == cands
    for x in cands:
        assert x.text.startswith("maximum sound ")
        assert x.target_polarity is Polarity.POSITIVE and x.backend_name == "lexicon"


def test_generate_rejects_mismatched_templates(worked):
    sample, c = worked
    with pytest.raises(ValueError):
        generate(sample, c, Polarity.NEGATIVE, [GREAT], LexiconBackend())


def test_remote_round_trip():
    with StubInfillServer(fill_word="solid") as server:
        client = RemoteBackend(server.base_url)
        out = client.fill(f"the {MASK} fan, which is great!", MASK, 2, Polarity.POSITIVE, 7)
        assert out == "the solid fan, which is great!"
        assert server.requests == [{"text": f"the {MASK} fan, which is great!", "mask_token": MASK,
                                     "max_words_per_mask": 2, "hint_polarity": "positive", "seed": 7}]


def test_remote_retries_server_errors():
    with StubInfillServer(fail_first=2) as server:
        client = RemoteBackend(server.base_url, backoff=0.01)
        assert client.fill(f"a {MASK}", MASK, 1, Polarity.NEUTRAL, 0) == "a fine"
        assert len(server.requests) == 3


def test_remote_gives_up_after_three_attempts():
    with StubInfillServer(fail_first=10) as server:
        client = RemoteBackend(server.base_url, backoff=0.01)
        with pytest.raises(BackendTransportError, match="3 attempts"):
            client.fill(f"a {MASK}", MASK, 1, Polarity.NEUTRAL, 0)
        assert len(server.requests) == 3


def test_remote_client_errors_are_not_retried():
    with StubInfillServer() as server:
        client = RemoteBackend(server.base_url + "/wrong", backoff=5.0)
        with pytest.raises(BackendTransportError, match="404"):
            client.fill(f"a {MASK}", MASK, 1, Polarity.NEUTRAL, 0)


def test_remote_connection_refused():
    server = StubInfillServer()
    url = server.base_url
    server.stop()
    with pytest.raises(BackendTransportError):
        RemoteBackend(url, timeout=1.0, backoff=0.01).fill(f"a {MASK}", MASK, 1, Polarity.NEUTRAL, 0)


def test_remote_leftover_sentinel_is_malformed():
    with StubInfillServer(echo=True) as server:
        with pytest.raises(MalformedBackendError):
            infill(RemoteBackend(server.base_url), f"a {MASK}, which is great!", MASK, Polarity.POSITIVE, 0)


def test_remote_honours_max_in_flight():
    with StubInfillServer(delay=0.1) as server:
        client = RemoteBackend(server.base_url, max_in_flight=2)
        threads = [threading.Thread(target=client.fill, args=(f"x {MASK}", MASK, 1, Polarity.NEUTRAL, i))
                   for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(server.requests) == 8
        assert server.max_concurrent == 2
