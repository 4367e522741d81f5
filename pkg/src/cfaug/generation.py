"""Polarity-targeted prompt infilling.

A corrupted sentence gets a hard prompt suffix (", which is great!"), an
infill backend replaces each mask sentinel with a few words, and the
prompt is stripped again to give a candidate sentence.
"""

from __future__ import annotations

import json
import logging
import random
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

from .corpus import MASK, CorpusError, Polarity, Sample, load_lexicon
from .corruption import CorruptedSample
from .rng import derive_seed

log = logging.getLogger(__name__)

MAX_WORDS_PER_MASK = 3
PROMPT_SEPARATOR = ", "


class GenerationError(ValueError):
    """A generation precondition was violated (e.g. nothing to infill)."""


class BackendTransportError(RuntimeError):
    """The infill service could not be reached or answered with an error status. Retryable."""


class MalformedBackendError(RuntimeError):
    """The infill service answered, but the answer breaks the backend contract."""


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    polarity: Polarity
    pattern: str

    def __post_init__(self) -> None:
        if not self.pattern.strip():
            raise ValueError("prompt pattern must be non-empty")
        if MASK in self.pattern:
            raise ValueError("prompt pattern must not contain the mask sentinel")


def load_templates(path: str | Path | None = None) -> list[PromptTemplate]:
    """Read ``polarity<TAB>pattern`` lines; ids are ``<polarity>-<n>`` in file order."""
    if path is None:
        text = resources.files("cfaug").joinpath("data/templates.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    seen: dict[Polarity, int] = {}
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            pol_name, pattern = line.split("\t", 1)
            pol = Polarity.parse(pol_name)
        except ValueError as exc:
            raise CorpusError(f"template line {lineno}: expected 'polarity<TAB>pattern'") from exc
        n = seen.get(pol, 0)
        seen[pol] = n + 1
        out.append(PromptTemplate(f"{pol.label}-{n}", pol, pattern.strip()))
    return out


class InfillBackend(Protocol):
    name: str
    deterministic: bool

    def fill(self, text: str, mask_token: str, max_words_per_mask: int, hint_polarity: Polarity, seed: int) -> str:
        """Replace every ``mask_token`` in ``text`` with 1..max_words_per_mask words."""
        ...


class LexiconBackend:
    """Fills each sentinel with words of the hinted polarity from a lexicon. Pure."""

    name = "lexicon"
    deterministic = True

    def __init__(self, lexicon: dict[Polarity, Sequence[str]] | None = None):
        self.lexicon = lexicon if lexicon is not None else load_lexicon()
        for pol in Polarity:
            if not self.lexicon.get(pol):
                raise ValueError(f"lexicon has no {pol.label} words")

    def fill(self, text: str, mask_token: str, max_words_per_mask: int, hint_polarity: Polarity, seed: int) -> str:
        rng = random.Random(seed)
        words = self.lexicon[hint_polarity]
        parts = text.split(mask_token)
        out = [parts[0]]
        for rest in parts[1:]:
            n = rng.randint(1, max(1, max_words_per_mask))
            out.append(" ".join(rng.choice(words) for _ in range(n)))
            out.append(rest)
        return "".join(out)


class RemoteBackend:
    """HTTP client for an infill service speaking the ``POST {base_url}/infill`` protocol.

    Request body: text, mask_token, max_words_per_mask, hint_polarity, seed.
    Response: ``{"text": ...}``. 5xx answers and connection failures are
    retried with exponential backoff; at most ``max_in_flight`` requests
    are outstanding across all threads sharing this client.
    """

    name = "remote"

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        max_in_flight: int = 4,
        attempts: int = 3,
        backoff: float = 0.5,
        deterministic: bool = True,
    ):
        if max_in_flight < 1 or attempts < 1:
            raise ValueError("max_in_flight and attempts must be >= 1")
        self.url = base_url.rstrip("/") + "/infill"
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.deterministic = deterministic
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _post(self, body: bytes) -> bytes:
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        with self._slots:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()

    def fill(self, text: str, mask_token: str, max_words_per_mask: int, hint_polarity: Polarity, seed: int) -> str:
        body = json.dumps({
            "text": text,
            "mask_token": mask_token,
            "max_words_per_mask": max_words_per_mask,
            "hint_polarity": hint_polarity.label,
            "seed": seed,
        }).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                raw = self._post(body)
                break
            except urllib.error.HTTPError as exc:
                last = exc
                if exc.code < 500:
                    raise BackendTransportError(f"{self.url}: HTTP {exc.code}") from exc
                log.warning("%s: HTTP %d (attempt %d/%d)", self.url, exc.code, attempt + 1, self.attempts)
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last = exc
                log.warning("%s: %s (attempt %d/%d)", self.url, exc, attempt + 1, self.attempts)
        else:
            raise BackendTransportError(f"{self.url}: giving up after {self.attempts} attempts: {last}") from last

        try:
            text = json.loads(raw)["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedBackendError(f"{self.url}: response has no text field") from exc
        if not isinstance(text, str):
            raise MalformedBackendError(f"{self.url}: text field is not a string")
        return text


def attach_prompt(corrupted: CorruptedSample, template: PromptTemplate, mask_token: str = MASK) -> str:
    if not corrupted.mask_spans:
        raise GenerationError(f"sample {corrupted.sample_id!r} has no masked tokens to generate")
    return corrupted.render(mask_token) + PROMPT_SEPARATOR + template.pattern


def infill(
    backend: InfillBackend,
    prompted: str,
    mask_token: str,
    hint: Polarity,
    seed: int,
    max_words_per_mask: int = MAX_WORDS_PER_MASK,
) -> str:
    if mask_token not in prompted:
        raise GenerationError("prompted text contains no mask sentinel")
    filled = backend.fill(prompted, mask_token, max_words_per_mask, hint, seed)
    if mask_token in filled:
        raise MalformedBackendError(f"{backend.name} backend left mask sentinels in its output")
    return filled


@dataclass(frozen=True)
class Discard:
    reason: str


def _suffix_regex(pattern: str) -> re.Pattern:
    parts = re.findall(r"\w+|[^\w\s]", pattern)
    rx = r",\s*"
    for i, tok in enumerate(parts):
        piece = re.escape(tok)
        if i and parts[i - 1].isalnum() and tok[0].isalnum():
            piece = r"\s+" + piece
        elif i:
            piece = r"\s*" + piece
        if i == len(parts) - 1 and not tok[0].isalnum():
            piece = f"(?:{piece})?"
        rx += piece
    return re.compile(rx + r"\s*$", re.IGNORECASE)


def strip_prompt(filled: str, template: PromptTemplate) -> str | Discard:
    """Remove a trailing ", <pattern>" from ``filled``.

    Whitespace around the pattern's words and its terminal punctuation
    are matched loosely; anything else (prompt rewritten, or only found
    mid-sentence) is a :class:`Discard`.
    """
    m = _suffix_regex(template.pattern).search(filled)
    if m is None:
        return Discard("prompt_not_found")
    text = filled[: m.start()].rstrip()
    if not text:
        return Discard("empty_after_strip")
    return text


@dataclass(frozen=True)
class GenerationCandidate:
    text: str
    target_polarity: Polarity
    prompt_id: str
    backend_name: str
    seed: int
    stripped_ok: bool = True


def candidate_seed(seed: int, sample_id: str, template_id: str, repeat: int) -> int:
    return derive_seed(seed, sample_id, template_id, repeat) % 2**31


def generate(
    sample: Sample,
    corrupted: CorruptedSample,
    target: Polarity,
    templates: Sequence[PromptTemplate],
    backend: InfillBackend,
    n_per_template: int = 1,
    seed: int = 0,
    mask_token: str = MASK,
    max_words_per_mask: int = MAX_WORDS_PER_MASK,
) -> tuple[list[GenerationCandidate], list[Discard]]:
    """Like :func:`generate_candidates`, also returning the discards."""
    if n_per_template < 1:
        raise ValueError("n_per_template must be >= 1")
    if any(t.polarity != target for t in templates):
        raise ValueError("all templates must carry the target polarity")
    candidates, discards = [], []
    for template in templates:
        prompted = attach_prompt(corrupted, template, mask_token)
        for r in range(n_per_template):
            s = candidate_seed(seed, sample.id, template.id, r)
            filled = infill(backend, prompted, mask_token, target, s, max_words_per_mask)
            stripped = strip_prompt(filled, template)
            if isinstance(stripped, Discard):
                discards.append(stripped)
                continue
            candidates.append(GenerationCandidate(stripped, target, template.id, backend.name, s))
    return candidates, discards


def generate_candidates(
    sample: Sample,
    corrupted: CorruptedSample,
    target: Polarity,
    templates: Sequence[PromptTemplate],
    backend: InfillBackend,
    n_per_template: int = 1,
    seed: int = 0,
    mask_token: str = MASK,
    max_words_per_mask: int = MAX_WORDS_PER_MASK,
) -> list[GenerationCandidate]:
    """Infill ``n_per_template`` times per template, each with its own derived seed.

    Candidates whose prompt could not be stripped are dropped, so the list
    may be empty.
    """
    return generate(sample, corrupted, target, templates, backend, n_per_template, seed,
                    mask_token, max_words_per_mask)[0]
