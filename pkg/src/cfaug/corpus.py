"""ABSA datasets: tokenization, loading, vocabularies, encoding and a synthetic corpus."""

from __future__ import annotations

import json
import logging
import random
import re
import xml.etree.ElementTree as ET
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

log = logging.getLogger(__name__)


class Polarity(IntEnum):
    NEGATIVE = 0
    NEUTRAL = 1
    POSITIVE = 2

    @classmethod
    def parse(cls, name: str) -> "Polarity":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown polarity {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


class CorpusError(ValueError):
    """Raised for malformed dataset files."""


# Contraction suffixes stay attached to their apostrophe even when the
# apostrophe is preceded by a space, so tokenize(" ".join(tokens)) == tokens.
_TOKEN_RE = re.compile(r"'(?:t|s|re|ll|ve|d|m)\b|\w+|[^\w\s]", re.IGNORECASE)
_APOSTROPHES = str.maketrans({"’": "'", "‘": "'"})


def _token_matches(text: str) -> Iterator[re.Match]:
    # translate is 1:1 in length (lower() is not), so offsets index the original text
    return _TOKEN_RE.finditer(text.translate(_APOSTROPHES))


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation.

    >>> tokenize("Maximum sound isn't loud")
    ['maximum', 'sound', 'isn', "'t", 'loud']
    """
    return [m.group().lower() for m in _token_matches(text)]


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Like :func:`tokenize`, also returning half-open character offsets."""
    return [(m.group().lower(), m.start(), m.end()) for m in _token_matches(text)]


@dataclass(frozen=True)
class AspectSpan:
    start: int
    end: int
    surface: str

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid aspect span [{self.start}, {self.end})")


@dataclass(frozen=True)
class Sample:
    id: str
    tokens: tuple[str, ...]
    aspects: tuple[AspectSpan, ...]
    label: Polarity
    aspect_index: int = 0

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError(f"sample {self.id}: empty token sequence")
        if not 0 <= self.aspect_index < len(self.aspects):
            raise ValueError(f"sample {self.id}: aspect_index out of range")
        for span in self.aspects:
            if span.end > len(self.tokens):
                raise ValueError(f"sample {self.id}: aspect span past end of sentence")
            if " ".join(self.tokens[span.start:span.end]) != span.surface:
                raise ValueError(f"sample {self.id}: aspect surface mismatch for {span.surface!r}")

    @property
    def aspect(self) -> AspectSpan:
        return self.aspects[self.aspect_index]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    skipped_conflict: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.samples + other.samples, self.skipped_conflict + other.skipped_conflict)

    def labels(self) -> list[int]:
        return [int(s.label) for s in self.samples]


def _span_from_chars(offsets: Sequence[tuple[str, int, int]], start: int, end: int) -> tuple[int, int] | None:
    hit = [i for i, (_, a, b) in enumerate(offsets) if a < end and b > start]
    if not hit:
        return None
    return hit[0], hit[-1] + 1


def _build_samples(records: list[dict], source: str) -> list[Sample]:
    """Group per-aspect records by sentence so each Sample knows all aspects of its sentence."""
    by_text: dict[str, list[tuple[dict, AspectSpan]]] = defaultdict(list)
    tokens_of: dict[str, tuple[str, ...]] = {}
    for rec in records:
        offsets = tokenize_with_offsets(rec["text"])
        toks = tuple(t for t, _, _ in offsets)
        span = _span_from_chars(offsets, rec["from"], rec["to"])
        if span is None or list(toks[span[0]:span[1]]) != tokenize(rec["aspect"]):
            raise CorpusError(f"{source}: cannot map aspect {rec['aspect']!r} to tokens in sample {rec['id']}")
        key = " ".join(toks)
        tokens_of[key] = toks
        by_text[key].append((rec, AspectSpan(span[0], span[1], " ".join(toks[span[0]:span[1]]))))

    samples = []
    for rec in records:
        key = " ".join(t for t, _, _ in tokenize_with_offsets(rec["text"]))
        group = by_text[key]
        aspects: list[AspectSpan] = []
        for _, span in group:
            if span not in aspects:
                aspects.append(span)
        own = next(span for r, span in group if r is rec)
        samples.append(
            Sample(rec["id"], tokens_of[key], tuple(aspects), rec["polarity"], aspects.index(own))
        )
    return samples


_JSONL_FIELDS = ("text", "aspect", "from", "to", "polarity")


def load_jsonl(path: str | Path) -> Dataset:
    """Load a JSONL dataset with fields text, aspect, from, to, polarity and optional id."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                missing = [k for k in _JSONL_FIELDS if k not in obj]
                if missing:
                    raise KeyError(", ".join(missing))
                rec = {
                    "id": str(obj.get("id", f"{path.stem}-{lineno:06d}")),
                    "text": str(obj["text"]),
                    "aspect": str(obj["aspect"]),
                    "from": int(obj["from"]),
                    "to": int(obj["to"]),
                    "polarity": Polarity.parse(obj["polarity"]),
                }
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record ({exc})") from exc
            records.append(rec)
    return Dataset(tuple(_build_samples(records, str(path))))


def sample_record(sample: Sample) -> dict:
    """JSONL record for one sample; offsets refer to the space-joined token text."""
    span = sample.aspect
    start = len(" ".join(sample.tokens[: span.start])) + (1 if span.start else 0)
    return {
        "id": sample.id,
        "text": sample.text,
        "aspect": span.surface,
        "from": start,
        "to": start + len(span.surface),
        "polarity": sample.label.label,
    }


def dump_jsonl(dataset: Iterable[Sample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for sample in dataset:
            fh.write(json.dumps(sample_record(sample), ensure_ascii=False) + "\n")


def load_semeval_xml(path: str | Path) -> Dataset:
    """Load a SemEval-2014 ABSA XML file; one Sample per aspectTerm.

    aspectTerms with polarity "conflict" are dropped and counted in
    ``Dataset.skipped_conflict``.
    """
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise CorpusError(f"{path}: XML parse failure ({exc})") from exc

    records = []
    skipped = 0
    for sent in root.iter("sentence"):
        sid = sent.get("id", "")
        text_el = sent.find("text")
        text = text_el.text if text_el is not None and text_el.text else ""
        terms = sent.find("aspectTerms")
        if terms is None:
            continue
        for k, term in enumerate(terms.findall("aspectTerm")):
            polarity = term.get("polarity", "")
            if polarity == "conflict":
                skipped += 1
                continue
            surface = term.get("term", "")
            start, end = int(term.get("from", -1)), int(term.get("to", -1))
            if text[start:end] != surface:
                raise CorpusError(f"{path}: sentence {sid}: offsets {start}:{end} do not match term {surface!r}")
            records.append(
                {"id": f"{sid}#{k}", "text": text, "aspect": surface, "from": start, "to": end,
                 "polarity": Polarity.parse(polarity)}
            )
    if skipped:
        log.info("%s: skipped %d conflict aspect terms", path, skipped)
    return Dataset(tuple(_build_samples(records, str(path))), skipped_conflict=skipped)


def load_dataset(path: str | Path, fmt: str = "jsonl") -> Dataset:
    if fmt == "jsonl":
        return load_jsonl(path)
    if fmt == "semeval_xml":
        return load_semeval_xml(path)
    raise ValueError(f"unknown dataset format {fmt!r}")


def stats(dataset: Iterable[Sample]) -> dict[Polarity, int]:
    """Per-class sample counts, every Polarity present (zero if absent)."""
    counts = Counter(s.label for s in dataset)
    return {p: counts.get(p, 0) for p in Polarity}


PAD, SEP, MASK, UNK = "[PAD]", "[SEP]", "<mask>", "[UNK]"
SPECIALS = (PAD, SEP, MASK, UNK)


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.id_to_token[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocab must start with the special tokens")
        mapping = {t: i for i, t in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocab")
        object.__setattr__(self, "token_to_id", mapping)

    pad_id = 0
    sep_id = 1
    mask_id = 2
    unk_id = 3

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)


def build_vocab(dataset: Iterable[Sample], min_count: int = 1) -> Vocab:
    """Frequency-ordered vocabulary (ties lexicographic); aspect tokens always kept."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    freq: Counter[str] = Counter()
    aspect_tokens: set[str] = set()
    n = 0
    for sample in dataset:
        n += 1
        freq.update(sample.tokens)
        for span in sample.aspects:
            aspect_tokens.update(sample.tokens[span.start:span.end])
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty dataset")
    keep = [t for t in freq if (freq[t] >= min_count or t in aspect_tokens) and t not in SPECIALS]
    keep.sort(key=lambda t: (-freq[t], t))
    return Vocab(SPECIALS + tuple(keep))


@dataclass(frozen=True)
class EncodedSample:
    """Token ids laid out as ``sentence + [SEP] + aspect``."""

    ids: tuple[int, ...]
    sentence_len: int
    aspect_positions: frozenset[int]
    label: Polarity | None = None
    sample_id: str = ""

    @property
    def sentence_ids(self) -> tuple[int, ...]:
        return self.ids[: self.sentence_len]

    @property
    def aspect_ids(self) -> tuple[int, ...]:
        return self.ids[self.sentence_len + 1 :]


def encode(sample: Sample, vocab: Vocab) -> EncodedSample:
    span = sample.aspect
    sentence = [vocab.lookup(t) for t in sample.tokens]
    aspect = [vocab.lookup(t) for t in sample.tokens[span.start:span.end]]
    return EncodedSample(
        ids=tuple(sentence + [vocab.sep_id] + aspect),
        sentence_len=len(sentence),
        aspect_positions=frozenset(range(span.start, span.end)),
        label=sample.label,
        sample_id=sample.id,
    )


def load_lexicon(path: str | Path | None = None) -> dict[Polarity, tuple[str, ...]]:
    """Read ``polarity<TAB>word`` lines; the bundled lexicon when ``path`` is None."""
    if path is None:
        text = resources.files("cfaug").joinpath("data/lexicon.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words: dict[Polarity, list[str]] = {p: [] for p in Polarity}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            pol, word = line.split("\t")
            words[Polarity.parse(pol)].append(word.strip().lower())
        except ValueError as exc:
            raise CorpusError(f"lexicon line {lineno}: expected 'polarity<TAB>word'") from exc
    return {p: tuple(w) for p, w in words.items()}


SYNTH_ASPECTS = (
    "food", "service", "staff", "pizza", "battery", "screen", "keyboard", "price",
    "ambience", "wine", "menu", "coffee", "dessert", "music", "decor", "waiter",
    "delivery", "software", "display", "trackpad", "battery life", "wine list", "hard drive",
)
_SYNTH_TAILS = (
    "",
    "tonight",
    "as always",
    "for the price",
    "on our last visit",
    ", just like the reviews said",
    "and the room was full",
    "when we tried it again",
)


def generate_synthetic(
    n: int, seed: int, split: str = "train", lexicon: dict[Polarity, Sequence[str]] | None = None
) -> Dataset:
    """Deterministic templated corpus, class-balanced up to rounding.

    Every sentence reads "the <aspect> was <opinion> [tail]" with the
    opinion word drawn from the lexicon of the sample's label. ``split``
    only changes the sample ids and the random stream, so a held-out
    split never shares ids with the training split.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lexicon = lexicon or load_lexicon()
    rng = random.Random(f"synthetic:{split}:{seed}")
    labels = [Polarity(i % 3) for i in range(n)]
    rng.shuffle(labels)
    samples = []
    for i, label in enumerate(labels):
        aspect = rng.choice(SYNTH_ASPECTS)
        opinion = rng.choice(lexicon[label])
        tail = rng.choice(_SYNTH_TAILS)
        text = f"the {aspect} was {opinion} {tail}".strip()
        tokens = tuple(tokenize(text))
        a_toks = tokenize(aspect)
        span = AspectSpan(1, 1 + len(a_toks), " ".join(a_toks))
        samples.append(Sample(f"syn-{split}-{seed}-{i:05d}", tokens, (span,), label, 0))
    return Dataset(tuple(samples))
