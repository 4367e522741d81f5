"""Confidence-gated relabeling of generated candidates with the base model."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .corpus import AspectSpan, Polarity, Sample, tokenize
from .generation import GenerationCandidate


class Rule(Enum):
    KEPT_TARGET = "kept_target"
    ARGMAX_OVERRIDE = "argmax_override"


class NoViableCandidate(LookupError):
    pass


@dataclass(frozen=True)
class RelabelConfig:
    prob_threshold: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValueError("prob_threshold must lie strictly between 0 and 1")


def assign_label(cand_probs: Sequence[float], target: Polarity, thr_prob: float) -> tuple[Polarity, Rule]:
    """Keep the target label only if the model agrees with it confidently; else take argmax."""
    probs = np.asarray(cand_probs, dtype=float)
    top = int(np.argmax(probs))
    if top == int(target) and probs[top] > thr_prob:
        return Polarity(target), Rule.KEPT_TARGET
    return Polarity(top), Rule.ARGMAX_OVERRIDE


def locate_aspect(tokens: Sequence[str], aspect_tokens: Sequence[str], near: int) -> AspectSpan | None:
    """Occurrence of ``aspect_tokens`` in ``tokens`` closest to index ``near`` (earliest on ties)."""
    m = len(aspect_tokens)
    hits = [i for i in range(len(tokens) - m + 1) if tuple(tokens[i : i + m]) == tuple(aspect_tokens)]
    if not hits:
        return None
    i = min(hits, key=lambda j: (abs(j - near), j))
    return AspectSpan(i, i + m, " ".join(aspect_tokens))


def candidate_sample(candidate: GenerationCandidate, source: Sample) -> Sample | None:
    """Re-tokenize a candidate and re-anchor the source aspect; None if the aspect is gone."""
    tokens = tokenize(candidate.text)
    src = source.aspect
    span = locate_aspect(tokens, source.tokens[src.start : src.end], src.start)
    if span is None:
        return None
    sid = f"{source.id}~{candidate.target_polarity.label}~{candidate.prompt_id}~{candidate.seed}"
    return Sample(sid, tuple(tokens), (span,), candidate.target_polarity, 0)


@dataclass(frozen=True)
class Selection:
    candidate: GenerationCandidate
    sample: Sample
    probs: np.ndarray
    fluctuation: float


def select_candidate(
    candidates: Sequence[GenerationCandidate],
    source: Sample,
    orig_probs: Sequence[float],
    target: Polarity,
    scorer: Callable[[Sample], np.ndarray],
) -> Selection:
    """Pick the candidate raising P(target) the most relative to the source sample.

    ``scorer`` maps a candidate sample to base-model probabilities.
    Candidates that lost the aspect are skipped; ties go to the earlier one.
    """
    best: Selection | None = None
    for cand in candidates:
        sample = candidate_sample(cand, source)
        if sample is None:
            continue
        probs = np.asarray(scorer(sample), dtype=float)
        shift = float(probs[int(target)] - orig_probs[int(target)])
        if best is None or shift > best.fluctuation:
            best = Selection(cand, sample, probs, shift)
    if best is None:
        raise NoViableCandidate(f"no candidate for {source.id} keeps the aspect {source.aspect.surface!r}")
    return best


@dataclass(frozen=True)
class AugmentedSample:
    sample: Sample
    source_id: str
    target: Polarity
    prompt_id: str
    prob_shift: float
    rule: Rule
    backend: str
    probs: tuple[float, float, float]
    prob_threshold: float

    @property
    def label(self) -> Polarity:
        return self.sample.label


def relabel(selection: Selection, source: Sample, config: RelabelConfig = RelabelConfig()) -> AugmentedSample:
    target = selection.candidate.target_polarity
    label, rule = assign_label(selection.probs, target, config.prob_threshold)
    s = selection.sample
    return AugmentedSample(
        sample=Sample(s.id, s.tokens, s.aspects, label, 0),
        source_id=source.id,
        target=target,
        prompt_id=selection.candidate.prompt_id,
        prob_shift=selection.fluctuation,
        rule=rule,
        backend=selection.candidate.backend_name,
        probs=tuple(float(p) for p in selection.probs),
        prob_threshold=config.prob_threshold,
    )
