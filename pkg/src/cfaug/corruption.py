"""Opinion corruption: mask the highest-attribution sentence tokens and merge adjacent masks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .corpus import MASK, EncodedSample
from .rng import derive_seed


class MaskStrategy(Enum):
    INTEGRATED_GRADIENTS = "integrated_gradients"
    RANDOM = "random"


@dataclass(frozen=True)
class MaskSpan:
    """Placeholder for a merged run of masked tokens inside ``CorruptedSample.pieces``."""

    start: int
    end: int


def merge_runs(positions: Iterable[int]) -> list[tuple[int, int]]:
    """Partition positions into maximal runs of consecutive indices, as half-open spans."""
    spans: list[tuple[int, int]] = []
    for p in sorted(set(positions)):
        if spans and spans[-1][1] == p:
            spans[-1] = (spans[-1][0], p + 1)
        else:
            spans.append((p, p + 1))
    return spans


@dataclass(frozen=True)
class CorruptedSample:
    tokens: tuple[str, ...]
    mask_spans: tuple[tuple[int, int], ...]
    k_used: int
    strategy: MaskStrategy
    aspect_positions: frozenset[int] = frozenset()
    sample_id: str = ""
    no_candidates: bool = False

    def __post_init__(self) -> None:
        prev_end = -1
        for start, end in self.mask_spans:
            if not (prev_end < start < end <= len(self.tokens)):
                raise ValueError(f"mask spans must be sorted, disjoint and in range: {self.mask_spans}")
            if prev_end == start:
                raise ValueError("adjacent mask spans must be merged")
            if any(p in self.aspect_positions for p in range(start, end)):
                raise ValueError("mask span overlaps the aspect")
            prev_end = end

    @classmethod
    def from_positions(
        cls,
        tokens: Sequence[str],
        positions: Iterable[int],
        aspect_positions: Iterable[int] = (),
        k_used: int | None = None,
        strategy: MaskStrategy = MaskStrategy.INTEGRATED_GRADIENTS,
        sample_id: str = "",
    ) -> "CorruptedSample":
        positions = sorted(set(positions))
        return cls(
            tokens=tuple(tokens),
            mask_spans=tuple(merge_runs(positions)),
            k_used=len(positions) if k_used is None else k_used,
            strategy=strategy,
            aspect_positions=frozenset(aspect_positions),
            sample_id=sample_id,
        )

    @property
    def masked_positions(self) -> list[int]:
        return [p for s, e in self.mask_spans for p in range(s, e)]

    @property
    def masked_count(self) -> int:
        return sum(e - s for s, e in self.mask_spans)

    @property
    def pieces(self) -> list[str | MaskSpan]:
        """Alternating literal tokens and merged mask placeholders."""
        out: list[str | MaskSpan] = []
        pos = 0
        for start, end in self.mask_spans:
            out.extend(self.tokens[pos:start])
            out.append(MaskSpan(start, end))
            pos = end
        out.extend(self.tokens[pos:])
        return out

    def render(self, mask_token: str = MASK) -> str:
        return " ".join(mask_token if isinstance(p, MaskSpan) else p for p in self.pieces)

    def restore(self) -> tuple[str, ...]:
        out: list[str] = []
        for p in self.pieces:
            if isinstance(p, MaskSpan):
                out.extend(self.tokens[p.start : p.end])
            else:
                out.append(p)
        return tuple(out)


def mask_budget(sentence_len: int) -> int:
    """floor(len / 3), but at least one token."""
    return max(1, math.floor(sentence_len / 3))


def select_threshold(scores: Sequence[float], sentence_len: int) -> tuple[float, int]:
    """Return ``(thr, k)``: k = max(1, floor(len/3)) and thr the k-th largest score."""
    if sentence_len < 1 or sentence_len != len(scores):
        raise ValueError("scores must cover a non-empty sentence")
    k = mask_budget(sentence_len)
    return float(sorted(scores, reverse=True)[k - 1]), k


def mask_tokens(
    encoded: EncodedSample,
    scores: Sequence[float] | None,
    tokens: Sequence[str],
    strategy: MaskStrategy = MaskStrategy.INTEGRATED_GRADIENTS,
    seed: int = 0,
    sample_id: str | None = None,
) -> CorruptedSample:
    """Choose and mask at most k = max(1, floor(len/3)) non-aspect sentence tokens.

    With integrated gradients, candidates scoring at least the k-th largest
    candidate score are masked, capped at k by (score desc, position asc).
    With random masking, k candidates are drawn from a stream seeded by
    ``(seed, sample_id)`` and ``scores`` is ignored.
    """
    n = encoded.sentence_len
    if len(tokens) != n:
        raise ValueError("tokens do not match the encoded sentence length")
    sample_id = encoded.sample_id if sample_id is None else sample_id
    k = mask_budget(n)
    candidates = [i for i in range(n) if i not in encoded.aspect_positions]
    if not candidates:
        return CorruptedSample(tuple(tokens), (), k, strategy, encoded.aspect_positions, sample_id, no_candidates=True)

    take = min(k, len(candidates))
    if strategy is MaskStrategy.INTEGRATED_GRADIENTS:
        if scores is None or len(scores) != n:
            raise ValueError("integrated-gradients masking needs one score per sentence token")
        # threshold over candidates only, so high-scoring aspect tokens cannot starve the mask
        ranked = sorted(candidates, key=lambda i: (-float(scores[i]), i))
        thr = float(scores[ranked[take - 1]])
        chosen = [i for i in ranked if float(scores[i]) >= thr][:take]
    else:
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, sample_id)))
        chosen = [candidates[i] for i in rng.choice(len(candidates), size=take, replace=False)]

    return CorruptedSample.from_positions(tokens, chosen, encoded.aspect_positions, k, strategy, sample_id)
