"""Integrated-gradients attribution of sentence tokens toward the gold label."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .classifier import EmbeddedInput, ModelParams, embed, forward, pooled_prob_grads
from .corpus import EncodedSample, Polarity


class Target(Enum):
    GOLD_CLASS = "gold_class"


RULES = ("trapezoid", "right")


@dataclass(frozen=True)
class IGConfig:
    """``steps`` is the number of interpolation intervals S.

    ``rule`` picks the quadrature over the grid alpha = j/S: "trapezoid"
    uses j = 0..S with half weight on both ends, "right" uses j = 1..S.
    """

    steps: int = 64
    target: Target = Target.GOLD_CLASS
    rule: str = "trapezoid"

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("integrated gradients needs steps >= 1")
        if self.rule not in RULES:
            raise ValueError(f"unknown quadrature rule {self.rule!r}")

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Interpolation coefficients alpha and their quadrature weights (summing to 1)."""
        S = self.steps
        if self.rule == "right":
            return np.arange(1, S + 1) / S, np.full(S, 1.0 / S)
        w = np.full(S + 1, 1.0 / S)
        w[0] = w[-1] = 0.5 / S
        return np.arange(S + 1) / S, w


@dataclass(frozen=True, eq=False)
class AttributionResult:
    token_scores: np.ndarray  # (L,), L2 norm of each token's signed attribution
    signed_components: np.ndarray  # (L, d)
    suffix_components: np.ndarray  # (m, d), aspect tokens after [SEP]
    completeness_gap: float
    baseline_prob: float
    input_prob: float
    target_class: Polarity

    @property
    def total_attribution(self) -> float:
        return float(self.signed_components.sum() + self.suffix_components.sum())


def make_baseline(x: EmbeddedInput, pad_vector: np.ndarray, encoded: EncodedSample | None = None) -> EmbeddedInput:
    """Replace every non-aspect sentence vector with the PAD embedding.

    Aspect positions and the ``[SEP] + aspect`` suffix are left untouched.
    """
    encoded = encoded if encoded is not None else x.origin
    if encoded is None:
        raise ValueError("make_baseline needs the encoded sample for aspect positions")
    sentence = x.sentence_vecs.copy()
    keep = np.zeros(len(sentence), dtype=bool)
    keep[list(encoded.aspect_positions)] = True
    sentence[~keep] = pad_vector
    return x.replace(sentence_vecs=sentence)


def integrated_gradients(
    params: ModelParams,
    x: EmbeddedInput,
    baseline: EmbeddedInput,
    config: IGConfig = IGConfig(),
    target_class: int | None = None,
) -> AttributionResult:
    """Integrated gradients of ``p[target]`` along the straight line baseline -> x.

    The path integral is approximated on the grid alpha = j/S with the
    rule from ``config``. The model pools by mean, so the path of the
    pooled vectors is the interpolation of the pooled endpoints and all
    gradient evaluations run as one batch.
    """
    if config.steps < 1:
        raise ValueError("integrated gradients needs steps >= 1")
    if x.sentence_vecs.shape != baseline.sentence_vecs.shape or x.aspect_vecs.shape != baseline.aspect_vecs.shape:
        raise ValueError("input and baseline shapes differ")
    if target_class is None:
        if x.origin is None or x.origin.label is None:
            raise ValueError("no target class given and the input carries no gold label")
        target_class = int(x.origin.label)

    alphas, weights = config.nodes()
    alphas = alphas[:, None]
    s_in, a_in = x.sentence_vecs.mean(axis=0), x.aspect_vecs.mean(axis=0)
    s_base, a_base = baseline.sentence_vecs.mean(axis=0), baseline.aspect_vecs.mean(axis=0)
    _, gs, ga = pooled_prob_grads(params, s_base + alphas * (s_in - s_base), a_base + alphas * (a_in - a_base), target_class)

    # every token shares its pool's gradient, scaled by 1/len
    avg_token_grad_s = (weights @ gs) / len(x.sentence_vecs)
    avg_token_grad_a = (weights @ ga) / len(x.aspect_vecs)
    signed = (x.sentence_vecs - baseline.sentence_vecs) * avg_token_grad_s
    suffix = (x.aspect_vecs - baseline.aspect_vecs) * avg_token_grad_a

    p_in = float(forward(params, x)[target_class])
    p_base = float(forward(params, baseline)[target_class])
    gap = abs(float(signed.sum() + suffix.sum()) - (p_in - p_base))
    return AttributionResult(
        token_scores=np.linalg.norm(signed, axis=1),
        signed_components=signed,
        suffix_components=suffix,
        completeness_gap=gap,
        baseline_prob=p_base,
        input_prob=p_in,
        target_class=Polarity(target_class),
    )


def attribute(params: ModelParams, encoded: EncodedSample, config: IGConfig = IGConfig()) -> AttributionResult:
    """Attribute an encoded sample to its gold label against the PAD baseline."""
    x = embed(params, encoded)
    baseline = make_baseline(x, params.E[0], encoded)
    return integrated_gradients(params, x, baseline, config)


def rank_tokens(scores: AttributionResult | Sequence[float]) -> list[tuple[int, float]]:
    """Positions by descending score; ties keep the earlier position first."""
    if isinstance(scores, AttributionResult):
        scores = scores.token_scores
    values = [float(s) for s in scores]
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return [(i, values[i]) for i in order]
