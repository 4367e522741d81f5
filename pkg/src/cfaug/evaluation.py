"""Accuracy / Macro-F1 evaluation of the base classifier on original vs augmented corpora."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .classifier import N_CLASSES, TrainConfig, predict, train
from .corpus import Dataset, Polarity, build_vocab

DEFAULT_SEEDS = (1, 2, 3)


def confusion_matrix(preds: Sequence[int], gold: Sequence[int]) -> np.ndarray:
    """Rows are gold classes, columns predictions."""
    if len(preds) != len(gold):
        raise ValueError("preds and gold differ in length")
    if len(gold) == 0:
        raise ValueError("cannot score an empty prediction set")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (np.asarray(gold, dtype=int), np.asarray(preds, dtype=int)), 1)
    return cm


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def per_class_prf(cm: np.ndarray) -> list[tuple[float, float, float]]:
    out = []
    for c in range(N_CLASSES):
        tp = cm[c, c]
        precision = _safe_div(tp, cm[:, c].sum())
        recall = _safe_div(tp, cm[c, :].sum())
        out.append((precision, recall, _safe_div(2 * precision * recall, precision + recall)))
    return out


def macro_f1(preds: Sequence[int], gold: Sequence[int]) -> float:
    """Unweighted mean of the three per-class F1 scores; 0/0 counts as 0."""
    return float(np.mean([f for _, _, f in per_class_prf(confusion_matrix(preds, gold))]))


def accuracy(preds: Sequence[int], gold: Sequence[int]) -> float:
    cm = confusion_matrix(preds, gold)
    return float(np.trace(cm) / cm.sum())


@dataclass(frozen=True)
class RunMetrics:
    seed: int
    accuracy: float
    macro_f1: float
    per_class: dict[str, dict[str, float]]
    confusion: list[list[int]]

    @classmethod
    def from_predictions(cls, seed: int, preds: Sequence[int], gold: Sequence[int]) -> "RunMetrics":
        cm = confusion_matrix(preds, gold)
        prf = per_class_prf(cm)
        return cls(
            seed=seed,
            accuracy=float(np.trace(cm) / cm.sum()),
            macro_f1=float(np.mean([f for _, _, f in prf])),
            per_class={Polarity(c).label: {"precision": p, "recall": r, "f1": f} for c, (p, r, f) in enumerate(prf)},
            confusion=cm.tolist(),
        )


@dataclass(frozen=True)
class MetricsReport:
    name: str
    runs: tuple[RunMetrics, ...]
    seeds: tuple[int, ...] = field(default=())

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.runs]))

    @property
    def mean_macro_f1(self) -> float:
        return float(np.mean([r.macro_f1 for r in self.runs]))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seeds": list(self.seeds),
            "mean": {"accuracy": self.mean_accuracy, "macro_f1": self.mean_macro_f1},
            "runs": [
                {"seed": r.seed, "accuracy": r.accuracy, "macro_f1": r.macro_f1,
                 "per_class": r.per_class, "confusion": r.confusion}
                for r in self.runs
            ],
        }


def evaluate_corpus(
    name: str, train_set: Dataset, test: Dataset, seeds: Sequence[int], config: TrainConfig
) -> MetricsReport:
    """Train once per seed on ``train_set`` (own vocabulary) and score on ``test`` at the last epoch."""
    missing = set(Polarity) - {s.label for s in train_set}
    if missing:
        raise ValueError(f"{name}: training corpus lacks classes {sorted(p.label for p in missing)}")
    overlap = {s.id for s in train_set} & {s.id for s in test}
    if overlap:
        raise ValueError(f"{name}: {len(overlap)} test sample ids also appear in training data")
    vocab = build_vocab(train_set)
    gold = test.labels()
    runs = []
    for seed in seeds:
        params, _ = train(train_set, vocab, replace(config, seed=seed))
        runs.append(RunMetrics.from_predictions(seed, predict(params, vocab, test), gold))
    return MetricsReport(name, tuple(runs), tuple(seeds))


def run_eval(
    original: Dataset,
    augmented: Dataset,
    test: Dataset,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    config: TrainConfig = TrainConfig(),
) -> tuple[MetricsReport, MetricsReport]:
    return (
        evaluate_corpus("original", original, test, seeds, config),
        evaluate_corpus("augmented", augmented, test, seeds, config),
    )


def format_table(rows: Sequence[tuple[str, MetricsReport]], dataset_name: str = "Synthetic") -> str:
    """Plain-text table: one row per method, Acc and F1 (percent) for the dataset."""
    width = max(len("Method"), *(len(n) for n, _ in rows))
    lines = [
        f"{'':{width}}  {dataset_name:^15}",
        f"{'Method':{width}}  {'Acc':>7} {'F1':>7}",
        "-" * (width + 17),
    ]
    for name, rep in rows:
        lines.append(f"{name:{width}}  {100 * rep.mean_accuracy:7.2f} {100 * rep.mean_macro_f1:7.2f}")
    return "\n".join(lines) + "\n"
