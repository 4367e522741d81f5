"""End-to-end augmentation run: train-base -> attribute -> corrupt -> generate -> relabel -> merge.

Each stage writes one artifact under ``output.dir`` and the manifest is
rewritten after every stage, so a failed run resumes from the last
completed stage.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np

from . import attribution, classifier
from .corpus import (
    MASK,
    Dataset,
    Polarity,
    Sample,
    build_vocab,
    encode,
    load_dataset,
    load_jsonl,
    load_lexicon,
    sample_record,
)
from .corruption import CorruptedSample, MaskStrategy, mask_tokens
from .evaluation import MetricsReport, evaluate_corpus, format_table
from .generation import (
    MAX_WORDS_PER_MASK,
    GenerationCandidate,
    InfillBackend,
    LexiconBackend,
    RemoteBackend,
    generate,
    load_templates,
)
from .relabel import AugmentedSample, NoViableCandidate, RelabelConfig, Rule, relabel, select_candidate

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class ConfigError(ValueError):
    pass


class PromptMode(Enum):
    COUNTERFACTUAL = "counterfactual"
    LABEL_PRESERVE = "label_preserve"


DEFAULTS: dict[str, Any] = {
    "dataset": {"train": None, "test": None, "format": "jsonl"},
    "seed": 1,
    "classifier": {"epochs": 100, "batch_size": 32, "learning_rate": 0.5, "d": 64, "h": 64, "l2": 1e-5},
    "ig": {"steps": 64, "rule": "trapezoid"},
    "mask": {"strategy": "integrated_gradients"},
    "mask_token": MASK,
    "prompt": {"mode": "counterfactual", "templates": None, "n_per_template": 1},
    "backend": {
        "kind": "lexicon",
        "lexicon": None,
        "base_url": None,
        "timeout_secs": 30.0,
        "max_in_flight": 4,
        "max_words_per_mask": MAX_WORDS_PER_MASK,
    },
    "relabel": {"prob_threshold": 0.7, "best_only": False},
    "output": {"dir": "cfaug-out"},
    "workers": 1,
}


def _merge(defaults: dict, given: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        name = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be an object")
            out[key] = _merge(defaults[key], value, name + ".")
        else:
            out[key] = value
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass(frozen=True)
class PipelineConfig:
    raw: dict
    base_dir: Path = field(default=Path("."))

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "PipelineConfig":
        cfg = cls(_merge(DEFAULTS, data), Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data, path.parent)

    def with_overrides(self, **sections: Any) -> "PipelineConfig":
        """Copy with nested values replaced, e.g. ``with_overrides(seed=2, mask={"strategy": "random"})``."""
        raw = copy.deepcopy(self.raw)
        for key, value in sections.items():
            if isinstance(value, dict):
                raw[key].update(value)
            else:
                raw[key] = value
        return PipelineConfig.from_dict(raw, self.base_dir)

    def _path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    # --- typed views ---------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def train_path(self) -> Path:
        return self._path(self.raw["dataset"]["train"])

    @property
    def test_path(self) -> Path | None:
        return self._path(self.raw["dataset"]["test"])

    @property
    def dataset_format(self) -> str:
        return self.raw["dataset"]["format"]

    @property
    def train_config(self) -> classifier.TrainConfig:
        c = self.raw["classifier"]
        return classifier.TrainConfig(
            epochs=int(c["epochs"]), batch_size=int(c["batch_size"]), learning_rate=float(c["learning_rate"]),
            seed=self.seed, l2_penalty=float(c["l2"]), d=int(c["d"]), h=int(c["h"]),
        )

    @property
    def ig_config(self) -> attribution.IGConfig:
        return attribution.IGConfig(steps=int(self.raw["ig"]["steps"]), rule=self.raw["ig"]["rule"])

    @property
    def mask_strategy(self) -> MaskStrategy:
        return MaskStrategy(self.raw["mask"]["strategy"])

    @property
    def mask_token(self) -> str:
        return self.raw["mask_token"]

    @property
    def prompt_mode(self) -> PromptMode:
        return PromptMode(self.raw["prompt"]["mode"])

    @property
    def templates_path(self) -> Path | None:
        return self._path(self.raw["prompt"]["templates"])

    @property
    def n_per_template(self) -> int:
        return int(self.raw["prompt"]["n_per_template"])

    @property
    def lexicon_path(self) -> Path | None:
        return self._path(self.raw["backend"]["lexicon"])

    @property
    def max_words_per_mask(self) -> int:
        return int(self.raw["backend"]["max_words_per_mask"])

    @property
    def relabel_config(self) -> RelabelConfig:
        return RelabelConfig(float(self.raw["relabel"]["prob_threshold"]))

    @property
    def best_only(self) -> bool:
        return bool(self.raw["relabel"]["best_only"])

    @property
    def output_dir(self) -> Path:
        return self._path(self.raw["output"]["dir"])

    @property
    def workers(self) -> int:
        return int(self.raw["workers"])

    def validate(self) -> None:
        try:
            if self.raw["dataset"]["train"] is None:
                raise ConfigError("dataset.train is required")
            if self.dataset_format not in ("jsonl", "semeval_xml"):
                raise ConfigError(f"dataset.format must be jsonl or semeval_xml, not {self.dataset_format!r}")
            for key, p in (("dataset.train", self.train_path), ("dataset.test", self.test_path),
                           ("prompt.templates", self.templates_path), ("backend.lexicon", self.lexicon_path)):
                if p is not None and not p.is_file():
                    raise ConfigError(f"{key}: file not found: {p}")
            self.train_config, self.ig_config, self.relabel_config, self.mask_strategy, self.prompt_mode
            if self.raw["backend"]["kind"] not in ("lexicon", "remote"):
                raise ConfigError("backend.kind must be lexicon or remote")
            if self.raw["backend"]["kind"] == "remote" and not self.raw["backend"]["base_url"]:
                raise ConfigError("backend.base_url is required for the remote backend")
            if self.n_per_template < 1 or self.workers < 1 or self.max_words_per_mask < 1:
                raise ConfigError("prompt.n_per_template, workers and backend.max_words_per_mask must be >= 1")
            if not self.mask_token:
                raise ConfigError("mask_token must be non-empty")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def fingerprint(self) -> str:
        """Hash of every setting that can change outputs, plus digests of the input files."""
        raw = copy.deepcopy(self.raw)
        raw.pop("workers")
        raw.pop("output")
        raw["dataset"].pop("test")
        for key in ("timeout_secs", "max_in_flight"):  # transport only
            raw["backend"].pop(key)
        inputs = {}
        for key in ("train", "templates", "lexicon"):
            path = {"train": self.train_path, "templates": self.templates_path, "lexicon": self.lexicon_path}[key]
            inputs[key] = _sha256(path) if path is not None else None
        for section, key in (("dataset", "train"), ("prompt", "templates"), ("backend", "lexicon")):
            raw[section].pop(key)
        blob = json.dumps({"config": raw, "inputs": inputs}, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def make_backend(self) -> InfillBackend:
        b = self.raw["backend"]
        if b["kind"] == "remote":
            return RemoteBackend(b["base_url"], timeout=float(b["timeout_secs"]), max_in_flight=int(b["max_in_flight"]))
        return LexiconBackend(load_lexicon(self.lexicon_path))


STAGES = ("train", "attribute", "corrupt", "generate", "relabel", "merge")
ARTIFACTS = {
    "train": "base.ckpt",
    "attribute": "attributions.jsonl",
    "corrupt": "corrupted.jsonl",
    "generate": "candidates.jsonl",
    "relabel": "augmented.jsonl",
    "merge": "merged_train.jsonl",
}
MANIFEST = "manifest.json"


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=False)


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(_dumps(row) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def augmented_record(aug: AugmentedSample) -> dict:
    rec = sample_record(aug.sample)
    rec["provenance"] = {
        "origin": "augmented",
        "source_id": aug.source_id,
        "target": aug.target.label,
        "prompt_id": aug.prompt_id,
        "prob_shift": aug.prob_shift,
        "rule": aug.rule.value,
        "backend": aug.backend,
        "probs": list(aug.probs),
        "prob_threshold": aug.prob_threshold,
    }
    return rec


def _corrupted_record(c: CorruptedSample) -> dict:
    return {
        "sample_id": c.sample_id,
        "tokens": list(c.tokens),
        "mask_spans": [list(s) for s in c.mask_spans],
        "k_used": c.k_used,
        "strategy": c.strategy.value,
        "aspect_positions": sorted(c.aspect_positions),
        "no_candidates": c.no_candidates,
    }


def _corrupted_from_record(r: dict) -> CorruptedSample:
    return CorruptedSample(
        tokens=tuple(r["tokens"]),
        mask_spans=tuple(tuple(s) for s in r["mask_spans"]),
        k_used=r["k_used"],
        strategy=MaskStrategy(r["strategy"]),
        aspect_positions=frozenset(r["aspect_positions"]),
        sample_id=r["sample_id"],
        no_candidates=r["no_candidates"],
    )


@dataclass
class RunState:
    """Artifacts of the stages completed so far."""

    train: Dataset
    checkpoint: classifier.Checkpoint | None = None
    scores: dict[str, list[float]] | None = None
    corrupted: dict[str, CorruptedSample] | None = None
    candidates: list[dict] | None = None
    augmented: list[dict] | None = None
    counts: dict[str, int] = field(default_factory=dict)


class Pipeline:
    def __init__(self, config: PipelineConfig, backend: InfillBackend | None = None):
        self.config = config
        self.out = config.output_dir
        self.backend = backend
        self.templates = load_templates(config.templates_path)

    # --- helpers ---------------------------------------------------------------
    def _map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        if self.config.workers == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.config.workers) as pool:
            return list(pool.map(fn, items))

    def _targets(self, sample: Sample) -> list[Polarity]:
        if self.config.prompt_mode is PromptMode.LABEL_PRESERVE:
            return [sample.label]
        return [p for p in Polarity if p != sample.label]

    def _manifest_path(self) -> Path:
        return self.out / MANIFEST

    def _load_manifest(self, fingerprint: str) -> dict:
        path = self._manifest_path()
        if path.is_file():
            manifest = json.loads(path.read_text(encoding="utf-8"))
            if manifest.get("config_hash") == fingerprint:
                return manifest
            log.info("config changed since the last run; starting from scratch")
        return {"config_hash": fingerprint, "last_completed": None,
                "stages": {s: {"done": False} for s in STAGES}, "counts": {}}

    def _write_manifest(self, manifest: dict) -> None:
        self._manifest_path().write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # --- stages ----------------------------------------------------------------
    def stage_train(self, st: RunState, fresh: bool) -> None:
        path = self.out / ARTIFACTS["train"]
        if not fresh:
            st.checkpoint = classifier.load_checkpoint(path)
            return
        vocab = build_vocab(st.train, min_count=1)
        params, history = classifier.train(st.train, vocab, self.config.train_config)
        classifier.save_checkpoint(params, vocab, self.config.train_config, path, final_loss=history[-1])
        st.checkpoint = classifier.load_checkpoint(path)
        log.info("trained base model: loss %.4f -> %.4f", history[0], history[-1])

    def stage_attribute(self, st: RunState, fresh: bool) -> None:
        path = self.out / ARTIFACTS["attribute"]
        if fresh:
            ck = st.checkpoint
            ig = self.config.ig_config

            def one(s: Sample) -> dict:
                res = attribution.attribute(ck.params, encode(s, ck.vocab), ig)
                return {"sample_id": s.id, "tokens": list(s.tokens), "scores": res.token_scores.tolist(),
                        "completeness_gap": res.completeness_gap, "target_class": res.target_class.label}

            _write_jsonl(path, self._map(one, _sorted(st.train)))
        st.scores = {r["sample_id"]: r["scores"] for r in _read_jsonl(path)}

    def stage_corrupt(self, st: RunState, fresh: bool) -> None:
        path = self.out / ARTIFACTS["corrupt"]
        if fresh:
            rows = []
            for s in _sorted(st.train):
                enc = encode(s, st.checkpoint.vocab)
                c = mask_tokens(enc, st.scores[s.id], s.tokens, self.config.mask_strategy, self.config.seed, s.id)
                rows.append(_corrupted_record(c))
            _write_jsonl(path, rows)
        st.corrupted = {r["sample_id"]: _corrupted_from_record(r) for r in _read_jsonl(path)}
        st.counts["corrupted"] = sum(1 for c in st.corrupted.values() if c.mask_spans)

    def stage_generate(self, st: RunState, fresh: bool) -> None:
        path = self.out / ARTIFACTS["generate"]
        if fresh:
            backend = self.backend or self.config.make_backend()
            jobs = [
                (s, t)
                for s in _sorted(st.train)
                if st.corrupted[s.id].mask_spans
                for t in self._targets(s)
            ]

            def one(job: tuple[Sample, Polarity]) -> dict:
                s, target = job
                templates = [t for t in self.templates if t.polarity == target]
                cands, discards = generate(
                    s, st.corrupted[s.id], target, templates, backend, self.config.n_per_template,
                    self.config.seed, self.config.mask_token, self.config.max_words_per_mask,
                )
                return {
                    "sample_id": s.id,
                    "target": target.label,
                    "candidates": [{"text": c.text, "prompt_id": c.prompt_id, "backend": c.backend_name,
                                    "seed": c.seed} for c in cands],
                    "discards": [d.reason for d in discards],
                }

            _write_jsonl(path, self._map(one, jobs))
        st.candidates = _read_jsonl(path)
        st.counts["candidates"] = sum(len(r["candidates"]) for r in st.candidates)
        st.counts["discards"] = sum(len(r["discards"]) for r in st.candidates)

    def stage_relabel(self, st: RunState, fresh: bool) -> None:
        path = self.out / ARTIFACTS["relabel"]
        if fresh:
            ck = st.checkpoint
            by_id = {s.id: s for s in st.train}
            cfg = self.config.relabel_config

            def scorer(sample: Sample) -> np.ndarray:
                return classifier.predict_proba(ck.params, encode(sample, ck.vocab))

            def one(row: dict) -> AugmentedSample | None:
                source = by_id[row["sample_id"]]
                target = Polarity.parse(row["target"])
                cands = [GenerationCandidate(c["text"], target, c["prompt_id"], c["backend"], c["seed"])
                         for c in row["candidates"]]
                try:
                    sel = select_candidate(cands, source, scorer(source), target, scorer)
                except NoViableCandidate:
                    return None
                return relabel(sel, source, cfg)

            results = self._map(one, st.candidates)
            kept: list[AugmentedSample] = []
            if self.config.best_only:
                best: dict[str, AugmentedSample] = {}
                for aug in results:
                    if aug is not None and (aug.source_id not in best or aug.prob_shift > best[aug.source_id].prob_shift):
                        best[aug.source_id] = aug
                kept = [a for a in results if a is not None and best[a.source_id] is a]
            else:
                kept = [a for a in results if a is not None]
            _write_jsonl(path, (augmented_record(a) for a in kept))
        st.augmented = _read_jsonl(path)
        rules = [r["provenance"]["rule"] for r in st.augmented]
        st.counts["augmented"] = len(rules)
        st.counts["kept_target"] = rules.count(Rule.KEPT_TARGET.value)
        st.counts["overridden"] = rules.count(Rule.ARGMAX_OVERRIDE.value)

    def stage_merge(self, st: RunState, fresh: bool) -> None:
        path = self.out / ARTIFACTS["merge"]
        if fresh:
            originals = []
            for s in st.train:
                rec = sample_record(s)
                rec["provenance"] = {"origin": "original"}
                originals.append(rec)
            _write_jsonl(path, originals + st.augmented)

    # --- driver ------------------------------------------------------------------
    def run(self, until: str = "merge", force: bool = False) -> dict:
        """Run stages up to and including ``until``; returns the manifest."""
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        fingerprint = self.config.fingerprint()
        manifest = self._load_manifest(fingerprint)
        st = RunState(train=load_dataset(self.config.train_path, self.config.dataset_format))
        st.counts["sources"] = len(st.train)

        fresh = force
        for stage in STAGES[: STAGES.index(until) + 1]:
            entry = manifest["stages"][stage]
            artifact = self.out / ARTIFACTS[stage]
            if not fresh:
                valid = entry.get("done") and artifact.is_file() and entry.get("sha256") == _sha256(artifact)
                fresh = not valid
            if fresh:
                log.info("stage %s: running", stage)
                # invalidate this and every later stage before touching files
                for later in STAGES[STAGES.index(stage):]:
                    manifest["stages"][later] = {"done": False}
                manifest["last_completed"] = STAGES[STAGES.index(stage) - 1] if STAGES.index(stage) else None
                self._write_manifest(manifest)
            else:
                log.info("stage %s: reusing %s", stage, artifact.name)
            getattr(self, f"stage_{stage}")(st, fresh)
            if fresh:
                manifest["stages"][stage] = {"done": True, "file": artifact.name, "sha256": _sha256(artifact)}
                manifest["last_completed"] = stage
            manifest["counts"] = dict(sorted(st.counts.items()))
            self._write_manifest(manifest)
        return manifest


def _sorted(dataset: Iterable[Sample]) -> list[Sample]:
    return sorted(dataset, key=lambda s: s.id)


def run_augment(config: PipelineConfig, backend: InfillBackend | None = None, force: bool = False) -> dict:
    return Pipeline(config, backend).run("merge", force=force)


def load_merged(config: PipelineConfig) -> Dataset:
    return load_jsonl(config.output_dir / ARTIFACTS["merge"])


ABLATIONS = (
    ("Counterfactual", MaskStrategy.INTEGRATED_GRADIENTS, PromptMode.COUNTERFACTUAL),
    ("Label-Preserve", MaskStrategy.INTEGRATED_GRADIENTS, PromptMode.LABEL_PRESERVE),
    ("Random-Mask", MaskStrategy.RANDOM, PromptMode.COUNTERFACTUAL),
    ("Random-Mask + Label-Preserve", MaskStrategy.RANDOM, PromptMode.LABEL_PRESERVE),
)


@dataclass
class AblationResult:
    reports: list[tuple[str, MetricsReport]]
    manifests: dict[str, dict]
    table: str


def run_ablation(config: PipelineConfig, seeds: Sequence[int] = (1, 2, 3), force: bool = False) -> AblationResult:
    """Augment under every {IG, Random} x {Counterfactual, Label-Preserve} setting and compare.

    Each setting writes to its own sub-directory of ``output.dir``; the
    comparison table is also saved there as ``ablation.txt``.
    """
    if config.test_path is None:
        raise ConfigError("dataset.test is required for evaluation")
    test = load_dataset(config.test_path, config.dataset_format)
    train = load_dataset(config.train_path, config.dataset_format)
    tc = config.train_config
    reports = [("Baseline", evaluate_corpus("Baseline", train, test, seeds, tc))]
    manifests = {}
    root = config.output_dir.resolve()
    for name, strategy, mode in ABLATIONS:
        sub = f"{strategy.value}__{mode.value}"
        variant = config.with_overrides(mask={"strategy": strategy.value}, prompt={"mode": mode.value},
                                        output={"dir": str(root / sub)})
        manifests[name] = run_augment(variant, force=force)
        reports.append((name, evaluate_corpus(name, load_merged(variant), test, seeds, tc)))
    table = format_table(reports)
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.txt").write_text(table, encoding="utf-8")
    (root / "ablation.json").write_text(
        json.dumps({name: rep.to_dict() for name, rep in reports}, indent=2) + "\n", encoding="utf-8"
    )
    return AblationResult(reports, manifests, table)
