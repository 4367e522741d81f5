"""Command line entry point: ``cfaug <subcommand> --config run.json``.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .corpus import Dataset, Polarity, dump_jsonl, generate_synthetic, load_dataset, stats
from .evaluation import DEFAULT_SEEDS, format_table, run_eval
from .pipeline import ARTIFACTS, ConfigError, Pipeline, PipelineConfig, load_merged, run_ablation

log = logging.getLogger("cfaug")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage errors are 1 here
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="pipeline config (JSON)")
    parser.add_argument("--seed", type=int, default=default, help="override the config seed")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfaug", description="Counterfactual data augmentation for aspect-based sentiment analysis")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("stats", parents=[common], help="per-class counts of datasets")
    p.add_argument("paths", nargs="*", type=Path, help="dataset files (default: dataset.train/test from config)")
    p.add_argument("--format", choices=["jsonl", "semeval_xml"], default=None)

    sub.add_parser("train-base", parents=[common], help="train the base classifier")
    sub.add_parser("attribute", parents=[common], help="integrated-gradients attributions for the training set")

    p = sub.add_parser("augment", parents=[common], help="run the full augmentation pipeline")
    p.add_argument("--best-only", action="store_true", help="keep one augmented sample per source")
    p.add_argument("--force", action="store_true", help="recompute every stage")

    p = sub.add_parser("eval", parents=[common], help="compare original vs augmented training")
    p.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)), help="comma separated training seeds")
    p.add_argument("--ablation", action="store_true", help="run all mask-strategy x prompt-mode settings")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic train/test corpus and config")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--test-n", type=int, default=100)
    p.add_argument("--out-dir", type=Path, required=True)
    return parser


def _load_config(args) -> PipelineConfig:
    if args.config is None:
        raise UsageError("--config is required for this subcommand")
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _format_stats(rows: list[tuple[str, Dataset]]) -> str:
    width = max(len("Dataset"), *(len(n) for n, _ in rows))
    lines = [f"{'Dataset':{width}}  {'Positive':>8} {'Neutral':>8} {'Negative':>8} {'Total':>7} {'Conflict':>8}"]
    for name, ds in rows:
        c = stats(ds)
        lines.append(
            f"{name:{width}}  {c[Polarity.POSITIVE]:8d} {c[Polarity.NEUTRAL]:8d} {c[Polarity.NEGATIVE]:8d}"
            f" {len(ds):7d} {ds.skipped_conflict:8d}"
        )
    return "\n".join(lines)


def cmd_stats(args) -> None:
    if args.paths:
        rows = []
        for path in args.paths:
            fmt = args.format or ("semeval_xml" if path.suffix.lower() == ".xml" else "jsonl")
            rows.append((path.name, load_dataset(path, fmt)))
    else:
        cfg = _load_config(args)
        fmt = args.format or cfg.dataset_format
        rows = [("train", load_dataset(cfg.train_path, fmt))]
        if cfg.test_path is not None:
            rows.append(("test", load_dataset(cfg.test_path, fmt)))
    print(_format_stats(rows))


def cmd_train_base(args) -> None:
    cfg = _load_config(args)
    manifest = Pipeline(cfg).run("train")
    print(cfg.output_dir / ARTIFACTS["train"])
    log.info("manifest: %s", manifest["stages"]["train"])


def cmd_attribute(args) -> None:
    cfg = _load_config(args)
    Pipeline(cfg).run("attribute")
    print(cfg.output_dir / ARTIFACTS["attribute"])


def cmd_augment(args) -> None:
    cfg = _load_config(args)
    if args.best_only:
        cfg = cfg.with_overrides(relabel={"best_only": True})
    manifest = Pipeline(cfg).run("merge", force=args.force)
    print(json.dumps(manifest["counts"], sort_keys=True))
    print(cfg.output_dir / ARTIFACTS["merge"])


def cmd_eval(args) -> None:
    cfg = _load_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    if args.ablation:
        print(run_ablation(cfg, seeds).table, end="")
        return
    if cfg.test_path is None:
        raise ConfigError("dataset.test is required for eval")
    merged_path = cfg.output_dir / ARTIFACTS["merge"]
    if not merged_path.is_file():
        raise FileNotFoundError(f"{merged_path} not found; run `cfaug augment` first")
    original = load_dataset(cfg.train_path, cfg.dataset_format)
    test = load_dataset(cfg.test_path, cfg.dataset_format)
    base, aug = run_eval(original, load_merged(cfg), test, seeds, cfg.train_config)
    table = format_table([("Baseline", base), ("Counterfactual", aug)])
    (cfg.output_dir / "metrics.json").write_text(
        json.dumps({"original": base.to_dict(), "augmented": aug.to_dict()}, indent=2) + "\n", encoding="utf-8"
    )
    (cfg.output_dir / "metrics.txt").write_text(table, encoding="utf-8")
    print(table, end="")


def cmd_synth(args) -> None:
    seed = 1 if args.seed is None else args.seed
    out: Path = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    dump_jsonl(generate_synthetic(args.n, seed), out / "train.jsonl")
    dump_jsonl(generate_synthetic(args.test_n, seed, split="test"), out / "test.jsonl")
    config = {"dataset": {"train": "train.jsonl", "test": "test.jsonl", "format": "jsonl"},
              "seed": seed, "output": {"dir": "out"}}
    cfg_path = out / "config.json"
    if not cfg_path.exists():
        cfg_path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    print(out)


COMMANDS = {
    "stats": cmd_stats,
    "train-base": cmd_train_base,
    "attribute": cmd_attribute,
    "augment": cmd_augment,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(build_parser().format_usage() + "cfaug: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"cfaug: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"cfaug: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
