"""``dst-selftrain`` command line: data prep, runs, augmentation, evaluation, sweeps."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import jsonschema

from dst_selftrain.config import ConfigError, ExperimentConfig, load_config
from dst_selftrain.confidence import CRITERIA, METHODS
from dst_selftrain.dialogue_data import (
    BeliefState,
    ValuePartition,
    build_examples,
    examples_to_dialogues,
    load_dialogues,
    partition_test_values,
    save_dialogues,
    split_few_shot,
    write_jsonl,
)
from dst_selftrain.metrics import ZeroDenominator, evaluate_partitioned
from dst_selftrain.models import ToyConditionalGenerator, ToyInfiller
from dst_selftrain.ppaug import Augmenter, augment_dataset, build_slot_value_dict
from dst_selftrain.selftrain import SUMMARY_SCHEMA, atomic_write_json, run
from dst_selftrain.synthetic import SYNONYMS, generate_corpus, generator_phrases

logger = logging.getLogger("dst_selftrain")

RUNS_ENV = "DST_SELFTRAIN_RUNS"


class CommandError(Exception):
    """Reported as ``error: ...`` with a non-zero exit status."""


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class Axis:
    field: str
    parse: Callable[[str], Any]
    valid: Callable[[Any], bool]
    description: str


AXES: dict[str, Axis] = {
    "masking_rate": Axis("mask_rate", float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "selection_k": Axis("k", float, lambda v: 0.0 < v <= 1.0, "in (0, 1]"),
    "criterion": Axis("criterion", str, lambda v: v in CRITERIA, f"one of {CRITERIA}"),
    "method": Axis("method", str, lambda v: v in METHODS, f"one of {METHODS}"),
    "training_mode": Axis("training_mode", str, lambda v: v in ("separate", "merged"), "'separate' or 'merged'"),
    "labeled_fraction": Axis("labeled_fraction", float, lambda v: 0.0 < v <= 1.0, "in (0, 1]"),
    "variant": Axis(
        "variant", lambda s: s.replace("-", "_"),
        lambda v: v in ("mlm_maintain", "mlm_change", "gen_maintain", "gen_change", "none"),
        "a PPaug variant or 'none'",
    ),
}


@dataclass
class SweepSpec:
    axis: str
    values: list
    base_config: ExperimentConfig

    def __post_init__(self) -> None:
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {sorted(AXES)}")
        if not self.values:
            raise ConfigError("a sweep needs at least one value")
        ax = AXES[self.axis]
        try:
            self.values = [ax.parse(v) if isinstance(v, str) else v for v in self.values]
        except ValueError as exc:
            raise ConfigError(f"{self.axis}: {exc}") from None
        bad = [v for v in self.values if not ax.valid(v)]
        if bad:
            raise ConfigError(f"{self.axis} values must be {ax.description}; got {bad}")
        if len(set(self.values)) != len(self.values):
            raise ConfigError(f"{self.axis} values repeat")
        for v in self.values:
            self.cell_config(v).validate()

    def cell_config(self, value) -> ExperimentConfig:
        return self.base_config.override(**{AXES[self.axis].field: value})


@dataclass
class SweepCell:
    value: Any
    status: str = "pending"
    run_dir: Optional[str] = None
    final_test_jga: Optional[float] = None
    final_validation_jga: Optional[float] = None
    iterations: Optional[int] = None
    stop_reason: Optional[str] = None
    error: Optional[str] = None
    test_jga_by_iteration: list = field(default_factory=list)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    def cell(v) -> str:
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def sweep_table(axis: str, cells: Sequence[SweepCell]) -> str:
    rows = [
        (c.value, c.status, c.final_test_jga, c.final_validation_jga, c.iterations, c.stop_reason or c.error)
        for c in cells
    ]
    return format_table([axis, "status", "test_jga", "val_jga", "iters", "stop"], rows)


def run_sweep(spec: SweepSpec, out_dir: Path) -> list[SweepCell]:
    """One full run per value; results are persisted after every cell."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [SweepCell(v) for v in spec.values]

    def persist() -> None:
        atomic_write_json(out_dir / "sweep.json", {
            "axis": spec.axis,
            "base_config_digest": spec.base_config.digest(),
            "cells": [c.to_json() for c in cells],
        })
        (out_dir / "table.txt").write_text(sweep_table(spec.axis, cells), encoding="utf-8")

    persist()
    for cell in cells:
        cell_dir = out_dir / f"{spec.axis}={cell.value}"
        cell.run_dir = str(cell_dir)
        try:
            result = run(spec.cell_config(cell.value), cell_dir)
        except Exception as exc:  # a failed cell must not lose the others
            logger.exception("sweep cell %s=%s failed", spec.axis, cell.value)
            cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
        else:
            final = result.summary["final"]
            cell.status = "ok"
            cell.final_test_jga = final["test_jga"]
            cell.final_validation_jga = final["validation_jga"]
            cell.iterations = result.summary["iterations"]
            cell.stop_reason = result.stop_reason
            cell.test_jga_by_iteration = [r.test_jga for r in result.reports]
        persist()
    return cells


# ---------------------------------------------------------------------------
# helpers


def _runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def _fresh_run_dir(cfg: ExperimentConfig) -> Path:
    root = _runs_root()
    base = f"run-{cfg.digest()}"
    candidate = root / base
    n = 1
    while candidate.exists():
        n += 1
        candidate = root / f"{base}-{n}"
    return candidate


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    changes = {}
    for name in ("criterion", "method", "k", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    return cfg.override(**changes) if changes else cfg


def _beliefs_by_turn(path: str) -> dict[tuple[str, int], BeliefState]:
    out = {}
    for d in load_dialogues(path):
        for t, turn in enumerate(d.turns):
            out[(d.dialogue_id, t)] = turn.belief if turn.belief is not None else BeliefState()
    return out


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args: argparse.Namespace) -> int:
    save_dialogues(args.out, generate_corpus(args.dialogues, seed=args.seed))
    print(f"wrote {args.dialogues} dialogues to {args.out}")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    if not Path(args.input).is_file():
        raise CommandError(f"input corpus {args.input} does not exist")
    try:
        dialogues = load_dialogues(args.input)
        examples = build_examples(dialogues, args.prompt)
        split = split_few_shot(
            examples, args.fraction, args.seed,
            validation_fraction=args.val_fraction, test_fraction=args.test_fraction,
        )
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dialogues(out / "labeled.jsonl", examples_to_dialogues(split.labeled))
    save_dialogues(out / "unlabeled.jsonl", examples_to_dialogues(split.unlabeled, with_labels=False))
    save_dialogues(out / "validation.jsonl", examples_to_dialogues(split.validation))
    save_dialogues(out / "test.jsonl", examples_to_dialogues(split.test))
    manifest = split.manifest()
    manifest.update(source=str(args.input), validation_fraction=args.val_fraction, test_fraction=args.test_fraction)
    atomic_write_json(out / "manifest.json", manifest)
    print(json.dumps(manifest["counts"], sort_keys=True))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        snapshot = run_dir / "config.conf"
        if not snapshot.is_file():
            raise CommandError(f"{run_dir} is not a run directory (no config.conf)")
        # the snapshot stores resolved absolute paths
        cfg = load_config(snapshot)
        if (run_dir / "summary.json").is_file():
            print(f"{run_dir} already finished")
            return 0
    else:
        if not args.config:
            raise CommandError("run-st needs --config (or --resume DIR)")
        cfg = _apply_overrides(load_config(args.config), args)
        cfg.validate()
        run_dir = Path(args.run_dir) if args.run_dir else _fresh_run_dir(cfg)
        if run_dir.exists() and any(run_dir.iterdir()):
            raise CommandError(f"run directory {run_dir} is not empty; use --resume")
    result = run(cfg, run_dir, resume=bool(args.resume), stop_after=args.stop_after)
    if result.summary is None:
        print(f"stopped after iteration {result.state.iteration}; resume with --resume {run_dir}")
        return 0
    final = result.summary["final"]
    print(f"run_dir {run_dir}")
    print(f"stop_reason {result.stop_reason}  iterations {result.summary['iterations']}  "
          f"test_jga {final['test_jga']}  validation_jga {final['validation_jga']}")
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    variant = args.variant.replace("-", "_")
    try:
        examples = [e for e in build_examples(load_dialogues(args.input), args.prompt) if e.target is not None]
        slot_dict = build_slot_value_dict(examples) if variant == "gen_change" else None
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    augmenter = Augmenter(
        variant,
        infiller=ToyInfiller(SYNONYMS, seed=args.seed),
        generator=ToyConditionalGenerator(generator_phrases()),
        slot_dict=slot_dict,
        rate=args.rate,
        beam_width=args.beam_width,
    )
    augmented = augment_dataset(examples, augmenter, args.seed, oversample=args.oversample)
    write_jsonl(args.out, (a.to_json() for a in augmented))
    skipped = sum(a.skipped for a in augmented)
    print(json.dumps({"inputs": len(examples), "outputs": len(augmented), "skipped": skipped}, sort_keys=True))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    try:
        preds = _beliefs_by_turn(args.pred)
        golds = _beliefs_by_turn(args.gold)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    missing = sorted(set(golds) - set(preds))
    if missing:
        raise CommandError(f"{len(missing)} gold turns have no prediction, e.g. {missing[0]}")
    keys = sorted(golds)
    gold_list = [golds[k] for k in keys]
    pred_list = [preds[k] for k in keys]
    if args.train_labels:
        train = [t.belief for d in load_dialogues(args.train_labels) for t in d.turns if t.belief is not None]
        partition = partition_test_values(train, gold_list)
    else:
        partition = ValuePartition(frozenset(), frozenset())
    try:
        result = evaluate_partitioned(pred_list, gold_list, partition)
    except ZeroDenominator as exc:
        raise CommandError(f"slot recall undefined: {exc}") from None
    _print_json(result.to_json())
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    base = _apply_overrides(load_config(args.config), args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    spec = SweepSpec(args.axis, values, base)
    out = Path(args.out) if args.out else _runs_root() / f"sweep-{args.axis}-{base.digest()}"
    cells = run_sweep(spec, out)
    sys.stdout.write(sweep_table(args.axis, cells))
    print(f"sweep_dir {out}")
    return 1 if any(c.status != "ok" for c in cells) else 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "summary.json"
    if summary_path.is_file():
        summary = json.loads(summary_path.read_text())
        reports = summary["reports"]
    else:
        summary = None
        reports = [json.loads(p.read_text()) for p in sorted((run_dir / "iterations").glob("*/report.json"))]
        if not reports:
            raise CommandError(f"no reports under {run_dir}")
    if args.format == "json":
        if summary is not None:
            jsonschema.validate(summary, SUMMARY_SCHEMA)
        _print_json(summary if summary is not None else {"reports": reports})
        return 0
    columns = ["iteration", "n_pseudo_added", "mean_confidence", "validation_jga", "test_jga",
               "n_labeled", "n_unlabeled", "n_augmented", "skipped_augmentations", "selected_pseudo_jga"]
    sys.stdout.write(format_table(columns, [[r[c] for c in columns] for r in reports]))
    if summary is not None:
        print(f"stop_reason {summary['stop_reason']}")
        test_eval = summary["final"]["test_eval"]
        if test_eval is not None:
            print("test " + "  ".join(f"{k} {v}" for k, v in sorted(test_eval.items())))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_selection_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--criterion", choices=CRITERIA, help="override select.criterion")
    p.add_argument("--method", choices=METHODS, help="override select.method")
    p.add_argument("--k", type=float, help="override select.k")
    p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dst-selftrain", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dialogue corpus")
    p.add_argument("--dialogues", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="split a corpus into labeled/unlabeled/validation/test files")
    p.add_argument("--in", dest="input", required=True, help="dialogue JSON-lines corpus")
    p.add_argument("--fraction", type=float, required=True, help="labeled share of the training dialogues")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--prompt", default=ExperimentConfig().prompt)
    p.add_argument("--out", default="split")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run-st", help="run self-training from a config file")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--resume", metavar="DIR", help="continue an interrupted run directory")
    p.add_argument("--run-dir", help=f"explicit run directory (default: under ${RUNS_ENV} or ./runs)")
    p.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    _add_selection_overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("augment", help="augment a labeled dialogue file with one PPaug variant")
    p.add_argument("--variant", required=True, choices=["mlm-maintain", "mlm-change", "gen-maintain", "gen-change"])
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beam-width", type=int, default=1)
    p.add_argument("--oversample", action="store_true", help="keep every beam candidate")
    p.add_argument("--prompt", default=ExperimentConfig().prompt)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("evaluate", help="JGA and slot recall of predictions against gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--train-labels", help="labeled training file; enables the in-train/unseen split")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="one run per value of a single config axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--out", help="sweep directory")
    _add_selection_overrides(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print the iteration table of a run directory")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
