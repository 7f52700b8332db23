"""The self-training loop: teacher, pseudo-labels, selection, augmentation, student.

Each iteration pseudo-labels the unlabeled pool with the current teacher,
moves the top-scoring share into the labeled pool (their labels are frozen
from then on), augments the enlarged pool, pre-trains a fresh student on the
augmented copy and fine-tunes it on the labeled pool. The student becomes
the next teacher.

A run directory makes the loop resumable::

    run_dir/
      config.conf              config snapshot
      split.json               data split used by the run
      iterations/003/          one directory per finished iteration
        teacher.json           model checkpoint
        state.json             labeled / unlabeled pools
        report.json            IterationReport (written last)
      timings.json             wall-clock per iteration (not deterministic)
      summary.json             final summary
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from dst_selftrain.config import ConfigError, ExperimentConfig, save_config
from dst_selftrain.confidence import ScoredExample, random_seed_for, score, select
from dst_selftrain.dialogue_data import (
    BeliefState,
    DatasetSplit,
    Example,
    build_examples,
    load_dialogues,
    parse_belief_lenient,
    partition_test_values,
    split_few_shot,
)
from dst_selftrain.metrics import EvalResult, evaluate_partitioned, joint_goal_accuracy
from dst_selftrain.models import (
    EmptyTrainingSet,
    GenerativeModel,
    ModelFactory,
    ToyConditionalGenerator,
    ToyInfiller,
    TrainHistory,
    TrainSchedule,
    evaluate_jga,
    make_factory,
    model_from_state,
    predict,
    train,
)
from dst_selftrain.ppaug import AugmentedExample, Augmenter, augment_dataset, build_slot_value_dict
from dst_selftrain.seeding import derive_seed
from dst_selftrain.synthetic import SYNONYMS, generate_corpus, generator_phrases

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "schema_version", "iteration", "n_pseudo_added", "mean_confidence", "validation_jga",
        "test_jga", "skipped_augmentations", "n_augmented", "n_labeled", "n_unlabeled",
        "n_flagged", "selected_pseudo_jga",
    ],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "iteration": {"type": "integer", "minimum": 0},
        "n_pseudo_added": {"type": "integer", "minimum": 0},
        "mean_confidence": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "validation_jga": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "test_jga": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "skipped_augmentations": {"type": "integer", "minimum": 0},
        "n_augmented": {"type": "integer", "minimum": 0},
        "n_labeled": {"type": "integer", "minimum": 0},
        "n_unlabeled": {"type": "integer", "minimum": 0},
        "n_flagged": {"type": "integer", "minimum": 0},
        "selected_pseudo_jga": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
}

SUMMARY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "config_digest", "stop_reason", "iterations", "reports", "final"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "config_digest": {"type": "string"},
        "stop_reason": {"enum": ["unlabeled_exhausted", "max_iterations", "validation_patience"]},
        "iterations": {"type": "integer", "minimum": 0},
        "reports": {"type": "array", "items": REPORT_SCHEMA},
        "final": {
            "type": "object",
            "required": ["validation_jga", "test_jga", "test_eval"],
        },
    },
}


@dataclass
class IterationReport:
    iteration: int
    n_pseudo_added: int = 0
    mean_confidence: Optional[float] = None
    validation_jga: Optional[float] = None
    test_jga: Optional[float] = None
    skipped_augmentations: int = 0
    n_augmented: int = 0
    n_labeled: int = 0
    n_unlabeled: int = 0
    n_flagged: int = 0
    # quality of the pseudo labels that were added, when hidden gold is known
    selected_pseudo_jga: Optional[float] = None
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> dict:
        """Deterministic record; wall time is kept out of it."""
        d = asdict(self)
        d.pop("wall_time")
        return {"schema_version": SCHEMA_VERSION, **d}

    @classmethod
    def from_json(cls, payload: dict) -> "IterationReport":
        d = dict(payload)
        d.pop("schema_version", None)
        return cls(**d)


@dataclass
class STState:
    iteration: int
    labeled: list[Example]
    unlabeled: list[Example]
    teacher: GenerativeModel
    history: list[IterationReport] = field(default_factory=list)

    def check(self) -> None:
        ids_l = {e.example_id for e in self.labeled}
        ids_u = {e.example_id for e in self.unlabeled}
        if len(ids_l) != len(self.labeled) or len(ids_u) != len(self.unlabeled):
            raise ValueError("duplicate example ids in a pool")
        if ids_l & ids_u:
            raise ValueError("labeled and unlabeled pools overlap")

    def pools_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "labeled": [e.to_json() for e in self.labeled],
            "unlabeled": [e.to_json() for e in self.unlabeled],
        }


@dataclass
class Resources:
    """Everything besides the evolving pools that an iteration needs."""

    factory: ModelFactory
    validation: list[Example]
    test: list[Example]
    infiller: ToyInfiller
    generator: ToyConditionalGenerator
    hidden_gold: dict[str, BeliefState] = field(default_factory=dict)
    gold_labels: list[BeliefState] = field(default_factory=list)


# ---------------------------------------------------------------------------
# stages


def init_teacher(
    L0: Sequence[Example],
    factory: ModelFactory,
    schedule: TrainSchedule,
    validation: Sequence[Example] = (),
    *,
    seed: int = 0,
    max_len: int = 128,
) -> tuple[GenerativeModel, TrainHistory]:
    if not L0:
        raise EmptyTrainingSet("teacher needs initial labeled data")
    if any(e.label_kind != "gold" for e in L0):
        raise ValueError("the initial teacher trains on gold labels only")
    return train(factory(seed), L0, validation, schedule, max_len=max_len)


def pseudo_label(
    teacher: GenerativeModel,
    U: Sequence[Example],
    criterion: str,
    *,
    iteration: int = 0,
    seed: int = 0,
    max_len: int = 128,
) -> list[ScoredExample]:
    """Label every unlabeled example with the teacher and score it.

    Unparseable or empty generations get an empty target and score 0, and
    are flagged.
    """
    out = []
    for e in U:
        g = teacher.generate(e.input_text, max_len)
        belief, issues = parse_belief_lenient(g.raw_text)
        malformed = any(i.startswith("malformed") for i in issues)
        if malformed or not g.token_probs:
            belief, conf, flagged = BeliefState(), 0.0, True
        else:
            conf = score(g, criterion, random_seed_for(seed, e.example_id, iteration))
            flagged = bool(issues)
        out.append(ScoredExample(e.with_label(belief, "pseudo", conf), g, conf, criterion, flagged))
    return out


def train_student(
    factory: ModelFactory,
    A: Sequence[AugmentedExample],
    Ltilde: Sequence[Example],
    cfg: ExperimentConfig,
    validation: Sequence[Example] = (),
    *,
    seed: int = 0,
) -> tuple[GenerativeModel, TrainHistory]:
    """Fresh student; separate mode pre-trains on A then fine-tunes on L~."""
    if not Ltilde:
        raise EmptyTrainingSet("student needs labeled data")
    augmented = [a.to_example(cfg.prompt) for a in A]
    model = factory(seed)
    if cfg.training_mode == "merged":
        return train(model, augmented + list(Ltilde), validation, cfg.finetune_schedule, max_len=cfg.max_len)
    if augmented:
        model, _ = train(model, augmented, validation, cfg.pretrain_schedule, max_len=cfg.max_len)
    return train(model, Ltilde, validation, cfg.finetune_schedule, max_len=cfg.max_len)


def _maybe_jga(model: GenerativeModel, examples: Sequence[Example], max_len: int) -> Optional[float]:
    return evaluate_jga(model, examples, max_len) if examples else None


def make_augmenter(cfg: ExperimentConfig, res: Resources, gold: Sequence[Example]) -> Optional[Augmenter]:
    if cfg.variant == "none":
        return None
    slot_dict = build_slot_value_dict(gold) if cfg.variant == "gen_change" else None
    return Augmenter(cfg.variant, res.infiller, res.generator, slot_dict, cfg.mask_rate, cfg.beam_width)


def run_iteration(state: STState, cfg: ExperimentConfig, res: Resources) -> tuple[STState, IterationReport]:
    started = time.perf_counter()
    i = state.iteration + 1
    if not state.unlabeled:
        report = IterationReport(
            iteration=state.iteration,
            validation_jga=state.history[-1].validation_jga if state.history else None,
            test_jga=state.history[-1].test_jga if state.history else None,
            n_labeled=len(state.labeled),
        )
        return state, report

    scored = pseudo_label(state.teacher, state.unlabeled, cfg.criterion, iteration=i, seed=cfg.seed, max_len=cfg.max_len)
    selected, remaining = select(scored, cfg.selection(derive_seed(cfg.seed, "select", i)))
    added = [s.example for s in selected]
    labeled = state.labeled + added
    unlabeled = [s.example.unlabeled() for s in remaining]

    gold = [e for e in labeled if e.label_kind == "gold"]
    augmenter = make_augmenter(cfg, res, gold)
    A: list[AugmentedExample] = []
    if augmenter is not None:
        source = gold if cfg.augment_source == "gold" else labeled
        A = augment_dataset(source, augmenter, derive_seed(cfg.seed, "ppaug", i))

    student, _ = train_student(res.factory, A, labeled, cfg, res.validation, seed=derive_seed(cfg.seed, "model", i))

    selected_jga = None
    known = [s for s in selected if s.example_id in res.hidden_gold]
    if known:
        selected_jga = joint_goal_accuracy(
            [s.example.target for s in known], [res.hidden_gold[s.example_id] for s in known]
        )
    report = IterationReport(
        iteration=i,
        n_pseudo_added=len(added),
        mean_confidence=sum(s.score for s in selected) / len(selected) if selected else None,
        validation_jga=_maybe_jga(student, res.validation, cfg.max_len),
        test_jga=_maybe_jga(student, res.test, cfg.max_len),
        skipped_augmentations=sum(a.skipped for a in A),
        n_augmented=len(A),
        n_labeled=len(labeled),
        n_unlabeled=len(unlabeled),
        n_flagged=sum(s.flagged for s in scored),
        selected_pseudo_jga=selected_jga,
        wall_time=time.perf_counter() - started,
    )
    new_state = STState(i, labeled, unlabeled, student, state.history + [report])
    new_state.check()
    return new_state, report


# ---------------------------------------------------------------------------
# data and resources


def load_split(cfg: ExperimentConfig) -> DatasetSplit:
    if cfg.split_dir is not None:
        d = Path(cfg.split_dir)
        parts = {}
        for name in ("labeled", "unlabeled", "validation", "test"):
            path = d / f"{name}.jsonl"
            parts[name] = build_examples(load_dialogues(path), cfg.prompt) if path.exists() else []
        if any(e.target is None for e in parts["labeled"]):
            raise ConfigError("labeled.jsonl contains turns without belief labels")
        parts["unlabeled"] = [e.unlabeled() for e in parts["unlabeled"]]
        return DatasetSplit(**parts, fraction=cfg.labeled_fraction, seed=cfg.seed)
    if cfg.corpus is not None:
        dialogues = load_dialogues(cfg.corpus)
    else:
        dialogues = generate_corpus(cfg.synthetic_dialogues, seed=cfg.seed)
    return split_few_shot(
        build_examples(dialogues, cfg.prompt),
        cfg.labeled_fraction,
        cfg.seed,
        validation_fraction=cfg.validation_fraction,
        test_fraction=cfg.test_fraction,
    )


def make_resources(cfg: ExperimentConfig, split: DatasetSplit) -> Resources:
    factory = make_factory(
        cfg.backend, noise_rate=cfg.noise_rate, fallback=cfg.fallback, boilerplate_prob=cfg.boilerplate_prob
    )
    return Resources(
        factory=factory,
        validation=split.validation,
        test=split.test,
        infiller=ToyInfiller(SYNONYMS, seed=cfg.seed),
        generator=ToyConditionalGenerator(generator_phrases()),
        hidden_gold=dict(split.hidden_gold),
        gold_labels=[e.target for e in split.labeled],
    )


def initial_state(cfg: ExperimentConfig, split: DatasetSplit, res: Resources) -> STState:
    started = time.perf_counter()
    teacher, _ = init_teacher(
        split.labeled, res.factory, cfg.teacher_schedule, res.validation,
        seed=derive_seed(cfg.seed, "model", 0), max_len=cfg.max_len,
    )
    report = IterationReport(
        iteration=0,
        validation_jga=_maybe_jga(teacher, res.validation, cfg.max_len),
        test_jga=_maybe_jga(teacher, res.test, cfg.max_len),
        n_labeled=len(split.labeled),
        n_unlabeled=len(split.unlabeled),
        wall_time=time.perf_counter() - started,
    )
    state = STState(0, list(split.labeled), list(split.unlabeled), teacher, [report])
    state.check()
    return state


# ---------------------------------------------------------------------------
# persistence


def atomic_write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _iter_dir(run_dir: Path, i: int) -> Path:
    return run_dir / "iterations" / f"{i:03d}"


def _save_iteration(run_dir: Path, state: STState) -> None:
    d = _iter_dir(run_dir, state.iteration)
    atomic_write_json(d / "teacher.json", state.teacher.state_dict())
    atomic_write_json(d / "state.json", state.pools_json())
    # the report marks the iteration complete, so it goes last
    atomic_write_json(d / "report.json", state.history[-1].to_json())
    timings_path = run_dir / "timings.json"
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    timings[str(state.iteration)] = state.history[-1].wall_time
    atomic_write_json(timings_path, timings)


def _split_json(split: DatasetSplit) -> dict:
    return {
        "labeled": [e.to_json() for e in split.labeled],
        "unlabeled": [e.to_json() for e in split.unlabeled],
        "validation": [e.to_json() for e in split.validation],
        "test": [e.to_json() for e in split.test],
        "hidden_gold": {k: v.to_json() for k, v in sorted(split.hidden_gold.items())},
        "seed": split.seed,
        "fraction": split.fraction,
    }


def _split_from_json(payload: dict) -> DatasetSplit:
    return DatasetSplit(
        labeled=[Example.from_json(e) for e in payload["labeled"]],
        unlabeled=[Example.from_json(e) for e in payload["unlabeled"]],
        validation=[Example.from_json(e) for e in payload["validation"]],
        test=[Example.from_json(e) for e in payload["test"]],
        hidden_gold={k: BeliefState.from_json(v) for k, v in payload["hidden_gold"].items()},
        seed=payload["seed"],
        fraction=payload["fraction"],
    )


def last_complete_iteration(run_dir: Path) -> Optional[int]:
    root = Path(run_dir) / "iterations"
    if not root.is_dir():
        return None
    done = sorted(
        int(p.name) for p in root.iterdir()
        if p.name.isdigit() and all((p / f).is_file() for f in ("teacher.json", "state.json", "report.json"))
    )
    # iterations are written in order; trust only the unbroken prefix
    last = None
    for expected, i in enumerate(done):
        if i != expected:
            break
        last = i
    return last


def _load_state(run_dir: Path, i: int) -> STState:
    history = [
        IterationReport.from_json(json.loads((_iter_dir(run_dir, j) / "report.json").read_text()))
        for j in range(i + 1)
    ]
    d = _iter_dir(run_dir, i)
    pools = json.loads((d / "state.json").read_text())
    teacher = model_from_state(json.loads((d / "teacher.json").read_text()))
    return STState(
        i,
        [Example.from_json(e) for e in pools["labeled"]],
        [Example.from_json(e) for e in pools["unlabeled"]],
        teacher,
        history,
    )


# ---------------------------------------------------------------------------
# the loop


@dataclass
class RunResult:
    state: STState
    reports: list[IterationReport]
    stop_reason: Optional[str]
    summary: Optional[dict]
    run_dir: Optional[Path] = None


def _stop_reason(state: STState, cfg: ExperimentConfig) -> Optional[str]:
    if not state.unlabeled:
        return "unlabeled_exhausted"
    if state.iteration >= cfg.max_iterations:
        return "max_iterations"
    jgas = [r.validation_jga for r in state.history]
    if all(j is not None for j in jgas) and len(jgas) > 1:
        best = max(range(len(jgas)), key=lambda j: (jgas[j], -j))
        if len(jgas) - 1 - best >= cfg.st_patience:
            return "validation_patience"
    return None


def final_summary(cfg: ExperimentConfig, state: STState, res: Resources, stop_reason: str) -> dict:
    test_eval: Optional[EvalResult] = None
    if res.test:
        preds = predict(state.teacher, res.test, cfg.max_len)
        golds = [e.target for e in res.test]
        if any(golds):
            partition = partition_test_values(res.gold_labels, golds)
            test_eval = evaluate_partitioned(preds, golds, partition)
    last = state.history[-1]
    return {
        "schema_version": SCHEMA_VERSION,
        "config_digest": cfg.digest(),
        "stop_reason": stop_reason,
        "iterations": state.iteration,
        "reports": [r.to_json() for r in state.history],
        "final": {
            "validation_jga": last.validation_jga,
            "test_jga": last.test_jga,
            "test_eval": None if test_eval is None else test_eval.to_json(),
        },
    }


def run(
    cfg: ExperimentConfig,
    run_dir: Optional[str | Path] = None,
    *,
    resume: bool = False,
    stop_after: Optional[int] = None,
) -> RunResult:
    """Run self-training to completion (or until ``stop_after`` iterations).

    ``stop_after`` simulates an interrupted run: it returns without a
    summary, and ``resume=True`` on the same directory picks up from the
    last persisted iteration.
    """
    cfg.validate()
    run_dir = Path(run_dir) if run_dir is not None else None

    start_at = None
    if resume:
        if run_dir is None or not (run_dir / "split.json").is_file():
            raise ConfigError(f"nothing to resume in {run_dir}")
        start_at = last_complete_iteration(run_dir)
        split = _split_from_json(json.loads((run_dir / "split.json").read_text()))
    else:
        split = load_split(cfg)
        if not split.labeled:
            raise ConfigError("the split has no labeled examples")
    res = make_resources(cfg, split)

    if run_dir is not None and not resume:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dir / "config.conf")
        atomic_write_json(run_dir / "split.json", _split_json(split))

    if start_at is None:
        state = initial_state(cfg, split, res)
        if run_dir is not None:
            _save_iteration(run_dir, state)
    else:
        state = _load_state(run_dir, start_at)
        logger.info("resuming %s after iteration %d", run_dir, start_at)

    total = len(state.labeled) + len(state.unlabeled)
    reason = _stop_reason(state, cfg)
    while reason is None:
        if stop_after is not None and state.iteration >= stop_after:
            return RunResult(state, state.history, None, None, run_dir)
        state, report = run_iteration(state, cfg, res)
        if len(state.labeled) + len(state.unlabeled) != total:
            raise AssertionError("pool size changed during an iteration")
        logger.info(
            "iteration %d: +%d pseudo, val JGA %s, test JGA %s",
            report.iteration, report.n_pseudo_added, report.validation_jga, report.test_jga,
        )
        if run_dir is not None:
            _save_iteration(run_dir, state)
        reason = _stop_reason(state, cfg)

    summary = final_summary(cfg, state, res, reason)
    if run_dir is not None:
        atomic_write_json(run_dir / "summary.json", summary)
    return RunResult(state, state.history, reason, summary, run_dir)
