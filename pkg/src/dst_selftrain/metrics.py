"""Joint goal accuracy and slot recall, optionally split by value partition."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Collection, Optional, Sequence

from dst_selftrain.dialogue_data import BeliefState, ValuePartition

Triple = tuple[str, str, str]


class LengthMismatch(ValueError):
    pass


class EmptyEvalSet(ValueError):
    pass


class ZeroDenominator(ZeroDivisionError):
    pass


def _check(preds: Sequence[BeliefState], golds: Sequence[BeliefState]) -> None:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions for {len(golds)} gold states")
    if not golds:
        raise EmptyEvalSet("nothing to evaluate")


def joint_goal_accuracy(preds: Sequence[BeliefState], golds: Sequence[BeliefState]) -> float:
    _check(preds, golds)
    correct = sum(p.triples() == g.triples() for p, g in zip(preds, golds))
    return correct / len(golds)


def recall_counts(
    preds: Sequence[BeliefState],
    golds: Sequence[BeliefState],
    value_filter: Optional[Collection[Triple]] = None,
) -> tuple[int, int]:
    """(correctly predicted, total) gold slot-values, counted per turn."""
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions for {len(golds)} gold states")
    hit = total = 0
    for p, g in zip(preds, golds):
        gold = g.triples()
        if value_filter is not None:
            gold = gold & frozenset(value_filter)
        total += len(gold)
        hit += len(gold & p.triples())
    return hit, total


def slot_recall(
    preds: Sequence[BeliefState],
    golds: Sequence[BeliefState],
    value_filter: Optional[Collection[Triple]] = None,
) -> float:
    hit, total = recall_counts(preds, golds, value_filter)
    if total == 0:
        raise ZeroDenominator("no gold slot-values pass the filter")
    return hit / total


@dataclass(frozen=True)
class EvalResult:
    jga: float
    slot_recall_overall: float
    slot_recall_in_train: Optional[float]
    slot_recall_unseen: Optional[float]
    n_turns: int
    n_slot_values: int

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_partitioned(
    preds: Sequence[BeliefState], golds: Sequence[BeliefState], partition: ValuePartition
) -> EvalResult:
    jga = joint_goal_accuracy(preds, golds)
    overall = slot_recall(preds, golds)
    _, total = recall_counts(preds, golds)
    sides = {}
    for name, values in (("in_train", partition.in_train), ("unseen", partition.unseen)):
        h, t = recall_counts(preds, golds, values)
        sides[name] = h / t if t else None
    return EvalResult(
        jga=jga,
        slot_recall_overall=overall,
        slot_recall_in_train=sides["in_train"],
        slot_recall_unseen=sides["unseen"],
        n_turns=len(golds),
        n_slot_values=total,
    )
