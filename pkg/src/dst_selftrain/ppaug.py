"""Purpose-preserving augmentation and its three alternative variants.

All four variants rewrite the current user utterance of an example:

* ``mlm_maintain`` masks words that do *not* belong to any belief value and
  lets a masked LM refill them; the label is kept.
* ``mlm_change`` masks words *inside* belief values and carries the refill
  into the label.
* ``gen_maintain`` regenerates the utterance from the unchanged label.
* ``gen_change`` swaps label values using a slot-value dictionary built from
  gold data, then generates an utterance for the new label.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional, Sequence

from dst_selftrain.dialogue_data import (
    BeliefState,
    Dialogue,
    Example,
    SlotValue,
    Token,
    Turn,
    Utterance,
    norm_text,
    render,
    tokenize,
)
from dst_selftrain.models import ConditionalGenerator, MaskedInfiller
from dst_selftrain.seeding import derive_seed, round_half_up

Variant = Literal["mlm_maintain", "mlm_change", "gen_maintain", "gen_change"]
VARIANTS: tuple[str, ...] = ("mlm_maintain", "mlm_change", "gen_maintain", "gen_change")

SlotValueDict = dict[tuple[str, str], set[str]]


class AugmentationSkipped(ValueError):
    pass


class NoOverlap(AugmentationSkipped):
    pass


class EmptyDict(AugmentationSkipped):
    pass


@dataclass(frozen=True)
class MaskPlan:
    mask_indices: frozenset[int]
    protected_indices: frozenset[int]
    rate: float

    def __post_init__(self) -> None:
        if self.mask_indices & self.protected_indices:
            raise ValueError("mask plan touches protected positions")


@dataclass(frozen=True)
class AugmentedExample:
    source_id: str
    text: str
    target: BeliefState
    variant: Variant
    # utterances preceding the rewritten one
    context: tuple[Utterance, ...] = ()
    rank: int = 0
    skipped: bool = False
    masked_positions: tuple[int, ...] = field(default=(), compare=False)

    @property
    def example_id(self) -> str:
        return f"{self.source_id}::aug{self.rank}"

    def to_example(self, prompt: str) -> Example:
        dialogue_id, _, turn = self.source_id.rpartition("#")
        return Example(
            example_id=self.example_id,
            dialogue_id=f"{dialogue_id or self.source_id}::aug",
            turn_index=int(turn) if turn.isdigit() else 0,
            context=self.context + (Utterance("user", self.text),),
            prompt=prompt,
            target=self.target,
            label_kind="gold",
        )

    def to_json(self) -> dict:
        """Dialogue record whose last turn is the rewritten one."""
        turns: list[Turn] = []
        system = None
        for utt in self.context:
            if utt.speaker == "system":
                system = utt.text
            else:
                turns.append(Turn(user=utt.text, system=system))
                system = None
        turns.append(Turn(user=self.text, system=system, belief=self.target))
        row = Dialogue(self.example_id, tuple(turns)).to_json()
        row["source_id"] = self.source_id
        row["variant"] = self.variant
        row["skipped"] = self.skipped
        return row


def _source_parts(e: Example) -> tuple[Utterance, tuple[Utterance, ...]]:
    if e.target is None:
        raise ValueError(f"{e.example_id}: augmentation needs a (gold or pseudo) target")
    if not e.context or e.context[-1].speaker != "user":
        raise ValueError(f"{e.example_id}: context must end with a user utterance")
    return e.context[-1], e.context[:-1]


# ---------------------------------------------------------------------------
# masking


def overlap_indices(tokens: Sequence[Token], belief: BeliefState) -> set[int]:
    value_norms = {t.norm for sv in belief for t in tokenize(sv.value) if t.norm}
    return {i for i, t in enumerate(tokens) if t.norm and t.norm in value_norms}


def plan_mask(tokens: Sequence[Token], protected: set[int] | frozenset[int], rate: float, seed: int) -> MaskPlan:
    """Mask ``round(rate * len(tokens))`` unprotected positions (at least one).

    The count is capped by the unprotected pool; a zero rate or an empty
    pool masks nothing.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"masking rate must be in [0, 1], got {rate}")
    n = len(tokens)
    protected = frozenset(i for i in protected if 0 <= i < n)
    pool = [i for i in range(n) if i not in protected]
    if rate == 0.0 or not pool:
        return MaskPlan(frozenset(), protected, rate)
    n_mask = min(len(pool), max(1, round_half_up(rate * n)))
    chosen = random.Random(seed).sample(pool, n_mask)
    return MaskPlan(frozenset(chosen), protected, rate)


def _infill_checked(m: MaskedInfiller, tokens: Sequence[Token], mask: frozenset[int], seed: int) -> list[Token]:
    new = m.infill(tokens, mask, seed=seed)
    if len(new) != len(tokens):
        raise ValueError("infiller changed the token count")
    if any(new[i] != tokens[i] for i in range(len(tokens)) if i not in mask):
        raise ValueError("infiller altered an unmasked position")
    if any(len(tokenize(new[i].surface)) != 1 for i in mask):
        raise ValueError("infiller produced a multi-token fill")
    return new


def augment_mlm_maintain(e: Example, m: MaskedInfiller, rate: float, seed: int) -> AugmentedExample:
    utt, history = _source_parts(e)
    tokens = tokenize(utt.text)
    plan = plan_mask(tokens, overlap_indices(tokens, e.target), rate, seed)
    new = _infill_checked(m, tokens, plan.mask_indices, seed)
    return AugmentedExample(
        source_id=e.example_id,
        text=render(utt.text, tokens, new),
        target=e.target,
        variant="mlm_maintain",
        context=history,
        masked_positions=tuple(sorted(plan.mask_indices)),
    )


def value_spans(tokens: Sequence[Token], belief: BeliefState) -> dict[tuple[str, str], tuple[int, int]]:
    """(domain, slot) -> (start, length) of the last verbatim mention in ``tokens``."""
    norms = [t.norm for t in tokens]
    spans = {}
    for sv in belief:
        vt = [t.norm for t in tokenize(sv.value)]
        if not any(vt):
            continue
        for p in range(len(norms) - len(vt), -1, -1):
            if norms[p:p + len(vt)] == vt:
                spans[sv.key] = (p, len(vt))
                break
    return spans


def augment_mlm_change(e: Example, m: MaskedInfiller, rate: float, seed: int) -> AugmentedExample:
    utt, history = _source_parts(e)
    tokens = tokenize(utt.text)
    spans = value_spans(tokens, e.target)
    pool = {i for start, length in spans.values() for i in range(start, start + length) if tokens[i].norm}
    if not pool:
        raise NoOverlap(f"{e.example_id}: no belief value is mentioned in the utterance")
    plan = plan_mask(tokens, frozenset(range(len(tokens))) - pool, rate, seed)
    new = _infill_checked(m, tokens, plan.mask_indices, seed)
    changed = {i for i in plan.mask_indices if new[i].surface != tokens[i].surface}

    entries = []
    for sv in e.target:
        span = spans.get(sv.key)
        if span is None or not changed.intersection(range(span[0], span[0] + span[1])):
            entries.append(sv)
            continue
        start, length = span
        value_tokens = tokenize(sv.value)
        refilled = [new[start + j] if start + j in changed else value_tokens[j] for j in range(length)]
        entries.append(SlotValue(sv.domain, sv.slot, render(sv.value, value_tokens, refilled)))
    return AugmentedExample(
        source_id=e.example_id,
        text=render(utt.text, tokens, new),
        target=BeliefState(tuple(entries)),
        variant="mlm_change",
        context=history,
        masked_positions=tuple(sorted(plan.mask_indices)),
    )


# ---------------------------------------------------------------------------
# generative variants


def _history_text(history: Sequence[Utterance]) -> str:
    return " ".join(f"{u.speaker}: {u.text}" for u in history)


def augment_gen_maintain(e: Example, g: ConditionalGenerator, beam_width: int) -> list[AugmentedExample]:
    _, history = _source_parts(e)
    candidates = g.generate_conditioned(_history_text(history), e.target, beam_width)
    return [
        AugmentedExample(e.example_id, text, e.target, "gen_maintain", history, rank)
        for rank, text in enumerate(candidates[:beam_width])
    ]


def build_slot_value_dict(labeled: Sequence[Example]) -> SlotValueDict:
    d: SlotValueDict = {}
    for e in labeled:
        if e.label_kind != "gold" or e.target is None:
            raise ValueError(f"{e.example_id}: slot-value dictionary takes gold labels only")
        for sv in e.target:
            d.setdefault(sv.key, set()).add(sv.value)
    return d


def augment_gen_change(
    e: Example, g: ConditionalGenerator, d: Mapping[tuple[str, str], set[str]], beam_width: int, seed: int
) -> list[AugmentedExample]:
    _, history = _source_parts(e)
    rng = random.Random(seed)
    entries = []
    swapped = False
    for sv in e.target:
        options = sorted(v for v in d.get(sv.key, ()) if norm_text(v) != norm_text(sv.value))
        if options:
            entries.append(SlotValue(sv.domain, sv.slot, rng.choice(options)))
            swapped = True
        else:
            entries.append(sv)
    if not swapped:
        raise EmptyDict(f"{e.example_id}: no slot has an alternative value")
    new_target = BeliefState(tuple(entries))
    candidates = g.generate_conditioned(_history_text(history), new_target, beam_width)
    return [
        AugmentedExample(e.example_id, text, new_target, "gen_change", history, rank)
        for rank, text in enumerate(candidates[:beam_width])
    ]


# ---------------------------------------------------------------------------
# dataset level


@dataclass
class Augmenter:
    """One configured variant, callable as ``augmenter(example, seed)``."""

    variant: Variant
    infiller: Optional[MaskedInfiller] = None
    generator: Optional[ConditionalGenerator] = None
    slot_dict: Optional[SlotValueDict] = None
    rate: float = 0.2
    beam_width: int = 1

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant.startswith("mlm") and self.infiller is None:
            raise ValueError(f"{self.variant} needs a masked infiller")
        if self.variant.startswith("gen") and self.generator is None:
            raise ValueError(f"{self.variant} needs a conditional generator")
        if self.variant == "gen_change" and self.slot_dict is None:
            raise ValueError("gen_change needs a slot-value dictionary")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")

    def __call__(self, e: Example, seed: int) -> list[AugmentedExample]:
        if self.variant == "mlm_maintain":
            return [augment_mlm_maintain(e, self.infiller, self.rate, seed)]
        if self.variant == "mlm_change":
            return [augment_mlm_change(e, self.infiller, self.rate, seed)]
        if self.variant == "gen_maintain":
            return augment_gen_maintain(e, self.generator, self.beam_width)
        return augment_gen_change(e, self.generator, self.slot_dict, self.beam_width, seed)


def augment_dataset(
    examples: Sequence[Example], augmenter: Augmenter, seed: int, *, oversample: bool = False
) -> list[AugmentedExample]:
    """One augmented example per input, so input + output doubles the pool.

    Examples the variant cannot handle come back as verbatim copies marked
    ``skipped``. With ``oversample`` every beam candidate is kept.
    """
    out: list[AugmentedExample] = []
    for e in examples:
        try:
            produced = augmenter(e, derive_seed(seed, "augment", e.example_id))
        except AugmentationSkipped:
            produced = []
        if not produced:
            utt, history = _source_parts(e)
            produced = [AugmentedExample(e.example_id, utt.text, e.target, augmenter.variant, history, skipped=True)]
        out.extend(produced if oversample else produced[:1])
    return out
