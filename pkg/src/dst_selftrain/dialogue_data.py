"""Dialogue corpus model, belief-state linearization, few-shot splits."""

from __future__ import annotations

import json
import random
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal, Optional, Sequence

from dst_selftrain.seeding import ceil_count

DEFAULT_PROMPT = "translate dialogue to belief state :"

Speaker = Literal["user", "system"]
LabelKind = Literal["gold", "pseudo", "unlabeled"]

# clock times and grouped numbers first, then words (with inner ' or -), then single punctuation
_TOKEN_RE = re.compile(
    r"\d{1,2}:\d{2}"
    r"|\d+(?:[.,]\d+)*"
    r"|[^\W_]+(?:['’\-][^\W_]+)*"
    r"|[^\w\s]|_"
)
_WS_RE = re.compile(r"\s+")
_PUNCT = string.punctuation + "’‘“”"


class MalformedBelief(ValueError):
    """Belief text does not follow the ``[domain][slot] value`` grammar."""

    def __init__(self, message: str, partial: "BeliefState | None" = None):
        super().__init__(message)
        self.partial = partial if partial is not None else BeliefState()


class DuplicateSlot(ValueError):
    def __init__(self, message: str, partial: "BeliefState | None" = None):
        super().__init__(message)
        self.partial = partial if partial is not None else BeliefState()


class EmptyDataset(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokens


@dataclass(frozen=True)
class Token:
    surface: str
    norm: str
    # character span in the source text; -1 when the token was synthesized
    start: int = field(default=-1, compare=False)
    end: int = field(default=-1, compare=False)

    @classmethod
    def of(cls, surface: str) -> "Token":
        return cls(surface, normalize_token(surface))

    def __str__(self) -> str:
        return self.surface


def normalize_token(surface: str) -> str:
    return surface.lower().strip(_PUNCT)


def tokenize(text: str) -> list[Token]:
    return [
        Token(m.group(0), normalize_token(m.group(0)), m.start(), m.end())
        for m in _TOKEN_RE.finditer(text)
    ]


def detokenize(tokens: Sequence[Token]) -> str:
    return " ".join(t.surface for t in tokens)


def render(text: str, original: Sequence[Token], replaced: Sequence[Token]) -> str:
    """Splice ``replaced`` surfaces into ``text`` at the spans of ``original``.

    Spacing of the untouched parts of ``text`` is kept, so an all-identical
    replacement returns ``text`` unchanged.
    """
    if len(original) != len(replaced):
        raise ValueError("token sequences differ in length")
    if any(t.start < 0 for t in original):
        return detokenize(replaced)
    out: list[str] = []
    cursor = 0
    for old, new in zip(original, replaced):
        out.append(text[cursor:old.start])
        out.append(new.surface)
        cursor = old.end
    out.append(text[cursor:])
    return "".join(out)


def norm_text(text: str) -> str:
    """Lowercase, single-spaced form used for label comparison."""
    return _WS_RE.sub(" ", text).strip().lower()


def _clean_name(text: str) -> str:
    return _WS_RE.sub(" ", text).strip().lower()


# ---------------------------------------------------------------------------
# belief states


@dataclass(frozen=True, order=True)
class SlotValue:
    domain: str
    slot: str
    value: str

    def __post_init__(self) -> None:
        domain = _clean_name(self.domain)
        slot = _clean_name(self.slot)
        value = _WS_RE.sub(" ", self.value).strip()
        if not domain or not slot or not value:
            raise ValueError(f"empty field in slot value {self!r}")
        for part in (domain, slot, value):
            if "[" in part or "]" in part:
                raise ValueError(f"brackets are reserved: {part!r}")
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "slot", slot)
        object.__setattr__(self, "value", value)

    @property
    def key(self) -> tuple[str, str]:
        return (self.domain, self.slot)

    def normalized(self) -> tuple[str, str, str]:
        return (self.domain, self.slot, norm_text(self.value))

    def to_json(self) -> dict:
        return {"domain": self.domain, "slot": self.slot, "value": self.value}

    @classmethod
    def from_json(cls, payload: dict) -> "SlotValue":
        return cls(payload["domain"], payload["slot"], payload["value"])


@dataclass(frozen=True)
class BeliefState:
    """At most one value per (domain, slot), kept in canonical order."""

    entries: tuple[SlotValue, ...] = ()

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.entries, key=lambda sv: (sv.domain, sv.slot)))
        seen: set[tuple[str, str]] = set()
        for sv in ordered:
            if sv.key in seen:
                raise DuplicateSlot(f"two values for {sv.domain}-{sv.slot}")
            seen.add(sv.key)
        object.__setattr__(self, "entries", ordered)

    @classmethod
    def of(cls, *triples: tuple[str, str, str]) -> "BeliefState":
        return cls(tuple(SlotValue(*t) for t in triples))

    def __iter__(self) -> Iterator[SlotValue]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def get(self, domain: str, slot: str) -> Optional[str]:
        for sv in self.entries:
            if sv.domain == domain and sv.slot == slot:
                return sv.value
        return None

    def triples(self) -> frozenset[tuple[str, str, str]]:
        """Normalized triples, the unit of comparison for metrics."""
        return frozenset(sv.normalized() for sv in self.entries)

    def to_json(self) -> list[dict]:
        return [sv.to_json() for sv in self.entries]

    @classmethod
    def from_json(cls, payload: Optional[Iterable[dict]]) -> "BeliefState":
        return cls(tuple(SlotValue.from_json(p) for p in payload or ()))


def serialize_belief(belief: BeliefState) -> str:
    parts: list[str] = []
    current = None
    for sv in belief.entries:
        if sv.domain != current:
            current = sv.domain
            parts.append(f"[{sv.domain}][{sv.slot}] {sv.value}")
        else:
            parts.append(f"[{sv.slot}] {sv.value}")
    return " ".join(parts)


_BRACKET_RE = re.compile(r"\[([^\[\]]*)\]")


def parse_belief_lenient(text: str) -> tuple[BeliefState, list[str]]:
    """Parse belief text, returning the longest valid prefix and any issues.

    Issues are ``"malformed: ..."`` or ``"duplicate: ..."`` strings. A
    duplicated (domain, slot) keeps its last value.
    """
    text = text.strip()
    issues: list[str] = []
    values: dict[tuple[str, str], str] = {}
    if not text:
        return BeliefState(), issues

    groups = list(_BRACKET_RE.finditer(text))
    if not groups or groups[0].start() != 0:
        return BeliefState(), [f"malformed: expected '[domain]' at start of {text[:30]!r}"]

    domain: Optional[str] = None
    domain_has_slot = True
    for i, g in enumerate(groups):
        nxt = groups[i + 1] if i + 1 < len(groups) else None
        between = text[g.end():nxt.start() if nxt else len(text)]
        name = _clean_name(g.group(1))
        if not name:
            issues.append(f"malformed: empty bracket at offset {g.start()}")
            break
        if nxt is not None and not between.strip():
            # "[domain][slot]" opens a new domain
            if not domain_has_slot:
                issues.append(f"malformed: domain {domain!r} has no slots")
                break
            domain, domain_has_slot = name, False
            continue
        if domain is None:
            issues.append(f"malformed: slot {name!r} outside any domain")
            break
        value = _WS_RE.sub(" ", between).strip().strip(",").strip()
        if not value or "[" in value or "]" in value:
            issues.append(f"malformed: bad value {value!r} for {domain}-{name}")
            break
        if (domain, name) in values:
            issues.append(f"duplicate: {domain}-{name}")
            del values[(domain, name)]
        values[(domain, name)] = value
        domain_has_slot = True

    belief = BeliefState(tuple(SlotValue(d, s, v) for (d, s), v in values.items()))
    return belief, issues


def parse_belief(text: str) -> BeliefState:
    belief, issues = parse_belief_lenient(text)
    for issue in issues:
        if issue.startswith("malformed"):
            raise MalformedBelief(issue, belief)
    if issues:
        raise DuplicateSlot("; ".join(issues), belief)
    return belief


# ---------------------------------------------------------------------------
# dialogues and examples


@dataclass(frozen=True)
class Utterance:
    speaker: Speaker
    text: str

    @property
    def tokens(self) -> list[Token]:
        return tokenize(self.text)


@dataclass(frozen=True)
class Turn:
    user: str
    system: Optional[str] = None
    belief: Optional[BeliefState] = None


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    turns: tuple[Turn, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if self.turns and self.turns[0].system is not None:
            raise ValueError(f"{self.dialogue_id}: first turn has a system utterance")

    def to_json(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "turns": [
                {
                    "system": t.system,
                    "user": t.user,
                    "belief": None if t.belief is None else t.belief.to_json(),
                }
                for t in self.turns
            ],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "Dialogue":
        turns = []
        for t in payload["turns"]:
            belief = t.get("belief")
            turns.append(
                Turn(
                    user=t["user"],
                    system=t.get("system"),
                    belief=None if belief is None else BeliefState.from_json(belief),
                )
            )
        return cls(str(payload["dialogue_id"]), tuple(turns))


@dataclass(frozen=True)
class Example:
    example_id: str
    dialogue_id: str
    turn_index: int
    context: tuple[Utterance, ...]
    prompt: str = DEFAULT_PROMPT
    target: Optional[BeliefState] = None
    label_kind: LabelKind = "gold"
    confidence: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "context", tuple(self.context))
        if (self.confidence is not None) != (self.label_kind == "pseudo"):
            raise ValueError(f"{self.example_id}: confidence must accompany pseudo labels only")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"{self.example_id}: confidence out of [0, 1]")
        if (self.target is None) != (self.label_kind == "unlabeled"):
            raise ValueError(f"{self.example_id}: target presence disagrees with label kind")

    @property
    def user_utterance(self) -> Utterance:
        return self.context[-1]

    @property
    def input_text(self) -> str:
        return format_input(self.prompt, self.context)

    def with_label(self, target: BeliefState, kind: LabelKind, confidence: Optional[float] = None) -> "Example":
        return Example(
            self.example_id,
            self.dialogue_id,
            self.turn_index,
            self.context,
            self.prompt,
            target,
            kind,
            confidence,
        )

    def unlabeled(self) -> "Example":
        return Example(
            self.example_id, self.dialogue_id, self.turn_index, self.context, self.prompt,
            None, "unlabeled", None,
        )

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "dialogue_id": self.dialogue_id,
            "turn_index": self.turn_index,
            "context": [[u.speaker, u.text] for u in self.context],
            "prompt": self.prompt,
            "target": None if self.target is None else self.target.to_json(),
            "label_kind": self.label_kind,
            "confidence": self.confidence,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "Example":
        target = payload.get("target")
        return cls(
            example_id=payload["example_id"],
            dialogue_id=payload["dialogue_id"],
            turn_index=int(payload["turn_index"]),
            context=tuple(Utterance(s, t) for s, t in payload["context"]),
            prompt=payload["prompt"],
            target=None if target is None else BeliefState.from_json(target),
            label_kind=payload["label_kind"],
            confidence=payload.get("confidence"),
        )


def format_input(prompt: str, context: Sequence[Utterance]) -> str:
    """Model input: prompt first, then the speaker-tagged history."""
    history = " ".join(f"{u.speaker}: {u.text}" for u in context)
    return f"{prompt} {history}" if history else prompt


def example_id(dialogue_id: str, turn_index: int) -> str:
    return f"{dialogue_id}#{turn_index}"


def build_examples(dialogues: Iterable[Dialogue], prompt: str = DEFAULT_PROMPT) -> list[Example]:
    if not prompt.strip():
        raise ValueError("prompt must be non-empty")
    examples: list[Example] = []
    for dialogue in dialogues:
        history: list[Utterance] = []
        for t, turn in enumerate(dialogue.turns):
            if turn.system is not None:
                history.append(Utterance("system", turn.system))
            history.append(Utterance("user", turn.user))
            kind: LabelKind = "gold" if turn.belief is not None else "unlabeled"
            examples.append(
                Example(
                    example_id=example_id(dialogue.dialogue_id, t),
                    dialogue_id=dialogue.dialogue_id,
                    turn_index=t,
                    context=tuple(history),
                    prompt=prompt,
                    target=turn.belief,
                    label_kind=kind,
                )
            )
    return examples


@dataclass
class DatasetSplit:
    labeled: list[Example]
    unlabeled: list[Example]
    validation: list[Example]
    test: list[Example]
    # gold of the unlabeled side; evaluation harnesses only
    hidden_gold: dict[str, BeliefState] = field(default_factory=dict)
    seed: int = 0
    fraction: float = 1.0

    def manifest(self) -> dict:
        def dialogue_ids(xs: list[Example]) -> list[str]:
            return sorted({e.dialogue_id for e in xs})

        return {
            "seed": self.seed,
            "fraction": self.fraction,
            "labeled_dialogues": dialogue_ids(self.labeled),
            "unlabeled_dialogues": dialogue_ids(self.unlabeled),
            "validation_dialogues": dialogue_ids(self.validation),
            "test_dialogues": dialogue_ids(self.test),
            "counts": {
                "labeled": len(self.labeled),
                "unlabeled": len(self.unlabeled),
                "validation": len(self.validation),
                "test": len(self.test),
            },
        }


def _group_by_dialogue(examples: Sequence[Example]) -> dict[str, list[Example]]:
    groups: dict[str, list[Example]] = {}
    for e in examples:
        groups.setdefault(e.dialogue_id, []).append(e)
    return groups


def split_few_shot(
    examples: Sequence[Example],
    fraction: float,
    seed: int,
    *,
    validation_fraction: float = 0.0,
    test_fraction: float = 0.0,
) -> DatasetSplit:
    """Dialogue-level few-shot split.

    Validation and test dialogues are carved off first (``ceil`` of their
    fractions); ``ceil(fraction * remaining)`` of the rest keep their labels
    and the others become unlabeled, with gold moved to ``hidden_gold``.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if validation_fraction < 0 or test_fraction < 0 or validation_fraction + test_fraction >= 1:
        raise ValueError("validation_fraction + test_fraction must be in [0, 1)")
    if not examples:
        raise EmptyDataset("no examples to split")
    unlabeled_in = [e.example_id for e in examples if e.target is None]
    if unlabeled_in:
        raise ValueError(f"split needs gold labels; {len(unlabeled_in)} examples lack them")

    groups = _group_by_dialogue(examples)
    ids = sorted(groups)
    random.Random(seed).shuffle(ids)

    n_test = ceil_count(test_fraction, len(ids)) if test_fraction else 0
    n_val = ceil_count(validation_fraction, len(ids)) if validation_fraction else 0
    test_ids, rest = ids[:n_test], ids[n_test:]
    val_ids, train_ids = rest[:n_val], rest[n_val:]
    if not train_ids:
        raise EmptyDataset("no dialogues left for training after carving validation/test")
    n_labeled = ceil_count(fraction, len(train_ids))
    labeled_ids = set(train_ids[:n_labeled])

    def collect(dids: Iterable[str]) -> list[Example]:
        return [e for d in sorted(dids) for e in groups[d]]

    unlabeled_gold = collect(d for d in train_ids if d not in labeled_ids)
    return DatasetSplit(
        labeled=collect(labeled_ids),
        unlabeled=[e.unlabeled() for e in unlabeled_gold],
        validation=collect(val_ids),
        test=collect(test_ids),
        hidden_gold={e.example_id: e.target for e in unlabeled_gold},
        seed=seed,
        fraction=fraction,
    )


@dataclass(frozen=True)
class ValuePartition:
    in_train: frozenset[tuple[str, str, str]]
    unseen: frozenset[tuple[str, str, str]]


def partition_test_values(
    train_labels: Iterable[BeliefState], test_labels: Iterable[BeliefState]
) -> ValuePartition:
    seen: set[tuple[str, str, str]] = set()
    for b in train_labels:
        seen |= b.triples()
    test: set[tuple[str, str, str]] = set()
    for b in test_labels:
        test |= b.triples()
    return ValuePartition(frozenset(test & seen), frozenset(test - seen))


# ---------------------------------------------------------------------------
# JSON-lines files


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return rows


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_dialogues(path: str | Path) -> list[Dialogue]:
    dialogues = []
    for i, row in enumerate(read_jsonl(path), 1):
        try:
            dialogues.append(Dialogue.from_json(row))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: dialogue on line {i} is malformed: {exc}") from exc
    return dialogues


def save_dialogues(path: str | Path, dialogues: Iterable[Dialogue]) -> None:
    write_jsonl(path, (d.to_json() for d in dialogues))


def examples_to_dialogues(examples: Sequence[Example], *, with_labels: bool = True) -> list[Dialogue]:
    """Reassemble per-turn examples into dialogue records.

    Uses the longest context seen for each dialogue; each turn's belief is
    the target of the matching example.
    """
    out = []
    for did, group in _group_by_dialogue(examples).items():
        group = sorted(group, key=lambda e: e.turn_index)
        context = max((e.context for e in group), key=len)
        labels = {e.turn_index: e.target for e in group}
        turns: list[Turn] = []
        system: Optional[str] = None
        for utt in context:
            if utt.speaker == "system":
                system = utt.text
                continue
            idx = len(turns)
            belief = labels.get(idx) if with_labels else None
            turns.append(Turn(user=utt.text, system=system, belief=belief))
            system = None
        out.append(Dialogue(did, tuple(turns)))
    return out
