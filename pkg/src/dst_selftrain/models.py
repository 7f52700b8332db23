"""Model roles used by the self-training loop, plus deterministic toy backends.

Three roles are needed: a generative belief-state model, a masked infiller
and a conditional utterance generator. Real pretrained-model adapters would
subclass the same bases; the toy backends below make the whole pipeline run
on a laptop, deterministically.
"""

from __future__ import annotations

import abc
import copy
import hashlib
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

from dst_selftrain.dialogue_data import (
    BeliefState,
    Example,
    SlotValue,
    Token,
    norm_text,
    parse_belief_lenient,
    serialize_belief,
    tokenize,
)
from dst_selftrain.metrics import joint_goal_accuracy
from dst_selftrain.seeding import derive_seed

logger = logging.getLogger(__name__)


class ModelNotTrained(RuntimeError):
    pass


class EmptyTrainingSet(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


# ---------------------------------------------------------------------------
# generation output

_BELIEF_TOKEN_RE = re.compile(r"\[[^\[\]]*\]|[^\s\[\]]+")


def belief_tokens(text: str) -> list[Token]:
    """Split linearized belief text into bracket tokens and value words."""
    return [Token.of(m.group(0)) for m in _BELIEF_TOKEN_RE.finditer(text)]


def is_bracket(token: Token) -> bool:
    return token.surface.startswith("[") and token.surface.endswith("]")


def detokenize_belief(tokens: Sequence[Token]) -> str:
    out = []
    prev = None
    for tok in tokens:
        if prev is not None and not (is_bracket(prev) and is_bracket(tok)):
            out.append(" ")
        out.append(tok.surface)
        prev = tok
    return "".join(out)


@dataclass(frozen=True)
class GenerationResult:
    tokens: tuple[Token, ...]
    token_probs: tuple[float, ...]
    raw_text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "token_probs", tuple(float(p) for p in self.token_probs))
        if len(self.tokens) != len(self.token_probs):
            raise ValueError("one probability per emitted token is required")
        if any(not 0.0 <= p <= 1.0 for p in self.token_probs):
            raise ValueError("token probabilities must lie in [0, 1]")

    @classmethod
    def from_tokens(cls, tokens: Sequence[Token], probs: Sequence[float]) -> "GenerationResult":
        return cls(tuple(tokens), tuple(probs), detokenize_belief(tokens))

    @classmethod
    def empty(cls) -> "GenerationResult":
        return cls((), (), "")

    def __len__(self) -> int:
        return len(self.tokens)

    def to_json(self) -> dict:
        return {
            "raw_text": self.raw_text,
            "tokens": [t.surface for t in self.tokens],
            "token_probs": list(self.token_probs),
        }


@dataclass(frozen=True)
class TrainSchedule:
    max_epochs: int = 10
    early_stop_patience: int = 3
    batch_size: int = 128
    learning_rate: float = 5e-5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainHistory:
    validation_jga: list[Optional[float]] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_jga(self) -> Optional[float]:
        if not self.best_epoch:
            return None
        return self.validation_jga[self.best_epoch - 1]


# ---------------------------------------------------------------------------
# contracts


class GenerativeModel(abc.ABC):
    """Belief-state generator: ``input text -> linearized belief``.

    ``generate`` must be deterministic for a fixed state (greedy decoding).
    """

    backend: str = "abstract"

    @abc.abstractmethod
    def generate(self, input_text: str, max_len: int = 128) -> GenerationResult: ...

    @abc.abstractmethod
    def fit_epoch(self, examples: Sequence[Example], epoch: int, schedule: TrainSchedule) -> None: ...

    @abc.abstractmethod
    def state_dict(self) -> dict: ...

    @abc.abstractmethod
    def load_state_dict(self, state: Mapping) -> None: ...

    @abc.abstractmethod
    def fresh(self, seed: int) -> "GenerativeModel":
        """An untrained model of the same architecture and size."""


class MaskedInfiller(abc.ABC):
    @abc.abstractmethod
    def infill(
        self, tokens: Sequence[Token], mask_indices: Iterable[int], *, seed: int = 0
    ) -> list[Token]:
        """Replace the masked positions; everything else comes back unchanged."""


class ConditionalGenerator(abc.ABC):
    @abc.abstractmethod
    def generate_conditioned(self, context: str, belief: BeliefState, beam_width: int) -> list[str]:
        """Ranked candidate user utterances expressing ``belief``."""


def generate(model: GenerativeModel, input_text: str, max_len: int = 128) -> GenerationResult:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return model.generate(input_text, max_len)


def infill(m: MaskedInfiller, tokens: Sequence[Token], mask_indices: Iterable[int], *, seed: int = 0) -> list[Token]:
    return m.infill(tokens, mask_indices, seed=seed)


def generate_conditioned(g: ConditionalGenerator, context: str, belief: BeliefState, beam_width: int) -> list[str]:
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    return g.generate_conditioned(context, belief, beam_width)


def predict(model: GenerativeModel, examples: Sequence[Example], max_len: int = 128) -> list[BeliefState]:
    return [parse_belief_lenient(model.generate(e.input_text, max_len).raw_text)[0] for e in examples]


def evaluate_jga(model: GenerativeModel, examples: Sequence[Example], max_len: int = 128) -> float:
    preds = predict(model, examples, max_len)
    return joint_goal_accuracy(preds, [e.target for e in examples])


def train(
    model: GenerativeModel,
    examples: Sequence[Example],
    validation: Sequence[Example],
    schedule: TrainSchedule,
    *,
    max_len: int = 128,
) -> tuple[GenerativeModel, TrainHistory]:
    """Epoch loop with validation-JGA early stopping.

    The returned model carries the best-validation checkpoint. Without
    validation data every epoch runs and the last state is kept.
    """
    examples = [e for e in examples if e.target is not None]
    if not examples:
        raise EmptyTrainingSet("no labeled examples to train on")
    history = TrainHistory()
    best_state = None
    best_jga = -1.0
    since_best = 0
    for epoch in range(1, schedule.max_epochs + 1):
        model.fit_epoch(examples, epoch, schedule)
        if not validation:
            history.validation_jga.append(None)
            history.best_epoch = epoch
            continue
        jga = evaluate_jga(model, validation, max_len)
        history.validation_jga.append(jga)
        if jga > best_jga:
            best_jga, best_state, since_best = jga, copy.deepcopy(model.state_dict()), 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= schedule.early_stop_patience:
                history.stopped_early = True
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    logger.debug("trained %d epochs, best epoch %d", len(history.validation_jga), history.best_epoch)
    return model, history


# ---------------------------------------------------------------------------
# toy generative model


def _fingerprint(text: str) -> str:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=12).hexdigest()


def _unit(*parts: object) -> float:
    return derive_seed(*parts) / float(1 << 63)


def _content(text: str) -> list[str]:
    return [t.norm for t in tokenize(text) if t.norm]


def _best(counter: Counter) -> tuple[object, int]:
    # highest count, ties by key order
    key = min(counter, key=lambda k: (-counter[k], k))
    return key, counter[key]


class ToyGenerativeModel(GenerativeModel):
    """Memorizing belief-state model with a span-extraction fallback.

    Training contexts are reproduced exactly with a per-token confidence
    profile. Unseen inputs go through ``fallback``: ``"empty"`` emits
    nothing, ``"extract"`` tags value spans using what training taught it:
    known value strings (lexicon route) and the two words that preceded a
    single-token value (cue route), each trusted only if at least half of
    its occurrences in training inputs were labeled. With probability ``noise_rate`` an
    unseen-input prediction is corrupted: one value shifts onto a
    neighbouring word and all value tokens drop to low probability. Slot
    and domain tokens are always emitted with ``boilerplate_prob``, which
    is what makes max-probability confidence uninformative.
    """

    backend = "toy"

    def __init__(
        self,
        seed: int = 0,
        *,
        noise_rate: float = 0.0,
        fallback: str = "extract",
        boilerplate_prob: float = 0.98,
        memorized_value_prob: float = 0.95,
        epoch_coverage: float = 1.0,
    ):
        if fallback not in ("empty", "extract"):
            raise ValueError(f"unknown fallback {fallback!r}")
        if not 0.0 <= noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if not 0.0 < epoch_coverage <= 1.0:
            raise ValueError("epoch_coverage must be in (0, 1]")
        self.seed = seed
        self.noise_rate = noise_rate
        self.fallback = fallback
        self.boilerplate_prob = boilerplate_prob
        self.memorized_value_prob = memorized_value_prob
        self.epoch_coverage = epoch_coverage
        self.epochs_trained = 0
        self._memory: dict[str, dict] = {}
        self._profiles: dict[str, list[float]] = {}
        self._stats = None

    # -- configuration ----------------------------------------------------

    def config(self) -> dict:
        return {
            "seed": self.seed,
            "noise_rate": self.noise_rate,
            "fallback": self.fallback,
            "boilerplate_prob": self.boilerplate_prob,
            "memorized_value_prob": self.memorized_value_prob,
            "epoch_coverage": self.epoch_coverage,
        }

    def fresh(self, seed: int) -> "ToyGenerativeModel":
        cfg = self.config()
        cfg.pop("seed")
        return ToyGenerativeModel(seed, **cfg)

    # -- training ---------------------------------------------------------

    def memorize(self, input_text: str, target: BeliefState | str, profile: Optional[Sequence[float]] = None) -> None:
        text = target if isinstance(target, str) else serialize_belief(target)
        entry = {"input": input_text, "target": text}
        if profile is not None:
            entry["profile"] = [float(p) for p in profile]
        self._memory[_fingerprint(input_text)] = entry
        self._stats = None

    def set_profile(self, input_text: str, profile: Sequence[float]) -> None:
        """Override the confidence profile emitted for one input."""
        self._profiles[_fingerprint(input_text)] = [float(p) for p in profile]

    def fit_epoch(self, examples: Sequence[Example], epoch: int, schedule: TrainSchedule) -> None:
        for e in examples:
            if e.target is None:
                continue
            if self.epoch_coverage < 1.0 and _unit(self.seed, "cover", epoch, e.example_id) >= self.epoch_coverage:
                continue
            self.memorize(e.input_text, e.target)
        self.epochs_trained += 1

    # -- checkpoints ------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "backend": self.backend,
            "config": self.config(),
            "epochs_trained": self.epochs_trained,
            "memory": [self._memory[k] for k in sorted(self._memory)],
            "profiles": {k: self._profiles[k] for k in sorted(self._profiles)},
        }

    def load_state_dict(self, state: Mapping) -> None:
        cfg = dict(state["config"])
        self.__init__(cfg.pop("seed"), **cfg)
        self.epochs_trained = int(state["epochs_trained"])
        for entry in state["memory"]:
            self._memory[_fingerprint(entry["input"])] = dict(entry)
        self._profiles = {k: list(v) for k, v in state.get("profiles", {}).items()}

    @classmethod
    def from_state(cls, state: Mapping) -> "ToyGenerativeModel":
        model = cls()
        model.load_state_dict(state)
        return model

    # -- learned statistics ----------------------------------------------

    def _learned(self):
        """Span and cue statistics over everything memorized.

        A value span or cue is only as trustworthy as its precision: how
        often it was labeled out of how often it occurred in training inputs.
        """
        if self._stats is not None:
            return self._stats
        streams = []
        lexicon: dict[tuple[str, ...], Counter] = {}
        cues: dict[tuple[str, str], Counter] = {}
        for entry in self._memory.values():
            stream = _content(entry["input"])
            streams.append(stream)
            belief, _ = parse_belief_lenient(entry["target"])
            for sv in belief:
                vt = tuple(_content(sv.value))
                if not vt:
                    continue
                pos = _last_occurrence(stream, vt)
                if pos < 0:
                    continue
                lexicon.setdefault(vt, Counter())[(sv.domain, sv.slot, norm_text(sv.value))] += 1
                if len(vt) == 1 and pos >= 2:
                    cues.setdefault((stream[pos - 2], stream[pos - 1]), Counter())[(sv.domain, sv.slot)] += 1

        by_first: dict[str, list[tuple[str, ...]]] = {}
        for vt in sorted(lexicon, key=lambda v: (-len(v), v)):
            by_first.setdefault(vt[0], []).append(vt)
        span_seen: Counter = Counter()
        cue_seen: Counter = Counter()
        for stream in streams:
            spans_here = set()
            cues_here = set()
            for p, word in enumerate(stream):
                for vt in by_first.get(word, ()):
                    if tuple(stream[p:p + len(vt)]) == vt:
                        spans_here.add(vt)
                if p + 2 < len(stream) and (stream[p], stream[p + 1]) in cues:
                    cues_here.add((stream[p], stream[p + 1]))
            span_seen.update(spans_here)
            cue_seen.update(cues_here)

        spans = {}
        for vt, counter in lexicon.items():
            key, count = _best(counter)
            precision = sum(counter.values()) / max(span_seen[vt], 1)
            if precision >= 0.5:
                spans[vt] = (key, 0.5 + 0.45 * min(precision, 1.0) * count / (count + 1))
        cue_table = {}
        for bigram, counter in cues.items():
            key, count = _best(counter)
            precision = sum(counter.values()) / max(cue_seen[bigram], 1)
            if precision >= 0.5:
                cue_table[bigram] = (key, 0.45 + 0.3 * min(precision, 1.0) * count / (count + 1))
        by_first = {w: [vt for vt in vts if vt in spans] for w, vts in by_first.items()}
        self._stats = (spans, cue_table, by_first)
        return self._stats

    # -- generation -------------------------------------------------------

    def generate(self, input_text: str, max_len: int = 128) -> GenerationResult:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not self.epochs_trained and not self._memory:
            raise ModelNotTrained("toy model has not been trained")
        fp = _fingerprint(input_text)
        entry = self._memory.get(fp)
        if entry is not None:
            tokens = belief_tokens(entry["target"])
            profile = self._profiles.get(fp) or entry.get("profile")
            if profile is None:
                profile = [self.boilerplate_prob if is_bracket(t) else self.memorized_value_prob for t in tokens]
            elif len(profile) != len(tokens):
                raise ValueError(f"profile has {len(profile)} probs for {len(tokens)} tokens")
        elif self.fallback == "empty":
            return GenerationResult.empty()
        else:
            tokens, profile = self._extract(input_text, fp)
            override = self._profiles.get(fp)
            if override is not None:
                if len(override) != len(tokens):
                    raise ValueError(f"profile has {len(override)} probs for {len(tokens)} tokens")
                profile = override
        tokens, profile = tokens[:max_len], list(profile)[:max_len]
        return GenerationResult.from_tokens(tokens, profile)

    def is_noisy(self, input_text: str) -> bool:
        fp = _fingerprint(input_text)
        return _unit(self.seed, "noise", self.epochs_trained, fp) < self.noise_rate

    def _extract(self, input_text: str, fp: str) -> tuple[list[Token], list[float]]:
        spans, cues, by_first = self._learned()
        stream = _content(input_text)
        # (domain, slot) -> (position, span length, value, prob)
        found: dict[tuple[str, str], tuple[int, int, str, float]] = {}
        claimed: set[int] = set()
        for p in range(2, len(stream)):
            hit = cues.get((stream[p - 2], stream[p - 1]))
            if hit is None:
                continue
            key, prob = hit
            found[key] = (p, 1, stream[p], prob)
            claimed.add(p)
        for p, word in enumerate(stream):
            for vt in by_first.get(word, ()):
                span = range(p, p + len(vt))
                if tuple(stream[p:p + len(vt)]) != vt or claimed.intersection(span):
                    continue
                (domain, slot, value), prob = spans[vt]
                prev = found.get((domain, slot))
                if prev is None or prev[0] <= p:
                    found[(domain, slot)] = (p, len(vt), value, prob)
                break

        values = {k: (v[2], v[3]) for k, v in found.items()}
        if self.noise_rate and self.is_noisy(input_text):
            values = self._corrupt(values, found, stream, fp)

        tokens: list[Token] = []
        probs: list[float] = []
        current = None
        for (domain, slot) in sorted(values):
            value, prob = values[(domain, slot)]
            if domain != current:
                tokens.append(Token.of(f"[{domain}]"))
                probs.append(self.boilerplate_prob)
                current = domain
            tokens.append(Token.of(f"[{slot}]"))
            probs.append(self.boilerplate_prob)
            for word in value.split():
                tokens.append(Token.of(word))
                probs.append(prob)
        return tokens, probs

    def _corrupt(self, values, found, stream, fp):
        rng = random.Random(derive_seed(self.seed, "corrupt", self.epochs_trained, fp))
        low = {k: (v, rng.uniform(0.02, 0.15)) for k, (v, _) in values.items()}
        if found:
            key = rng.choice(sorted(found))
            pos, length, value, _ = found[key]
            neighbours = [stream[i] for i in (pos + length, pos - 1) if 0 <= i < len(stream)]
            neighbours = [w for w in neighbours if w != value] or ["none"]
            low[key] = (neighbours[0], low[key][1])
            return low
        spans, cues, _ = self._learned()
        slots = sorted({(d, s) for (d, s, _), _ in spans.values()} | {k for k, _ in cues.values()})
        if slots and stream:
            low[rng.choice(slots)] = (rng.choice(stream), rng.uniform(0.02, 0.15))
        return low


def _last_occurrence(stream: Sequence[str], span: Sequence[str]) -> int:
    n = len(span)
    for p in range(len(stream) - n, -1, -1):
        if tuple(stream[p:p + n]) == tuple(span):
            return p
    return -1


# ---------------------------------------------------------------------------
# toy infiller and conditional generator


class ToyInfiller(MaskedInfiller):
    """Synonym-table infiller; masked words without an entry stay as they were."""

    def __init__(self, table: Mapping[str, str | Sequence[str]], seed: int = 0):
        self.seed = seed
        self.table: dict[str, tuple[str, ...]] = {}
        for word, repl in table.items():
            options = (repl,) if isinstance(repl, str) else tuple(repl)
            for o in options:
                if len(tokenize(o)) != 1:
                    raise ValueError(f"infill {o!r} for {word!r} is not a single token")
            if options:
                self.table[word.lower()] = options

    def infill(self, tokens: Sequence[Token], mask_indices: Iterable[int], *, seed: int = 0) -> list[Token]:
        out = list(tokens)
        masked = sorted(set(mask_indices))
        for i in masked:
            if not 0 <= i < len(tokens):
                raise IndexOutOfRange(f"mask index {i} outside 0..{len(tokens) - 1}")
        for i in masked:
            options = self.table.get(tokens[i].norm)
            if not options:
                continue
            rng = random.Random(derive_seed(self.seed, seed, i, tokens[i].norm))
            out[i] = Token.of(options[rng.randrange(len(options))])
        return out


class ToyConditionalGenerator(ConditionalGenerator):
    """Template generator; every candidate states each belief value verbatim."""

    FRAMES = (
        "i am looking for {body} .",
        "i need {body} please .",
        "can you help me with {body} ?",
        "i would like {body} .",
        "please find me {body} .",
        "we want {body} .",
    )

    def __init__(self, phrases: Optional[Mapping[tuple[str, str], Sequence[str]]] = None):
        # per-slot phrasings with a "{value}" hole, e.g. ("train", "day"): ["on {value}"]
        self.phrases = {k: tuple(v) for k, v in (phrases or {}).items()}

    def _phrase(self, sv: SlotValue, variant: int) -> str:
        options = self.phrases.get(sv.key)
        if options:
            return options[variant % len(options)].format(value=sv.value)
        return f"a {sv.domain} with {sv.slot} {sv.value}"

    def generate_conditioned(self, context: str, belief: BeliefState, beam_width: int) -> list[str]:
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        candidates: list[str] = []
        for rank in range(len(self.FRAMES) * 2):
            if len(candidates) >= beam_width:
                break
            frame = self.FRAMES[rank % len(self.FRAMES)]
            body = " and ".join(self._phrase(sv, rank // len(self.FRAMES)) for sv in belief) or "some help"
            text = frame.format(body=body)
            if text not in candidates:
                candidates.append(text)
        return candidates


# ---------------------------------------------------------------------------
# backend registry

ModelFactory = Callable[[int], GenerativeModel]

BACKENDS: dict[str, type[GenerativeModel]] = {"toy": ToyGenerativeModel}


def make_factory(backend: str, **options) -> ModelFactory:
    """``seed -> fresh model`` for a registered backend name."""
    try:
        cls = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown model backend {backend!r}; known: {sorted(BACKENDS)}") from None

    def factory(seed: int) -> GenerativeModel:
        return cls(seed, **options)

    factory.backend = backend  # type: ignore[attr-defined]
    return factory


def model_from_state(state: Mapping) -> GenerativeModel:
    cls = BACKENDS[state["backend"]]
    model = cls.__new__(cls)
    model.load_state_dict(state)
    return model
