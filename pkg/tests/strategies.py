"""Hypothesis strategies shared across the test modules."""

from __future__ import annotations

import random

from hypothesis import strategies as st

from dst_selftrain.dialogue_data import BeliefState, SlotValue

NAME_WORD = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8)
names = st.lists(NAME_WORD, min_size=1, max_size=2).map(" ".join)

VALUE_CHARS = "abcdefghijklmnopqrstuvwxyzABC0123456789:'-.,&/"
value_words = st.text(alphabet=VALUE_CHARS, min_size=1, max_size=8)
values = st.lists(value_words, min_size=1, max_size=3).map(" ".join).filter(
    lambda v: not v.startswith(",") and not v.endswith(",")
)


@st.composite
def belief_states(draw, max_entries: int = 6) -> BeliefState:
    keyed = draw(st.dictionaries(st.tuples(names, names), values, max_size=max_entries))
    return BeliefState(tuple(SlotValue(d, s, v) for (d, s), v in keyed.items()))


# small closed vocabularies, so predictions and golds overlap often
SMALL_DOMAINS = ("hotel", "train", "taxi")
SMALL_SLOTS = ("area", "day", "name")
SMALL_VALUES = ("east", "west", "monday", "tuesday", "alpha", "beta")


@st.composite
def small_beliefs(draw) -> BeliefState:
    keys = draw(st.sets(st.tuples(st.sampled_from(SMALL_DOMAINS), st.sampled_from(SMALL_SLOTS)), max_size=4))
    return BeliefState(tuple(SlotValue(d, s, draw(st.sampled_from(SMALL_VALUES))) for d, s in sorted(keys)))


def random_small_belief(rnd) -> BeliefState:
    keys = rnd.sample([(d, s) for d in SMALL_DOMAINS for s in SMALL_SLOTS], rnd.randint(0, 4))
    return BeliefState(tuple(SlotValue(d, s, rnd.choice(SMALL_VALUES)) for d, s in keys))


def random_pair(seed: int, max_turns: int = 12) -> tuple[list[BeliefState], list[BeliefState]]:
    """Aligned (preds, golds); preds copy the gold turn about a third of the time."""
    rnd = random.Random(seed)
    n = rnd.randint(1, max_turns)
    golds = [random_small_belief(rnd) for _ in range(n)]
    preds = [g if rnd.random() < 0.35 else random_small_belief(rnd) for g in golds]
    return preds, golds


paired_corpora = st.integers(0, 2**32).map(random_pair)
