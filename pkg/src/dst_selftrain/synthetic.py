"""Synthetic task-oriented dialogues for exercising the pipeline end to end.

Every user turn states one slot value through one of several phrasings, and
the belief state accumulates across turns. Phrasings and values are varied
enough that a small labeled subset covers only part of both, which is the
situation self-training is meant to help with.
"""

from __future__ import annotations

import random

from dst_selftrain.dialogue_data import BeliefState, Dialogue, SlotValue, Turn

_SYLLABLES = ("al", "ben", "cor", "dun", "el", "fal", "gar", "hol", "ire", "kel", "lor", "mar", "nor", "ost", "pen", "quin", "ros", "sel", "tor", "wyn")
_CUISINES = (
    "chinese", "italian", "indian", "thai", "french", "greek", "turkish", "korean",
    "japanese", "mexican", "spanish", "lebanese", "british", "european", "african",
    "portuguese", "vietnamese", "caribbean", "persian", "polish", "swiss", "danish",
    "moroccan", "scottish", "welsh", "irish", "cuban", "malaysian", "russian", "brazilian",
)


def _times() -> list[str]:
    return [f"{h:02d}:{m:02d}" for h in range(5, 23) for m in (0, 15, 30, 45)]


def _names() -> list[str]:
    return sorted({a + b + c for a in _SYLLABLES for b in _SYLLABLES[::3] for c in ("by", "ton", "ford")})


# (domain, slot) -> (value pool, phrasings with a "{v}" hole)
SLOTS: dict[tuple[str, str], tuple[list[str], list[str]]] = {
    ("train", "leaveat"): (_times(), [
        "i would like to leave after {v} .",
        "the train should depart after {v} please .",
        "i need to go after {v} .",
        "can it be leaving at {v} ?",
        "something departing at {v} would be ideal .",
        "i want to head out after {v} .",
    ]),
    ("train", "arriveby"): (_times(), [
        "i must arrive by {v} .",
        "i have to get there by {v} .",
        "it should reach town before {v} .",
        "i need to be in town by {v} .",
        "arriving no later than {v} please .",
        "my arrival deadline is {v} .",
    ]),
    ("train", "day"): (["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"], [
        "i will travel on {v} .",
        "the trip is planned for {v} .",
        "i am leaving on {v} .",
        "make that a ticket for {v} .",
        "i want to go next {v} .",
    ]),
    ("hotel", "area"): (["north", "south", "east", "west", "centre"], [
        "i want a hotel in the {v} .",
        "somewhere around the {v} would be nice .",
        "it should be located in the {v} part of town .",
        "i prefer staying on the {v} side .",
        "find me lodging near the {v} please .",
    ]),
    ("hotel", "name"): (_names(), [
        "i am looking for the hotel called {v} .",
        "do you know a guesthouse named {v} ?",
        "please tell me about the place called {v} .",
        "i heard good things about {v} hotel .",
        "can you check on the lodge named {v} ?",
    ]),
    ("restaurant", "food"): (list(_CUISINES), [
        "i want to eat {v} food .",
        "i am looking for a restaurant serving {v} food .",
        "i am craving {v} tonight .",
        "we would enjoy some {v} cuisine .",
        "find a place that does {v} dishes .",
        "my friends love eating {v} meals .",
    ]),
    ("restaurant", "people"): ([str(i) for i in range(1, 9)], [
        "i need a table for {v} people .",
        "please book it for {v} guests .",
        "there will be {v} of us .",
        "reserve seats for {v} diners please .",
    ]),
    ("restaurant", "pricerange"): (["cheap", "moderate", "expensive"], [
        "i prefer a {v} place .",
        "the price should be {v} .",
        "my budget is {v} .",
        "something in the {v} range please .",
    ]),
    ("attraction", "type"): (["museum", "park", "theatre", "college", "cinema", "nightclub", "pool", "church", "gallery"], [
        "i would like to visit a {v} .",
        "is there any {v} to see ?",
        "i am interested in a {v} in town .",
        "we want to go to a {v} today .",
        "please recommend a good {v} .",
    ]),
}

SYSTEM_LINES = (
    "sure , what else can i do ?",
    "okay , anything else ?",
    "i can help with that .",
    "let me check that for you .",
    "got it . what else ?",
)

# word substitutions a masked LM might plausibly make; single tokens only
SYNONYMS: dict[str, list[str]] = {
    "leave": ["depart", "go"],
    "depart": ["leave", "go"],
    "go": ["leave", "travel"],
    "leaving": ["departing"],
    "departing": ["leaving"],
    "travel": ["go", "leave"],
    "want": ["need", "prefer"],
    "need": ["want", "require"],
    "like": ["love", "prefer"],
    "would": ["will"],
    "looking": ["searching"],
    "searching": ["looking"],
    "prefer": ["want", "like"],
    "place": ["spot", "venue"],
    "restaurant": ["place", "venue"],
    "hotel": ["lodge", "guesthouse"],
    "lodge": ["hotel"],
    "guesthouse": ["hotel", "lodge"],
    "eat": ["have", "try"],
    "eating": ["having"],
    "serving": ["offering"],
    "food": ["dishes", "meals"],
    "dishes": ["food"],
    "meals": ["food"],
    "cuisine": ["food"],
    "book": ["reserve"],
    "reserve": ["book"],
    "guests": ["people", "diners"],
    "people": ["guests"],
    "diners": ["people"],
    "visit": ["see"],
    "see": ["visit"],
    "find": ["locate", "get"],
    "please": ["thanks", "kindly"],
    "called": ["named"],
    "named": ["called"],
    "trip": ["journey"],
    "must": ["should", "need"],
    "should": ["must"],
    "arrive": ["get"],
    "reach": ["get"],
    "town": ["cambridge"],
    "good": ["nice", "great"],
    "nice": ["good"],
    "budget": ["limit"],
    "recommend": ["suggest"],
    "interested": ["keen"],
}


def generate_corpus(n_dialogues: int, seed: int = 0, *, min_turns: int = 2, max_turns: int = 4) -> list[Dialogue]:
    rng = random.Random(seed)
    keys = sorted(SLOTS)
    domains = sorted({d for d, _ in keys})
    dialogues = []
    for i in range(n_dialogues):
        n_domains = 1 if rng.random() < 0.6 else 2
        chosen = rng.sample(domains, n_domains)
        available = [k for k in keys if k[0] in chosen]
        hi = min(max_turns, len(available))
        n_turns = rng.randint(min(min_turns, hi), hi)
        slots = rng.sample(available, n_turns)
        belief: dict[tuple[str, str], str] = {}
        turns = []
        for t, key in enumerate(slots):
            values, phrasings = SLOTS[key]
            value = rng.choice(values)
            belief[key] = value
            user = rng.choice(phrasings).format(v=value)
            system = None if t == 0 else rng.choice(SYSTEM_LINES)
            state = BeliefState(tuple(SlotValue(d, s, v) for (d, s), v in belief.items()))
            turns.append(Turn(user=user, system=system, belief=state))
        dialogues.append(Dialogue(f"syn{i:05d}", tuple(turns)))
    return dialogues


def generator_phrases() -> dict[tuple[str, str], list[str]]:
    """Per-slot phrases for the toy conditional generator."""
    out = {}
    for key, (_, phrasings) in SLOTS.items():
        out[key] = [p.rstrip(" .?").replace("{v}", "{value}") for p in phrasings[:3]]
    return out
