"""Pseudo-label confidence scores and the top-k% / random-k% / select-all selector."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from dst_selftrain.dialogue_data import Example, Token
from dst_selftrain.models import GenerationResult, detokenize_belief
from dst_selftrain.seeding import ceil_count, derive_seed

Criterion = Literal["average", "max", "random"]
Method = Literal["top_k", "random_k", "select_all"]

CRITERIA: tuple[str, ...] = ("average", "max", "random")
METHODS: tuple[str, ...] = ("top_k", "random_k", "select_all")

# The per-step score fed to the softmax is the logit of the token actually
# emitted at that step, normalized over the whole vocabulary.
WORD_SCORE = "emitted_token_logit"


class EmptyGeneration(ValueError):
    pass


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def generation_from_logits(
    logits: np.ndarray, vocab: Sequence[str], chosen: Optional[Sequence[int]] = None
) -> GenerationResult:
    """Build a generation from a (steps x vocab) logit matrix.

    ``chosen`` defaults to the greedy argmax at each step.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[1] != len(vocab):
        raise ValueError(f"logit width {logits.shape[1]} != vocab size {len(vocab)}")
    probs = softmax_rows(logits)
    ids = np.argmax(logits, axis=1) if chosen is None else np.asarray(chosen)
    tokens = [Token.of(vocab[i]) for i in ids]
    step_probs = [float(probs[t, i]) for t, i in enumerate(ids)]
    return GenerationResult(tuple(tokens), tuple(step_probs), detokenize_belief(tokens))


def _require_tokens(g: GenerationResult) -> None:
    if not g.token_probs:
        raise EmptyGeneration("generation emitted no tokens")


def score_average(g: GenerationResult) -> float:
    _require_tokens(g)
    return min(1.0, max(0.0, float(np.mean(g.token_probs))))


def score_max(g: GenerationResult) -> float:
    _require_tokens(g)
    return max(g.token_probs)


def score_random(g: GenerationResult, seed: int) -> float:
    _require_tokens(g)
    return g.token_probs[random.Random(seed).randrange(len(g.token_probs))]


def score(g: GenerationResult, criterion: Criterion, seed: int = 0) -> float:
    if criterion == "average":
        return score_average(g)
    if criterion == "max":
        return score_max(g)
    if criterion == "random":
        return score_random(g, seed)
    raise ValueError(f"unknown criterion {criterion!r}")


@dataclass(frozen=True)
class ScoredExample:
    example: Example
    generation: GenerationResult
    score: float
    criterion: Criterion
    flagged: bool = False

    @property
    def example_id(self) -> str:
        return self.example.example_id


@dataclass(frozen=True)
class SelectionConfig:
    criterion: Criterion = "average"
    method: Method = "top_k"
    k: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 < self.k <= 1.0:
            raise ValueError(f"k must be in (0, 1], got {self.k}")


def selection_size(cfg: SelectionConfig, n: int) -> int:
    if cfg.method == "select_all":
        return n
    return ceil_count(cfg.k, n)


def select(
    candidates: Sequence[ScoredExample], cfg: SelectionConfig
) -> tuple[list[ScoredExample], list[ScoredExample]]:
    """Split candidates into (selected, remaining).

    top_k ranks by descending score, then ascending example_id. Remaining
    items keep their input order.
    """
    n = len(candidates)
    if n == 0:
        return [], []
    size = selection_size(cfg, n)
    if cfg.method == "select_all":
        return list(candidates), []
    if cfg.method == "top_k":
        order = sorted(range(n), key=lambda i: (-candidates[i].score, candidates[i].example_id))
    else:
        order = random.Random(cfg.seed).sample(range(n), n)
    chosen = order[:size]
    picked = set(chosen)
    return [candidates[i] for i in chosen], [c for i, c in enumerate(candidates) if i not in picked]


def random_seed_for(base_seed: int, example_id: str, iteration: int) -> int:
    """Seed of the random criterion: fixed per (example, iteration)."""
    return derive_seed(base_seed, "random-criterion", example_id, iteration)
