from __future__ import annotations

import pytest

from dst_selftrain.dialogue_data import BeliefState, Dialogue, Turn, build_examples
from dst_selftrain.synthetic import generate_corpus

# (criterion, passed, detail) lines collected by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def restaurant_dialogue() -> Dialogue:
    return Dialogue(
        "d1",
        (
            Turn("i need a table for 6 on sunday .", None, BeliefState.of(("restaurant", "people", "6"), ("restaurant", "day", "sunday"))),
            Turn(
                "something cheap please .",
                "sure , any price range ?",
                BeliefState.of(
                    ("restaurant", "people", "6"), ("restaurant", "day", "sunday"), ("restaurant", "pricerange", "cheap")
                ),
            ),
        ),
    )


@pytest.fixture(scope="session")
def corpus() -> list[Dialogue]:
    return generate_corpus(60, seed=11)


@pytest.fixture(scope="session")
def corpus_examples(corpus):
    return build_examples(corpus)
