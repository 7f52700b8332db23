import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dst_selftrain.dialogue_data import BeliefState, ValuePartition, partition_test_values
from dst_selftrain.metrics import (
    EmptyEvalSet,
    LengthMismatch,
    ZeroDenominator,
    evaluate_partitioned,
    joint_goal_accuracy,
    recall_counts,
    slot_recall,
)

from strategies import paired_corpora as paired, small_beliefs

B = BeliefState.of


def brute_jga(preds, golds):
    correct = 0
    for p, g in zip(preds, golds):
        ps = {(sv.domain, sv.slot, sv.value.lower()) for sv in p}
        gs = {(sv.domain, sv.slot, sv.value.lower()) for sv in g}
        correct += ps == gs
    return correct / len(golds)


def brute_recall_counts(preds, golds, allowed=None):
    hit = total = 0
    for p, g in zip(preds, golds):
        for sv in g:
            t = (sv.domain, sv.slot, sv.value.lower())
            if allowed is not None and t not in allowed:
                continue
            total += 1
            for q in p:
                if (q.domain, q.slot, q.value.lower()) == t:
                    hit += 1
                    break
    return hit, total


class TestJGA:
    def test_all_equal(self):
        golds = [B(("hotel", "area", "east")), B()]
        assert joint_goal_accuracy(golds, golds) == 1.0

    def test_one_wrong_value(self):
        golds = [B(("hotel", "area", "east")), B(("hotel", "area", "east"), ("hotel", "stars", "4"))]
        preds = [golds[0], B(("hotel", "area", "east"), ("hotel", "stars", "3"))]
        assert joint_goal_accuracy(preds, golds) == 0.5

    def test_case_and_spacing_insensitive_values(self):
        assert joint_goal_accuracy([B(("hotel", "name", "The  Acorn"))], [B(("hotel", "name", "the acorn"))]) == 1.0

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            joint_goal_accuracy([B()], [])
        with pytest.raises(EmptyEvalSet):
            joint_goal_accuracy([], [])

    @given(paired)
    @settings(max_examples=200)
    def test_matches_brute_force(self, pg):
        preds, golds = pg
        assert joint_goal_accuracy(preds, golds) == brute_jga(preds, golds)

    @given(paired, st.randoms(use_true_random=False))
    @settings(max_examples=100)
    def test_permutation_invariant(self, pg, rnd):
        preds, golds = pg
        order = list(range(len(golds)))
        rnd.shuffle(order)
        assert joint_goal_accuracy([preds[i] for i in order], [golds[i] for i in order]) == joint_goal_accuracy(preds, golds)
        assert recall_counts([preds[i] for i in order], [golds[i] for i in order]) == recall_counts(preds, golds)


class TestSlotRecall:
    def test_half(self):
        gold = B(("a", "w", "1"), ("a", "x", "2"), ("a", "y", "3"), ("a", "z", "4"))
        pred = B(("a", "w", "1"), ("a", "x", "2"), ("a", "y", "9"))
        assert slot_recall([pred], [gold]) == 0.5

    def test_perfect(self):
        golds = [B(("a", "w", "1")), B(("a", "w", "1"), ("b", "x", "2"))]
        assert slot_recall(golds, golds) == 1.0

    def test_duplicates_count_per_turn(self):
        golds = [B(("a", "w", "1")), B(("a", "w", "1"))]
        preds = [B(("a", "w", "1")), B()]
        assert recall_counts(preds, golds) == (1, 2)

    def test_zero_denominator(self):
        with pytest.raises(ZeroDenominator):
            slot_recall([B()], [B()])
        with pytest.raises(ZeroDenominator):
            slot_recall([B(("a", "b", "c"))], [B(("a", "b", "c"))], frozenset({("x", "y", "z")}))

    @given(paired, st.sets(st.tuples(st.sampled_from(["hotel", "train"]), st.sampled_from(["area", "day"]), st.sampled_from(["east", "monday"]))))
    @settings(max_examples=200)
    def test_filtered_matches_brute_force(self, pg, allowed):
        preds, golds = pg
        assert recall_counts(preds, golds, frozenset(allowed)) == brute_recall_counts(preds, golds, allowed)

    @given(paired)
    @settings(max_examples=100)
    def test_bounds_and_jga_implication(self, pg):
        preds, golds = pg
        hit, total = recall_counts(preds, golds)
        assert 0 <= hit <= total
        if joint_goal_accuracy(preds, golds) == 1.0 and total:
            assert slot_recall(preds, golds) == 1.0


class TestPartitioned:
    def test_no_unseen(self):
        golds = [B(("a", "w", "1"), ("a", "x", "2"))]
        preds = [B(("a", "w", "1"))]
        r = evaluate_partitioned(preds, golds, partition_test_values(golds, golds))
        assert r.slot_recall_unseen is None
        assert r.slot_recall_in_train == r.slot_recall_overall == 0.5
        assert r.n_turns == 1 and r.n_slot_values == 2

    def test_perfect(self):
        golds = [B(("a", "w", "1")), B(("a", "x", "2"))]
        r = evaluate_partitioned(golds, golds, partition_test_values([golds[0]], golds))
        assert (r.jga, r.slot_recall_overall, r.slot_recall_in_train, r.slot_recall_unseen) == (1.0, 1.0, 1.0, 1.0)

    def test_json_shape(self):
        golds = [B(("a", "w", "1"))]
        r = evaluate_partitioned(golds, golds, ValuePartition(frozenset(), frozenset()))
        assert set(r.to_json()) == {"jga", "slot_recall_overall", "slot_recall_in_train", "slot_recall_unseen", "n_turns", "n_slot_values"}

    @given(paired, st.lists(small_beliefs(), max_size=5))
    @settings(max_examples=200)
    def test_additivity(self, pg, train):
        preds, golds = pg
        part = partition_test_values(train, golds)
        h_in, t_in = recall_counts(preds, golds, part.in_train)
        h_un, t_un = recall_counts(preds, golds, part.unseen)
        assert (h_in + h_un, t_in + t_un) == recall_counts(preds, golds)


def test_jga_times_turns_is_integer():
    rnd = random.Random(0)
    golds = [B(("a", "b", rnd.choice("xyz"))) for _ in range(7)]
    preds = [B(("a", "b", rnd.choice("xyz"))) for _ in range(7)]
    jga = joint_goal_accuracy(preds, golds)
    assert abs(jga * 7 - round(jga * 7)) < 1e-12
