import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from touchline.matching import (NonFinite, brute_force, gesture_match, hungarian, object_match_cost,
                                pairwise_giou)

from oracles import brute_force_cost


def test_diagonal_identity():
    c = np.ones((3, 3)) - np.eye(3)
    a = hungarian(c)
    assert a.rows == (0, 1, 2) and a.cost == 0.0


def test_one_by_one():
    a = hungarian([[2.5]])
    assert a.rows == (0,) and a.cost == 2.5


def test_all_equal_costs_pick_identity():
    assert hungarian(np.full((5, 3), 0.7)).rows == (0, 1, 2)


def test_rejects_bad_input():
    with pytest.raises(NonFinite):
        hungarian([[0.0, np.nan], [1.0, 2.0]])
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))


def test_random_6x4_equals_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = rng.uniform(0, 10, size=(6, 4))
        h, b = hungarian(c), brute_force(c)
        assert h.cost == b.cost
        assert h.rows == b.rows
        assert len(set(h.rows)) == 4


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 7), st.integers(0, 3), st.integers(0, 2**32 - 1), st.booleans())
def test_hungarian_optimal(m, extra, seed, integer):
    rng = np.random.default_rng(seed)
    n = m + extra
    c = rng.integers(0, 4, size=(n, m)).astype(float) if integer else rng.normal(size=(n, m))
    a = hungarian(c)
    assert len(set(a.rows)) == m
    assert a.cost == pytest.approx(sum(c[r, j] for j, r in enumerate(a.rows)), abs=0)
    assert a.cost <= brute_force_cost(c) + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_column_shift_keeps_assignment(seed, k):
    rng = np.random.default_rng(seed)
    c = rng.uniform(0, 1, size=(5, 3))
    shifted = c.copy()
    shifted[:, 1] += k
    assert hungarian(c).rows == hungarian(shifted).rows


def test_match_cost_zero_for_perfect_prediction():
    gt = np.array([[0.4, 0.5, 0.2, 0.1]])
    dist = np.zeros((2, 5))
    dist[0, 1:3] = 0.5
    dist[1, -1] = 1.0
    cost = object_match_cost(np.array([[0.4, 0.5, 0.2, 0.1], [0.6, 0.6, 0.1, 0.1]]), dist, gt, [(1, 3)])
    assert cost[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_match_cost_hand_case():
    gt = np.array([[0.5, 0.5, 0.2, 0.2]])
    preds = np.array([[0.5, 0.5, 0.2, 0.2], [0.6, 0.5, 0.2, 0.2]])
    dist = np.array([[0.1, 0.3, 0.6], [0.5, 0.5, 0.0]])
    cost = object_match_cost(preds, dist, gt, [(0, 1)], w_l1=5, w_giou=2, w_tok=1)
    # second row: L1 0.1, iou = 0.1*0.2 / (0.08 - 0.02) = 1/3, hull = union -> giou 1/3
    assert cost[0, 0] == pytest.approx(0.9, abs=1e-12)
    assert cost[1, 0] == pytest.approx(5 * 0.1 + 2 * (1 - 1 / 3) + 0.5, abs=1e-12)


def test_pairwise_giou_shape_and_diagonal():
    b = np.array([[0.2, 0.2, 0.1, 0.1], [0.7, 0.6, 0.3, 0.2]])
    g = pairwise_giou(b, b)
    assert g.shape == (2, 2)
    assert np.allclose(np.diag(g), 1.0)
    assert g[0, 1] == pytest.approx(g[1, 0])


def test_gesture_match_examples():
    gt = np.array([0.1, 0.2, 0.3, 0.4])
    pairs = np.array([[0.5, 0.5, 0.5, 0.5], gt, [0.1, 0.2, 0.3, 0.5]])
    assert gesture_match(pairs, gt) == 1
    assert gesture_match(pairs, None) is None
    tie = np.array([[0.2, 0.2, 0.3, 0.4], [0.0, 0.2, 0.3, 0.4]])
    assert gesture_match(tie, gt) == 0


def test_deterministic():
    c = np.random.default_rng(5).uniform(size=(7, 7))
    assert hungarian(c) == hungarian(c.copy())
