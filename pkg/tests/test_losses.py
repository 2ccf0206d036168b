import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from touchline import autodiff as ad
from touchline.autodiff import Tensor
from touchline.geometry import BoxCXYWH, GestureKind, GestureLine, Point2
from touchline.losses import (LossWeights, cos_sim_pair, cosine_to_line, loss_aligned, loss_box,
                              loss_contrastive, loss_gesture, loss_token, total_loss)

from oracles import central_difference


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- box ---------------------------------------------------------------------

def test_box_loss_zero_at_gt():
    gt = np.array([[0.4, 0.5, 0.2, 0.3], [0.7, 0.2, 0.1, 0.1]])
    assert loss_box(t(gt), gt).item() == pytest.approx(0.0, abs=1e-15)


def test_box_loss_direct_formula():
    # unit boxes shifted along x by d: hull equals union, giou = (1-d)/(1+d) = 0.5 at d = 1/3
    gt = np.array([[0.5, 0.5, 1.0, 1.0]])
    d = 1 / 3
    pred = np.array([[0.5 + d, 0.5, 1.0, 1.0]])
    val = loss_box(t(pred), gt, 5, 2).item()
    assert val == pytest.approx(5 * d + 2 * 0.5, abs=1e-12)


def test_box_loss_hand_case_l1_and_giou():
    # L1 = 0.4 from a width change (0.2 each side) and height unchanged; check both terms separately
    gt = np.array([[0.5, 0.5, 0.4, 0.4]])
    pred = np.array([[0.5, 0.5, 0.8, 0.4]])
    # iou = 0.16 / 0.32 = 0.5, hull equals the larger box, so giou = 0.5
    assert loss_box(t(pred), gt, 5, 2).item() == pytest.approx(3.0, abs=1e-12)


def test_box_loss_permutation_invariant():
    rng = np.random.default_rng(0)
    gt = np.column_stack([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.05, 0.3, (5, 2))])
    pred = np.column_stack([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.05, 0.3, (5, 2))])
    perm = rng.permutation(5)
    assert loss_box(t(pred[perm]), gt[perm]).item() == pytest.approx(loss_box(t(pred), gt).item(), abs=1e-14)


# --- gesture -------------------------------------------------------------------

def test_gesture_coordinate_term():
    gt = np.array([[0.1, 0.2, 0.3, 0.4]])
    logits = np.zeros((1, 3, 2))
    base = loss_gesture(t(gt), gt, t(logits), [1]).item()
    off = loss_gesture(t(gt + 0.1), gt, t(logits), [1]).item()
    assert off - base == pytest.approx(0.4, abs=1e-12)
    assert base == pytest.approx(math.log(2), abs=1e-12)


def test_gesture_loss_vanishes_when_saturated():
    gt = np.array([[0.1, 0.2, 0.3, 0.4]])
    logits = np.array([[[40.0, -40.0], [-40.0, 40.0], [40.0, -40.0]]])
    assert loss_gesture(t(gt), gt, t(logits), [1]).item() < 1e-12


# --- colinearity / alignment -----------------------------------------------------

LINE = GestureLine(Point2(0, 0), Point2(1, 1), GestureKind.VTL)


def test_cos_sim_pair_examples():
    gt_box = BoxCXYWH(2.0, 2.0, 0.5, 0.5)
    a, b = cos_sim_pair(LINE, gt_box, gt_box)
    assert a == b
    a, b = cos_sim_pair(LINE, gt_box, BoxCXYWH(1.0, -1.0, 0.5, 0.5))
    assert (a, b) == (pytest.approx(1.0, abs=1e-15), pytest.approx(0.0, abs=1e-15))
    a, b = cos_sim_pair(LINE, gt_box, BoxCXYWH(2.0, 2.1, 0.5, 0.5))
    assert a == pytest.approx(1.0, abs=1e-15) and abs(b - 0.999702) < 1e-6


def test_aligned_unit_values():
    assert loss_aligned(0.99, 0.95) == pytest.approx(0.04, abs=1e-15)
    assert loss_aligned(0.99, 1.00) == 0.0
    v = loss_aligned(np.array([0.99]), t([0.95])).data
    assert v[0] == pytest.approx(0.04, abs=1e-15)


def test_aligned_zero_when_pred_is_gt():
    rng = np.random.default_rng(3)
    prox = rng.uniform(0, 1, (20, 2))
    dist = prox + rng.uniform(0.1, 0.3, (20, 2))
    centers = rng.uniform(0, 1, (20, 2))
    cos_pred = cosine_to_line(t(centers), prox, dist).data
    from touchline.losses import line_colinearity
    cos_gt = line_colinearity(prox, dist, centers)
    assert np.all(loss_aligned(cos_gt, t(cos_pred)).data == 0.0)


def test_aligned_gradient_matches_differences():
    prox, dist = np.array([[0.1, 0.1]]), np.array([[0.3, 0.35]])
    gt_center = np.array([[0.8, 0.9]])
    from touchline.losses import line_colinearity
    cos_gt = line_colinearity(prox, dist, gt_center)
    c0 = np.array([[0.6, 0.3]])     # well off the line, away from the hinge
    x = t(c0, grad=True)
    ad.backward(ad.sum_(loss_aligned(cos_gt, cosine_to_line(x, prox, dist))))

    def f(c):
        return float(max(0.0, cos_gt[0] - line_colinearity(prox, dist, c)[0]))

    num = central_difference(f, c0, h=1e-6)
    assert np.max(np.abs(x.grad - num)) < 1e-7
    assert np.abs(x.grad).sum() > 0


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_cos_sim_pair_translation_invariant(dx, dy, seed):
    rng = np.random.default_rng(seed)
    p, d = rng.uniform(0, 1, 2), rng.uniform(0, 1, 2)
    if np.linalg.norm(d - p) < 1e-2:
        return
    g, q = rng.uniform(0, 1, 2), rng.uniform(0, 1, 2)
    if min(np.linalg.norm(g - p), np.linalg.norm(q - p)) < 1e-2:
        return
    line = GestureLine(Point2(*p), Point2(*d), GestureKind.VTL)
    moved = GestureLine(Point2(p[0] + dx, p[1] + dy), Point2(d[0] + dx, d[1] + dy), GestureKind.VTL)
    a = cos_sim_pair(line, BoxCXYWH(*g, 0.1, 0.1), BoxCXYWH(*q, 0.1, 0.1))
    b = cos_sim_pair(moved, BoxCXYWH(g[0] + dx, g[1] + dy, 0.1, 0.1), BoxCXYWH(q[0] + dx, q[1] + dy, 0.1, 0.1))
    assert a == pytest.approx(b, abs=1e-9)


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_aligned_nonnegative(a, b):
    assert loss_aligned(a, b) >= 0.0


# --- soft token ----------------------------------------------------------------

def test_token_uniform_prediction_is_log4():
    logits = np.zeros((1, 1, 4))
    assert abs(loss_token(t(logits), [0], [(0, 2)]).item() - math.log(4)) < 1e-9


def test_token_prediction_equal_to_target_is_log2():
    logits = np.array([[[0.0, 0.0, -80.0, -80.0]]])
    assert loss_token(t(logits), [0], [(0, 2)]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_token_unmatched_on_no_object_costs_nothing():
    matched = np.array([[0.0, 0.0, -80.0, -80.0]])
    unmatched = np.array([[-80.0, -80.0, -80.0, 0.0]])
    logits = np.concatenate([matched, unmatched])[None]
    # weighted mean: (1 * log 2 + 0.1 * 0) / 1.1
    got = loss_token(t(logits), [0], [(0, 2)], no_object_weight=0.1).item()
    assert got == pytest.approx(math.log(2) / 1.1, abs=1e-12)


# --- contrastive -----------------------------------------------------------------

def test_contrastive_single_candidate_is_zero():
    q = t(np.array([[[0.3, 0.4]]]))
    x = t(np.array([[[0.6, -0.8]]]))
    assert loss_contrastive(q, x, [0], [(0, 1)]).item() == pytest.approx(0.0, abs=1e-15)


def test_contrastive_orthogonal_is_log2_per_direction():
    # one query orthogonal to both tokens: query -> text softmax is uniform over 2 tokens
    q = t(np.array([[[0.0, 0.0, 1.0]]]))
    x = t(np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]))
    total, qt, tq = loss_contrastive(q, x, [0], [(0, 1)], directions=True)
    assert qt.item() == pytest.approx(math.log(2), abs=1e-12)
    assert tq.item() == pytest.approx(0.0, abs=1e-15)   # a single query is the only candidate
    # with two orthogonal queries the mirrored direction also sees a uniform softmax
    q2 = t(np.array([[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]]))
    x2 = t(np.array([[[1.0, 0.0, 0.0]]]))
    _, qt2, tq2 = loss_contrastive(q2, x2, [0], [(0, 1)], directions=True)
    assert tq2.item() == pytest.approx(math.log(2), abs=1e-12)


def test_contrastive_temperature_ratio_invariance():
    rng = np.random.default_rng(4)
    q, x = rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 4, 6))
    a = loss_contrastive(t(q), t(x), [1, 3], [(0, 2), (1, 4)], temperature=0.07).item()
    b = loss_contrastive(t(q * 3), t(x), [1, 3], [(0, 2), (1, 4)], temperature=0.21).item()
    assert a == pytest.approx(b, abs=1e-10)


# --- total --------------------------------------------------------------------

COMPS = dict(box=3.0, gesture=0.4, aligned=0.04, token=1.386, contrastive=0.693)


def test_total_examples():
    _, bd = total_loss(COMPS, LossWeights())
    assert bd.total == pytest.approx(5.519, abs=1e-6)
    _, zero = total_loss(COMPS, LossWeights(box=0, gesture=0, aligned=0, token=0, contrastive=0))
    assert zero.total == 0.0
    _, dbl = total_loss(COMPS, LossWeights().scaled(2.0))
    assert dbl.total == pytest.approx(2 * bd.total, abs=1e-12)


def test_total_tensor_matches_breakdown():
    comps = {k: t(v) for k, v in COMPS.items()}
    tot, bd = total_loss(comps, LossWeights(box=0.5, gesture=2.0))
    assert tot.item() == pytest.approx(bd.total, abs=1e-12)
    assert bd.total == pytest.approx(0.5 * 3.0 + 2 * 0.4 + 0.04 + 1.386 + 0.693, abs=1e-9)


@given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.integers(0, 4), st.floats(0, 5))
def test_total_monotone_in_components(vals, which, bump):
    comps = dict(zip(COMPS, vals))
    _, a = total_loss(comps, LossWeights())
    key = list(COMPS)[which]
    comps[key] += bump
    _, b = total_loss(comps, LossWeights())
    assert b.total >= a.total


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(aligned=-1.0)
