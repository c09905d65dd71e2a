import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np
import pytest

from egoground.autodiff import ParamStore, Tensor, grad_check, make_rng
from egoground.boxes import Box9DoF
from egoground.losses import (
    Assignment,
    DetectionTargets,
    GroundingTargets,
    LossWeights,
    box_loss,
    box_regression_loss,
    focal_loss,
    hungarian,
    matching_cost,
    spatial_relevance_loss,
    total_loss,
)


def brute_force_assignment(cost, tol=1e-9):
    """Enumerate every injective assignment; min cost, then lexicographically
    smallest pair list.  Oracle for the production matcher."""
    k, g = cost.shape
    best_cost = None
    best_pairs = None
    if k <= g:
        candidates = (tuple(zip(range(k), cols)) for cols in permutations(range(g), k))
    else:
        candidates = (tuple(sorted(zip(rows, range(g)))) for rows in permutations(range(k), g))
    for pairs in candidates:
        total = sum(cost[i, j] for i, j in pairs)
        if best_cost is None or total < best_cost - tol or (
            abs(total - best_cost) <= tol and list(pairs) < best_pairs
        ):
            best_cost = total
            best_pairs = list(pairs)
    return Assignment(pairs=best_pairs or [], total_cost=float(best_cost or 0.0))


def test_hungarian_two_by_two_example():
    result = hungarian([[1.0, 2.0], [3.0, 1.0]])
    assert result.pairs == [(0, 0), (1, 1)]
    assert result.total_cost == pytest.approx(2.0)


def test_hungarian_matches_brute_force_square():
    rng = make_rng(307)
    for _ in range(200):
        cost = rng.normal(size=(3, 3))
        got = hungarian(cost)
        want = brute_force_assignment(cost)
        assert got.pairs == want.pairs
        assert got.total_cost == pytest.approx(want.total_cost, abs=1e-12)


def test_hungarian_matches_brute_force_rectangular():
    rng = make_rng(311)
    for _ in range(120):
        k = int(rng.integers(1, 6))
        g = int(rng.integers(1, 6))
        cost = rng.uniform(-2.0, 2.0, size=(k, g))
        got = hungarian(cost)
        want = brute_force_assignment(cost)
        assert got.pairs == want.pairs
        assert got.total_cost == pytest.approx(want.total_cost, abs=1e-12)
        assert len(got.pairs) == min(k, g)


def test_hungarian_tie_break_is_lexicographic():
    assert hungarian(np.zeros((4, 4))).pairs == [(0, 0), (1, 1), (2, 2), (3, 3)]
    assert hungarian(np.zeros((2, 4))).pairs == [(0, 0), (1, 1)]
    assert hungarian(np.zeros((4, 2))).pairs == [(0, 0), (1, 1)]
    # two optimal assignments; the smaller pair list must win
    cost = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert hungarian(cost).pairs == [(0, 0), (1, 1)]


def test_hungarian_cost_never_above_any_permutation():
    rng = make_rng(313)
    for _ in range(50):
        k = int(rng.integers(2, 8))
        g = int(rng.integers(2, 8))
        cost = rng.normal(size=(k, g)) * 3.0
        got = hungarian(cost)
        want = brute_force_assignment(cost)
        assert got.total_cost <= want.total_cost + 1e-9


def test_hungarian_rejects_bad_input():
    assert hungarian(np.zeros((0, 3))).pairs == []
    with pytest.raises(ValueError):
        hungarian(np.array([[np.inf, 1.0]]))
    with pytest.raises(ValueError):
        hungarian(np.zeros(3))


def test_focal_loss_reference_points():
    # gamma=0, alpha=1 reduces to plain cross-entropy: p=0.5 gives ln 2
    logits = Tensor(np.array([[0.0]]))
    value = focal_loss(logits, np.array([[1.0]]), alpha=1.0, gamma=0.0).item()
    assert value == pytest.approx(math.log(2.0), abs=1e-12)
    # confident correct positive: near-zero loss
    assert focal_loss(Tensor(np.array([[20.0]])), np.array([[1.0]])).item() < 1e-6
    # alpha=0.25, gamma=2, p=0.9 positive
    p = 0.9
    logit = math.log(p / (1.0 - p))
    want = 0.25 * (1.0 - p) ** 2 * (-math.log(p))
    got = focal_loss(Tensor(np.array([[logit]])), np.array([[1.0]]), alpha=0.25, gamma=2.0).item()
    assert got == pytest.approx(want, rel=1e-9)


def test_focal_loss_negative_entries_and_normalizer():
    p = 0.2
    logit = math.log(p / (1.0 - p))
    want = 0.75 * p ** 2 * (-math.log(1.0 - p))
    got = focal_loss(Tensor(np.array([[logit]])), np.array([[0.0]]), alpha=0.25, gamma=2.0).item()
    assert got == pytest.approx(want, rel=1e-9)
    # two positives, normalizer defaults to the positive count
    logits = Tensor(np.zeros((2, 1)))
    targets = np.ones((2, 1))
    assert focal_loss(logits, targets, alpha=1.0, gamma=0.0).item() == pytest.approx(math.log(2.0))


def test_focal_loss_stable_at_extreme_logits():
    logits = Tensor(np.array([[60.0, -60.0]]))
    targets = np.array([[0.0, 1.0]])
    value = focal_loss(logits, targets).item()
    assert np.isfinite(value) and value > 10.0


def test_focal_loss_gradcheck():
    rng = make_rng(317)
    store = ParamStore()
    store.create("logits", rng.normal(size=(4, 3)))
    targets = (rng.random((4, 3)) > 0.7).astype(float)

    def fn(s):
        return focal_loss(s["logits"], targets)

    assert grad_check(fn, store, eps=1e-5, tol=1e-4).passed


def test_box_loss_reference_points():
    a = Box9DoF(0, 0, 0, 1, 1, 1)
    assert box_loss(a, a) == 0.0
    b = Box9DoF(1, 0, 0, 1, 1, 1)
    assert box_loss(a, b) == pytest.approx(1.0, abs=1e-12)
    c = Box9DoF(0, 0, 0, 1, 1, 1, alpha=2.0 * np.pi)
    assert box_loss(a, c) == pytest.approx(0.0, abs=1e-9)
    # near the wrap boundary the sin/cos parameterization stays small
    d = Box9DoF(0, 0, 0, 1, 1, 1, alpha=np.pi - 0.01)
    e = Box9DoF(0, 0, 0, 1, 1, 1, alpha=-np.pi + 0.01)
    assert box_loss(d, e) < 0.05
    f = Box9DoF(0, 0, 0, 2, 1, 1)
    assert box_loss(a, f) == pytest.approx(math.log(2.0), abs=1e-12)


def test_box_regression_loss_matches_float_version():
    rng = make_rng(331)
    k = 5
    centers = rng.normal(size=(k, 3))
    logext = rng.uniform(-0.5, 0.5, size=(k, 3))
    raw_sin = rng.normal(size=(k, 3))
    raw_cos = rng.normal(size=(k, 3))
    norm = np.sqrt(raw_sin**2 + raw_cos**2 + 1e-12)
    sin_n, cos_n = raw_sin / norm, raw_cos / norm
    gt = [Box9DoF(*rng.normal(size=3), *rng.uniform(0.5, 2.0, size=3), *rng.uniform(-3, 3, size=3))
          for _ in range(3)]
    rows = [4, 0, 2]
    tape_val = box_regression_loss(Tensor(centers), Tensor(logext), Tensor(sin_n), Tensor(cos_n),
                                   rows, gt).item()
    ref = 0.0
    for r, g in zip(rows, gt):
        pred = Box9DoF(*centers[r], *np.exp(logext[r]),
                       *(np.arctan2(sin_n[r], cos_n[r])))
        ref += box_loss(pred, g)
    assert tape_val == pytest.approx(ref / len(gt), abs=1e-9)


def test_spatial_relevance_loss_values_and_gradcheck():
    logits = Tensor(np.zeros(4))
    labels = np.array([0.0, 1.0, 0.0, 1.0])
    assert spatial_relevance_loss(logits, labels).item() == pytest.approx(math.log(2.0), abs=1e-12)
    confident = Tensor(np.array([-50.0, 50.0]))
    assert spatial_relevance_loss(confident, np.array([0.0, 1.0])).item() < 1e-12

    rng = make_rng(337)
    store = ParamStore()
    store.create("logits", rng.normal(size=(6,)))
    lab = (rng.random(6) > 0.5).astype(float)
    assert grad_check(lambda s: spatial_relevance_loss(s["logits"], lab), store, tol=1e-5).passed


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_box=-0.1)


@dataclass
class FakeOutput:
    boxes: list
    det_logits: Tensor
    grd_logits: Tensor
    centers: Tensor
    log_extents: Tensor
    sin_angles: Tensor
    cos_angles: Tensor
    relevance: Tensor | None


def make_fake_output(rng, k=4, num_classes=3, n_vox=6):
    centers = rng.normal(size=(k, 3))
    logext = rng.uniform(-0.3, 0.3, size=(k, 3))
    raw_s = rng.normal(size=(k, 3))
    raw_c = rng.normal(size=(k, 3))
    norm = np.sqrt(raw_s**2 + raw_c**2 + 1e-12)
    sin_n, cos_n = raw_s / norm, raw_c / norm
    boxes = [Box9DoF(*centers[i], *np.exp(logext[i]), *np.arctan2(sin_n[i], cos_n[i]))
             for i in range(k)]
    return FakeOutput(
        boxes=boxes,
        det_logits=Tensor(rng.normal(size=(k, num_classes))),
        grd_logits=Tensor(rng.normal(size=(k, 1))),
        centers=Tensor(centers),
        log_extents=Tensor(logext),
        sin_angles=Tensor(sin_n),
        cos_angles=Tensor(cos_n),
        relevance=Tensor(rng.normal(size=(n_vox,))),
    )


def test_matching_cost_prefers_better_class_and_box():
    rng = make_rng(341)
    out = make_fake_output(rng)
    gt = DetectionTargets(boxes=[out.boxes[2]], classes=[1], num_classes=3)
    cost = matching_cost(out, gt, LossWeights())
    assert cost.shape == (4, 1)
    # prediction 2 has a zero box term against its own box
    assert np.argmin(cost[:, 0]) == 2


def test_detection_total_loss_breakdown_consistent():
    rng = make_rng(347)
    out = make_fake_output(rng)
    gt = DetectionTargets(boxes=[out.boxes[0], out.boxes[3]], classes=[0, 2], num_classes=3)
    weights = LossWeights(lambda_cls=1.0, lambda_box=1.0)
    total, breakdown = total_loss(out, gt, weights)
    assert breakdown.task == "detection"
    assert breakdown.spatial == 0.0
    want = weights.lambda_cls * breakdown.cls + weights.lambda_box * breakdown.box
    assert abs(breakdown.total - want) < 1e-12
    assert total.item() == pytest.approx(breakdown.total, abs=1e-12)


def test_grounding_total_loss_breakdown_consistent():
    rng = make_rng(349)
    out = make_fake_output(rng)
    labels = (rng.random(6) > 0.5).astype(float)
    gt = GroundingTargets(box=out.boxes[1], relevance_labels=labels)
    weights = LossWeights(lambda_spatial=0.01)
    total, breakdown = total_loss(out, gt, weights)
    assert breakdown.task == "grounding"
    want = (weights.lambda_ground * breakdown.cls + weights.lambda_box * breakdown.box
            + weights.lambda_spatial * breakdown.spatial)
    assert abs(breakdown.total - want) < 1e-12
    assert total.item() == pytest.approx(breakdown.total, abs=1e-12)
    # without a relevance head the spatial component drops out
    out.relevance = None
    _, b2 = total_loss(out, gt, weights)
    assert b2.spatial == 0.0


def test_grounding_matches_closest_query():
    rng = make_rng(353)
    out = make_fake_output(rng)
    gt = GroundingTargets(box=out.boxes[3], relevance_labels=None)
    cost = matching_cost(out, gt, LossWeights())
    assert cost.shape == (4, 1)
    assignment = hungarian(cost)
    # box 3 matches itself unless its grounding score is badly low
    assert assignment.pairs[0][1] == 0


def test_detection_loss_empty_gt():
    rng = make_rng(359)
    out = make_fake_output(rng)
    gt = DetectionTargets(boxes=[], classes=[], num_classes=3)
    total, breakdown = total_loss(out, gt, LossWeights())
    assert breakdown.box == 0.0
    assert breakdown.cls > 0.0
    assert np.isfinite(total.item())
