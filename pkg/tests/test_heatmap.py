import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from target_scorer.core import InvalidInputError
from target_scorer.heatmap import (
    HeatTensor,
    LossParams,
    fit_logits_by_descent,
    focal_loss,
    grad_check,
    ideal_tensor,
    offset_loss,
    render_target,
    total_loss,
)


def naive_focal(z, y, a=3.86, b=2.92):
    # scalar loop straight from the definition
    total, npos = 0.0, 0
    for zi, yi in zip(z.ravel(), y.ravel()):
        p = 1.0 / (1.0 + math.exp(-zi))
        lp = math.log(max(p, 1e-12))
        lq = math.log(max(1 - p, 1e-12))
        if yi >= 0.99:
            npos += 1
            total += (1 - p) ** a * lp
        else:
            total += (1 - yi) ** b * p**a * lq
    return -total / max(npos, 1)


def naive_smooth_l1(pred, tgt, mask):
    vals = []
    for c in range(2):
        for i, j in zip(*np.nonzero(mask)):
            e = abs(pred[c, i, j] - tgt[c, i, j])
            vals.append(0.5 * e * e if e < 1 else e - 0.5)
    return sum(vals) / len(vals) if vals else 0.0


def test_render_examples():
    t = render_target([(8.5, 8.5)], 17, 17)
    assert t.values[8, 8] == 1.0
    assert t.values[8, 9] == pytest.approx(math.exp(-1 / (2 * 6.6**2)))
    assert t.positives.sum() == 1
    # max composite, not sum
    t2 = render_target([(8.5, 8.5), (10.5, 8.5)], 17, 17)
    assert t2.values.max() == 1.0
    # truncated at 4 sigma
    big = render_target([(50.5, 50.5)], 101, 101)
    assert big.values[50, 50 + 27] == 0.0 and big.values[50, 50 + 26] > 0


def test_offset_targets_point_to_nearest_centre():
    t = render_target([(5.3, 5.7), (20.5, 5.5)], 32, 32)
    assert t.offset_targets[0, 5, 5] == pytest.approx(-0.2)
    assert t.offset_targets[1, 5, 5] == pytest.approx(0.2)
    assert t.offset_targets[0, 5, 18] == pytest.approx(20.5 - 18.5)
    assert not t.offset_mask[31, 31] or math.hypot(31.5 - 20.5, 31.5 - 5.5) <= 24


def test_render_rejects_out_of_grid():
    with pytest.raises(InvalidInputError):
        render_target([(16.0, 3.0)], 16, 16)


def test_focal_matches_naive(rng):
    for _ in range(5):
        pts = rng.uniform(0, 16, (3, 2))
        t = render_target(pts, 16, 16)
        z = rng.normal(0, 3, (16, 16))
        loss, _ = focal_loss(HeatTensor(z), t)
        assert loss == pytest.approx(naive_focal(z, t.values), rel=1e-12)


def test_focal_example_values():
    y = np.zeros((4, 4))
    y[1, 1] = 1.0
    from target_scorer.heatmap import HeatTarget

    tgt = HeatTarget(y, np.zeros((2, 4, 4)), np.zeros((4, 4), bool))
    z = np.zeros((4, 4))
    loss, _ = focal_loss(HeatTensor(z), tgt)
    # one positive at p=.5 and 15 negatives at p=.5, weight 1
    expect = -(0.5**3.86 * math.log(0.5) + 15 * 0.5**3.86 * math.log(0.5))
    assert loss == pytest.approx(expect)


def test_no_positives_normalises_by_one():
    from target_scorer.heatmap import HeatTarget

    tgt = HeatTarget(np.zeros((3, 3)), np.zeros((2, 3, 3)), np.zeros((3, 3), bool))
    z = np.full((3, 3), -1.0)
    loss, _ = focal_loss(HeatTensor(z), tgt)
    assert loss == pytest.approx(naive_focal(z, np.zeros((3, 3))))


def test_extreme_logits_finite():
    t = render_target([(4.5, 4.5)], 8, 8)
    z = np.full((8, 8), 80.0)
    z[4, 4] = -80.0
    loss, g = focal_loss(HeatTensor(z), t)
    assert math.isfinite(loss) and np.all(np.isfinite(g))
    # the clamped log contributes no slope; only the vanishing q**alpha factor remains
    assert abs(g[4, 4]) < 1e-30


def test_offset_loss_matches_naive(rng):
    pts = rng.uniform(0, 16, (2, 2))
    t = render_target(pts, 16, 16)
    off = rng.normal(0, 2, (2, 16, 16))
    loss, _ = offset_loss(HeatTensor(np.zeros((16, 16)), off), t)
    assert loss == pytest.approx(naive_smooth_l1(off, t.offset_targets, t.offset_mask))


def test_offset_loss_needs_offsets():
    t = render_target([(4.5, 4.5)], 8, 8)
    with pytest.raises(InvalidInputError, match="offsets absent"):
        offset_loss(HeatTensor(np.zeros((8, 8))), t)


def test_total_combines_with_weight(rng):
    t = render_target([(7.2, 9.9)], 16, 16)
    ten = HeatTensor(rng.normal(size=(16, 16)), rng.normal(size=(2, 16, 16)))
    lt, gt = total_loss(ten, t)
    assert lt == pytest.approx(focal_loss(ten, t)[0] + 0.1 * offset_loss(ten, t)[0])
    assert gt.shape == (3, 16, 16)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradients_agree_with_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 12, (int(rng.integers(1, 4)), 2))
    t = render_target(pts, 12, 12)
    ten = HeatTensor(rng.normal(-1, 2, (12, 12)), rng.normal(0, 1.5, (2, 12, 12)))
    for fn in (focal_loss, offset_loss, total_loss):
        assert grad_check(fn, ten, t, n_samples=40, rng=seed) < 1e-4


def test_grad_check_detects_a_wrong_gradient():
    t = render_target([(6.5, 6.5)], 12, 12)
    ten = HeatTensor(np.zeros((12, 12)), np.zeros((2, 12, 12)))

    def wrong(tensor, target, params=None):
        loss, g = focal_loss(tensor, target, params)
        return loss, g * 1.001

    assert grad_check(wrong, ten, t, loss_kind="focal_loss") > 5e-4


def test_ideal_tensor_probabilities():
    ten = ideal_tensor([(10.5, 10.5)], 21, 21)
    p = 1 / (1 + np.exp(-ten.logits))
    assert p[10, 10] > 0.99 and p.argmax() == 10 * 21 + 10


def test_descent_lowers_the_loss():
    t = render_target([(10.5, 10.5)], 24, 24)
    _, hist = fit_logits_by_descent(t, steps=50, return_history=True)
    assert hist[-1] < hist[0]


def test_loss_params_validation():
    with pytest.raises(InvalidInputError):
        LossParams(sigma_px=0)
    with pytest.raises(InvalidInputError):
        HeatTensor(np.zeros((4, 4)), np.zeros((2, 3, 4)))
