import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from target_scorer.core import InvalidInputError
from target_scorer.decode import GRID_KERNELS, GRID_THRESHOLDS, DecoderConfig, decode
from target_scorer.evaluate import (
    DecoderGridSearch,
    archery_metrics,
    detection_metrics,
    grid_search_decoder,
    hungarian,
    match_detections,
    pooled_metrics,
)
from target_scorer.heatmap import ideal_tensor
from target_scorer.scoring import score_detections


def exhaustive(cost):
    n, m = cost.shape
    best = None
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            pairs = [(i, c) for i, c in enumerate(cols)]
            key = (sum(cost[i, j] for i, j in pairs), pairs)
            best = key if best is None or key < best else best
    else:
        for rows in itertools.permutations(range(n), m):
            pairs = sorted((r, j) for j, r in enumerate(rows))
            key = (sum(cost[i, j] for i, j in pairs), pairs)
            best = key if best is None or key < best else best
    return best


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1), st.booleans())
def test_hungarian_matches_exhaustive(n, m, seed, ints):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 4, (n, m)).astype(float) if ints else rng.random((n, m))
    pairs, total = hungarian(cost)
    bt, bp = exhaustive(cost)
    assert total == pytest.approx(bt, abs=1e-9)
    if ints:
        # exact ties: the lexicographically smallest optimum is reported
        assert pairs == bp


def test_hungarian_large_against_scipy(rng):
    cost = rng.random((120, 100))
    _, total = hungarian(cost)
    r, c = linear_sum_assignment(cost)
    assert total == pytest.approx(cost[r, c].sum(), rel=1e-12)


def test_hungarian_rejects_nan():
    with pytest.raises(InvalidInputError):
        hungarian(np.array([[np.nan]]))
    assert hungarian(np.zeros((0, 3))) == ([], 0.0)


def test_match_radius_rule():
    m = match_detections([(0, 0), (100, 100)], [(10, 0), (100, 116)], radius=15)
    assert m.tp == 1 and m.fp == 1 and m.fn == 1
    assert m.pairs == [(0, 0, 10.0)]
    m = match_detections([(0, 0)], [(15, 0)], radius=15)
    assert m.tp == 1


def test_counts_fixture_8_2_3():
    gts = [(i * 40.0, 0.0) for i in range(11)]
    preds = gts[:8] + [(500.0, 500.0), (600.0, 600.0)]
    rep = detection_metrics(match_detections(preds, gts))
    assert (rep.tp, rep.fp, rep.fn) == (8, 2, 3)
    assert rep.precision == 0.8 and rep.recall == 8 / 11
    assert rep.f1 == pytest.approx(2 * 0.8 * (8 / 11) / (0.8 + 8 / 11))


def test_empty_rates_are_zero():
    rep = detection_metrics(match_detections([], []))
    assert (rep.precision, rep.recall, rep.f1) == (0.0, 0.0, 0.0)


def test_error_in_mm_uses_frame():
    m = match_detections([(10.0, 0.0)], [(0.0, 0.0)])
    assert detection_metrics(m, 512).mean_error_mm == pytest.approx(10 * 400 / 512)


def test_pooled_counts_sum():
    a = match_detections([(0, 0)], [(0, 0), (50, 50)])
    b = match_detections([(0, 0), (90, 90)], [(0, 0)])
    rep = pooled_metrics([a, b])
    assert (rep.tp, rep.fp, rep.fn) == (2, 1, 1)


def test_archery_identity():
    pts = [(256.0, 256.0), (300.0, 270.0)]
    sc = score_detections(pts, 512)
    rep = archery_metrics(sc, sc, pts, pts, 512)
    assert rep.rel_error_pct == 0.0 and rep.centroid_error_mm == 0.0 and rep.signed_error_points == 0.0


def test_archery_centroid_shift():
    g = [(256.0, 256.0)]
    p = [(266.0, 256.0)]
    rep = archery_metrics(score_detections(p, 512), score_detections(g, 512), p, g, 512)
    assert rep.centroid_error_mm == pytest.approx(10 * 400 / 512)


def _corpus(rng, n_img=4):
    tensors, gts = [], []
    for _ in range(n_img):
        pts = rng.uniform(20, 108, (5, 2))
        tensors.append(ideal_tensor(pts, 128, 128, with_offsets=False))
        gts.append(pts)
    return tensors, gts


def test_grid_search_table(rng):
    tensors, gts = _corpus(rng)
    best, rows = grid_search_decoder(tensors, gts)
    assert len(rows) == 150
    assert [(r["threshold"], r["kernel"]) for r in rows] == [(t, k) for t in GRID_THRESHOLDS for k in GRID_KERNELS]
    # independent recomputation of two rows
    for r in (rows[0], rows[77]):
        tp = fp = fn = 0
        for ten, g in zip(tensors, gts):
            d = decode(ten, DecoderConfig(r["threshold"], r["kernel"]))
            m = match_detections([(x.x, x.y) for x in d], g)
            tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        assert (r["tp"], r["fp"], r["fn"]) == (tp, fp, fn)
    top = sorted(rows, key=lambda r: (-r["f1"], -r["precision"], r["threshold"], r["kernel"]))[0]
    assert (best.threshold, best.nms_kernel) == (top["threshold"], top["kernel"])


def test_grid_search_estimator(rng):
    tensors, gts = _corpus(rng, 2)
    est = DecoderGridSearch().fit(tensors, gts)
    assert est.best_score_ == max(r["f1"] for r in est.cv_results_)
    assert len(est.predict(tensors)) == 2
    with pytest.raises(InvalidInputError):
        DecoderGridSearch().fit(tensors, gts[:1])


def test_unfitted_grid_search_raises(rng):
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        DecoderGridSearch().predict(_corpus(rng, 1)[0])
