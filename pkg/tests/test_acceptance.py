"""Acceptance criteria, one test each.  Every test prints a PASS/FAIL line and the
terminal summary repeats them (see conftest.py)."""

import itertools
import json
import math
import time
from fractions import Fraction

import numpy as np

from conftest import record, synth_case
from target_scorer.cli import main, write_case_bundle
from target_scorer.core import CanonicalFrame, px_to_mm
from target_scorer.decode import GRID_KERNELS, GRID_THRESHOLDS, DecoderConfig, decode, nms_peaks
from target_scorer.evaluate import (
    archery_metrics,
    detection_metrics,
    grid_search_decoder,
    hungarian,
    match_detections,
)
from target_scorer.heatmap import (
    HeatTensor,
    fit_logits_by_descent,
    focal_loss,
    grad_check,
    ideal_tensor,
    offset_loss,
    render_target,
    total_loss,
)
from target_scorer.rectify import TargetRectifier
from target_scorer.scoring import score_arrow, score_detections

FIXED = DecoderConfig(threshold=0.5, nms_kernel=15, separation_px=4.0)


def separated_points(rng, n, lo, hi, min_dist):
    pts = []
    while len(pts) < n:
        p = rng.uniform(lo, hi, 2)
        if all(math.dist(p, q) >= min_dist for q in pts):
            pts.append(p)
    return np.array(pts)


def test_criterion_01_gradient_fidelity():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = {"focal": 0.0, "offset": 0.0, "total": 0.0}
    for _ in range(20):
        pts = rng.uniform(0, 16, (int(rng.integers(1, 4)), 2))
        target = render_target(pts, 16, 16)
        tensor = HeatTensor(rng.normal(-1.0, 2.0, (16, 16)), rng.normal(0.0, 1.5, (2, 16, 16)))
        for name, fn in (("focal", focal_loss), ("offset", offset_loss), ("total", total_loss)):
            worst[name] = max(worst[name], grad_check(fn, tensor, target, rng=rng))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 10
    record(1, ok, f"max rel err {max(worst.values()):.2e} over 20 fixtures, {elapsed:.1f} s")
    assert ok


def test_criterion_02_loss_optimum_recovery():
    centres = np.array([[16.3, 14.8], [47.6, 20.2], [30.1, 49.5]])
    t0 = time.perf_counter()
    fitted = fit_logits_by_descent(render_target(centres, 64, 64))
    dets = decode(fitted, FIXED)
    elapsed = time.perf_counter() - t0
    got = np.array([(d.x, d.y) for d in dets]).reshape(-1, 2)
    dist = [min(math.dist(c, g) for g in got) if len(got) else math.inf for c in centres]
    ok = len(dets) == 3 and max(dist) <= 1.0 and elapsed < 60
    record(2, ok, f"{len(dets)} peaks, worst centre distance {max(dist):.3f} px, {elapsed:.1f} s")
    assert ok


def window_max_oracle(probs, k):
    """Shift-and-compare maximum over the clipped k x k window."""
    h, w = probs.shape
    r = k // 2
    pad = np.full((h + 2 * r, w + 2 * r), -np.inf)
    pad[r:r + h, r:r + w] = probs
    m = np.full_like(probs, -np.inf)
    for dy in range(k):
        for dx in range(k):
            m = np.maximum(m, pad[dy:dy + h, dx:dx + w])
    rows, cols = np.nonzero(probs >= m)
    return [(c + 0.5, r_ + 0.5, float(probs[r_, c])) for r_, c in zip(rows, cols)]


def test_criterion_03_decoder_correctness():
    rng = np.random.default_rng(3)
    mismatches = 0
    for i in range(1000):
        k = GRID_KERNELS[i % len(GRID_KERNELS)]
        h, w = (int(v) for v in rng.integers(k, 65, size=2))
        probs = rng.integers(0, 5, (h, w)) / 4.0 if i % 3 == 0 else rng.random((h, w))
        if nms_peaks(probs, k) != window_max_oracle(probs, k):
            mismatches += 1

    sigma = 6.6
    tp = fp = fn = 0
    for _ in range(20):
        pts = separated_points(rng, 8, 0.0, 128.0, 2 * sigma)
        dets = decode(ideal_tensor(pts, 128, 128, with_offsets=False), FIXED)
        m = match_detections([(d.x, d.y) for d in dets], pts)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    f1 = 2 * tp / (2 * tp + fp + fn)
    ok = mismatches == 0 and f1 == 1.0 and fn == 0
    record(3, ok, f"NMS mismatches {mismatches}/1000; round trip TP {tp} FP {fp} FN {fn} F1 {f1}")
    assert ok


def exhaustive_assignment(cost):
    n, m = cost.shape
    best = None
    if n <= m:
        cands = ([(i, c) for i, c in enumerate(cols)] for cols in itertools.permutations(range(m), n))
    else:
        cands = (sorted((r, j) for j, r in enumerate(rows)) for rows in itertools.permutations(range(n), m))
    for pairs in cands:
        key = (sum(cost[i, j] for i, j in pairs), pairs)
        if best is None or key < best:
            best = key
    return best


def test_criterion_04_hungarian():
    rng = np.random.default_rng(4)
    bad = 0
    for i in range(1000):
        n, m = (int(v) for v in rng.integers(1, 8, size=2))
        cost = rng.integers(0, 5, (n, m)).astype(float) if i % 2 else rng.random((n, m))
        pairs, total = hungarian(cost)
        best_total, best_pairs = exhaustive_assignment(cost)
        if pairs != best_pairs or not math.isclose(total, best_total, rel_tol=0, abs_tol=1e-12):
            bad += 1
    record(4, bad == 0, f"{bad} disagreements with exhaustive search on 1000 matrices (n, m <= 7)")
    assert bad == 0


def scan_oracle(d):
    e = Fraction(d) - Fraction(9, 4)
    for s in range(10, 0, -1):
        if e <= 20 * (11 - s):
            return s
    return 0


def test_criterion_05_scoring_rule():
    rng = np.random.default_rng(5)
    ds = rng.uniform(0, 250, 10_000)
    bad = sum(score_arrow(float(d)) != scan_oracle(float(d)) for d in ds)
    boundary_ok = all(score_arrow(k * 20 + 2.25) == (10 if k == 0 else 11 - k) for k in range(11))
    ok = bad == 0 and boundary_ok
    record(5, ok, f"{bad} mismatches on 10000 distances; boundaries to inner ring: {boundary_ok}")
    assert ok


def test_criterion_06_unit_constants():
    a = px_to_mm((256 + 15, 256), 512).x
    b = CanonicalFrame(2048).mm_per_px
    ok = a == 11.71875 and b == 0.1953125
    record(6, ok, f"15 px @512 -> {a} mm; 1 px @2048 -> {b} mm")
    assert ok


def test_criterion_07_rectification_accuracy():
    t0 = time.perf_counter()
    errs, failures, per_case = [], 0, []
    for seed in range(100, 120):
        case = synth_case(seed, 20, 30.0)
        try:
            est = TargetRectifier().fit(case.image)
        except Exception:  # counted, reported below
            failures += 1
            continue
        got = est.transform_points(case.gt_points_image()) - 1024
        true = case.gt_points_px(2048) - 1024
        # the face is rotationally symmetric, so only an in-plane rotation separates the frames
        ang = math.atan2(np.sum(got[:, 0] * true[:, 1] - got[:, 1] * true[:, 0]), np.sum(got * true))
        c, s = math.cos(ang), math.sin(ang)
        aligned = got @ np.array([[c, -s], [s, c]]).T
        e = np.hypot(*(aligned - true).T)
        errs.append(e)
        per_case.append(e.max())
    elapsed = time.perf_counter() - t0
    allerr = np.concatenate(errs) if errs else np.array([np.inf])
    ok = failures == 0 and allerr.mean() <= 2 and allerr.max() <= 3 and elapsed < 300
    record(7, ok, f"mean {allerr.mean():.3f} px, max {allerr.max():.3f} px over {len(allerr)} points, "
                  f"{failures} failures, {elapsed:.0f} s")
    assert ok


def test_criterion_08_grid_search_contract():
    rng = np.random.default_rng(8)
    tensors, gts = [], []
    for _ in range(4):
        pts = separated_points(rng, 6, 10.0, 118.0, 12.0)
        noisy = ideal_tensor(pts, 128, 128, with_offsets=False).logits + rng.normal(0, 1.5, (128, 128))
        tensors.append(HeatTensor(noisy))
        gts.append(pts)
    best, rows = grid_search_decoder(tensors, gts)
    thresholds = sorted({r["threshold"] for r in rows})
    kernels = sorted({r["kernel"] for r in rows})
    top = min(rows, key=lambda r: (-r["f1"], -r["precision"], r["threshold"], r["kernel"]))
    ok = (
        len(rows) == 150
        and np.allclose(thresholds, np.linspace(0.01, 0.4, 10)) and len(thresholds) == 10
        and kernels == list(range(3, 32, 2))
        and [(r["threshold"], r["kernel"]) for r in rows] == [(t, k) for t in GRID_THRESHOLDS for k in GRID_KERNELS]
        and (best.threshold, best.nms_kernel) == (top["threshold"], top["kernel"])
        and top["f1"] == max(r["f1"] for r in rows)
    )
    record(8, ok, f"{len(rows)} rows; best threshold {best.threshold:.4g}, kernel {best.nms_kernel}, "
                  f"F1 {top['f1']:.4f}")
    assert ok


def test_criterion_09_end_to_end(tmp_path):
    case = synth_case(900, 15, 25.0, 10.0)
    paths = write_case_bundle(tmp_path, case, 512)
    out = tmp_path / "run"
    code = main(["pipeline", "--input", str(paths["image"]), "--heatmap", str(paths["heatmap"]),
                 "--use-offsets", "--output-dir", str(out)])
    card = json.loads((out / "scorecard.json").read_text())
    gt_card = case.scorecard()
    pred_xy = np.array([(a["x"], a["y"]) for a in card["arrows"]]).reshape(-1, 2)
    gt_xy = case.gt_points_px(512)
    m = match_detections(pred_xy, gt_xy, 15.0)
    paired = all(card["arrows"][i]["score"] == gt_card.arrows[j].score for i, j, _ in m.pairs)
    same = (
        code == 0 and m.tp == len(gt_xy) == len(pred_xy)
        and card["total"] == gt_card.total and card["average"] == gt_card.average and paired
    )
    sc = score_detections([tuple(p) for p in gt_xy], 512)
    arch = archery_metrics(sc, sc, gt_xy, gt_xy, 512)
    ok = same and arch.rel_error_pct == 0.0 and arch.centroid_error_mm == 0.0
    record(9, ok, f"exit {code}; total {card['total']} vs {gt_card.total}; average {card['average']} vs "
                  f"{gt_card.average}; per-arrow equal {paired}; rel err {arch.rel_error_pct}%, "
                  f"centroid {arch.centroid_error_mm} mm")
    assert ok


def test_criterion_10_offset_ablation():
    rng = np.random.default_rng(10)
    plain, refined, clean = [], [], []
    for _ in range(10):
        pts = separated_points(rng, 8, 5.0, 507.0, 20.0)
        ideal = ideal_tensor(pts, 512, 512)
        noisy = HeatTensor(ideal.logits, ideal.offsets + rng.uniform(-2, 2, ideal.offsets.shape))
        for store, tensor, use in ((plain, ideal, False), (refined, noisy, True), (clean, ideal, True)):
            dets = decode(tensor, DecoderConfig(0.5, 15, 4.0, use))
            m = match_detections([(d.x, d.y) for d in dets], pts)
            store.append(detection_metrics(m, 512))
    mean = lambda reps: float(np.mean([r.mean_error_mm for r in reps]))  # noqa: E731
    e_plain, e_noisy, e_clean = mean(plain), mean(refined), mean(clean)
    ok = e_noisy > e_plain > e_clean
    record(10, ok, f"mean error mm: offsets off {e_plain:.3f}, corrupted offsets on {e_noisy:.3f} "
                   f"(clean offsets {e_clean:.2e})")
    assert ok


if __name__ == "__main__":
    import sys

    import pytest

    sys.exit(pytest.main([__file__, "-q"]))
