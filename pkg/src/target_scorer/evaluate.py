"""Prediction/ground-truth matching, detection and archery metrics, decoder grid search."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_heat_tensors, check_points
from .core import FACE_DIAMETER_MM, InvalidInputError, px_to_mm_array
from .decode import GRID_KERNELS, GRID_THRESHOLDS, DecoderConfig, HeatmapDecoder, decode_sweep
from .scoring import TargetScorecard


def _solve_square(a: np.ndarray):
    """Shortest-augmenting-path Hungarian method on a square matrix.

    Returns ``(row_to_col, u, v)`` where ``u``/``v`` are feasible dual
    potentials: ``a[i, j] - u[i] - v[j] >= 0`` with equality on the matching.
    """
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=int)
    cost = np.zeros((n + 1, n + 1))
    cost[1:, 1:] = a
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_optimum(row_to_col, tight):
    """Among perfect matchings inside the tight-edge graph, pick the lexicographically smallest."""
    n = len(row_to_col)
    r2c = row_to_col.copy()
    c2r = np.empty(n, dtype=int)
    c2r[r2c] = np.arange(n)
    fixed_row = np.zeros(n, dtype=bool)
    fixed_col = np.zeros(n, dtype=bool)
    nbrs = [np.flatnonzero(tight[i]) for i in range(n)]

    def find_path(start_row, target_col, banned_col, banned_row):
        # alternating path start_row -> ... -> target_col over tight edges
        parent = {}
        stack = [start_row]
        seen_cols = set()
        while stack:
            r = stack.pop()
            for c in nbrs[r]:
                if fixed_col[c] or c == banned_col or c in seen_cols:
                    continue
                seen_cols.add(c)
                parent[c] = r
                if c == target_col:
                    path = []
                    while True:
                        rr = parent[c]
                        path.append((rr, c))
                        if rr == start_row:
                            return path
                        c = r2c[rr]
                nxt = c2r[c]
                if nxt != banned_row and not fixed_row[nxt]:
                    stack.append(nxt)
        return None

    for i in range(n):
        for j in nbrs[i]:
            if fixed_col[j]:
                continue
            if r2c[i] == j:
                break
            r = c2r[j]
            path = find_path(r, r2c[i], j, i)
            if path is None:
                continue
            for rr, cc in path:
                r2c[rr] = cc
                c2r[cc] = rr
            r2c[i] = j
            c2r[j] = i
            break
        fixed_row[i] = True
        fixed_col[r2c[i]] = True
    return r2c


def hungarian(cost):
    """Minimum-cost assignment of ``min(n, m)`` pairs.

    Returns ``(pairs, total)`` with ``pairs`` sorted by row.  Among optimal
    assignments the lexicographically smallest pair list wins.
    """
    a = np.asarray(cost, dtype=float)
    if a.ndim != 2:
        raise InvalidInputError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("cost matrix has non-finite entries")
    n, m = a.shape
    if n == 0 or m == 0:
        return [], 0.0
    s = max(n, m)
    pad = (np.abs(a).max() + 1.0) if a.size else 1.0
    sq = np.full((s, s), pad)
    sq[:n, :m] = a
    r2c, u, v = _solve_square(sq)
    scale = max(1.0, float(np.abs(sq).max()))
    tight = (sq - u[:, None] - v[None, :]) <= 1e-10 * scale * s
    tight[np.arange(s), r2c] = True
    r2c = _lexicographic_optimum(r2c, tight)
    pairs = [(i, int(r2c[i])) for i in range(n) if r2c[i] < m]
    return pairs, float(sum(a[i, j] for i, j in pairs))


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (pred index, gt index, distance px)
    false_positives: list = field(default_factory=list)
    false_negatives: list = field(default_factory=list)
    match_radius_px: float = 15.0

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)


def match_detections(preds, gts, radius: float = 15.0) -> MatchResult:
    """Hungarian matching on Euclidean distance; pairs farther than ``radius`` are split into FP + FN."""
    if not radius > 0:
        raise InvalidInputError("radius must be > 0")
    p = check_points(preds, "preds")
    g = check_points(gts, "gts")
    pairs, fps, fns = [], set(range(len(p))), set(range(len(g)))
    if len(p) and len(g):
        dist = np.hypot(p[:, None, 0] - g[None, :, 0], p[:, None, 1] - g[None, :, 1])
        assigned, _ = hungarian(dist)
        for i, j in assigned:
            if dist[i, j] <= radius:
                pairs.append((i, j, float(dist[i, j])))
                fps.discard(i)
                fns.discard(j)
    return MatchResult(pairs, sorted(fps), sorted(fns), radius)


def _ratio(num, den):
    return num / den if den else 0.0


@dataclass
class EvalReport:
    """Detection counts and rates; 0/0 rates are reported as 0."""

    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    mean_error_mm: float | None = None
    std_error_mm: float | None = None

    def to_dict(self):
        return asdict(self)


def _report(tp, fp, fn, dists_px, frame_px):
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    mean = std = None
    if dists_px and frame_px:
        mm = np.asarray(dists_px) * (FACE_DIAMETER_MM / frame_px)
        mean, std = float(mm.mean()), float(mm.std())
    return EvalReport(tp, fp, fn, prec, rec, f1, mean, std)


def detection_metrics(match: MatchResult, output_frame_px: int | None = 512) -> EvalReport:
    return _report(match.tp, match.fp, match.fn, [d for _, _, d in match.pairs], output_frame_px)


def pooled_metrics(matches, output_frame_px: int | None = None) -> EvalReport:
    """Corpus-level metrics: counts and TP distances pooled across images."""
    tp = sum(m.tp for m in matches)
    fp = sum(m.fp for m in matches)
    fn = sum(m.fn for m in matches)
    dists = [d for m in matches for _, _, d in m.pairs]
    return _report(tp, fp, fn, dists, output_frame_px)


@dataclass
class ArcheryReport:
    avg_score_pred: float | None = None
    avg_score_gt: float | None = None
    rel_error_pct: float | None = None
    signed_error_points: float | None = None
    centroid_error_mm: float | None = None

    def to_dict(self):
        return asdict(self)


def archery_metrics(pred_scorecard: TargetScorecard, gt_scorecard: TargetScorecard,
                    preds, gts, frame_size_px: int) -> ArcheryReport:
    rep = ArcheryReport(pred_scorecard.average, gt_scorecard.average)
    if rep.avg_score_pred is not None and rep.avg_score_gt is not None:
        rep.signed_error_points = rep.avg_score_pred - rep.avg_score_gt
        if rep.avg_score_gt:
            rep.rel_error_pct = abs(rep.signed_error_points) / rep.avg_score_gt * 100.0
    p = check_points(preds, "preds")
    g = check_points(gts, "gts")
    if len(p) and len(g):
        cp = px_to_mm_array(p, frame_size_px).mean(axis=0)
        cg = px_to_mm_array(g, frame_size_px).mean(axis=0)
        rep.centroid_error_mm = float(math.hypot(*(cp - cg)))
    return rep


GRID_COLUMNS = ("threshold", "kernel", "tp", "fp", "fn", "precision", "recall", "f1")


def _selection_key(row):
    return (row["f1"], row["precision"], -row["threshold"], -row["kernel"])


def grid_search_decoder(tensors, gts, base: DecoderConfig | None = None, radius_px: float = 15.0):
    """Exhaustive sweep over the 150 (threshold, kernel) decoder settings.

    F1 is computed from counts pooled over all images.  The best row maximises
    F1, then precision, then prefers the lower threshold and smaller kernel.
    Returns ``(best_config, rows)`` with rows in threshold-major order.
    """
    base = base or DecoderConfig()
    tensors, _ = check_heat_tensors(tensors)
    gts = list(gts)
    if len(tensors) != len(gts):
        raise InvalidInputError(f"{len(tensors)} heatmaps but {len(gts)} ground-truth lists")
    gts = [check_points(g, "gts") for g in gts]

    counts = {(t, k): [0, 0, 0] for t in GRID_THRESHOLDS for k in GRID_KERNELS}
    for tensor, gt in zip(tensors, gts):
        sweep = decode_sweep(tensor, GRID_THRESHOLDS, GRID_KERNELS, base.separation_px, base.use_offsets)
        for key, dets in sweep.items():
            m = match_detections([(d.x, d.y) for d in dets], gt, radius_px)
            c = counts[key]
            c[0] += m.tp
            c[1] += m.fp
            c[2] += m.fn

    rows = []
    for t in GRID_THRESHOLDS:
        for k in GRID_KERNELS:
            tp, fp, fn = counts[(t, k)]
            r = _report(tp, fp, fn, [], None)
            rows.append(dict(threshold=t, kernel=k, tp=tp, fp=fp, fn=fn,
                             precision=r.precision, recall=r.recall, f1=r.f1))
    best = max(rows, key=_selection_key)
    assert best["f1"] == max(r["f1"] for r in rows)
    cfg = DecoderConfig(best["threshold"], best["kernel"], base.separation_px, base.use_offsets)
    return cfg, rows


class DecoderGridSearch(BaseEstimator):
    """Tune the decoder threshold and NMS kernel on labelled heatmaps.

    After ``fit``: ``best_config_``, ``best_score_`` (pooled F1),
    ``cv_results_`` (the 150-row table) and ``best_estimator_``.
    """

    def __init__(self, separation_px=4.0, use_offsets=False, radius_px=15.0):
        self.separation_px = separation_px
        self.use_offsets = use_offsets
        self.radius_px = radius_px

    def fit(self, X, y):
        base = DecoderConfig(separation_px=self.separation_px, use_offsets=self.use_offsets)
        self.best_config_, self.cv_results_ = grid_search_decoder(X, y, base, self.radius_px)
        self.best_score_ = max(r["f1"] for r in self.cv_results_)
        c = self.best_config_
        self.best_estimator_ = HeatmapDecoder(c.threshold, c.nms_kernel, c.separation_px, c.use_offsets)
        return self

    def predict(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "best_estimator_")
        return self.best_estimator_.predict(X)
