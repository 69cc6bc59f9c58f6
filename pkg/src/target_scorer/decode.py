"""Heatmap logits to arrow detections: sigmoid, max-pool NMS, offsets, separation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.special import expit
from sklearn.base import BaseEstimator

from ._validation import check_heat_tensors
from .core import Detection, InvalidInputError
from .heatmap import HeatTensor

GRID_THRESHOLDS = tuple(float(t) for t in np.linspace(0.01, 0.4, 10))
GRID_KERNELS = tuple(range(3, 32, 2))


@dataclass(frozen=True)
class DecoderConfig:
    threshold: float = 0.5
    nms_kernel: int = 15
    separation_px: float = 4.0
    use_offsets: bool = False

    def __post_init__(self):
        if int(self.nms_kernel) != self.nms_kernel or self.nms_kernel < 3 or self.nms_kernel % 2 == 0:
            raise InvalidInputError(f"nms_kernel must be an odd integer >= 3, got {self.nms_kernel}")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidInputError("threshold must lie in (0, 1)")
        if self.separation_px < 0:
            raise InvalidInputError("separation_px must be >= 0")


def nms_peaks(probs, kernel: int):
    """Pixels equal to the maximum of their ``kernel`` x ``kernel`` window.

    Windows are clipped at the borders and plateau ties are all kept.
    Returns a list of ``(x, y, confidence)`` at pixel centres in row-major order.
    """
    probs = np.asarray(probs, dtype=float)
    if kernel % 2 == 0 or kernel < 1:
        raise InvalidInputError(f"NMS kernel must be odd, got {kernel}")
    if kernel > min(probs.shape):
        raise InvalidInputError(f"kernel {kernel} larger than grid {probs.shape}")
    pooled = maximum_filter(probs, size=kernel, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero(probs == pooled)
    return [(c + 0.5, r + 0.5, float(probs[r, c])) for r, c in zip(rows, cols)]


def _peak_arrays(probs, kernel):
    pooled = maximum_filter(probs, size=kernel, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero(probs == pooled)
    return rows, cols, probs[rows, cols]


def _finish(rows, cols, conf, tensor: HeatTensor, config: DecoderConfig):
    keep = conf >= config.threshold
    rows, cols, conf = rows[keep], cols[keep], conf[keep]
    x = cols + 0.5
    y = rows + 0.5
    refined = config.use_offsets
    if refined:
        x = x + tensor.offsets[0, rows, cols]
        y = y + tensor.offsets[1, rows, cols]
        x = np.clip(x, 0.0, np.nextafter(tensor.width, 0))
        y = np.clip(y, 0.0, np.nextafter(tensor.height, 0))

    # rows/cols arrive in row-major order, so a stable sort on -conf breaks ties row-major
    order = np.argsort(-conf, kind="stable")
    sep2 = config.separation_px**2
    kept: list[int] = []
    for i in order:
        if sep2 > 0 and kept:
            d2 = (x[kept] - x[i]) ** 2 + (y[kept] - y[i]) ** 2
            if np.any(d2 <= sep2):
                continue
        kept.append(i)
    return [Detection(float(x[i]), float(y[i]), float(conf[i]), refined) for i in kept]


def decode(tensor: HeatTensor, config: DecoderConfig | None = None) -> list[Detection]:
    """Decode one head output into detections sorted by descending confidence."""
    config = config or DecoderConfig()
    if config.use_offsets and tensor.offsets is None:
        raise InvalidInputError("offsets absent")
    if config.nms_kernel > min(tensor.height, tensor.width):
        raise InvalidInputError(f"kernel {config.nms_kernel} larger than grid")
    probs = expit(tensor.logits)
    rows, cols, conf = _peak_arrays(probs, config.nms_kernel)
    return _finish(rows, cols, conf, tensor, config)


def decode_sweep(tensor: HeatTensor, thresholds, kernels, separation_px=4.0, use_offsets=False):
    """Decode once per (threshold, kernel) pair, sharing the NMS pass across thresholds.

    Returns ``{(threshold, kernel): [Detection, ...]}``.
    """
    if use_offsets and tensor.offsets is None:
        raise InvalidInputError("offsets absent")
    probs = expit(tensor.logits)
    out = {}
    for k in kernels:
        rows, cols, conf = _peak_arrays(probs, k)
        for t in thresholds:
            cfg = DecoderConfig(t, k, separation_px, use_offsets)
            out[(t, k)] = _finish(rows, cols, conf, tensor, cfg)
    return out


def grid_candidates(separation_px: float = 4.0, use_offsets: bool = False) -> list[DecoderConfig]:
    """The 150 decoder settings searched after training, threshold-major."""
    return [DecoderConfig(t, k, separation_px, use_offsets) for t in GRID_THRESHOLDS for k in GRID_KERNELS]


class HeatmapDecoder(BaseEstimator):
    """Stateless decoder with an sklearn-style surface.

    ``predict`` needs no fitting; use :class:`target_scorer.evaluate.DecoderGridSearch`
    to tune ``threshold`` and ``nms_kernel`` against ground truth.
    """

    def __init__(self, threshold=0.5, nms_kernel=15, separation_px=4.0, use_offsets=False):
        self.threshold = threshold
        self.nms_kernel = nms_kernel
        self.separation_px = separation_px
        self.use_offsets = use_offsets

    @property
    def config(self) -> DecoderConfig:
        return DecoderConfig(self.threshold, self.nms_kernel, self.separation_px, self.use_offsets)

    def fit(self, X=None, y=None):
        return self

    def predict(self, X):
        tensors, single = check_heat_tensors(X)
        cfg = self.config
        out = [decode(t, cfg) for t in tensors]
        return out[0] if single else out

    def score(self, X, y, radius_px=15.0):
        """Pooled F1 of the decoded detections against ground-truth point lists."""
        from .evaluate import match_detections, pooled_metrics

        tensors, single = check_heat_tensors(X)
        gts = [y] if single else list(y)
        if len(gts) != len(tensors):
            raise InvalidInputError("X and y differ in length")
        matches = [
            match_detections([(d.x, d.y) for d in dets], gt, radius_px)
            for dets, gt in zip(self.predict(tensors), gts)
        ]
        return pooled_metrics(matches).f1

