"""Archery target scoring: rectification, heatmap decoding, scoring and evaluation."""

from .core import (
    FACE_DIAMETER_MM,
    CanonicalFrame,
    Detection,
    FitFailureError,
    InsufficientDataError,
    InvalidInputError,
    NumericFailure,
    PointMm,
    PointPx,
    RectificationFailure,
    TargetFaceSpec,
    mm_to_px,
    px_to_mm,
)
from .decode import DecoderConfig, HeatmapDecoder, decode, nms_peaks
from .evaluate import (
    DecoderGridSearch,
    archery_metrics,
    detection_metrics,
    grid_search_decoder,
    hungarian,
    match_detections,
)
from .heatmap import HeatTarget, HeatTensor, LossParams, focal_loss, offset_loss, render_target, total_loss
from .rectify import TargetRectifier, WarpMap, build_radial_warp, map_point, rectify_image
from .scoring import TargetScorecard, score_arrow, score_detections
from .synth import SynthCase, generate_case

__version__ = "0.1.0"

__all__ = [
    "FACE_DIAMETER_MM", "CanonicalFrame", "Detection", "FitFailureError", "InsufficientDataError",
    "InvalidInputError", "NumericFailure", "PointMm", "PointPx", "RectificationFailure", "TargetFaceSpec",
    "mm_to_px", "px_to_mm", "DecoderConfig", "HeatmapDecoder", "decode", "nms_peaks", "DecoderGridSearch",
    "archery_metrics", "detection_metrics", "grid_search_decoder", "hungarian", "match_detections",
    "HeatTarget", "HeatTensor", "LossParams", "focal_loss", "offset_loss", "render_target", "total_loss",
    "TargetRectifier", "WarpMap", "build_radial_warp", "map_point", "rectify_image", "TargetScorecard",
    "score_arrow", "score_detections", "SynthCase", "generate_case",
]
