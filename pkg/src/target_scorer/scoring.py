"""Line-cutting arrow scores and per-target scorecards."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import Detection, InvalidInputError, TargetFaceSpec, px_to_mm


def score_arrow(distance_mm: float, spec: TargetFaceSpec | None = None) -> int:
    """Score for an arrow whose shaft centre lies ``distance_mm`` from the face centre.

    The shaft radius is subtracted first, so a shaft touching a line earns the
    higher of the two adjacent rings.  A boundary value belongs to the inner ring.
    """
    spec = spec or TargetFaceSpec()
    if not math.isfinite(distance_mm) or distance_mm < 0:
        raise InvalidInputError(f"distance must be finite and >= 0, got {distance_mm}")
    e = distance_mm - spec.shaft_radius_mm
    if e <= 0:
        return spec.ring_count
    if e > spec.face_radius_mm:
        return 0
    w = spec.ring_width_mm
    k = max(1, math.ceil(e / w))
    # e / w can round onto an integer; settle with exact comparisons
    if e > k * w:
        k += 1
    elif k > 1 and e <= (k - 1) * w:
        k -= 1
    return spec.ring_count + 1 - k


@dataclass(frozen=True)
class ArrowScore:
    detection: Detection
    distance_mm: float
    effective_mm: float
    score: int


@dataclass
class TargetScorecard:
    arrows: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(a.score for a in self.arrows)

    @property
    def average(self) -> float | None:
        return self.total / len(self.arrows) if self.arrows else None

    @property
    def scores(self) -> list[int]:
        return [a.score for a in self.arrows]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "average": self.average,
            "count": len(self.arrows),
            "arrows": [
                {
                    "x": a.detection.x,
                    "y": a.detection.y,
                    "distance_mm": a.distance_mm,
                    "effective_mm": a.effective_mm,
                    "score": a.score,
                }
                for a in self.arrows
            ],
        }


def score_detections(detections, frame_size_px: int, spec: TargetFaceSpec | None = None) -> TargetScorecard:
    spec = spec or TargetFaceSpec()
    arrows = []
    for det in detections:
        if not isinstance(det, Detection):
            det = Detection(float(det[0]), float(det[1]), 1.0)
        mm = px_to_mm((det.x, det.y), frame_size_px)
        dist = math.hypot(mm.x, mm.y)
        arrows.append(ArrowScore(det, dist, dist - spec.shaft_radius_mm, score_arrow(dist, spec)))
    return TargetScorecard(arrows)
