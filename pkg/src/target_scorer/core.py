"""Target-face geometry, frames and the small value types shared by every stage.

Coordinates follow one convention everywhere: pixel index ``p`` spans the
continuous interval ``[p, p + 1)``, so a frame of ``N`` pixels has its centre
at ``N / 2``.  Physical lengths are millimetres, +x right and +y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

FACE_DIAMETER_MM = 400.0


class InvalidInputError(ValueError):
    """Input violates an operation's precondition."""


class InsufficientDataError(ValueError):
    """Too little data to run a fit."""


class FitFailureError(RuntimeError):
    """A fit converged to a degenerate model."""


class RectificationFailure(RuntimeError):
    """The image cannot be mapped into the canonical frame."""


class NumericFailure(RuntimeError):
    """An iterative computation produced non-finite values."""


class PointPx(NamedTuple):
    x: float
    y: float


class PointMm(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class TargetFaceSpec:
    """Ring geometry of the 40 cm indoor face."""

    ring_count: int = 10
    ring_width_mm: float = 20.0
    shaft_diameter_mm: float = 4.5
    color_boundary_radii_mm: dict = field(
        default_factory=lambda: {
            "yellow_red": 40.0,
            "red_blue": 80.0,
            "blue_black": 120.0,
            "black_white": 160.0,
        }
    )

    def __post_init__(self):
        if self.ring_count < 1 or self.ring_width_mm <= 0:
            raise InvalidInputError("ring_count and ring_width_mm must be positive")
        if not self.shaft_diameter_mm > 0:
            raise InvalidInputError("shaft_diameter_mm must be > 0")
        radii = self.boundary_radii_mm
        for name, r in self.color_boundary_radii_mm.items():
            if not any(math.isclose(r, b) for b in radii):
                raise InvalidInputError(f"color boundary {name} at {r} mm is not a ring boundary")

    @property
    def face_radius_mm(self) -> float:
        return self.ring_count * self.ring_width_mm

    @property
    def boundary_radii_mm(self) -> tuple[float, ...]:
        return tuple((i + 1) * self.ring_width_mm for i in range(self.ring_count))

    @property
    def shaft_radius_mm(self) -> float:
        return self.shaft_diameter_mm / 2.0


@dataclass(frozen=True)
class CanonicalFrame:
    """Square metric frame covering the full 400 mm face."""

    size_px: int = 2048

    def __post_init__(self):
        if self.size_px < 64 or self.size_px % 2:
            raise InvalidInputError("size_px must be even and >= 64")

    @property
    def mm_per_px(self) -> float:
        return FACE_DIAMETER_MM / self.size_px

    @property
    def center(self) -> PointPx:
        c = self.size_px / 2.0
        return PointPx(c, c)


@dataclass(frozen=True)
class Detection:
    """An arrow centre found by the decoder, in decoder-frame pixels."""

    x: float
    y: float
    confidence: float
    refined: bool = False

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(f"confidence {self.confidence} outside [0, 1]")


def _check_frame(frame_size_px) -> float:
    if not frame_size_px > 0:
        raise InvalidInputError("frame_size_px must be positive")
    return float(frame_size_px)


def px_to_mm(p, frame_size_px: int) -> PointMm:
    """Pixel position in an ``N``-pixel frame to millimetres about the face centre."""
    n = _check_frame(frame_size_px)
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InvalidInputError("non-finite point")
    half = n / 2.0
    return PointMm((x - half) * FACE_DIAMETER_MM / n, (y - half) * FACE_DIAMETER_MM / n)


def mm_to_px(p, frame_size_px: int) -> PointPx:
    n = _check_frame(frame_size_px)
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InvalidInputError("non-finite point")
    half = n / 2.0
    return PointPx(x * n / FACE_DIAMETER_MM + half, y * n / FACE_DIAMETER_MM + half)


def px_to_mm_array(points, frame_size_px: int) -> np.ndarray:
    """Vectorised :func:`px_to_mm` for an ``(n, 2)`` array."""
    n = _check_frame(frame_size_px)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("non-finite point")
    return (pts - n / 2.0) * (FACE_DIAMETER_MM / n)


def mm_to_px_array(points, frame_size_px: int) -> np.ndarray:
    n = _check_frame(frame_size_px)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("non-finite point")
    return pts * (n / FACE_DIAMETER_MM) + n / 2.0


def ring_outer_radius_mm(score: int, spec: TargetFaceSpec | None = None) -> float:
    spec = spec or TargetFaceSpec()
    if isinstance(score, bool) or int(score) != score or not 1 <= score <= spec.ring_count:
        raise InvalidInputError(f"score must be an integer in [1, {spec.ring_count}], got {score!r}")
    return (spec.ring_count + 1 - int(score)) * spec.ring_width_mm
