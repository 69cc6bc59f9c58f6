"""Colour-boundary rectification of target photographs into the canonical frame.

Pipeline: sRGB -> CIELAB, cumulative colour-band masks, convex hull of each
mask, direct least-squares ellipse on the hull vertices, best nested subset of
boundary ellipses, then a per-angle radial warp anchored on those boundaries.

The warp is tabulated on ``n_angles`` canonical directions.  For each direction
it stores the source ray it maps to and the source radius at which the ray
crosses every detected boundary ellipse.  Rays and the radial parametrisation
between knots come from the plane-to-image homography implied by the nested
ellipses (concentric circles fix it up to an in-plane rotation), so perspective
foreshortening along a ray is followed rather than approximated by straight
segments.  When that homography is affine the model reduces to plain
piecewise-linear interpolation in millimetres through the knots.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares
from scipy.spatial import ConvexHull, QhullError
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_points, check_rgb_image
from .core import (
    CanonicalFrame,
    FitFailureError,
    InsufficientDataError,
    InvalidInputError,
    PointPx,
    RectificationFailure,
    TargetFaceSpec,
)

BOUNDARY_IDS = ("yellow_red", "red_blue", "blue_black", "black_white")
MIN_MASK_PIXELS = 50
INLIER_TOL_PX = 2.0
RATIO_TOLERANCE = 0.15
NESTING_SAMPLES = 720

# D65 reference white and the sRGB -> XYZ matrix (IEC 61966-2-1)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)


def rgb_to_lab(image) -> np.ndarray:
    """8-bit sRGB (H, W, 3) to CIELAB under D65, returned as float (H, W, 3) = (L, a, b)."""
    rgb = check_rgb_image(image).astype(float) / 255.0
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T / _WHITE_D65
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16) / 116)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116 * f[..., 1] - 16
    lab[..., 1] = 500 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200 * (f[..., 1] - f[..., 2])
    return lab


@dataclass(frozen=True)
class ColorThresholdConfig:
    """Per-class colour rules.  Hue ranges are degrees of ``atan2(b, a)``.

    The L limits move with the image: each is shifted by
    ``adaptive_gain * (median L - adaptive_reference_L)``.
    """

    yellow_hue: tuple = (70.0, 110.0)
    yellow_min_chroma: float = 30.0
    yellow_min_L: float = 50.0
    red_hue: tuple = (15.0, 55.0)
    red_min_chroma: float = 30.0
    blue_hue: tuple = (-130.0, -70.0)
    blue_min_chroma: float = 20.0
    black_max_L: float = 35.0
    black_max_chroma: float = 25.0
    white_min_L: float = 70.0
    white_max_chroma: float = 15.0
    adaptive_reference_L: float = 60.0
    adaptive_gain: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "ColorThresholdConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def classify_colors(lab: np.ndarray, cfg: ColorThresholdConfig | None = None) -> dict:
    """Boolean masks for the five face colours."""
    cfg = cfg or ColorThresholdConfig()
    L, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    chroma = np.hypot(a, b)
    hue = np.degrees(np.arctan2(b, a))
    shift = cfg.adaptive_gain * (float(np.median(L)) - cfg.adaptive_reference_L)

    def in_hue(rng):
        return (hue >= rng[0]) & (hue <= rng[1])

    return {
        "yellow": in_hue(cfg.yellow_hue) & (chroma > cfg.yellow_min_chroma) & (L > cfg.yellow_min_L + shift),
        "red": in_hue(cfg.red_hue) & (chroma > cfg.red_min_chroma),
        "blue": in_hue(cfg.blue_hue) & (chroma > cfg.blue_min_chroma),
        "black": (L < cfg.black_max_L + shift) & (chroma < cfg.black_max_chroma),
        "white": (L > cfg.white_min_L + shift) & (chroma < cfg.white_max_chroma),
    }


@dataclass
class BandMask:
    boundary_id: str
    mask: np.ndarray


def extract_band_masks(lab: np.ndarray, thresholds: ColorThresholdConfig | None = None) -> list[BandMask]:
    """Cumulative masks whose outer edges trace the four colour boundaries, inner to outer."""
    classes = classify_colors(lab, thresholds)
    box = np.ones((3, 3), dtype=bool)
    out = []
    acc = np.zeros(lab.shape[:2], dtype=bool)
    for bid, colour in zip(BOUNDARY_IDS, ("yellow", "red", "blue", "black")):
        acc = acc | classes[colour]
        m = ndimage.binary_opening(acc, structure=box)
        m = ndimage.binary_closing(m, structure=box, border_value=0)
        out.append(BandMask(bid, m))
    return out


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    phi: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.a, self.b, self.phi)
        if not all(math.isfinite(v) for v in vals) or not self.a >= self.b > 0:
            raise InvalidInputError(f"invalid ellipse {vals}")

    @property
    def mean_radius(self) -> float:
        return 0.5 * (self.a + self.b)

    @property
    def area(self) -> float:
        return math.pi * self.a * self.b

    def points(self, n: int = 360) -> np.ndarray:
        t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        c, s = math.cos(self.phi), math.sin(self.phi)
        x, y = self.a * np.cos(t), self.b * np.sin(t)
        return np.column_stack([self.cx + c * x - s * y, self.cy + s * x + c * y])

    def _local(self, pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        c, s = math.cos(self.phi), math.sin(self.phi)
        dx, dy = pts[:, 0] - self.cx, pts[:, 1] - self.cy
        return c * dx + s * dy, -s * dx + c * dy

    def implicit(self, pts) -> np.ndarray:
        """``(u/a)^2 + (v/b)^2`` in the ellipse frame; <= 1 inside."""
        u, v = self._local(pts)
        return (u / self.a) ** 2 + (v / self.b) ** 2

    def contains(self, pts) -> np.ndarray:
        return self.implicit(pts) <= 1.0

    def distance(self, pts) -> np.ndarray:
        """First-order geometric distance |F| / |grad F| of points to the curve."""
        u, v = self._local(pts)
        f = (u / self.a) ** 2 + (v / self.b) ** 2 - 1.0
        g = 2.0 * np.hypot(u / self.a**2, v / self.b**2)
        return np.abs(f) / np.maximum(g, 1e-12)

    def ray_distance(self, origin, angles) -> np.ndarray:
        """Distance from an interior ``origin`` to the curve along each angle."""
        ox, oy = float(origin[0]) - self.cx, float(origin[1]) - self.cy
        c, s = math.cos(self.phi), math.sin(self.phi)
        u0, v0 = c * ox + s * oy, -s * ox + c * oy
        ang = np.asarray(angles, dtype=float)
        du = c * np.cos(ang) + s * np.sin(ang)
        dv = -s * np.cos(ang) + c * np.sin(ang)
        A = (du / self.a) ** 2 + (dv / self.b) ** 2
        B = 2 * (u0 * du / self.a**2 + v0 * dv / self.b**2)
        C = (u0 / self.a) ** 2 + (v0 / self.b) ** 2 - 1.0
        if C >= 0:
            raise RectificationFailure("warp centre lies outside a boundary ellipse")
        return (-B + np.sqrt(B * B - 4 * A * C)) / (2 * A)

    def to_dict(self) -> dict:
        return dict(cx=self.cx, cy=self.cy, a=self.a, b=self.b, phi=self.phi)


def fit_conic_direct(x, y) -> np.ndarray:
    """Ellipse-specific least squares, ``4ac - b^2 = 1``, on conic ``ax^2+bxy+cy^2+dx+ey+f``.

    Solved through the reduced 3x3 generalised eigenproblem on the quadratic
    block; coordinates are centred and scaled first for conditioning.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size < 5:
        raise InsufficientDataError("need at least 5 points for an ellipse")
    mx, my = x.mean(), y.mean()
    sc = max(np.sqrt(np.mean((x - mx) ** 2 + (y - my) ** 2)), 1e-12)
    xn, yn = (x - mx) / sc, (y - my) / sc

    D1 = np.column_stack([xn * xn, xn * yn, yn * yn])
    D2 = np.column_stack([xn, yn, np.ones_like(xn)])
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise FitFailureError("collinear points") from exc
    M = S1 + S2 @ T
    M = np.array([M[2] / 2.0, -M[1], M[0] / 2.0])
    evals, evecs = np.linalg.eig(M)
    evecs = np.real(evecs)
    cond = 4 * evecs[0] * evecs[2] - evecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise FitFailureError("no elliptical solution")
    a1 = evecs[:, ok[np.argmin(np.abs(np.real(evals[ok])))]]
    A, B, C = a1
    Dn, En, Fn = T @ a1

    # undo the normalisation x = mx + sc * xn
    a, b, c = A / sc**2, B / sc**2, C / sc**2
    d = Dn / sc - 2 * a * mx - b * my
    e = En / sc - b * mx - 2 * c * my
    f = Fn + a * mx**2 + b * mx * my + c * my**2 - Dn * mx / sc - En * my / sc
    coef = np.array([a, b, c, d, e, f])
    disc = 4 * a * c - b * b
    return coef / np.sqrt(disc) if disc > 0 else coef


def conic_to_ellipse(coef) -> Ellipse:
    a, b, c, d, e, f = (float(v) for v in coef)
    disc = 4 * a * c - b * b
    if not disc > 0:
        raise FitFailureError("conic is not an ellipse")
    cx = (b * e - 2 * c * d) / disc
    cy = (b * d - 2 * a * e) / disc
    f0 = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f
    Q = np.array([[a, b / 2], [b / 2, c]])
    w, v = np.linalg.eigh(Q)
    if f0 == 0 or np.any(-f0 / w <= 0):
        raise FitFailureError("degenerate or imaginary ellipse")
    axes = np.sqrt(-f0 / w)
    i = int(np.argmax(axes))
    major = v[:, i]
    phi = math.atan2(major[1], major[0]) % math.pi
    return Ellipse(cx, cy, float(axes[i]), float(axes[1 - i]), phi)


def fit_ellipse_points(pts) -> Ellipse:
    pts = check_points(pts)
    return conic_to_ellipse(fit_conic_direct(pts[:, 0], pts[:, 1]))


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(np.argmax(sizes))


def fit_boundary_ellipse(mask) -> tuple[Ellipse, float]:
    """Fit the outer boundary of a band mask: convex hull, then direct ellipse fit.

    Only the largest 8-connected region is used so that detached specks (stray
    dark punctures in the white zone, lines outside the band) cannot stretch
    the hull.  Hull vertices further than 2 px from a first fit are dropped and
    the fit repeated.  Confidence is the final inlier fraction of all hull
    vertices times ``min(1, region area / ellipse area)``.
    """
    m = np.asarray(mask.mask if isinstance(mask, BandMask) else mask, dtype=bool)
    if int(m.sum()) < MIN_MASK_PIXELS:
        raise InsufficientDataError(f"mask has {int(m.sum())} foreground pixels, need {MIN_MASK_PIXELS}")
    region = _largest_component(m)
    area = int(region.sum())
    if area < MIN_MASK_PIXELS:
        raise InsufficientDataError("largest region too small")
    edge = region & ~ndimage.binary_erosion(region, structure=np.ones((3, 3)))
    rows, cols = np.nonzero(edge)
    pts = np.column_stack([cols + 0.5, rows + 0.5])
    try:
        hull = pts[ConvexHull(pts).vertices]
    except QhullError as exc:
        raise FitFailureError("degenerate hull") from exc
    if len(hull) < 5:
        raise FitFailureError("hull has fewer than 5 vertices")

    ell = fit_ellipse_points(hull)
    inl = ell.distance(hull) <= INLIER_TOL_PX
    for _ in range(3):
        if inl.all() or inl.sum() < 5:
            break
        ell = fit_ellipse_points(hull[inl])
        new = ell.distance(hull) <= INLIER_TOL_PX
        if np.array_equal(new, inl):
            break
        inl = new
    conf = float(inl.mean()) * min(1.0, area / ell.area)
    return ell, conf


@dataclass
class EllipseSet:
    entries: dict  # boundary_id -> (Ellipse, confidence)
    selected: list  # boundary ids, inner to outer

    def ellipse(self, bid) -> Ellipse:
        return self.entries[bid][0]

    def confidence(self, bid) -> float:
        return self.entries[bid][1]

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "entries": {k: {"ellipse": e.to_dict(), "confidence": c} for k, (e, c) in self.entries.items()},
        }


def is_nested(inner: Ellipse, outer: Ellipse, n: int = NESTING_SAMPLES) -> bool:
    return bool(np.all(outer.contains(inner.points(n))))


def _subset_valid(subset, radii_mm) -> bool:
    for (b0, e0, _), (b1, e1, _) in zip(subset, subset[1:]):
        if not is_nested(e0, e1):
            return False
        expected = radii_mm[b1] / radii_mm[b0]
        if abs((e1.mean_radius / e0.mean_radius) / expected - 1.0) > RATIO_TOLERANCE:
            return False
    return True


def select_nested_ellipses(candidates, spec: TargetFaceSpec | None = None) -> EllipseSet:
    """Highest-confidence subset of boundary ellipses that nests and has consistent radius ratios.

    Ties in total confidence go to the larger subset, then to the one reaching
    the larger boundary.
    """
    spec = spec or TargetFaceSpec()
    radii = spec.color_boundary_radii_mm
    cands = sorted(candidates, key=lambda c: radii[c[0]])
    ids = [c[0] for c in cands]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("duplicate boundary ids among candidates")
    entries = {bid: (ell, float(conf)) for bid, ell, conf in cands}
    if len(cands) < 2:
        raise RectificationFailure(f"need at least 2 boundary ellipses, found {len(cands)}")

    best, best_key = None, None
    for k in range(2, len(cands) + 1):
        for subset in itertools.combinations(cands, k):
            if not _subset_valid(subset, radii):
                continue
            key = (round(sum(c[2] for c in subset), 12), k, radii[subset[-1][0]])
            if best_key is None or key > best_key:
                best, best_key = subset, key
    if best is None:
        raise RectificationFailure("no nested, ratio-consistent pair of boundary ellipses")
    return EllipseSet(entries, [c[0] for c in best])


def detect_ellipses(image, thresholds: ColorThresholdConfig | None = None,
                    spec: TargetFaceSpec | None = None, return_masks: bool = False):
    """Run masks -> hull -> ellipse -> nested selection on an RGB image."""
    lab = rgb_to_lab(image)
    masks = extract_band_masks(lab, thresholds)
    cands = []
    for bm in masks:
        try:
            ell, conf = fit_boundary_ellipse(bm)
        except (InsufficientDataError, FitFailureError, InvalidInputError):
            continue
        cands.append((bm.boundary_id, ell, conf))
    eset = select_nested_ellipses(cands, spec)
    return (eset, masks) if return_masks else eset


def _homography_params_to_matrix(p):
    # source (normalised) -> canonical mm:  A @ (x / (1 + l.x) - t)
    t1, t2, l1, l2, a11, a12, a22 = p
    P = np.array([[1.0, 0, 0], [0, 1.0, 0], [l1, l2, 1.0]])
    T = np.array([[1.0, 0, -t1], [0, 1.0, -t2], [0, 0, 1.0]])
    A = np.array([[a11, a12, 0], [a12, a22, 0], [0, 0, 1.0]])
    return A @ T @ P


def _apply_h(H, pts):
    q = pts @ H[:, :2].T + H[:, 2]
    return q[:, :2] / q[:, 2:3]


def fit_rectifying_homography(eset: EllipseSet, spec: TargetFaceSpec | None = None,
                              samples: int = 180) -> np.ndarray:
    """Homography from source pixels to face millimetres mapping every selected ellipse
    onto its circle.

    The in-plane rotation is fixed by keeping the linear part symmetric, so
    the canonical orientation follows the photograph's axes.
    """
    spec = spec or TargetFaceSpec()
    radii = spec.color_boundary_radii_mm
    ells = [eset.ellipse(b) for b in eset.selected]
    w = np.array([max(eset.confidence(b), 1e-3) for b in eset.selected])
    centres = np.array([[e.cx, e.cy] for e in ells])
    c0 = (centres * w[:, None]).sum(0) / w.sum()
    outer = ells[-1]
    s0 = outer.mean_radius

    pts, r_mm, wt = [], [], []
    for e, b, wb in zip(ells, eset.selected, w):
        p = e.points(samples)
        pts.append((p - c0) / s0)
        r_mm.append(np.full(samples, radii[b]))
        wt.append(np.full(samples, math.sqrt(wb)))
    pts, r_mm, wt = np.vstack(pts), np.concatenate(r_mm), np.concatenate(wt)

    rb = radii[eset.selected[-1]]
    c, s = math.cos(outer.phi), math.sin(outer.phi)
    R = np.array([[c, -s], [s, c]])
    A0 = R @ np.diag([rb * s0 / outer.a, rb * s0 / outer.b]) @ R.T
    x0 = np.array([0.0, 0.0, 0.0, 0.0, A0[0, 0], A0[0, 1], A0[1, 1]])

    def resid(p):
        q = _apply_h(_homography_params_to_matrix(p), pts)
        return wt * (np.hypot(q[:, 0], q[:, 1]) - r_mm)

    sol = least_squares(resid, x0, method="lm", xtol=1e-12, ftol=1e-12)
    if not np.all(np.isfinite(sol.x)):
        raise RectificationFailure("homography fit diverged")
    Hn = _homography_params_to_matrix(sol.x)
    N = np.array([[1 / s0, 0, -c0[0] / s0], [0, 1 / s0, -c0[1] / s0], [0, 0, 1.0]])
    H = Hn @ N
    if np.linalg.det(H[:2, :2] - np.outer(H[:2, 2], H[2, :2])) <= 0:
        raise RectificationFailure("boundary ellipses imply a mirrored view")
    return H / H[2, 2]


@dataclass(frozen=True, eq=False)
class WarpMap:
    """Canonical (angle, radius) -> source pixel lookup.

    Row ``k`` of every table belongs to canonical angle ``2 pi k / n_angles``
    (measured about the canonical centre, +x right, +y down).  ``psi`` is the
    direction of the matching source ray from ``center_src``; ``radii_src`` the
    distance along it to each detected boundary.  Between knots the source
    radius is piecewise linear in ``u = ray_gain * r / (1 + ray_persp * r)``,
    the homography's prediction of the same distance, and beyond the outer knot
    the last segment's slope continues.
    """

    center_src: PointPx
    radii_src: np.ndarray  # (n_angles, n_boundaries) source px
    n_angles: int
    canonical: CanonicalFrame
    boundary_ids: tuple
    boundary_radii_mm: np.ndarray  # (n_boundaries,)
    psi: np.ndarray  # (n_angles,) source ray angle, unwrapped and increasing
    ray_gain: np.ndarray  # (n_angles,)
    ray_persp: np.ndarray  # (n_angles,)
    knots_u: np.ndarray  # (n_angles, n_boundaries)
    homography: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (2 * np.pi / self.n_angles)

    def to_dict(self) -> dict:
        return {
            "center_src": list(self.center_src),
            "n_angles": self.n_angles,
            "canonical_size_px": self.canonical.size_px,
            "boundary_ids": list(self.boundary_ids),
            "boundary_radii_mm": self.boundary_radii_mm.tolist(),
            "homography_src_px_to_mm": self.homography.tolist(),
            "psi": self.psi.tolist(),
            "ray_gain": self.ray_gain.tolist(),
            "ray_persp": self.ray_persp.tolist(),
            "radii_src": self.radii_src.tolist(),
            "knots_u": self.knots_u.tolist(),
        }

    # -- radial model ---------------------------------------------------
    def _u(self, k, r_mm):
        den = 1.0 + self.ray_persp[k] * r_mm
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.ray_gain[k] * r_mm / den
        return np.where(den > 1e-6, u, np.inf)

    def _radius_on_row(self, k, r_mm):
        """Source radius along table row(s) ``k`` for canonical radius ``r_mm`` (broadcast)."""
        u = self._u(k, r_mm)
        ku = self.knots_u[k]
        ks = self.radii_src[k]
        nb = ku.shape[-1]
        zero = np.zeros(ku.shape[:-1] + (1,))
        U = np.concatenate([zero, ku], axis=-1)
        S = np.concatenate([zero, ks], axis=-1)
        seg = np.sum(u[..., None] > U[..., 1:nb], axis=-1)  # 0 .. nb-1
        u0 = np.take_along_axis(U, seg[..., None], -1)[..., 0]
        u1 = np.take_along_axis(U, seg[..., None] + 1, -1)[..., 0]
        s0 = np.take_along_axis(S, seg[..., None], -1)[..., 0]
        s1 = np.take_along_axis(S, seg[..., None] + 1, -1)[..., 0]
        return s0 + (u - u0) * (s1 - s0) / (u1 - u0)

    def _angle_rows(self, theta):
        t = np.mod(theta, 2 * np.pi) * (self.n_angles / (2 * np.pi))
        k0 = np.floor(t).astype(int) % self.n_angles
        w = t - np.floor(t)
        k1 = (k0 + 1) % self.n_angles
        psi1 = self.psi[k1] + np.where(k1 == 0, 2 * np.pi, 0.0)
        psi = (1 - w) * self.psi[k0] + w * psi1
        return k0, k1, w, psi

    def source_points(self, theta, r_mm) -> np.ndarray:
        """Source pixel positions for canonical polar coordinates (arrays broadcast)."""
        theta, r_mm = np.broadcast_arrays(np.asarray(theta, float), np.asarray(r_mm, float))
        k0, k1, w, psi = self._angle_rows(theta)
        R = (1 - w) * self._radius_on_row(k0, r_mm) + w * self._radius_on_row(k1, r_mm)
        cx, cy = self.center_src
        return np.stack([cx + R * np.cos(psi), cy + R * np.sin(psi)], axis=-1)

    def canonical_polar(self, src_pts):
        """Invert :meth:`source_points`: source pixels -> (theta, r_mm)."""
        pts = check_points(src_pts)
        cx, cy = self.center_src
        dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
        dist = np.hypot(dx, dy)
        ang = np.arctan2(dy, dx)
        psi_ext = np.append(self.psi, self.psi[0] + 2 * np.pi)
        ang = self.psi[0] + np.mod(ang - self.psi[0], 2 * np.pi)
        k0 = np.clip(np.searchsorted(psi_ext, ang, side="right") - 1, 0, self.n_angles - 1)
        w = (ang - psi_ext[k0]) / (psi_ext[k0 + 1] - psi_ext[k0])
        theta = (k0 + w) * (2 * np.pi / self.n_angles)
        k1 = (k0 + 1) % self.n_angles

        def radius(r):
            return (1 - w) * self._radius_on_row(k0, r) + w * self._radius_on_row(k1, r)

        lo = np.zeros_like(dist)
        hi = np.full_like(dist, 2.0 * self.canonical.size_px * self.canonical.mm_per_px)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            below = radius(mid) < dist
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        r = 0.5 * (lo + hi)
        r = np.where(dist == 0, 0.0, r)
        return np.mod(theta, 2 * np.pi), r


def build_radial_warp(eset: EllipseSet, canonical: CanonicalFrame | None = None,
                      spec: TargetFaceSpec | None = None, n_angles: int = 720,
                      homography: np.ndarray | None = None) -> WarpMap:
    canonical = canonical or CanonicalFrame()
    spec = spec or TargetFaceSpec()
    if n_angles < 180:
        raise InvalidInputError("n_angles must be >= 180")
    if len(eset.selected) < 2:
        raise RectificationFailure("need at least 2 selected boundaries")
    H = fit_rectifying_homography(eset, spec) if homography is None else np.asarray(homography, float)
    G = np.linalg.inv(H)
    G = G / G[2, 2]
    M, t, wv = G[:2, :2], G[:2, 2], G[2, :2]
    centre = PointPx(float(t[0]), float(t[1]))

    theta = np.arange(n_angles) * (2 * np.pi / n_angles)
    e = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    we = e @ wv
    D = e @ M.T - we[:, None] * t[None, :]
    gain = np.hypot(D[:, 0], D[:, 1])
    psi = np.unwrap(np.arctan2(D[:, 1], D[:, 0]))
    psi = psi - 2 * np.pi * np.floor((psi[0] + np.pi) / (2 * np.pi))
    if not np.all(np.diff(psi) > 0) or psi[-1] - psi[0] >= 2 * np.pi:
        raise RectificationFailure("source ray directions are not monotone")

    radii_mm = np.array([spec.color_boundary_radii_mm[b] for b in eset.selected])
    radii_src = np.column_stack([eset.ellipse(b).ray_distance(centre, psi) for b in eset.selected])
    den = 1.0 + we[:, None] * radii_mm[None, :]
    if np.any(den <= 1e-6):
        raise RectificationFailure("vanishing line crosses the detected boundaries")
    knots_u = gain[:, None] * radii_mm[None, :] / den
    if not (np.all(np.diff(radii_src, axis=1) > 0) and np.all(np.diff(knots_u, axis=1) > 0)):
        raise RectificationFailure("boundary radii are not increasing along every ray")

    arrays = dict(radii_src=radii_src, boundary_radii_mm=radii_mm, psi=psi, ray_gain=gain,
                  ray_persp=we, knots_u=knots_u, homography=H)
    for a in arrays.values():
        a.setflags(write=False)
    return WarpMap(center_src=centre, n_angles=n_angles, canonical=canonical,
                   boundary_ids=tuple(eset.selected), **arrays)


def rectify_image(image, warp: WarpMap, chunk_rows: int = 128) -> np.ndarray:
    """Resample ``image`` into the canonical frame described by ``warp``; white fill outside."""
    img = check_rgb_image(image)
    n = warp.canonical.size_px
    mpp = warp.canonical.mm_per_px
    out = np.empty((n, n, 3), dtype=np.uint8)
    planes = [img[..., ch].astype(float) for ch in range(3)]
    xs = (np.arange(n) + 0.5 - n / 2) * mpp
    for r0 in range(0, n, chunk_rows):
        ys = (np.arange(r0, min(n, r0 + chunk_rows)) + 0.5 - n / 2) * mpp
        X, Y = np.meshgrid(xs, ys)
        src = warp.source_points(np.arctan2(Y, X), np.hypot(X, Y))
        coords = [src[..., 1].ravel() - 0.5, src[..., 0].ravel() - 0.5]
        for ch, plane in enumerate(planes):
            v = ndimage.map_coordinates(plane, coords, order=1, mode="constant", cval=255.0, prefilter=False)
            out[r0 : r0 + len(ys), :, ch] = np.clip(np.rint(v), 0, 255).reshape(X.shape)
    return out


def map_points(warp: WarpMap, src_pts) -> np.ndarray:
    """Source pixels -> canonical pixels (vectorised :func:`map_point`)."""
    theta, r = warp.canonical_polar(src_pts)
    n = warp.canonical.size_px
    rp = r / warp.canonical.mm_per_px
    return np.column_stack([n / 2 + rp * np.cos(theta), n / 2 + rp * np.sin(theta)])


def map_point(warp: WarpMap, p) -> PointPx:
    cx, cy = warp.center_src
    if float(p[0]) == cx and float(p[1]) == cy:
        return warp.canonical.center
    q = map_points(warp, [p])[0]
    return PointPx(float(q[0]), float(q[1]))


class TargetRectifier(BaseEstimator, TransformerMixin):
    """Estimate the warp from one photograph (``fit``) and resample into the canonical frame.

    Fitted attributes: ``ellipse_set_``, ``warp_``.
    """

    def __init__(self, size_px=2048, n_angles=720, thresholds=None, shaft_diameter_mm=4.5):
        self.size_px = size_px
        self.n_angles = n_angles
        self.thresholds = thresholds
        self.shaft_diameter_mm = shaft_diameter_mm

    def fit(self, X, y=None):
        spec = TargetFaceSpec(shaft_diameter_mm=self.shaft_diameter_mm)
        self.ellipse_set_, self.band_masks_ = detect_ellipses(X, self.thresholds, spec, return_masks=True)
        self.warp_ = build_radial_warp(self.ellipse_set_, CanonicalFrame(self.size_px), spec, self.n_angles)
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "warp_")
        return rectify_image(X, self.warp_)

    def transform_points(self, points) -> np.ndarray:
        """Source pixel coordinates -> canonical pixel coordinates."""
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "warp_")
        return map_points(self.warp_, points)
