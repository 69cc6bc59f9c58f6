"""Synthetic target photographs with exact ground truth.

A face is rendered in the canonical frame, arrow holes are punched at known
millimetre positions, and the result is projected through a pinhole-camera
homography.  Everything derives from one integer seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import check_points, check_rgb_image
from .core import CanonicalFrame, InvalidInputError, PointMm, TargetFaceSpec, mm_to_px_array

BAND_COLORS = {
    "yellow": (250, 215, 20),
    "red": (228, 32, 44),
    "blue": (0, 158, 222),
    "black": (34, 34, 36),
    "white": (246, 245, 240),
}
SURROUND = (228, 224, 212)
LINE_DARK = (40, 40, 40)
LINE_LIGHT = (205, 205, 205)
LINE_WIDTH_MM = 0.5
HOLE_COLOR = (18, 16, 14)
HOLE_RIM = (150, 140, 128)


def _band_of_radius(r_mm: np.ndarray, spec: TargetFaceSpec) -> np.ndarray:
    edges = np.array([spec.color_boundary_radii_mm[b] for b in
                      ("yellow_red", "red_blue", "blue_black", "black_white")] + [spec.face_radius_mm])
    return np.searchsorted(edges, r_mm, side="left")  # 0..4 on the face, 5 outside


def _radius_grid(frame: CanonicalFrame) -> np.ndarray:
    n = frame.size_px
    c = (np.arange(n) + 0.5 - n / 2) * frame.mm_per_px
    return np.hypot(c[None, :], c[:, None])


def render_canonical_target(spec: TargetFaceSpec | None = None, frame: CanonicalFrame | None = None) -> np.ndarray:
    """Render the face in the canonical frame (uint8 RGB).

    Colours change at the four colour boundaries and the face edge, with a
    one-pixel linear blend.  Thin ring lines are drawn at the scoring
    boundaries that fall inside a colour band (dark, or light on black); the
    colour changes themselves carry no extra line so that band edges stay put.
    The image depends only on each pixel centre's radius, so it is exactly
    symmetric under 90 degree rotations.
    """
    spec = spec or TargetFaceSpec()
    frame = frame or CanonicalFrame()
    r = _radius_grid(frame)
    palette = np.array([BAND_COLORS[k] for k in ("yellow", "red", "blue", "black", "white")] + [SURROUND], float)
    edges = [spec.color_boundary_radii_mm[b] for b in ("yellow_red", "red_blue", "blue_black", "black_white")]
    edges.append(spec.face_radius_mm)

    band = _band_of_radius(r, spec)
    img = palette[band]
    mpp = frame.mm_per_px
    # antialias the colour transitions over one pixel
    for i, e in enumerate(edges):
        w = np.clip((r - e) / mpp + 0.5, 0.0, 1.0)
        near = (w > 0) & (w < 1)
        if np.any(near):
            img[near] = (1 - w[near, None]) * palette[i] + w[near, None] * palette[i + 1]

    colour_edges = set(edges[:-1])
    half = LINE_WIDTH_MM / 2
    for k in range(1, spec.ring_count + 1):
        rl = k * spec.ring_width_mm
        if rl in colour_edges:
            continue
        if rl >= spec.face_radius_mm:
            rl = spec.face_radius_mm - half  # keep the outer line on the face
        cov = np.clip((half - np.abs(r - rl)) / mpp + 0.5, 0.0, 1.0)
        hit = cov > 0
        if not np.any(hit):
            continue
        under = band[hit]
        line = np.where((under == 3)[:, None], np.array(LINE_LIGHT, float), np.array(LINE_DARK, float))
        img[hit] = (1 - cov[hit, None]) * img[hit] + cov[hit, None] * line
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def punch_holes(image, points, spec: TargetFaceSpec | None = None, frame: CanonicalFrame | None = None,
                seed: int = 0) -> np.ndarray:
    """Stamp arrow holes at ``points`` (PointMm about the face centre) into a canonical image.

    Each hole is an elliptical dark core of the shaft radius scaled by a seeded
    factor in [0.8, 1.2], ringed by a 1 px lighter torn rim.  Holes are first
    composited among themselves by channel-wise minimum, then pasted.
    """
    spec = spec or TargetFaceSpec()
    frame = frame or CanonicalFrame()
    img = check_rgb_image(image).copy()
    pts = check_points(points, "points")
    if len(pts) == 0:
        return img
    if img.shape[:2] != (frame.size_px, frame.size_px):
        raise InvalidInputError("image does not match the canonical frame")
    rng = np.random.default_rng(seed)
    n = frame.size_px
    centres = mm_to_px_array(pts, n)
    layer = np.full(img.shape, 255.0)
    touched = np.zeros(img.shape[:2], dtype=bool)
    r0 = spec.shaft_radius_mm / frame.mm_per_px
    for (cx, cy) in centres:
        scale = rng.uniform(0.8, 1.2, size=2)
        ang = rng.uniform(0, np.pi)
        a, b = r0 * scale
        reach = int(math.ceil(max(a, b) + 2))
        x0, x1 = max(0, int(cx) - reach), min(n, int(cx) + reach + 1)
        y0, y1 = max(0, int(cy) - reach), min(n, int(cy) + reach + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1) + 0.5 - cx
        ys = np.arange(y0, y1) + 0.5 - cy
        X, Y = np.meshgrid(xs, ys)
        c, s = math.cos(ang), math.sin(ang)
        u, v = c * X + s * Y, -s * X + c * Y
        core = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        rim = ((u / (a + 1)) ** 2 + (v / (b + 1)) ** 2 <= 1.0) & ~core
        stamp = np.full(X.shape + (3,), 255.0)
        stamp[rim] = HOLE_RIM
        stamp[core] = HOLE_COLOR
        sl = (slice(y0, y1), slice(x0, x1))
        np.minimum(layer[sl], stamp, out=layer[sl])
        touched[sl] |= core | rim
    img[touched] = layer[touched].astype(np.uint8)
    return img


def _invert(H) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.shape != (3, 3) or not np.all(np.isfinite(H)):
        raise InvalidInputError("homography must be a finite 3x3 matrix")
    if abs(np.linalg.det(H)) <= 1e-9:
        raise InvalidInputError("homography is singular")
    return np.linalg.inv(H)


def map_points_h(H, points) -> np.ndarray:
    """Apply a homography to (x, y) pixel points."""
    pts = check_points(points)
    H = np.asarray(H, dtype=float)
    q = pts @ H[:, :2].T + H[:, 2]
    return q[:, :2] / q[:, 2:3]


def apply_homography(image, H, out_size=None, chunk_rows: int = 256) -> np.ndarray:
    """Warp ``image`` by ``H`` (source px -> output px) with bilinear inverse sampling and white fill.

    ``out_size`` is (width, height); defaults to the input size.
    """
    img = check_rgb_image(image)
    Hi = _invert(H)
    Hi = Hi / Hi[2, 2] if Hi[2, 2] != 0 else Hi
    w, h = out_size if out_size is not None else (img.shape[1], img.shape[0])
    if np.allclose(Hi, np.eye(3), rtol=0, atol=0) and (w, h) == (img.shape[1], img.shape[0]):
        return img.copy()
    out = np.empty((h, w, 3), dtype=np.uint8)
    planes = [img[..., ch].astype(float) for ch in range(3)]
    xs = np.arange(w) + 0.5
    for r0 in range(0, h, chunk_rows):
        ys = np.arange(r0, min(h, r0 + chunk_rows)) + 0.5
        X, Y = np.meshgrid(xs, ys)
        den = Hi[2, 0] * X + Hi[2, 1] * Y + Hi[2, 2]
        sx = (Hi[0, 0] * X + Hi[0, 1] * Y + Hi[0, 2]) / den
        sy = (Hi[1, 0] * X + Hi[1, 1] * Y + Hi[1, 2]) / den
        bad = den <= 0
        coords = [np.where(bad, -10.0, sy).ravel() - 0.5, np.where(bad, -10.0, sx).ravel() - 0.5]
        for ch, plane in enumerate(planes):
            v = ndimage.map_coordinates(plane, coords, order=1, mode="constant", cval=255.0, prefilter=False)
            out[r0 : r0 + len(ys), :, ch] = np.clip(np.rint(v), 0, 255).reshape(X.shape)
    return out


def camera_homography(frame: CanonicalFrame, out_size, tilt_deg: float, tilt_axis_deg: float,
                      roll_deg: float, distance_mm: float, fill: float = 0.75,
                      principal_shift=(0.0, 0.0)) -> np.ndarray:
    """Pinhole view of the face plane: canonical px -> image px.

    The camera looks at the face centre from ``distance_mm`` after tilting the
    plane by ``tilt_deg`` about an in-plane axis at ``tilt_axis_deg``; the focal
    length makes the untilted face span ``fill`` of the smaller output side.
    """
    w, h = out_size
    n = frame.size_px
    mpp = frame.mm_per_px
    to_mm = np.array([[mpp, 0, -n / 2 * mpp], [0, mpp, -n / 2 * mpp], [0, 0, 1.0]])

    def rot_z(t):
        c, s = math.cos(t), math.sin(t)
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])

    ax = math.radians(tilt_axis_deg)
    tau = math.radians(tilt_deg)
    c, s = math.cos(tau), math.sin(tau)
    tilt = rot_z(ax) @ np.array([[1, 0, 0], [0, c, -s], [0, s, c]]) @ rot_z(-ax)
    R = tilt @ rot_z(math.radians(roll_deg))
    f = fill * min(w, h) * distance_mm / (2 * FACE_RADIUS_DEFAULT)
    K = np.array([[f, 0, w / 2 + principal_shift[0]], [0, f, h / 2 + principal_shift[1]], [0, 0, 1.0]])
    P = K @ np.column_stack([R[:, 0], R[:, 1], [0.0, 0.0, distance_mm]])
    H = P @ to_mm
    return H / H[2, 2]


FACE_RADIUS_DEFAULT = 200.0


@dataclass
class SynthCase:
    seed: int
    image: np.ndarray
    gt_points_canonical: list  # PointMm
    homography: np.ndarray  # canonical px -> image px
    tilt_deg: float
    canonical_image: np.ndarray | None = None

    def gt_points_px(self, frame_size_px: int) -> np.ndarray:
        return mm_to_px_array(np.array(self.gt_points_canonical, dtype=float).reshape(-1, 2), frame_size_px)

    def scorecard(self, frame_size_px: int = 2048, spec: TargetFaceSpec | None = None):
        """Ground-truth scorecard, arrows in the order of ``gt_points_canonical``."""
        from .scoring import score_detections

        return score_detections([tuple(p) for p in self.gt_points_px(frame_size_px)], frame_size_px, spec)

    def gt_points_image(self, frame: CanonicalFrame | None = None) -> np.ndarray:
        """Ground-truth points in the distorted photograph."""
        frame = frame or CanonicalFrame()
        return map_points_h(self.homography, self.gt_points_px(frame.size_px))


def sample_arrows(rng: np.random.Generator, n: int, spec: TargetFaceSpec, center_frac: float = 0.7,
                  sigma_mm: float = 40.0, min_separation_mm: float = 0.0) -> np.ndarray:
    """Arrow positions in mm: a ``center_frac`` share Gaussian about the centre, the rest uniform on the face.

    With ``min_separation_mm`` > 0 draws closer than that to an earlier arrow are redrawn.
    """
    lim = spec.face_radius_mm - spec.shaft_radius_mm
    out = np.empty((n, 2))
    i = tries = 0
    while i < n:
        tries += 1
        if tries > 1000 * (n + 1):
            raise InvalidInputError("cannot place arrows with the requested separation")
        if rng.random() < center_frac:
            p = rng.normal(0.0, sigma_mm, size=2)
            rr = math.hypot(*p)
            if rr > lim:
                p = p * (lim / rr)
        else:
            rr = lim * math.sqrt(rng.random())
            t = rng.uniform(0, 2 * np.pi)
            p = np.array([rr * math.cos(t), rr * math.sin(t)])
        if min_separation_mm > 0 and i and np.min(np.hypot(*(out[:i] - p).T)) < min_separation_mm:
            continue
        out[i] = p
        i += 1
    return out


def generate_case(seed: int, n_arrows: int = 20, max_tilt_deg: float = 30.0,
                  spec: TargetFaceSpec | None = None, frame: CanonicalFrame | None = None,
                  out_size=None, center_frac: float = 0.7, brightness=None,
                  min_separation_mm: float = 0.0) -> SynthCase:
    """Build one seeded case: canonical face, holes, camera homography, brightness jitter."""
    spec = spec or TargetFaceSpec()
    frame = frame or CanonicalFrame()
    if int(n_arrows) != n_arrows or n_arrows < 0:
        raise InvalidInputError("n_arrows must be a non-negative integer")
    if not 0 <= max_tilt_deg <= 45:
        raise InvalidInputError("max_tilt_deg must lie in [0, 45]")
    out_size = out_size or (frame.size_px, frame.size_px)
    rng = np.random.default_rng(seed)

    pts = sample_arrows(rng, int(n_arrows), spec, center_frac, min_separation_mm=min_separation_mm)
    tilt = float(rng.uniform(0, max_tilt_deg)) if max_tilt_deg > 0 else 0.0
    axis = float(rng.uniform(0, 180))
    roll = float(rng.uniform(-180, 180))
    dist = float(rng.uniform(800, 1500))
    shift = tuple(rng.uniform(-0.04, 0.04, size=2) * np.array(out_size))
    gain = float(rng.uniform(0.85, 1.15)) if brightness is None else float(brightness)
    hole_seed = int(rng.integers(0, 2**31 - 1))

    canon = punch_holes(render_canonical_target(spec, frame), pts, spec, frame, hole_seed)
    H = camera_homography(frame, out_size, tilt, axis, roll, dist, principal_shift=shift)
    img = apply_homography(canon, H, out_size)
    if gain != 1.0:
        img = np.clip(np.rint(img.astype(float) * gain), 0, 255).astype(np.uint8)
    points = [PointMm(float(x), float(y)) for x, y in pts]
    return SynthCase(seed, img, points, H, tilt, canon)
