"""File formats: HMP1 heatmaps, annotation/detection JSON, the JSON config, images and SVG overlays."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import check_rgb_image
from .core import Detection, InvalidInputError, mm_to_px_array
from .decode import DecoderConfig
from .heatmap import HeatTensor, LossParams
from .rectify import ColorThresholdConfig

HMP1_MAGIC = b"HMP1"
HMP1_VERSION = 1
_HEADER = struct.Struct("<4sB3sIII")
CONFIG_ENV = "TARGET_SCORER_CONFIG"


# -- HMP1 -------------------------------------------------------------------

def encode_hmp1(tensor: HeatTensor) -> bytes:
    data = tensor.to_array().astype("<f4")
    c, h, w = data.shape
    return _HEADER.pack(HMP1_MAGIC, HMP1_VERSION, b"\0\0\0", h, w, c) + data.tobytes(order="C")


def write_hmp1(path, tensor: HeatTensor) -> None:
    Path(path).write_bytes(encode_hmp1(tensor))


def decode_hmp1(buf: bytes) -> HeatTensor:
    """Parse an HMP1 buffer.  Errors name the offset of the first bad byte or the byte counts."""
    if len(buf) < _HEADER.size:
        raise InvalidInputError(f"HMP1 header truncated: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, version, reserved, h, w, c = _HEADER.unpack_from(buf)
    for i in range(4):
        if buf[i] != HMP1_MAGIC[i]:
            raise InvalidInputError(f"bad magic at byte offset {i}")
    if version != HMP1_VERSION:
        raise InvalidInputError(f"unsupported version {version} at byte offset 4")
    for i, b in enumerate(reserved):
        if b != 0:
            raise InvalidInputError(f"non-zero reserved byte at offset {5 + i}")
    if h == 0:
        raise InvalidInputError("zero height at byte offset 8")
    if w == 0:
        raise InvalidInputError("zero width at byte offset 12")
    if c not in (1, 3):
        raise InvalidInputError(f"channels must be 1 or 3, got {c} at byte offset 16")
    expected = 4 * c * h * w
    actual = len(buf) - _HEADER.size
    if actual != expected:
        raise InvalidInputError(f"payload length mismatch: expected {expected} bytes, got {actual}")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(c, h, w)
    bad = ~np.isfinite(data)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise InvalidInputError(f"non-finite float at byte offset {_HEADER.size + 4 * first}")
    return HeatTensor.from_array(data.astype(np.float64))


def read_hmp1(path) -> HeatTensor:
    return decode_hmp1(Path(path).read_bytes())


# -- JSON documents -----------------------------------------------------------

def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: malformed JSON ({exc})") from exc


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _frame_of(doc, path) -> int:
    n = doc.get("frame_size_px") if isinstance(doc, dict) else None
    if isinstance(n, bool) or not isinstance(n, int) or n <= 0:
        raise InvalidInputError(f"{path}: frame_size_px must be a positive integer")
    return n


def _xy(items, path, key):
    if not isinstance(items, list):
        raise InvalidInputError(f"{path}: '{key}' must be a list")
    out = []
    for i, p in enumerate(items):
        try:
            x, y = float(p["x"]), float(p["y"])
        except (TypeError, KeyError, ValueError) as exc:
            raise InvalidInputError(f"{path}: {key}[{i}] needs numeric x and y") from exc
        if not (np.isfinite(x) and np.isfinite(y)):
            raise InvalidInputError(f"{path}: {key}[{i}] is not finite")
        out.append((x, y))
    return np.array(out, dtype=float).reshape(-1, 2)


def annotation_doc(points_xy, frame_size_px: int, unit: str = "px_canonical") -> dict:
    if unit not in ("px_canonical", "mm"):
        raise InvalidInputError(f"unknown unit {unit!r}")
    return {
        "frame_size_px": int(frame_size_px),
        "unit": unit,
        "points": [{"x": float(x), "y": float(y)} for x, y in np.asarray(points_xy, float).reshape(-1, 2)],
    }


def parse_annotation(doc, path="<annotation>"):
    """Return ``(points_px, frame_size_px)``; mm points are converted about the face centre."""
    n = _frame_of(doc, path)
    unit = doc.get("unit")
    if unit not in ("px_canonical", "mm"):
        raise InvalidInputError(f"{path}: unit must be 'px_canonical' or 'mm'")
    pts = _xy(doc.get("points"), path, "points")
    if unit == "mm":
        pts = mm_to_px_array(pts, n)
    return pts, n


def detections_doc(detections, frame_size_px: int) -> dict:
    dets = sorted(detections, key=lambda d: -d.confidence)
    return {
        "frame_size_px": int(frame_size_px),
        "detections": [
            {"x": d.x, "y": d.y, "confidence": d.confidence, "refined": bool(d.refined)} for d in dets
        ],
    }


def parse_detections(doc, path="<detections>"):
    """Return ``(list of Detection, frame_size_px)``."""
    n = _frame_of(doc, path)
    items = doc.get("detections")
    xy = _xy(items, path, "detections")
    out = []
    for (x, y), item in zip(xy, items):
        conf = item.get("confidence", 1.0)
        try:
            out.append(Detection(x, y, float(conf), bool(item.get("refined", False))))
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(f"{path}: {exc}") from exc
    return out, n


def load_points_file(path):
    """Points from either a detection or an annotation document: ``(points_px, frame, detections)``."""
    doc = _load_json(path)
    if isinstance(doc, dict) and "detections" in doc:
        dets, n = parse_detections(doc, path)
        return np.array([(d.x, d.y) for d in dets], float).reshape(-1, 2), n, dets
    if isinstance(doc, dict) and "points" in doc:
        pts, n = parse_annotation(doc, path)
        return pts, n, [Detection(float(x), float(y), 1.0) for x, y in pts]
    raise InvalidInputError(f"{path}: neither a detection nor an annotation document")


# -- config ---------------------------------------------------------------------

EVAL_DEFAULTS = {"radius_px": 15.0, "output_frame_px": 512}
SYNTH_DEFAULTS = {"arrows": 20, "tilt_deg": 30.0, "center_fraction": 0.7, "heatmap_size_px": 512,
                  "min_separation_mm": 0.0}
_SECTIONS = {
    "thresholds": ColorThresholdConfig,
    "loss": LossParams,
    "decoder": DecoderConfig,
}


def default_config() -> dict:
    """Every config key with its module default (the single source of truth)."""
    out = {name: {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cls()).items()}
           for name, cls in _SECTIONS.items()}
    out["eval"] = dict(EVAL_DEFAULTS)
    out["synth"] = dict(SYNTH_DEFAULTS)
    return out


def validate_config(doc, source="config") -> dict:
    """Merge ``doc`` over the defaults; unknown sections or keys raise naming the key."""
    if not isinstance(doc, dict):
        raise InvalidInputError(f"{source}: top level must be a JSON object")
    cfg = default_config()
    for section, values in doc.items():
        if section not in cfg:
            raise InvalidInputError(f"{source}: unknown config section '{section}'")
        if not isinstance(values, dict):
            raise InvalidInputError(f"{source}: section '{section}' must be an object")
        for key, val in values.items():
            if key not in cfg[section]:
                raise InvalidInputError(f"{source}: unknown config key '{section}.{key}'")
            cfg[section][key] = val
    # construct once so value errors surface here
    try:
        objects(cfg)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{source}: {exc}") from exc
    return cfg


def objects(cfg: dict) -> dict:
    """Typed parameter objects for a validated config."""
    return {
        "thresholds": ColorThresholdConfig.from_dict(cfg["thresholds"]),
        "loss": LossParams(**cfg["loss"]),
        "decoder": DecoderConfig(**cfg["decoder"]),
        "eval": dict(cfg["eval"]),
        "synth": dict(cfg["synth"]),
    }


def load_config(path=None) -> dict:
    """Explicit ``path`` wins over the ``TARGET_SCORER_CONFIG`` environment variable."""
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is None:
        return default_config()
    return validate_config(_load_json(path), str(path))


# -- images ---------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"{path}: cannot read image ({exc})") from exc


def write_png(path, image) -> None:
    Image.fromarray(check_rgb_image(image) if np.asarray(image).ndim == 3 else np.asarray(image)).save(
        path, format="PNG", optimize=False, compress_level=6
    )


def write_mask_png(path, mask) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path, format="PNG", compress_level=6)


def _svg(width, height, body) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n' + "\n".join(body) + "\n</svg>\n"
    )


def ellipse_overlay_svg(eset, width, height, center=None) -> str:
    body = []
    for bid, (e, conf) in eset.entries.items():
        colour = "#00c000" if bid in eset.selected else "#c00000"
        body.append(
            f'<ellipse cx="{e.cx:.3f}" cy="{e.cy:.3f}" rx="{e.a:.3f}" ry="{e.b:.3f}" '
            f'transform="rotate({np.degrees(e.phi):.4f} {e.cx:.3f} {e.cy:.3f})" '
            f'fill="none" stroke="{colour}" stroke-width="2"><title>{bid} {conf:.3f}</title></ellipse>'
        )
    if center is not None:
        body.append(f'<circle cx="{center[0]:.3f}" cy="{center[1]:.3f}" r="4" fill="#00c000"/>')
    return _svg(width, height, body)


def scorecard_overlay_svg(scorecard, frame_size_px, spec, background=None) -> str:
    n = frame_size_px
    scale = n / 400.0
    body = []
    if background:
        body.append(f'<image href="{background}" x="0" y="0" width="{n}" height="{n}"/>')
    for r in spec.boundary_radii_mm:
        body.append(f'<circle cx="{n / 2}" cy="{n / 2}" r="{r * scale:.3f}" fill="none" '
                    'stroke="#808080" stroke-width="1"/>')
    for a in scorecard.arrows:
        body.append(f'<circle cx="{a.detection.x:.3f}" cy="{a.detection.y:.3f}" '
                    f'r="{spec.shaft_radius_mm * scale:.3f}" fill="none" stroke="#00ff00" stroke-width="2"/>')
        body.append(f'<text x="{a.detection.x + 6:.3f}" y="{a.detection.y - 6:.3f}" '
                    f'font-size="{max(10, n // 64)}" fill="#00ff00">{a.score}</text>')
    return _svg(n, n, body)
