"""``target-scorer`` command line.

Exit codes: 0 success, 1 input or format error, 2 rectification failure,
3 numeric check failure.  Failures print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import (
    CanonicalFrame,
    FitFailureError,
    InsufficientDataError,
    InvalidInputError,
    NumericFailure,
    RectificationFailure,
    TargetFaceSpec,
)
from .decode import DecoderConfig, decode
from .evaluate import (
    GRID_COLUMNS,
    archery_metrics,
    detection_metrics,
    grid_search_decoder,
    match_detections,
)
from .heatmap import (
    HeatTensor,
    focal_loss,
    grad_check,
    ideal_tensor,
    offset_loss,
    render_target,
    total_loss,
)
from .rectify import build_radial_warp, detect_ellipses, rectify_image
from .scoring import score_detections
from .synth import generate_case

EXIT_OK, EXIT_INPUT, EXIT_RECTIFY, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class CommandError(Exception):
    def __init__(self, code: int, kind: str, message: str, stage: str | None = None):
        super().__init__(message)
        self.code, self.kind, self.stage = code, kind, stage


def _fail(code, kind, message, stage=None):
    raise CommandError(code, kind, message, stage)


def _config(args):
    return io.objects(io.load_config(getattr(args, "config", None)))


def _rectify(image, cfg):
    try:
        eset, masks = detect_ellipses(image, cfg["thresholds"], return_masks=True)
        warp = build_radial_warp(eset, CanonicalFrame())
    except (RectificationFailure, InsufficientDataError, FitFailureError) as exc:
        _fail(EXIT_RECTIFY, "rectification-failure", str(exc), "rectify")
    return eset, masks, warp, rectify_image(image, warp)


def cmd_rectify(args) -> int:
    cfg = _config(args)
    image = io.read_image(args.input)
    eset, masks, warp, out = _rectify(image, cfg)
    io.write_png(args.output, out)
    if args.debug_dir:
        d = Path(args.debug_dir)
        d.mkdir(parents=True, exist_ok=True)
        for bm in masks:
            io.write_mask_png(d / f"mask_{bm.boundary_id}.png", bm.mask)
        (d / "ellipses.svg").write_text(
            io.ellipse_overlay_svg(eset, image.shape[1], image.shape[0], warp.center_src), encoding="utf-8")
        io.dump_json(d / "warp.json", warp.to_dict())
        io.dump_json(d / "ellipses.json", eset.to_dict())
    return EXIT_OK


def _decode_file(path, decoder: DecoderConfig):
    tensor = io.read_hmp1(path)
    if decoder.use_offsets and tensor.offsets is None:
        _fail(EXIT_INPUT, "invalid-input", "offsets absent", "decode")
    return decode(tensor, decoder), tensor.width


def cmd_decode(args) -> int:
    cfg = _config(args)
    dec = cfg["decoder"]
    if args.use_offsets:
        dec = DecoderConfig(dec.threshold, dec.nms_kernel, dec.separation_px, True)
    dets, width = _decode_file(args.heatmap, dec)
    io.dump_json(args.output, io.detections_doc(dets, width))
    return EXIT_OK


def cmd_score(args) -> int:
    doc = io._load_json(args.detections)
    dets, n = io.parse_detections(doc, args.detections)
    io.dump_json(args.output, score_detections(dets, n).to_dict())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    radius = args.radius_px if args.radius_px is not None else cfg["eval"]["radius_px"]
    pred, n_pred, pred_dets = io.load_points_file(args.pred)
    gt, n_gt, gt_dets = io.load_points_file(args.gt)
    if n_pred != n_gt:
        _fail(EXIT_INPUT, "invalid-input", f"frame mismatch: pred {n_pred} px vs gt {n_gt} px")
    m = match_detections(pred, gt, radius)
    rep = detection_metrics(m, n_pred)
    arch = archery_metrics(score_detections(pred_dets, n_pred), score_detections(gt_dets, n_gt), pred, gt, n_pred)
    io.dump_json(args.output, {"detection": rep.to_dict(), "archery": arch.to_dict(),
                               "frame_size_px": n_pred, "radius_px": radius})
    err = "n/a" if rep.mean_error_mm is None else f"{rep.mean_error_mm:.3f} mm"
    print(f"TP {rep.tp} FP {rep.fp} FN {rep.fn}  P {rep.precision:.4f} R {rep.recall:.4f} "
          f"F1 {rep.f1:.4f}  mean error {err}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    cfg = _config(args)
    hdir, gdir = Path(args.heatmaps), Path(args.gts)
    if not hdir.is_dir() or not gdir.is_dir():
        _fail(EXIT_INPUT, "invalid-input", "heatmap and ground-truth directories must exist")
    hm = {p.stem: p for p in sorted(hdir.glob("*.hmp1"))}
    # synth bundles keep their homography sidecars next to the annotations
    gt = {p.stem: p for p in sorted(gdir.glob("*.json")) if not p.name.endswith(".homography.json")}
    if not hm and not gt:
        _fail(EXIT_INPUT, "invalid-input", "no heatmaps or ground-truth files found")
    unmatched = sorted(set(hm) ^ set(gt))
    if unmatched:
        _fail(EXIT_INPUT, "invalid-input", "unmatched stems: " + ", ".join(unmatched))
    tensors, points = [], []
    for stem in sorted(hm):
        t = io.read_hmp1(hm[stem])
        pts, n, _ = io.load_points_file(gt[stem])
        if n != t.width:
            pts = pts * (t.width / n)  # both frames span the same 400 mm face
        tensors.append(t)
        points.append(pts)
    base = cfg["decoder"]
    best, rows = grid_search_decoder(tensors, points, base, cfg["eval"]["radius_px"])
    out = Path(args.output)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in GRID_COLUMNS])
    best_row = max(rows, key=lambda r: (r["f1"], r["precision"], -r["threshold"], -r["kernel"]))
    io.dump_json(out.with_name(out.stem + "_best.json"),
                 {"threshold": best.threshold, "nms_kernel": best.nms_kernel,
                  "separation_px": best.separation_px, "use_offsets": best.use_offsets,
                  "f1": best_row["f1"], "precision": best_row["precision"], "recall": best_row["recall"]})
    return EXIT_OK


def write_case_bundle(out_dir: Path, case, heatmap_size: int | None = None) -> dict:
    """PNG + annotation JSON (+ homography JSON, + ideal HMP1 when ``heatmap_size``)."""
    stem = f"case_{case.seed:06d}"
    io.write_png(out_dir / f"{stem}.png", case.image)
    pts_mm = np.array(case.gt_points_canonical, float).reshape(-1, 2)
    io.dump_json(out_dir / f"{stem}.json", io.annotation_doc(pts_mm, CanonicalFrame().size_px, "mm"))
    io.dump_json(out_dir / f"{stem}.homography.json",
                 {"maps": "canonical_px_to_image_px", "canonical_size_px": CanonicalFrame().size_px,
                  "tilt_deg": case.tilt_deg, "matrix": case.homography.tolist()})
    paths = {"image": out_dir / f"{stem}.png", "annotation": out_dir / f"{stem}.json"}
    if heatmap_size:
        pts = case.gt_points_px(heatmap_size)
        io.write_hmp1(out_dir / f"{stem}.hmp1", ideal_tensor(pts, heatmap_size, heatmap_size))
        paths["heatmap"] = out_dir / f"{stem}.hmp1"
    return paths


def cmd_synth(args) -> int:
    cfg = _config(args)
    s = cfg["synth"]
    arrows = s["arrows"] if args.arrows is None else args.arrows
    tilt = s["tilt_deg"] if args.tilt_deg is None else args.tilt_deg
    if args.count < 1:
        _fail(EXIT_INPUT, "invalid-input", "--count must be >= 1")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        case = generate_case(args.seed + i, arrows, tilt, center_frac=s["center_fraction"],
                             min_separation_mm=s["min_separation_mm"])
        write_case_bundle(out, case, s["heatmap_size_px"] if args.with_heatmap else None)
    return EXIT_OK


def _gradcheck_fixture(rng, size=16):
    pts = rng.uniform(0, size, size=(int(rng.integers(1, 4)), 2))
    target = render_target(pts, size, size)
    tensor = HeatTensor(rng.normal(-1.0, 2.0, (size, size)), rng.normal(0.0, 1.5, (2, size, size)))
    return tensor, target


def _broken(fn):
    def wrapped(tensor, target, params=None):
        loss, grad = fn(tensor, target, params)
        return loss, np.asarray(grad) * 1.01

    return wrapped


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        _fail(EXIT_INPUT, "invalid-input", "--trials must be >= 1")
    rng = np.random.default_rng(args.seed)
    fixtures = [_gradcheck_fixture(rng) for _ in range(args.trials)]
    worst = {}
    for name, fn in (("focal_loss", focal_loss), ("offset_loss", offset_loss), ("total_loss", total_loss)):
        check = fn
        if args.break_gradient:
            check = _broken(fn)
        errs = [grad_check(check, t, y, n_samples=args.samples, rng=rng, loss_kind=name) for t, y in fixtures]
        worst[name] = max(errs)
        print(f"{name}: max relative error {worst[name]:.3e}")
    if not all(v < GRADCHECK_TOL for v in worst.values()):
        _fail(EXIT_NUMERIC, "numeric-check-failure",
              "gradient check exceeded tolerance: " + json.dumps(worst))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        image = io.read_image(args.input)
    except InvalidInputError as exc:
        _fail(EXIT_INPUT, "invalid-input", str(exc), "load")
    _, _, warp, canon = _rectify(image, cfg)
    io.write_png(out / "canonical.png", canon)
    io.dump_json(out / "warp.json", warp.to_dict())
    if not args.heatmap:
        note = "no heatmap supplied; stopped after rectification"
        io.dump_json(out / "summary.json", {"canonical": "canonical.png", "note": note})
        print(note)
        return EXIT_OK
    dec = cfg["decoder"]
    if args.use_offsets:
        dec = DecoderConfig(dec.threshold, dec.nms_kernel, dec.separation_px, True)
    try:
        dets, n = _decode_file(args.heatmap, dec)
    except InvalidInputError as exc:
        _fail(EXIT_INPUT, "invalid-input", str(exc), "decode")
    card = score_detections(dets, n)
    io.dump_json(out / "detections.json", io.detections_doc(dets, n))
    io.dump_json(out / "scorecard.json", card.to_dict())
    (out / "overlay.svg").write_text(io.scorecard_overlay_svg(card, n, TargetFaceSpec()), encoding="utf-8")
    io.dump_json(out / "summary.json", {"canonical": "canonical.png", "detections": len(dets),
                                        "total": card.total, "average": card.average})
    print(f"{len(dets)} arrows, total {card.total}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="target-scorer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help=f"JSON config (falls back to ${io.CONFIG_ENV})")
        sp.set_defaults(func=fn)
        return sp

    sp = add("rectify", cmd_rectify, "photograph -> canonical 2048 px PNG")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--debug-dir")

    sp = add("decode", cmd_decode, "HMP1 heatmap -> detection JSON")
    sp.add_argument("--heatmap", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--use-offsets", action="store_true")

    sp = add("score", cmd_score, "detection JSON -> scorecard JSON")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--output", required=True)

    sp = add("eval", cmd_eval, "compare predictions with ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--radius-px", type=float)
    sp.add_argument("--output", required=True)

    sp = add("gridsearch", cmd_gridsearch, "sweep decoder threshold and NMS kernel")
    sp.add_argument("--heatmaps", required=True)
    sp.add_argument("--gts", required=True)
    sp.add_argument("--output", required=True)

    sp = add("synth", cmd_synth, "write synthetic case bundles")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--arrows", type=int)
    sp.add_argument("--tilt-deg", type=float)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--with-heatmap", action="store_true", help="also write the ideal 512 px HMP1 heatmap")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the loss gradients")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--break-gradient", action="store_true", help=argparse.SUPPRESS)

    sp = add("pipeline", cmd_pipeline, "rectify, decode, score")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--heatmap")
    sp.add_argument("--use-offsets", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        err = {"error": exc.kind, "message": str(exc)}
        if exc.stage:
            err["stage"] = exc.stage
        print(json.dumps(err), file=sys.stderr)
        return exc.code
    except (InvalidInputError, InsufficientDataError, OSError) as exc:
        print(json.dumps({"error": "invalid-input", "message": str(exc)}), file=sys.stderr)
        return EXIT_INPUT
    except NumericFailure as exc:
        print(json.dumps({"error": "numeric-failure", "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
