"""Command-line entry point. Reports go to stdout, logs to stderr.

Exit codes: 0 success, 1 empty dataset / other failure, 2 configuration
or input error, 3 annotation service unavailable, 4 trainer failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .annotate import FULL_FRAME, AnnotatorConfig, HttpAnnotator, roi_sweep, write_roi_csv
from .background import FIRST_FRAME, MOG, BackgroundParams
from .capture import open_source, write_image
from .dataset import export_coco, load_examples, read_label_map
from .errors import AnnotationUnavailable, ConfigError, CovaError, DatasetError, GroundTruthError
from .evaluate import evaluate, load_detections
from .filters import MotionDetector, motion_coverage
from .pipeline import EXIT_ANNOTATION_UNAVAILABLE, EXIT_CONFIG, load_config, run
from .teacher import DegradationProfile, LocalTeacherAnnotator, Teacher, load_ground_truth, serve

log = logging.getLogger("cova")


def _setup_logging() -> None:
    level = os.environ.get("COVA_LOG", "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _fail(msg: str, code: int = EXIT_CONFIG) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# -- run ---------------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc))
    if args.dry_run:
        print("config ok")
        return 0
    try:
        report = run(cfg)
    except ConfigError as exc:
        return _fail(str(exc))
    except DatasetError as exc:
        return _fail(str(exc), 1)
    print(json.dumps(report.to_dict(), indent=2))
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
    return report.exit_code


# -- motion ------------------------------------------------------------------

def _add_motion_args(p: argparse.ArgumentParser) -> None:
    d = BackgroundParams()
    p.add_argument("--input", required=True, help="image directory or CVR1 raw video")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mog", dest="variant", action="store_const", const=MOG, help="mixture of Gaussians (default)")
    g.add_argument("--first-frame", dest="variant", action="store_const", const=FIRST_FRAME,
                   help="difference against the first frame")
    p.set_defaults(variant=MOG)
    p.add_argument("--blur-sigma", type=float, default=d.blur_sigma)
    p.add_argument("--diff-threshold", type=int, default=d.diff_threshold)
    p.add_argument("--learning-rate", type=float, default=d.alpha)
    p.add_argument("--components", type=int, default=d.k)
    p.add_argument("--background-ratio", type=float, default=d.background_weight_threshold)
    p.add_argument("--dilate-radius", type=int, default=1)
    p.add_argument("--dilate-iterations", type=int, default=2)
    p.add_argument("--min-area", type=int, default=None, help="pixels; default 0.1%% of the frame")


def _detector(args: argparse.Namespace) -> MotionDetector:
    params = BackgroundParams(k=args.components, alpha=args.learning_rate,
                              background_weight_threshold=args.background_ratio,
                              blur_sigma=args.blur_sigma, diff_threshold=args.diff_threshold)
    return MotionDetector(args.variant, params, args.dilate_radius, args.dilate_iterations, args.min_area)


def _open(args: argparse.Namespace):
    try:
        return open_source(args.input), _detector(args)
    except (OSError, ValueError) as exc:
        raise ConfigError(args.input, str(exc)) from None


def cmd_bgsub(args: argparse.Namespace) -> int:
    try:
        source, det = _open(args)
    except ConfigError as exc:
        return _fail(str(exc))
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    with open(out / "regions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "x", "y", "w", "h", "area"])
        for frame in source:
            mask, regions = det.detect(frame)
            write_image(out / "masks" / f"{frame.index:06d}.png", mask.astype("uint8") * 255)
            for r in regions:
                b = r.box
                w.writerow([frame.index, int(b.x_min), int(b.y_min), int(b.width), int(b.height), r.area])
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    try:
        source, det = _open(args)
    except ConfigError as exc:
        return _fail(str(exc))
    rep = motion_coverage(source, det)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["frame", "coverage"])
    for i, c in enumerate(rep.per_frame):
        w.writerow([i, f"{c:.6f}"])
    w.writerow(["average", f"{rep.average:.6f}"])
    return 0


# -- eval / export -------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    try:
        store = load_ground_truth(args.gt)
        dets = load_detections(args.dets, store.image_ids)
        report = evaluate(dets, store.objects | {k: [] for k in store.sizes if k not in store.objects},
                          store.label_map)
    except (GroundTruthError, OSError) as exc:
        return _fail(str(exc))
    print(report.table())
    Path(args.out).write_text(report.to_json())
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    try:
        examples = load_examples(args.dataset)
        label_map = read_label_map(args.dataset)
        path = export_coco(examples, label_map, args.out or args.dataset)
    except (OSError, ValueError, KeyError, DatasetError) as exc:
        return _fail(str(exc))
    print(json.dumps({"annotations": str(path), "images": len(examples)}))
    return 0


# -- teacher / roi sweep -------------------------------------------------------

def _profile(args: argparse.Namespace) -> DegradationProfile:
    prof = DegradationProfile.load(args.profile) if args.profile else DegradationProfile()
    if args.seed is not None:
        prof = DegradationProfile.from_dict({**prof.to_dict(), "seed": args.seed})
    return prof


def cmd_serve_teacher(args: argparse.Namespace) -> int:
    host, _, port = args.bind.rpartition(":")
    try:
        store = load_ground_truth(args.gt)
        srv = serve(store, _profile(args), host or "127.0.0.1", int(port), args.delay_ms)
    except (GroundTruthError, OSError, ValueError) as exc:
        return _fail(str(exc))
    print(f"serving {len(store)} images on {srv.url}", file=sys.stderr, flush=True)
    try:
        srv._thread.join()
    except KeyboardInterrupt:
        pass
    finally:
        srv.stop()
    return 0


def _scales(text: str) -> list[float | str]:
    out: list[float | str] = []
    for tok in text.split(","):
        tok = tok.strip()
        out.append(FULL_FRAME if tok.lower() == FULL_FRAME else float(tok))
    return out


def cmd_roi_sweep(args: argparse.Namespace) -> int:
    try:
        store = load_ground_truth(args.gt)
        scales = _scales(args.scales)
        source = open_source(args.images)
        if args.endpoint:
            annotator = HttpAnnotator(AnnotatorConfig(endpoint=args.endpoint, min_confidence=args.min_confidence,
                                                      target_classes=tuple(store.label_map.names())))
        else:
            annotator = LocalTeacherAnnotator(Teacher(store, _profile(args)), args.min_confidence,
                                              store.label_map.names())
    except (GroundTruthError, OSError, ValueError) as exc:
        return _fail(str(exc))
    samples = []
    for frame in source:
        for obj in store.get(frame.frame_id):
            if args.label is None or obj.label == args.label:
                samples.append((frame, obj.box))
        if args.max_samples and len(samples) >= args.max_samples:
            samples = samples[: args.max_samples]
            break
    if not samples:
        return _fail("no ground-truth objects found for the given images and label")
    try:
        rows = roi_sweep(samples, scales, annotator)
    except AnnotationUnavailable as exc:
        return _fail(str(exc), EXIT_ANNOTATION_UNAVAILABLE)
    finally:
        annotator.close()
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_roi_csv(rows, fh)
    else:
        write_roi_csv(rows, sys.stdout)
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cova", description="Motion-aware automatic dataset collection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bgsub", help="write foreground masks and regions.csv")
    _add_motion_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bgsub)

    p = sub.add_parser("stats", help="per-frame motion coverage as CSV")
    _add_motion_args(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("eval", help="COCO-style mAP of detections against ground truth")
    p.add_argument("--gt", required=True, help="COCO annotations.json")
    p.add_argument("--dets", required=True, help="detections as JSON lines")
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roi-sweep", help="teacher confidence as the RoI around each object grows")
    p.add_argument("--images", required=True, help="image directory or raw video holding the frames")
    p.add_argument("--gt", required=True)
    p.add_argument("--label", default=None)
    p.add_argument("--scales", default="1,1.5,2,3,4,full")
    p.add_argument("--endpoint", default=None, help="teacher URL; default is an in-process stub over --gt")
    p.add_argument("--profile", default=None, help="degradation profile JSON for the in-process stub")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--min-confidence", type=float, default=0.0)
    p.add_argument("--max-samples", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_roi_sweep)

    p = sub.add_parser("serve-teacher", help="serve ground truth over the annotation protocol")
    p.add_argument("--gt", required=True)
    p.add_argument("--bind", default="127.0.0.1:8500")
    p.add_argument("--profile", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--delay-ms", type=int, default=0)
    p.set_defaults(func=cmd_serve_teacher)

    p = sub.add_parser("export", help="(re)write annotations.json for a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CovaError as exc:
        return _fail(str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
