"""Command-line entry points: headless runs, scoring, model application,
synthetic generation, and the session service.

Subcommands
-----------
run    headless simulated-user session over an image + ground truth
eval   score a detections file against ground truth
apply  load a saved model and detect on a new image
gen    synthetic image + ground truth from a generator spec
serve  start the HTTP session service
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .active_loop import run_headless_session
from .imgio import (
    Image,
    load_detections,
    load_ground_truth,
    load_image,
    render_overlay,
    save_detections,
    save_ground_truth,
    save_image,
)
from .matching import BoundingWindow
from .metrics import format_table, score
from .network import ConvergenceFailure, NetworkConfig, apply_model, model_from_dict, model_to_dict
from .oracle import GeneratorSpec, SimulatedUser, generate_synthetic

log = logging.getLogger("countloop")


def _error(code: int, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": message, **extra}, sort_keys=True) + "\n")
    return code


def _parse_window(text: str) -> BoundingWindow:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"--window wants x,y,w,h; got {text!r}")
    return BoundingWindow(x=parts[0], y=parts[1], width=parts[2], height=parts[3])


def _load_config(path: str | None, overrides: dict) -> dict:
    doc = json.loads(Path(path).read_text()) if path else {}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return doc


def _strip_times(record: dict) -> dict:
    return {k: v for k, v in record.items() if k != "wall_time"}


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    image = load_image(args.image)
    gt = load_ground_truth(args.gt) if args.gt else None
    windows = [_parse_window(w) for w in args.window]
    cfg_doc = _load_config(args.config, {
        "iterations": args.iterations, "seed": args.seed,
        "error_rate": args.error_rate, "undetermined_rate": args.undetermined_rate,
    })
    seed = int(cfg_doc.get("seed", 0))
    iterations = int(cfg_doc.get("iterations", 5))
    config = NetworkConfig(
        c_in=image.channels,
        **{k: v for k, v in cfg_doc.items()
           if k in ("n_filters", "kernel_size", "alpha", "lr", "margin", "max_train_steps",
                    "ae_rec_threshold", "ae_train_steps", "capacity_start", "capacity_step",
                    "capacity_cap")},
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    # The responder needs the session transform; resolve it the same way the
    # session will so the simulated user sees identical coordinates.
    from .imgio import rescale_for_window

    _, transform, _ = rescale_for_window(image, windows)
    if gt is None:
        raise ValueError("run requires --gt (the simulated user answers from it)")
    user = SimulatedUser(
        gt=gt, transform=transform, seed=seed + 1,
        error_rate=float(cfg_doc.get("error_rate") or 0.0),
        undetermined_rate=float(cfg_doc.get("undetermined_rate") or 0.0),
    )
    result = run_headless_session(
        image, windows, user, config=config, seed=seed, iterations=iterations,
        stop_on_clean_round=bool(cfg_doc.get("stop_on_clean_round", True)), gt=gt,
    )
    session = result.session

    save_detections(result.detections, out / "detections.json")
    report = score(result.detections, gt.points).to_dict()
    report["clicks"] = session.clicks
    report["iterations_run"] = result.iterations_run
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    with (out / "session.jsonl").open("w") as fh:
        for record in session.log:
            fh.write(json.dumps(_strip_times(record), sort_keys=True) + "\n")
        fh.write(json.dumps({"phase": "timing", "wall_time": round(time.perf_counter() - t0, 3)}) + "\n")
    cmap = session.forward.c
    save_image((cmap - cmap.min()) / max(cmap.max() - cmap.min(), 1e-9), out / "classification.png")
    render_overlay(image, result.detections, out / "overlay.png")
    (out / "model.json").write_text(json.dumps(model_to_dict(session.classifier), sort_keys=True) + "\n")
    meta = {
        "count": int(result.count),
        "counting_error_pct": report["counting_error_pct"],
        "f1_pct": report["f1_pct"],
        "clicks": session.clicks,
        "scale": [transform.scale_x, transform.scale_y],
    }
    print(json.dumps(meta, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    pred = load_detections(args.detections)
    gt = load_ground_truth(args.gt)
    rep = score(pred, gt.points).to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(rep, sort_keys=True, indent=1) + "\n")
    print(json.dumps(rep, sort_keys=True))
    if args.table:
        print(format_table([{"name": Path(args.detections).stem, **rep}]))
    return 0


def cmd_apply(args) -> int:
    state = model_from_dict(json.loads(Path(args.model).read_text()))
    image = load_image(args.image)
    if image.channels != state.config.c_in:
        raise ValueError(f"model expects {state.config.c_in} channels, image has {image.channels}")
    sx, sy = (float(v) for v in args.scale.split(","))
    from .imgio import RescaleTransform, bilinear_rescale

    out_w = max(1, int(round(image.width * sx)))
    out_h = max(1, int(round(image.height * sy)))
    transform = RescaleTransform(sx, sy, image.width, image.height, out_w, out_h)
    pixels = bilinear_rescale(image.pixels, out_h, out_w) if (sx, sy) != (1.0, 1.0) else image.pixels
    points = apply_model(state, pixels, transform)
    save_detections(points, args.out)
    print(json.dumps({"count": int(len(points))}))
    return 0


def cmd_gen(args) -> int:
    spec = GeneratorSpec.from_dict(json.loads(Path(args.spec).read_text()))
    pixels, gt = generate_synthetic(spec, seed=args.seed)
    save_image(pixels, args.image)
    save_ground_truth(gt, args.gt)
    print(json.dumps({"count": gt.count, "image": str(args.image), "gt": str(args.gt)}, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(host=args.host, port=args.port, snapshot_dir=args.snapshot_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="countloop", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--log-level", default=os.environ.get("COUNTLOOP_LOG", "WARNING"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="headless simulated-user session")
    p.add_argument("--image", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--window", action="append", required=True, help="x,y,w,h (repeatable)")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--error-rate", dest="error_rate", type=float, default=None)
    p.add_argument("--undetermined-rate", dest="undetermined_rate", type=float, default=None)
    p.add_argument("--config", default=None, help="JSON config file (flags override)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a detections file against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--table", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("apply", help="apply a saved model to a new image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--scale", required=True, help="sx,sy used when training the model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("gen", help="generate a synthetic image + ground truth")
    p.add_argument("--spec", required=True, help="generator spec JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("serve", help="start the HTTP session service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--snapshot-dir", default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except ConvergenceFailure as exc:
        return _error(2, str(exc), kind="convergence-failure")
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        return _error(1, str(exc), kind="invalid-input")


if __name__ == "__main__":
    sys.exit(main())
