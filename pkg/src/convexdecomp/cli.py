"""Command line entry point: synth, fit, render, eval, gradcheck, pipeline.

Exit codes: 0 success, 1 input error, 2 numerical failure. Failures print a single
``error: <kind>: <message>`` line on stderr.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import kernels
from .io import (FormatError, read_camera, read_decomposition, read_pfm, read_pgm,
                 read_segmentation, write_decomposition, write_pfm, write_pgm)
from .losses import LossWeights
from .metrics import evaluate
from .refine import (NumericalError, PolishConfig, gradient_check, grid_init, pipeline,
                     random_init)
from .render import raymarch
from .sampling import build_transform, depth_to_points, generate_samples, split_total
from .synth import default_camera, synth_scene

log = logging.getLogger("convexdecomp")

GRADCHECK_TOL = 1e-4


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


def _add_common(p):
    p.add_argument("--threads", type=int, default=1, help="worker threads for kernels")
    p.add_argument("--backend", choices=("cython", "python"), default=None,
                   help="kernel backend (default: compiled if available)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_fit_args(p):
    p.add_argument("--depth", required=True, help="depth PFM in meters, 0 = invalid")
    p.add_argument("--camera", required=True, help="camera JSON")
    p.add_argument("--seg", help="label PGM; enables the entropy loss")
    p.add_argument("--init", choices=("random", "grid", "file"), default="grid")
    p.add_argument("--init-file", help="decomposition JSON for --init file")
    p.add_argument("--k", type=int, default=8, help="number of convexes for random/grid init")
    p.add_argument("--config", help="JSON with PolishConfig fields and optional 'weights'")
    p.add_argument("--weights", help="loss weight JSON")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--samples", type=int, help="total sample count")
    p.add_argument("--shell-fraction", type=float, default=0.1)
    p.add_argument("--prune", dest="prune", action="store_true", default=None)
    p.add_argument("--no-prune", dest="prune", action="store_false")
    p.add_argument("--epsilon", type=float, help="pruning threshold")
    p.add_argument("--splits", type=int)
    p.add_argument("--anneal", action="store_true", default=None)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--fixed-manhattan", action="store_true",
                   help="do not optimize the Manhattan frame")


def build_parser():
    parser = _Parser(prog="convexdecomp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic boxes-on-floor scene")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--boxes", type=int, default=2)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=60)
    p.add_argument("--no-floor", action="store_true")
    p.add_argument("--rotated", action="store_true", help="random yaw of the Manhattan frame")

    p = sub.add_parser("fit", help="fit a decomposition to a depth map")
    _add_common(p)
    _add_fit_args(p)
    p.add_argument("--out", required=True, help="decomposition JSON ('-' for stdout)")
    p.add_argument("--trace", help="per-iteration loss CSV")

    p = sub.add_parser("render", help="raymarch a decomposition")
    _add_common(p)
    p.add_argument("--decomp", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="compare predicted rasters to ground truth")
    _add_common(p)
    p.add_argument("--pred-depth", required=True)
    p.add_argument("--gt-depth", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--pred-normals")
    p.add_argument("--gt-normals")
    p.add_argument("--pred-ids")
    p.add_argument("--gt-seg")
    p.add_argument("--out", default="-", help="report JSON ('-' for stdout)")

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    _add_common(p)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--k-max", type=int, default=4)
    p.add_argument("--samples", type=int, default=1000)

    p = sub.add_parser("pipeline", help="fit, render and evaluate in one run")
    _add_common(p)
    _add_fit_args(p)
    p.add_argument("--gt-normals", help="normals PFM for evaluation (default: from depth)")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _load_json(path, what):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{what} JSON: {e.msg} at byte {e.pos}") from None


def polish_config(args):
    """Defaults, then --config, then explicit flags."""
    cfg = {}
    weights = {}
    if args.config:
        d = _load_json(args.config, "config")
        weights.update(d.pop("weights", {}))
        known = {f.name for f in dataclasses.fields(PolishConfig)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config field(s): {sorted(unknown)}")
        cfg.update(d)
    if args.weights:
        weights.update(_load_json(args.weights, "weights"))
    flags = {"iters": args.iters, "learning_rate": args.lr, "n_samples": args.samples,
             "prune": args.prune, "prune_epsilon": args.epsilon, "splits": args.splits,
             "anneal": args.anneal, "clip_norm": args.clip_norm, "seed": args.seed}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.fixed_manhattan:
        cfg["optimize_manhattan"] = False
    try:
        return PolishConfig(**cfg), LossWeights.from_dict(weights)
    except (TypeError, ValueError) as e:
        raise InputError(str(e)) from None


def run_fit(args):
    cfg, weights = polish_config(args)
    depth = read_pfm(args.depth)
    if depth.ndim != 2:
        raise FormatError(f"{args.depth}: depth must be a single-channel PFM")
    cam = read_camera(args.camera)
    if depth.shape != (cam.height, cam.width):
        raise InputError(f"depth is {depth.shape[1]}x{depth.shape[0]} but camera is "
                         f"{cam.width}x{cam.height}")
    seg = None
    if args.seg:
        seg = read_segmentation(args.seg)
        if seg.shape != depth.shape:
            raise InputError("segmentation and depth differ in shape")
    elif weights.entropy:
        log.info("no --seg given; entropy loss disabled")
        weights.entropy = 0.0

    init = None
    if args.init == "file":
        if not args.init_file:
            raise InputError("--init file needs --init-file")
        init = read_decomposition(args.init_file, renormalize_axes=True)
        transform = init.normalization
    else:
        pts, _ = depth_to_points(depth, cam)
        if len(pts) == 0:
            raise InputError("depth map has no valid pixels")
        transform = build_transform(pts)
    n_free, n_surface = split_total(cfg.n_samples)
    samples = generate_samples(depth, cam, transform, seg, n_free, n_surface,
                               args.shell_fraction, seed=cfg.seed)
    if args.init == "random":
        init = random_init(args.k, cfg.seed, transform)
    elif args.init == "grid":
        init = grid_init(args.k, samples, cfg.seed, transform)
    fit, trace = pipeline(init, samples, weights, cfg)
    log.info("fit: %d convexes, final loss %.6g, %.1fs", len(fit),
             trace.totals[-1] if trace.rows else float("nan"), trace.wall_time)
    return fit, trace, cam, depth, seg


def _write_render(out_dir, r):
    os.makedirs(out_dir, exist_ok=True)
    write_pfm(os.path.join(out_dir, "depth.pfm"), r.depth)
    write_pfm(os.path.join(out_dir, "normals.pfm"), r.normals)
    write_pgm(os.path.join(out_dir, "ids.pgm"), r.ids)


def _write_report(report, path):
    if path == "-":
        sys.stdout.write(json.dumps(report.to_dict(), indent=2) + "\n")
    else:
        report.to_json(path)


def cmd_synth(args):
    sc = synth_scene(args.boxes, args.seed or 0, default_camera(args.width, args.height),
                     floor=not args.no_floor, rotated=args.rotated)
    sc.write(args.out)
    return 0


def cmd_fit(args):
    fit, trace, *_ = run_fit(args)
    write_decomposition(args.out, fit)
    if args.trace:
        trace.to_csv(args.trace)
    if trace.aborted:
        raise NumericalError(trace.aborted)
    return 0


def cmd_render(args):
    decomp = read_decomposition(args.decomp)
    cam = read_camera(args.camera)
    _write_render(args.out, raymarch(decomp, cam))
    return 0


def cmd_eval(args):
    cam = read_camera(args.camera)
    pred = read_pfm(args.pred_depth)
    gt = read_pfm(args.gt_depth)
    if pred.shape != gt.shape:
        raise InputError("predicted and ground-truth depth differ in shape")
    pn = read_pfm(args.pred_normals) if args.pred_normals else None
    gn = read_pfm(args.gt_normals) if args.gt_normals else None
    ids = read_pgm(args.pred_ids) if args.pred_ids else None
    seg = read_segmentation(args.gt_seg) if args.gt_seg else None
    _write_report(evaluate(pred, gt, cam, pn, gn, ids, seg), args.out)
    return 0


def cmd_gradcheck(args):
    seed = 7 if args.seed is None else args.seed
    errors = gradient_check(seed, args.instances, args.k_max, args.samples)
    worst = max(errors)
    print(f"max relative error {worst:.3e} over {len(errors)} instances (tolerance "
          f"{GRADCHECK_TOL:g})")
    if not worst < GRADCHECK_TOL:
        raise NumericalError(f"gradient mismatch {worst:.3e}")
    return 0


def cmd_pipeline(args):
    fit, trace, cam, depth, seg = run_fit(args)
    os.makedirs(args.out, exist_ok=True)
    write_decomposition(os.path.join(args.out, "fit.json"), fit)
    trace.to_csv(os.path.join(args.out, "trace.csv"))
    if trace.aborted:
        raise NumericalError(trace.aborted)
    r = raymarch(fit, cam)
    _write_render(args.out, r)
    gn = read_pfm(args.gt_normals) if args.gt_normals else None
    report = evaluate(r.depth, depth, cam, r.normals, gn, r.ids, seg)
    _write_report(report, os.path.join(args.out, "report.json"))
    return 0


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "render": cmd_render, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "pipeline": cmd_pipeline}


def _fail(kind, msg, code):
    msg = " ".join(str(msg).split())
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except InputError as e:
        return _fail("usage", e, 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise InputError("--threads must be at least 1")
        kernels.set_num_threads(args.threads)
        if args.backend:
            kernels.set_backend(args.backend)
        with np.errstate(all="ignore"), warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            return COMMANDS[args.command](args)
    except NumericalError as e:
        return _fail("numerical", e, 2)
    except FormatError as e:
        return _fail("format", e, 1)
    except (InputError, ValueError) as e:
        return _fail("input", e, 1)
    except OSError as e:
        return _fail("io", f"{e.strerror}: {e.filename}" if e.filename else e, 1)


if __name__ == "__main__":
    sys.exit(main())
