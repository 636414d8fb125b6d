"""Command-line entry point.

Subcommands::

    generate   synthetic ground-truth / noisy trajectory pair + manifest
    train      fit both filter branches, write checkpoint and loss log
    smooth     correct a noisy trajectory file (raw | mbkf | deepkalpose)
    eval       metric reports for one prediction file
    compare    side-by-side reports for raw, mbkf and deepkalpose
    gradcheck  finite-difference check of the analytic gradients

Exit codes: 0 success, 2 usage, 3 I/O, 4 invalid data, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, metrics, plots, synth, training
from .classic import NoiseConfig
from .errors import InvalidInputError, NumericalError, PoseSmoothError
from .filter import init_model
from .nets import NormStats
from .pipeline import METHODS, eval_set, run_method
from .trajectory import DEFAULT_CONTEXT_LENGTH

log = logging.getLogger("posesmooth")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4, 5
GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _existing(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _out_file(path: str) -> Path:
    p = Path(path)
    if p.parent != Path(""):
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _noise_config(args) -> NoiseConfig:
    return NoiseConfig(q_pos=args.q_pos, q_vel=args.q_vel, r_pos=args.r_pos,
                       r_theta=args.r_theta, p0=args.p0)


def _train_config(args) -> training.TrainConfig:
    return training.TrainConfig(learning_rate=args.lr, weight_decay=args.weight_decay,
                                batch_size=args.batch_size, iterations=args.iterations,
                                T=args.context_length, seed=args.seed,
                                grad_clip=args.grad_clip if args.grad_clip > 0 else None)


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    noise = synth.NoiseModel(args.sigma_pos_base, args.sigma_pos_slope,
                             math.radians(args.sigma_theta_base_deg),
                             math.radians(args.sigma_theta_slope_deg),
                             args.outlier_prob, args.outlier_scale)
    cfg = synth.ScenarioConfig(n_trajectories=args.n, min_length=args.min_length,
                               max_length=args.max_length, frame_rate=args.frame_rate,
                               occlusion_prob=args.occlusion_prob, occlusion_min=args.occlusion_min,
                               occlusion_max=args.occlusion_max, seed=args.seed, noise=noise)
    if args.min_length < args.context_length:
        log.warning("min length %d is below the context length %d; short trajectories "
                    "are skipped by the filters", args.min_length, args.context_length)
    if args.n == 0:
        log.warning("--n 0: writing empty trajectory files")
    gt, noisy = synth.generate_scenario(cfg)
    out = _out_dir(args.out)
    synth.write_trajectories(gt, out / "gt.csv")
    synth.write_trajectories(noisy, out / "noisy.csv")
    manifest = {
        "command": "generate",
        "seed": args.seed,
        "context_length": args.context_length,
        "scenario": dataclasses.asdict(cfg),
        "files": {"ground_truth": "gt.csv", "noisy": "noisy.csv"},
        "n_trajectories": len(gt),
        "n_frames": int(sum(len(t) for t in gt)),
    }
    _write_json(manifest, out / "manifest.json")
    print(f"wrote {len(gt)} trajectories ({manifest['n_frames']} frames) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    gt = synth.read_trajectories(_existing(args.gt, "--gt"))
    noisy = synth.read_trajectories(_existing(args.noisy, "--noisy"))
    cfg = _train_config(args)
    print(f"config: lr={cfg.learning_rate:g} wd={cfg.weight_decay:g} batch_size={cfg.batch_size} "
          f"iterations={cfg.iterations} T={cfg.T} seed={cfg.seed} grad_clip={cfg.grad_clip}")
    samples = training.build_samples(gt, noisy, cfg.T)
    data = training.to_windows(samples)
    print(f"training on {len(data)} segments from {len(gt)} trajectories")
    if cfg.iterations == 0:
        if len(data) == 0:
            raise InvalidInputError("no segments of the requested context length")
        model = init_model(cfg.seed, NormStats.from_values(data.inputs))
    else:
        every = max(1, cfg.iterations // 20)

        def progress(it, loss):
            if it % every == 0:
                log.info("iter %d loss %.6f", it, loss)

        model = training.train(data, cfg, on_iteration=progress)
    ckpt = _out_file(args.out)
    checkpoint.save_checkpoint(model, ckpt)
    loss_log = Path(args.loss_log) if args.loss_log else ckpt.with_suffix(".loss.csv")
    with open(loss_log, "w") as fh:
        fh.write("iter,loss\n")
        for i, v in enumerate(model.loss_curve, start=1):
            fh.write(f"{i},{v:.17g}\n")
    if len(model.loss_curve):
        tail = model.loss_curve[-min(50, len(model.loss_curve)):]
        print(f"final loss {model.loss_curve[-1]:.6f} (mean of last {len(tail)}: {tail.mean():.6f})")
    else:
        print("final loss n/a (0 iterations, checkpoint holds the initialization)")
    print(f"checkpoint: {ckpt}  loss log: {loss_log}")
    return EXIT_OK


def cmd_smooth(args) -> int:
    inp = _existing(args.input, "--input")
    model = None
    if args.method == "deepkalpose":
        model = checkpoint.load_checkpoint(_existing(args.checkpoint, "--checkpoint"))
    elif args.checkpoint:
        log.warning("--checkpoint is ignored by --method %s", args.method)
    trajs = synth.read_trajectories(inp)
    out = run_method(args.method, trajs, model, args.context_length,
                     noise=_noise_config(args), mode=args.mode)
    synth.write_trajectories(out, _out_file(args.out))
    print(f"{args.method}: wrote {len(out)} trajectories "
          f"({sum(len(t) for t in out)} frames) to {args.out}")
    return EXIT_OK


def _report_rows(method: str, es: metrics.EvalSet) -> list[tuple[str, metrics.EvalReport]]:
    rows = [(method, r) for r in metrics.binned_report(es, "none")]
    rows += [(method, r) for r in metrics.binned_report(es, "occlusion")]
    rows += [(method, r) for r in metrics.binned_report(es, metrics.DEPTH_EDGES)]
    return rows


def _write_eval_outputs(out: Path, stem: str, rows, curves: dict[str, np.ndarray],
                        title: str) -> None:
    metrics.write_reports(rows, out / f"{stem}.csv")
    metrics.write_curve(curves, out / "curve.csv")
    (out / f"{stem}.txt").write_text(metrics.format_table(rows) + "\n")
    print(metrics.format_table(rows))
    if plots.available():
        plots.depth_curves(curves, out / "depth_curve.png", title=title)
    else:
        log.info("matplotlib not installed; skipping figures")


def cmd_eval(args) -> int:
    pred = synth.read_trajectories(_existing(args.pred, "--pred"))
    gt = synth.read_trajectories(_existing(args.gt, "--gt"))
    meas = synth.read_trajectories(_existing(args.meas, "--meas")) if args.meas else None
    es = eval_set(pred, gt, meas, args.context_length)
    rows = _report_rows(args.label, es)
    curves = {args.label: metrics.depth_curve(es, args.curve_bins)}
    _write_eval_outputs(_out_dir(args.out), "report", rows, curves, args.label)
    return EXIT_OK


def cmd_compare(args) -> int:
    gt = synth.read_trajectories(_existing(args.gt, "--gt"))
    noisy = synth.read_trajectories(_existing(args.noisy, "--noisy"))
    preds: dict[str, list] = {}
    if args.pred:
        for spec in args.pred:
            name, sep, path = spec.partition("=")
            if not sep or not name:
                raise UsageError(f"--pred expects NAME=FILE, got {spec!r}")
            preds[name] = synth.read_trajectories(_existing(path, f"--pred {name}"))
    else:
        model = checkpoint.load_checkpoint(_existing(args.checkpoint, "--checkpoint"))
        for method in METHODS:
            preds[method] = run_method(method, noisy, model, args.context_length,
                                       noise=_noise_config(args))
    rows, curves = [], {}
    for name, pred in preds.items():
        es = eval_set(pred, gt, noisy, args.context_length)
        rows += _report_rows(name, es)
        curves[name] = metrics.depth_curve(es, args.curve_bins)
    rows.sort(key=lambda r: _BIN_ORDER.get(r[1].label, len(_BIN_ORDER)))
    _write_eval_outputs(_out_dir(args.out), "compare", rows, curves, "ARED against distance")
    return EXIT_OK


_BIN_ORDER = {label: i for i, label in enumerate(
    ["all", "visible", "occluded", metrics.depth_label(0, 40), metrics.depth_label(40, np.inf)])}


def cmd_gradcheck(args) -> int:
    gt = synth.read_trajectories(_existing(args.gt, "--gt"))
    noisy = synth.read_trajectories(_existing(args.noisy, "--noisy"))
    data = training.to_windows(training.build_samples(gt, noisy, args.context_length))
    if len(data) == 0:
        raise InvalidInputError("sample files contain no segment of the context length")
    if not 0 <= args.window < len(data):
        raise UsageError(f"--window must be in [0, {len(data)})")
    if args.checkpoint:
        model = checkpoint.load_checkpoint(_existing(args.checkpoint, "--checkpoint"))
    else:
        model = training.probe_model(args.seed, NormStats.from_values(data.inputs))
    max_entries = None if args.max_entries <= 0 else args.max_entries
    rep = training.grad_check(model, data.subset([args.window]), args.epsilon,
                              max_entries=max_entries, seed=args.seed,
                              tolerance=GRAD_TOLERANCE, corrupt=args.inject_fault or ())
    for name in sorted(rep.per_tensor):
        log.info("%-28s %.3e", name, rep.per_tensor[name])
    print(f"checked {rep.checked_entries} entries in {len(rep.per_tensor)} tensors, "
          f"epsilon={args.epsilon:g}, yaw wrap margin {rep.wrap_margin:.3f} rad")
    print(f"max relative error {rep.max_rel_error:.3e} (tolerance {GRAD_TOLERANCE:g})")
    if not rep.ok:
        print("FAILED: " + ", ".join(rep.offending))
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--context-length", type=int, default=DEFAULT_CONTEXT_LENGTH,
                        help="segment length T (default %(default)s)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    kf = argparse.ArgumentParser(add_help=False)
    d = NoiseConfig()
    g = kf.add_argument_group("classic filter noise")
    g.add_argument("--q-pos", type=float, default=d.q_pos)
    g.add_argument("--q-vel", type=float, default=d.q_vel)
    g.add_argument("--r-pos", type=float, default=d.r_pos)
    g.add_argument("--r-theta", type=float, default=d.r_theta)
    g.add_argument("--p0", type=float, default=d.p0)

    parser = argparse.ArgumentParser(prog="posesmooth",
                                     description="Offline smoothing of vehicle pose trajectories.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="synthetic trajectory pairs")
    sc, nm = synth.ScenarioConfig(), synth.NoiseModel()
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=sc.n_trajectories, help="number of trajectories")
    p.add_argument("--min-length", type=int, default=sc.min_length)
    p.add_argument("--max-length", type=int, default=sc.max_length)
    p.add_argument("--frame-rate", type=float, default=sc.frame_rate)
    p.add_argument("--occlusion-prob", type=float, default=sc.occlusion_prob)
    p.add_argument("--occlusion-min", type=int, default=sc.occlusion_min)
    p.add_argument("--occlusion-max", type=int, default=sc.occlusion_max)
    p.add_argument("--sigma-pos-base", type=float, default=nm.sigma_pos_base, help="meters")
    p.add_argument("--sigma-pos-slope", type=float, default=nm.sigma_pos_slope,
                   help="meters per meter of depth")
    p.add_argument("--sigma-theta-base-deg", type=float,
                   default=math.degrees(nm.sigma_theta_base))
    p.add_argument("--sigma-theta-slope-deg", type=float,
                   default=math.degrees(nm.sigma_theta_slope), help="degrees per meter")
    p.add_argument("--outlier-prob", type=float, default=nm.outlier_prob)
    p.add_argument("--outlier-scale", type=float, default=nm.outlier_scale)
    p.set_defaults(func=cmd_generate, subparser=p)

    tc = training.TrainConfig()
    p = sub.add_parser("train", parents=[common], help="train the learned filter")
    p.add_argument("--gt", required=True, help="ground-truth trajectory file")
    p.add_argument("--noisy", required=True, help="noisy trajectory file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="iteration log (default: <out>.loss.csv)")
    p.add_argument("--lr", type=float, default=tc.learning_rate)
    p.add_argument("--weight-decay", type=float, default=tc.weight_decay)
    p.add_argument("--batch-size", type=int, default=tc.batch_size)
    p.add_argument("--iterations", type=int, default=tc.iterations)
    p.add_argument("--grad-clip", type=float, default=tc.grad_clip,
                   help="global gradient norm cap, 0 disables (default: %(default)s)")
    p.set_defaults(func=cmd_train, subparser=p)

    p = sub.add_parser("smooth", parents=[common, kf], help="correct a trajectory file")
    p.add_argument("--input", required=True, help="noisy trajectory file")
    p.add_argument("--out", required=True, help="corrected trajectory file")
    p.add_argument("--method", choices=METHODS, default="deepkalpose")
    p.add_argument("--checkpoint", help="required for --method deepkalpose")
    p.add_argument("--mode", choices=("cob", "forward", "backward"), default="cob",
                   help="branch selection (default cob)")
    p.set_defaults(func=cmd_smooth, subparser=p)

    p = sub.add_parser("eval", parents=[common], help="metric reports for one prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--meas", help="measurement file whose invalid frames define occlusion")
    p.add_argument("--label", default="pred", help="method name in the report")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--curve-bins", type=int, default=10)
    p.set_defaults(func=cmd_eval, subparser=p)

    p = sub.add_parser("compare", parents=[common, kf], help="raw vs mbkf vs deepkalpose")
    p.add_argument("--gt", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--checkpoint", help="model for the deepkalpose row")
    p.add_argument("--pred", action="append", metavar="NAME=FILE",
                   help="compare existing prediction files instead of running the methods")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--curve-bins", type=int, default=10)
    p.set_defaults(func=cmd_compare, subparser=p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--gt", required=True, help="ground-truth sample file")
    p.add_argument("--noisy", required=True, help="noisy sample file")
    p.add_argument("--checkpoint", help="check this model instead of a seeded probe")
    p.add_argument("--window", type=int, default=0, help="segment index to check")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--max-entries", type=int, default=12,
                   help="entries probed per tensor; 0 checks every entry")
    p.add_argument("--inject-fault", action="append", metavar="TENSOR", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck, subparser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.context_length < 3:
        args.subparser.error("--context-length must be at least 3")
    try:
        return args.func(args)
    except UsageError as exc:
        args.subparser.error(str(exc))
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidInputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PoseSmoothError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
