"""Command-line entry point.

Subcommands write their artifacts into ``--out`` (default: current directory)
and print a one-line summary. Exit status: 0 success, 1 failed check,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, evaluation, losses
from .evaluation import Detection, GroundTruth
from .geometry import Box, BoxDelta
from .simulator import ExperimentReport, TrainConfig, run_experiment

SEED_ENV = "IOU_BALANCED_SEED"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

log = logging.getLogger("iou_balanced")


class UsageError(Exception):
    pass


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- gradcurve ------------------------------------------------------------


def cmd_gradcurve(args) -> int:
    if args.presets:
        pairs = sorted(analysis.LOC_PRESETS.items())
    else:
        pairs = [(args.lambda_, args.w_loc)]
    axes = ["center", "size"] if args.axis == "both" else [args.axis]
    curves = []
    for axis in axes:
        for lam, w in pairs:
            spec = analysis.CurveSpec(lam, w, args.delta, axis, args.d_min, args.d_max, args.n_points)
            curves.append((spec, analysis.gradient_norm_curve(spec)))
    path = _out_dir(args) / "gradcurve.csv"
    with path.open("w", newline="") as fh:
        analysis.write_curve_csv(curves, fh)
    print(f"gradcurve: {len(curves)} curve(s), {sum(len(c) for _, c in curves)} points -> {path}")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed, 0)
    reports = {kind: analysis.finite_diff_check(kind, args.trials, seed + i) for i, kind in enumerate(("cls", "loc"))}
    path = _out_dir(args) / "gradcheck.json"
    _dump_json({"seed": seed, "trials": args.trials, "reports": {k: r.to_dict() for k, r in reports.items()}}, path)
    worst = max(r.max_rel_error for r in reports.values())
    ok = all(r.passed for r in reports.values())
    print(f"gradcheck: {'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (tol {analysis.FD_TOLERANCE:g}) -> {path}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# -- demo-losses ----------------------------------------------------------


def _positive(score: float, iou: float, residual=(0.0, 0.0, 0.0, 0.0)) -> losses.PositiveExample:
    zero = BoxDelta(0.0, 0.0, 0.0, 0.0)
    return losses.PositiveExample(score, BoxDelta(*residual), zero, iou)


def cmd_demo_losses(args) -> int:
    cfg = losses.LossConfig(eta=args.eta, lambda_=args.lambda_, delta=args.delta, w_loc=args.w_loc)
    # two positives whose CE values are exactly 1 and 2
    pos = [_positive(math.exp(-1.0), 0.9, (0.5, 0.0, 0.0, 0.0)), _positive(math.exp(-2.0), 0.5, (0.05, -0.3, 0.0, 0.2))]
    neg = [losses.NegativeExample(0.1)]
    result = {
        "config": {"eta": cfg.eta, "lambda": cfg.lambda_, "delta": cfg.delta, "w_loc": cfg.w_loc},
        "cross_entropy": [losses.cross_entropy(p.score, 1) for p in pos],
        "cls_weights": losses.cls_weights(pos, cfg.eta),
        "cls_loss": losses.cls_loss(pos, neg, cfg),
        "cls_loss_unweighted": losses.unweighted_cls_loss(pos, neg),
        "loc_weights": losses.loc_weights(pos, cfg),
        "loc_loss": losses.loc_loss(pos, cfg),
        "loc_loss_unweighted": losses.unweighted_loc_loss(pos, cfg.delta),
        "loc_grad": [list(g.as_tuple()) for g in losses.loc_grad(pos, cfg)],
        "calibrated_w_loc": analysis.calibrate_w_loc(pos, cfg.lambda_, cfg.delta),
    }
    path = _out_dir(args) / "demo_losses.json"
    _dump_json(result, path)
    print(f"demo-losses: cls_loss={result['cls_loss']:.6f} loc_loss={result['loc_loss']:.6f} -> {path}")
    return EXIT_OK


# -- train / compare ------------------------------------------------------


def _resolve_seed(flag: int | None, fallback: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return fallback


def build_train_config(args) -> TrainConfig:
    """JSON config file, then the seed environment variable, then explicit flags."""
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    cfg = TrainConfig.from_dict(data)
    loss_over = {
        k: v
        for k, v in (
            ("eta", args.eta),
            ("lambda_", args.lambda_),
            ("w_loc", args.w_loc),
            ("delta", args.delta),
            ("loc_weight_mode", args.loc_weight_mode),
        )
        if v is not None
    }
    over = {
        k: v
        for k, v in (
            ("epochs", args.epochs),
            ("scenes_count", args.scenes),
            ("test_scenes", args.test_scenes),
            ("learning_rate", args.lr),
            ("cls_learning_rate", args.cls_lr),
        )
        if v is not None
    }
    if args.baseline:
        over["baseline"] = True
    if args.no_calibrate:
        over["calibrate_w_loc"] = False
    over["seed"] = _resolve_seed(args.seed, cfg.seed)
    return replace(cfg, loss=replace(cfg.loss, **loss_over), **over)


def _write_experiment(report: ExperimentReport, out: Path, prefix: str = "") -> None:
    _dump_json(report.to_dict(), out / f"{prefix}experiment_report.json")
    with (out / f"{prefix}ap_table.csv").open("w", newline="") as fh:
        evaluation.write_ap_csv(report.ap_table, fh)
    with (out / f"{prefix}score_iou_bins.csv").open("w", newline="") as fh:
        evaluation.write_bins_csv(report.stats, fh)


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    report = run_experiment(cfg)
    out = _out_dir(args)
    _write_experiment(report, out)
    t = report.ap_table
    rho = "n/a" if report.spearman is None else f"{report.spearman:.4f}"
    print(f"train: AP={t.mean:.4f} AP50={t.ap50:.4f} AP80={t.ap80:.4f} AP90={t.ap90:.4f} spearman={rho} w_loc={report.w_loc:.4f} -> {out}")
    return EXIT_OK


COMPARE_COLUMNS = ("seed", "metric", "baseline", "treatment", "delta")
COMPARE_METRICS = ("AP", "AP50", "AP60", "AP70", "AP75", "AP80", "AP90", "spearman")


def _metrics(report: ExperimentReport) -> dict[str, float | None]:
    t = report.ap_table
    return {
        "AP": t.mean,
        "AP50": t.ap50,
        "AP60": t.ap60,
        "AP70": t.ap70,
        "AP75": t.ap75,
        "AP80": t.ap80,
        "AP90": t.ap90,
        "spearman": report.spearman,
    }


def compare_runs(cfg: TrainConfig, seeds: list[int]) -> dict:
    """Paired baseline/treatment runs over ``seeds``; deltas are treatment minus baseline."""
    per_seed = []
    for seed in seeds:
        treat = run_experiment(replace(cfg, seed=seed, baseline=False))
        base = run_experiment(replace(cfg, seed=seed, baseline=True))
        mb, mt = _metrics(base), _metrics(treat)
        per_seed.append(
            {
                "seed": seed,
                "w_loc": treat.w_loc,
                "baseline": mb,
                "treatment": mt,
                "delta": {k: (None if mb[k] is None or mt[k] is None else mt[k] - mb[k]) for k in COMPARE_METRICS},
                "baseline_ap_table": base.ap_table.to_dict(),
                "treatment_ap_table": treat.ap_table.to_dict(),
            }
        )
    mean_delta = {}
    for k in COMPARE_METRICS:
        vals = [s["delta"][k] for s in per_seed if s["delta"][k] is not None]
        mean_delta[k] = float(np.mean(vals)) if vals else None
    return {"config": cfg.to_dict(), "seeds": seeds, "per_seed": per_seed, "mean_delta": mean_delta}


def cmd_compare(args) -> int:
    cfg = build_train_config(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    result = compare_runs(cfg, seeds)
    out = _out_dir(args)
    _dump_json(result, out / "compare_report.json")
    with (out / "compare_deltas.csv").open("w", newline="") as fh:
        fh.write(",".join(COMPARE_COLUMNS) + "\n")
        for s in result["per_seed"]:
            for k in COMPARE_METRICS:
                row = [s["seed"], k, s["baseline"][k], s["treatment"][k], s["delta"][k]]
                fh.write(",".join("" if v is None else repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    md = result["mean_delta"]
    fmt = lambda v: "n/a" if v is None else f"{v:+.4f}"  # noqa: E731
    print(
        f"compare: {len(seeds)} seed(s) mean delta AP50={fmt(md['AP50'])} AP80={fmt(md['AP80'])} "
        f"AP90={fmt(md['AP90'])} spearman={fmt(md['spearman'])} -> {out}"
    )
    return EXIT_OK


# -- eval -----------------------------------------------------------------


def _load_records(path: str, key: str) -> list[dict]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if isinstance(data, dict) and key in data:
        # an experiment_report.json; detections are grouped per held-out scene
        data = data[key]
        if data and isinstance(data[0], list):
            data = [d for group in data for d in group]
    if not isinstance(data, list):
        raise UsageError(f"{path}: expected a JSON list of records")
    return data


def load_detections(path: str) -> list[Detection]:
    try:
        return [
            Detection(Box(*map(float, r["box"])), float(r["score"]), int(r.get("class_id", 0)), int(r.get("image_id", 0)))
            for r in _load_records(path, "detections")
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: bad detection record: {exc}") from exc


def load_ground_truth(path: str) -> list[GroundTruth]:
    try:
        return [
            GroundTruth(Box(*map(float, r["box"])), int(r.get("class_id", 0)), int(r.get("image_id", 0)))
            for r in _load_records(path, "ground_truth")
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: bad ground-truth record: {exc}") from exc


def cmd_eval(args) -> int:
    dets = load_detections(args.detections)
    gts = load_ground_truth(args.ground_truth)
    if args.nms is not None:
        dets = evaluation.nms(dets, args.nms)
    table = evaluation.coco_ap(dets, gts)
    st = evaluation.score_iou_stats(dets, gts)
    ious = evaluation.best_gt_iou(dets, gts)
    pairs = [(d.score, v) for d, v in zip(dets, ious) if v >= 0.5]
    rho = evaluation.rank_correlation(pairs) if len(pairs) >= 2 else None
    out = _out_dir(args)
    with (out / "ap_table.csv").open("w", newline="") as fh:
        evaluation.write_ap_csv(table, fh)
    with (out / "score_iou_bins.csv").open("w", newline="") as fh:
        evaluation.write_bins_csv(st, fh)
    _dump_json({"ap_table": table.to_dict(), "score_iou_stats": st.to_dict(), "spearman": rho}, out / "eval_report.json")
    print(f"eval: {len(dets)} detections, {len(gts)} GT, AP={table.mean:.4f} AP50={table.ap50:.4f} -> {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def _add_loss_flags(p: argparse.ArgumentParser, defaults: bool) -> None:
    d = losses.LossConfig()
    p.add_argument("--eta", type=float, default=d.eta if defaults else None)
    p.add_argument("--lambda", dest="lambda_", type=float, default=d.lambda_ if defaults else None)
    p.add_argument("--w-loc", dest="w_loc", type=float, default=d.w_loc if defaults else None)
    p.add_argument("--delta", type=float, default=d.delta if defaults else None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    _add_loss_flags(p, defaults=False)
    p.add_argument("--loc-weight-mode", choices=["manual", "normalized"], default=None)
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags take precedence")
    p.add_argument("--seed", type=int, default=None, help=f"overrides the config file and ${SEED_ENV}")
    p.add_argument("--baseline", action="store_true", help="plain CE + smooth L1")
    p.add_argument("--no-calibrate", action="store_true", help="use --w-loc as given instead of calibrating it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--scenes", type=int, help="training scenes")
    p.add_argument("--test-scenes", type=int)
    p.add_argument("--lr", type=float, help="regression head learning rate")
    p.add_argument("--cls-lr", type=float, help="classification head learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iou-balanced", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcurve", help="gradient-norm curves of the IoU-balanced smooth L1")
    _add_loss_flags(p, defaults=True)
    p.add_argument("--axis", choices=["center", "size", "both"], default="center")
    p.add_argument("--presets", action="store_true", help="emit every (lambda, w_loc) preset instead")
    p.add_argument("--d-min", type=float, default=-0.98)
    p.add_argument("--d-max", type=float, default=0.98)
    p.add_argument("--n-points", type=int, default=197)
    p.set_defaults(func=cmd_gradcurve)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("demo-losses", help="evaluate the losses on a fixed two-positive batch")
    _add_loss_flags(p, defaults=True)
    p.set_defaults(func=cmd_demo_losses)

    p = sub.add_parser("train", help="train and evaluate once on the synthetic task")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="paired baseline vs IoU-balanced runs over several seeds")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds starting at --seed")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="AP table and score/IoU statistics for a detection file")
    p.add_argument("--detections", required=True, help="JSON list of {box, score, class_id, image_id}, or an experiment_report.json")
    p.add_argument("--ground-truth", required=True, help="JSON list of {box, class_id, image_id}, or an experiment_report.json")
    p.add_argument("--nms", type=float, default=None, help="apply greedy NMS at this IoU first")
    p.set_defaults(func=cmd_eval)

    for action in sub.choices.values():
        action.add_argument("--out", default=".", help="output directory")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
