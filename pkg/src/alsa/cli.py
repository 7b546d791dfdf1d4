"""Command-line entry point: ``alsa <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .anchors import RectifyRule, estimate_accuracy, load_estimator, save_estimator
from .baselines import CalibratedScorer
from .config import load_config
from .data import LabeledLogits, load_logits, predict_and_score, save_logits
from .synth import linear_priors, synth_classifier
from .train import fit_estimator

log = logging.getLogger("alsa")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="random seed (overrides config seeds)")
    p.add_argument("--kind", choices=["gaussian", "exponential"], help="influence kind")
    p.add_argument("--alpha", type=float, help="confidence interval for rectification")
    p.add_argument("--anchors", type=int, help="anchor count k")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="alsa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic task")
    p.add_argument("--format", choices=["binary", "csv"], default="binary")

    p = sub.add_parser("train", parents=[common], help="fit anchors on validation logits")
    p.add_argument("--val", help="labeled validation logits (default: synthetic task)")

    p = sub.add_parser("estimate", parents=[common], help="estimate accuracy on a target")
    p.add_argument("--estimator", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--no-rectify", action="store_true")
    p.add_argument("--rule", choices=[r.value for r in RectifyRule])

    p = sub.add_parser("baseline", parents=[common], help="AC / DoC / IM / ATC estimates")
    p.add_argument("--val", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("run", parents=[common], help="full shift study")

    p = sub.add_parser("sweep", parents=[common], help="alpha or anchor-count sweep")
    p.add_argument("--param", choices=["alpha", "k"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values")

    sub.add_parser("ablate", parents=[common], help="freeze-one-group ablations")

    p = sub.add_parser("diagnose", parents=[common], help="band width report")
    p.add_argument("--logits", required=True)
    p.add_argument("--m", type=int, required=True, help="embedding dimension")
    p.add_argument("--z", type=float, default=3.291)
    p.add_argument("--estimator", help="estimator file for a surface export (c in {2, 3})")
    p.add_argument("--grid", type=int, default=50)

    p = sub.add_parser("time", parents=[common], help="estimate_accuracy timing table")
    p.add_argument("--estimator", help="estimator file (default: train on a synthetic task)")
    p.add_argument("--sizes", default="100000,200000,400000")
    p.add_argument("--repeats", type=int, default=3)
    return parser


def experiment_config(args) -> ex.ExperimentConfig:
    flat = load_config(args.config) if args.config else {}
    cfg = ex.ExperimentConfig.from_flat(flat)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.kind:
        changes["kinds"] = [args.kind]
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    if args.anchors is not None:
        changes["k"] = args.anchors
    return cfg.replace(**changes) if changes else cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(report: ex.Report, args, default: str) -> None:
    out = report.write(_out_dir(args, default))
    print(report.table())
    print(f"wrote {out / 'report.jsonl'} and {out / 'summary.json'}")


def cmd_synth(args) -> None:
    cfg = experiment_config(args)
    out = _out_dir(args, "synth")
    seed = cfg.seeds[0]
    task = synth_classifier(
        cfg.num_classes, cfg.dim, cfg.separation,
        linear_priors(cfg.num_classes, cfg.imbalance_start, cfg.imbalance_end),
        cfg.train_size, cfg.val_size, cfg.test_size, (cfg.spread_lo, cfg.spread_hi), seed,
    )
    ext = "csv" if args.format == "csv" else "bin"
    for name, data in [("val", task.val), ("test", task.test), ("initial_val", task.initial_val_logits)]:
        save_logits(out / f"{name}.{ext}", data, args.format)
    print(f"seed {seed}: val accuracy {predict_and_score(task.val)[2]:.4f}, "
          f"test accuracy {predict_and_score(task.test)[2]:.4f}, scorer epochs {task.epochs}")
    print(f"wrote {out}")


def cmd_train(args) -> None:
    cfg = experiment_config(args)
    seed = cfg.seeds[0]
    val = load_logits(args.val) if args.val else ex.load_task(cfg, seed)[0]
    if not isinstance(val, LabeledLogits):
        raise SystemExit("training needs labeled validation logits")
    out = _out_dir(args, "model")
    est, rep = fit_estimator(val, cfg.train.replace(kind=cfg.kinds[0], seed=seed), cfg.alpha)
    save_estimator(out / "estimator.alse", est)
    (out / "train_report.json").write_text(json.dumps(rep.to_dict(), indent=2), encoding="utf-8")
    print(f"{rep.stopped_by} after {rep.epochs_run} epochs; loss {rep.initial_loss:.4g} -> "
          f"{rep.final_loss:.4g}; estimate {rep.final_train_estimate:.6f} vs "
          f"accuracy {rep.true_validation_accuracy:.6f}")
    print(f"wrote {out / 'estimator.alse'}")


def cmd_estimate(args) -> None:
    est = load_estimator(args.estimator)
    if args.alpha is not None:
        est = est.with_alpha(args.alpha)
    cfg = experiment_config(args)
    target = load_logits(args.target)
    rule = args.rule or cfg.rectify_rule
    value, _ = estimate_accuracy(target, est, not args.no_rectify, rule)
    line = f"estimate {value:.6f}"
    if isinstance(target, LabeledLogits):
        line += f"  true {predict_and_score(target)[2]:.6f}"
    print(line)


def cmd_baseline(args) -> None:
    val, target = load_logits(args.val), load_logits(args.target)
    if not isinstance(val, LabeledLogits):
        raise SystemExit("baselines need labeled validation logits")
    scorer = CalibratedScorer.fit(val, num_bins=args.bins)
    print(f"temperature {scorer.temperature:.6f}")
    for name, value in scorer.all(target).items():
        print(f"{name:<4} {value:.6f}")
    if isinstance(target, LabeledLogits):
        print(f"true {predict_and_score(target)[2]:.6f}")


def cmd_run(args) -> None:
    cfg = experiment_config(args)
    _emit(ex.run_experiment(cfg, out_dir=_out_dir(args, "report")), args, "report")


def cmd_sweep(args) -> None:
    cfg = experiment_config(args)
    values = [v for v in args.values.split(",") if v.strip()]
    if args.param == "alpha":
        report = ex.sweep_alpha(cfg, [float(v) for v in values])
    else:
        report = ex.sweep_anchor_count(cfg, [int(v) for v in values])
    _emit(report, args, "sweep")


def cmd_ablate(args) -> None:
    report = ex.ablation_suite(experiment_config(args))
    _emit(report, args, "ablation")
    print("frozen groups unchanged:", report.extra["frozen_unchanged"])


def cmd_diagnose(args) -> None:
    logits = load_logits(args.logits)
    est = load_estimator(args.estimator) if args.estimator else None
    text, surface = ex.diagnose(logits, args.m, args.z, est, (args.grid, args.grid))
    print(text)
    if surface is not None:
        path = _out_dir(args, "diagnose") / "surface.csv"
        surface.write_csv(path)
        print(f"wrote {path}")


def cmd_time(args) -> None:
    cfg = experiment_config(args)
    if args.estimator:
        est = load_estimator(args.estimator)
    else:
        val = ex.load_task(cfg, cfg.seeds[0])[0]
        est = fit_estimator(val, cfg.train.replace(kind=cfg.kinds[0], seed=cfg.seeds[0],
                                                   max_epochs=1), cfg.alpha)[0]
    sizes = [int(s) for s in args.sizes.split(",")]
    table = ex.timing_probe(est, sizes, args.repeats)
    print(f"{'n':>9} {'k':>6} {'seconds':>10} {'ratio':>7}")
    for row in table:
        ratio = "" if row["ratio"] is None else f"{row['ratio']:.3f}"
        print(f"{row['n']:>9} {row['k']:>6} {row['seconds']:>10.4f} {ratio:>7}")
    if args.out:
        path = _out_dir(args, "timing") / "timing.json"
        path.write_text(json.dumps(table, indent=2), encoding="utf-8")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "estimate": cmd_estimate,
    "baseline": cmd_baseline, "run": cmd_run, "sweep": cmd_sweep,
    "ablate": cmd_ablate, "diagnose": cmd_diagnose, "time": cmd_time,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, OSError) as err:
        print(f"alsa {args.command}: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
