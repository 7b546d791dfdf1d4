"""Experiment driver: shift studies, sweeps, ablations, diagnostics and timing."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import anchors as anc
from .anchors import Estimator, InfluenceKind, RectifyRule, estimate_accuracy
from .baselines import CalibratedScorer
from .data import (
    LabeledLogits,
    band_projection_stats,
    band_width_bound,
    load_logits,
    predict,
    predict_and_score,
)
from .synth import ShiftSpec, apply_shift, linear_priors, synth_classifier
from .train import TrainConfig, fit_estimator, init_anchors

log = logging.getLogger(__name__)

BASELINES = ("AC", "DoC", "IM", "ATC")
# wider initial kernels than the library default keep anchors local enough
# for per-anchor rectification to separate in-support from far-away logits
HARNESS_VARIANCE_MEAN = 4.0
HARNESS_VARIANCE_STD = 1.0
ALSA_NAMES = {InfluenceKind.GAUSSIAN: "ALSA-G", InfluenceKind.EXPONENTIAL: "ALSA-E"}
ABLATION_MODES = {
    "Lrn": {},
    "Fix-a": {"freeze_positions": True},
    "Fix-p": {"freeze_peaks": True},
    "Fix-v": {"freeze_variances": True},
    "Fix-p&v": {"freeze_peaks": True, "freeze_variances": True},
}


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def mae(est, truth) -> float:
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    return float(np.mean(np.abs(est - truth)))


def r2_identity(est, truth) -> float:
    """``1 - SS_res / SS_tot`` with residuals measured from the line ``y = x``."""
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    ss_res = float(np.sum((est - truth) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else -math.inf
    return 1.0 - ss_res / ss_tot


def pearson(est, truth) -> float:
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    if est.size < 2 or np.std(est) == 0 or np.std(truth) == 0:
        return math.nan
    return float(np.clip(np.corrcoef(est, truth)[0, 1], -1.0, 1.0))


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "kind"}


@dataclass
class ExperimentConfig:
    # data: either files or a synthetic task
    val_path: str = ""
    test_path: str = ""
    num_classes: int = 10
    dim: int = 16
    separation: float = 0.75
    spread_lo: float = 0.6
    spread_hi: float = 1.6
    imbalance_start: float = 1.0
    imbalance_end: float = 3.0
    train_size: int = 20000
    val_size: int = 10000
    test_size: int = 20000
    # shift instances
    shift_kinds: list = field(default_factory=lambda: ["label_shift_dirichlet"])
    shift_count: int = 20
    concentration: float = 1.0
    shift_size: int = 5000
    scale_factors: list = field(default_factory=lambda: [0.5, 2.0, 4.0])
    noise_stds: list = field(default_factory=lambda: [0.5, 1.0])
    start_ratio: float = 1.0
    end_ratio: float = 3.0
    translate_magnitude: float = 50.0
    translate_band_offset: float = 1000.0
    translate_fractions: list = field(default_factory=lambda: [0.25, 0.5, 0.75])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    # estimators
    kinds: list = field(default_factory=lambda: ["gaussian"])
    alpha: float = anc.DEFAULT_ALPHA
    rectify: bool = True
    rectify_rule: str = RectifyRule.PER_ANCHOR.value
    baselines: bool = True
    num_bins: int = 10
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        init_variance_mean=HARNESS_VARIANCE_MEAN, init_variance_std=HARNESS_VARIANCE_STD))

    @classmethod
    def from_flat(cls, d: dict) -> "ExperimentConfig":
        own = {f.name for f in dataclasses.fields(cls)} - {"train"}
        unknown = set(d) - own - _TRAIN_FIELDS - {"seed", "kind"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in d.items() if k in own})
        train_kw = {k: v for k, v in d.items() if k in _TRAIN_FIELDS}
        if train_kw:
            cfg.train = cfg.train.replace(**train_kw)
        if "seed" in d:
            cfg.seeds = [int(d["seed"])]
        if "kind" in d:
            cfg.kinds = [d["kind"]]
        if isinstance(cfg.shift_kinds, str):
            cfg.shift_kinds = [cfg.shift_kinds]
        return cfg

    def to_flat(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "train"}
        tr = self.train.to_dict()
        d.update({k: tr[k] for k in sorted(_TRAIN_FIELDS)})
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        train_kw = {k: changes.pop(k) for k in list(changes) if k in _TRAIN_FIELDS}
        cfg = dataclasses.replace(self, **changes)
        if train_kw:
            cfg = dataclasses.replace(cfg, train=cfg.train.replace(**train_kw))
        return cfg


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def summarize(rows: list, group: str = "method") -> dict:
    """Aggregate MAE / R^2 / Pearson per method from per-instance rows."""
    methods = {}
    for row in rows:
        for name in row["estimates"]:
            methods.setdefault(name, None)
    out = {}
    for name in methods:
        pairs = [(r["estimates"][name], r["true_accuracy"]) for r in rows
                 if name in r["estimates"] and r.get("true_accuracy") is not None]
        if not pairs:
            continue
        est, truth = map(np.array, zip(*pairs))
        out[name] = {
            "mae": mae(est, truth),
            "r2": r2_identity(est, truth),
            "pearson": pearson(est, truth),
            "count": len(pairs),
        }
    return out


def summarize_by_shift(rows: list) -> dict:
    kinds = sorted({r["shift"]["kind"] for r in rows if "shift" in r})
    return {k: summarize([r for r in rows if r["shift"]["kind"] == k]) for k in kinds}


@dataclass
class Report:
    rows: list
    summary: dict
    config: dict
    runtime: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def mae(self, method: str, shift: str | None = None) -> float:
        if shift is None:
            return self.summary[method]["mae"]
        return summarize_by_shift(self.rows)[shift][method]["mae"]

    def recompute_summary(self) -> dict:
        return summarize(self.rows)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.jsonl", "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, default=_json_default) + "\n")
        block = {"summary": self.summary, "runtime_seconds": self.runtime,
                 "config": self.config, **self.extra}
        (out / "summary.json").write_text(
            json.dumps(block, indent=2, default=_json_default), encoding="utf-8")
        return out

    @classmethod
    def read(cls, out_dir) -> "Report":
        out = Path(out_dir)
        rows = [json.loads(line) for line in open(out / "report.jsonl", encoding="utf-8") if line.strip()]
        block = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        extra = {k: v for k, v in block.items() if k not in ("summary", "runtime_seconds", "config")}
        return cls(rows, block["summary"], block["config"], block["runtime_seconds"], extra)

    def table(self) -> str:
        blocks = [("all", self.summary)]
        by_shift = summarize_by_shift(self.rows)
        if len(by_shift) > 1:
            blocks += list(by_shift.items())
        lines = []
        for title, summary in blocks:
            lines.append(f"[{title}]")
            lines.append(f"{'method':<12} {'MAE(%)':>8} {'R2':>8} {'rho':>7} {'n':>4}")
            for name, s in summary.items():
                lines.append(f"{name:<12} {100 * s['mae']:8.3f} {s['r2']:8.3f} "
                             f"{s['pearson']:7.3f} {s['count']:4d}")
        return "\n".join(lines)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# --------------------------------------------------------------------------
# data and shifts
# --------------------------------------------------------------------------


def load_task(cfg: ExperimentConfig, seed: int):
    """``(val, test)`` labeled logits: from files if given, else a seeded synthetic task."""
    if cfg.val_path:
        val = load_logits(cfg.val_path)
        test = load_logits(cfg.test_path or cfg.val_path)
        if not (isinstance(val, LabeledLogits) and isinstance(test, LabeledLogits)):
            raise ValueError("experiment files must carry labels")
        return val, test
    task = synth_classifier(
        cfg.num_classes, cfg.dim, cfg.separation,
        linear_priors(cfg.num_classes, cfg.imbalance_start, cfg.imbalance_end),
        cfg.train_size, cfg.val_size, cfg.test_size,
        (cfg.spread_lo, cfg.spread_hi), seed,
    )
    return task.val, task.test


def shift_instances(cfg: ExperimentConfig, seed: int) -> list:
    out = []
    for j, kind in enumerate(cfg.shift_kinds):
        out.extend(_instances_of(kind, cfg, 1000 * (seed + 1) + 100 * j))
    return out


def _instances_of(kind: str, cfg: ExperimentConfig, base: int) -> list:
    if kind == "label_shift_dirichlet":
        params = {"concentration": cfg.concentration, "size": cfg.shift_size}
        return [ShiftSpec(kind, params, base + i) for i in range(cfg.shift_count)]
    if kind == "logit_scale":
        return [ShiftSpec(kind, {"factor": float(f)}, base + i) for i, f in enumerate(cfg.scale_factors)]
    if kind == "logit_noise":
        return [ShiftSpec(kind, {"std": float(s)}, base + i) for i, s in enumerate(cfg.noise_stds)]
    if kind == "class_imbalance_linear":
        params = {"start_ratio": cfg.start_ratio, "end_ratio": cfg.end_ratio}
        return [ShiftSpec(kind, params, base + i) for i in range(cfg.shift_count)]
    if kind == "logit_translate":
        return [ShiftSpec(kind, {"magnitude": cfg.translate_magnitude, "fraction": float(f),
                           "band_offset": cfg.translate_band_offset},
                          base + i) for i, f in enumerate(cfg.translate_fractions)]
    if kind == "identity":
        return [ShiftSpec("logit_scale", {"factor": 1.0}, base)]
    raise ValueError(f"unknown shift kind {kind!r}")


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def _alsa_estimate(est: Estimator, target, cfg: ExperimentConfig) -> float:
    return estimate_accuracy(target, est, cfg.rectify, cfg.rectify_rule)[0]


def _train_estimators(val, cfg: ExperimentConfig, seed: int, timer: dict):
    out = {}
    for kind in cfg.kinds:
        kind = InfluenceKind.parse(kind)
        t0 = time.perf_counter()
        est, rep = fit_estimator(val, cfg.train.replace(kind=kind, seed=seed), cfg.alpha)
        timer[ALSA_NAMES[kind]] = timer.get(ALSA_NAMES[kind], 0.0) + time.perf_counter() - t0
        out[ALSA_NAMES[kind]] = (est, rep)
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Report:
    """Fit every method on validation logits and score it on each shift instance.

    If a component fails and ``out_dir`` is given, the rows gathered so far are
    written there (with the error message) before the exception propagates.
    """
    rows, runtime, train_reports = [], {}, []
    try:
        for seed in cfg.seeds:
            _run_seed(cfg, seed, rows, runtime, train_reports)
    except Exception as err:
        if out_dir is not None:
            partial = Report(rows, summarize(rows), cfg.to_flat(), runtime,
                             {"train_reports": train_reports, "error": repr(err), "partial": True})
            partial.write(out_dir)
            log.error("experiment aborted; partial report written to %s", out_dir)
        raise
    for r in train_reports:
        r.pop("loss_history", None)
    return Report(rows, summarize(rows), cfg.to_flat(), runtime,
                  {"train_reports": train_reports, "by_shift": summarize_by_shift(rows)})


def _run_seed(cfg, seed, rows, runtime, train_reports):
    val, test = load_task(cfg, seed)
    scorer = None
    if cfg.baselines:
        t0 = time.perf_counter()
        scorer = CalibratedScorer.fit(val, num_bins=cfg.num_bins)
        runtime["baseline_fit"] = runtime.get("baseline_fit", 0.0) + time.perf_counter() - t0
    estimators = _train_estimators(val, cfg, seed, runtime)
    for name, (_, rep) in estimators.items():
        train_reports.append({"seed": seed, "method": name, **rep.to_dict()})
    for idx, spec in enumerate(shift_instances(cfg, seed)):
        target = apply_shift(test, spec)
        _, _, truth = predict_and_score(target)
        estimates, extra = {}, {}
        if scorer is not None:
            for name in BASELINES:
                t0 = time.perf_counter()
                estimates[name] = getattr(scorer, name.lower())(target)
                runtime[name] = runtime.get(name, 0.0) + time.perf_counter() - t0
            extra["doc_printed"] = scorer.doc_printed(target)
        for name, (est, _) in estimators.items():
            t0 = time.perf_counter()
            estimates[name] = _alsa_estimate(est, target, cfg)
            runtime[name] = runtime.get(name, 0.0) + time.perf_counter() - t0
        rows.append({"seed": seed, "instance": idx, "shift": spec.to_dict(),
                     "n": target.n, "true_accuracy": truth,
                     "estimates": estimates, **extra})


def sweep_alpha(cfg: ExperimentConfig, alphas) -> Report:
    """MAE per confidence-interval setting; one trained anchor set per seed is reused."""
    alphas = list(alphas)
    if not alphas:
        raise ValueError("empty alpha list")
    rows = []
    kind = InfluenceKind.parse(cfg.kinds[0])
    for seed in cfg.seeds:
        val, test = load_task(cfg, seed)
        est, _ = fit_estimator(val, cfg.train.replace(kind=kind, seed=seed), cfg.alpha)
        for idx, spec in enumerate(shift_instances(cfg, seed)):
            target = apply_shift(test, spec)
            truth = predict_and_score(target)[2]
            estimates = {f"alpha={a:g}": _alsa_estimate(est.with_alpha(a), target, cfg)
                         for a in alphas}
            rows.append({"seed": seed, "instance": idx, "shift": spec.to_dict(),
                         "n": target.n, "true_accuracy": truth, "estimates": estimates})
    return Report(rows, summarize(rows), {**cfg.to_flat(), "alphas": alphas})


def sweep_anchor_count(cfg: ExperimentConfig, ks) -> Report:
    """MAE per anchor count; anchors are retrained for every ``k``."""
    ks = [int(k) for k in ks]
    if not ks:
        raise ValueError("empty anchor-count list")
    rows = []
    kind = InfluenceKind.parse(cfg.kinds[0])
    for seed in cfg.seeds:
        val, test = load_task(cfg, seed)
        ests = {k: fit_estimator(val, cfg.train.replace(kind=kind, seed=seed, k=k), cfg.alpha)[0]
                for k in ks}
        for idx, spec in enumerate(shift_instances(cfg, seed)):
            target = apply_shift(test, spec)
            truth = predict_and_score(target)[2]
            estimates = {f"k={k}": _alsa_estimate(e, target, cfg) for k, e in ests.items()}
            rows.append({"seed": seed, "instance": idx, "shift": spec.to_dict(),
                         "n": target.n, "true_accuracy": truth, "estimates": estimates})
    return Report(rows, summarize(rows), {**cfg.to_flat(), "anchor_counts": ks})


def ablation_suite(cfg: ExperimentConfig) -> Report:
    """Train with each parameter group frozen in turn on identical data and seeds."""
    rows, frozen_ok = [], {}
    kind = InfluenceKind.parse(cfg.kinds[0])
    for seed in cfg.seeds:
        val, test = load_task(cfg, seed)
        ests = {}
        for mode, flags in ABLATION_MODES.items():
            tcfg = cfg.train.replace(kind=kind, seed=seed, **flags)
            start = init_anchors(val, tcfg)
            est, _ = fit_estimator(val, tcfg, cfg.alpha, anchors=start)
            ests[mode] = est
            checks = []
            if tcfg.freeze_positions:
                checks.append(np.array_equal(start.positions, est.anchors.positions))
            if tcfg.freeze_peaks:
                checks.append(np.array_equal(start.peaks, est.anchors.peaks))
            if tcfg.freeze_variances:
                checks.append(np.array_equal(start.variances, est.anchors.variances))
            frozen_ok[mode] = frozen_ok.get(mode, True) and all(checks)
        for idx, spec in enumerate(shift_instances(cfg, seed)):
            target = apply_shift(test, spec)
            truth = predict_and_score(target)[2]
            estimates = {m: _alsa_estimate(e, target, cfg) for m, e in ests.items()}
            rows.append({"seed": seed, "instance": idx, "shift": spec.to_dict(),
                         "n": target.n, "true_accuracy": truth, "estimates": estimates})
    return Report(rows, summarize(rows), cfg.to_flat(), extra={"frozen_unchanged": frozen_ok})


def init_robustness(cfg: ExperimentConfig, grid_shape=(50, 50)) -> list:
    """Per seed, train from sampled and from random-normal positions on the same data.

    Returns one record per seed with the mean absolute ``p_true`` difference
    of the two estimators over a grid spanning the validation logit band.
    """
    kind = InfluenceKind.parse(cfg.kinds[0])
    out = []
    for seed in cfg.seeds:
        val, _ = load_task(cfg, seed)
        plane = anc.fit_plane(val.values)
        u, v = anc.grid_axes(val.values, plane, grid_shape)
        surfaces = {}
        for init in ("sampled", "random_normal"):
            est, _ = fit_estimator(val, cfg.train.replace(kind=kind, seed=seed, init=init), cfg.alpha)
            surfaces[init] = anc.surface_grid(est, plane, u, v)
        a, b = surfaces["sampled"], surfaces["random_normal"]
        ok = a.valid & b.valid
        out.append({"seed": seed, "mean_abs_diff": float(np.mean(np.abs(a.values[ok] - b.values[ok]))),
                    "max_abs_diff": float(np.max(np.abs(a.values[ok] - b.values[ok]))),
                    "grid_points": int(ok.sum())})
    return out


# --------------------------------------------------------------------------
# diagnostics and timing
# --------------------------------------------------------------------------


def diagnose(logits, m: int, z: float = 3.291, estimator: Estimator | None = None,
             grid_shape=(50, 50), confidence: float | None = None):
    """Band-width report for a logit set; returns ``(text, surface_or_None)``."""
    if confidence is None:
        confidence = math.erf(z / math.sqrt(2.0))
    values = logits.values if hasattr(logits, "values") else np.asarray(logits)
    n, c = values.shape
    std, (lo, hi) = band_projection_stats(values, confidence)
    bound = band_width_bound(m, c, z)
    lines = [
        f"samples: {n}  classes: {c}",
        f"projection std: {std:.6g}",
        f"central {100 * confidence:.3g}% projection range: [{lo:.6g}, {hi:.6g}] width {hi - lo:.6g}",
        f"band width bound (m={m}, c={c}, z={z}): {bound:.3f}",
        f"within bound: {'yes' if hi - lo <= bound else 'no'}",
        "predicted class counts: " + " ".join(
            f"{j}:{k}" for j, k in enumerate(np.bincount(predict(values), minlength=c))),
    ]
    if isinstance(logits, LabeledLogits):
        lines.append(f"accuracy: {predict_and_score(logits)[2]:.6g}")
    surface = None
    if estimator is not None and c in (2, 3):
        plane = anc.fit_plane(values)
        u, v = anc.grid_axes(values, plane, grid_shape)
        surface = anc.surface_grid(estimator, plane, u, v)
        lines.append(f"surface grid: {surface.shape[0]}x{surface.shape[1]} "
                     f"({int((~surface.valid).sum())} skipped)")
    return "\n".join(lines), surface


def timing_probe(est: Estimator, sizes, repeats: int = 3, seed: int = 0,
                 rectify: bool = True) -> list:
    """Best-of-``repeats`` wall time of ``estimate_accuracy`` per sample count."""
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rng = np.random.default_rng(seed)
    pool = rng.normal(size=(max(sizes), est.num_classes)) * 3.0
    table, prev = [], None
    for n in sizes:
        target = pool[:n]
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            estimate_accuracy(target, est, rectify)
            best = min(best, time.perf_counter() - t0)
        table.append({"n": n, "k": est.anchors.k, "seconds": best,
                      "ratio": None if prev is None else best / prev})
        prev = best
    return table
