"""Fitting anchors to labeled validation logits by minimising binary cross-entropy."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .anchors import (
    DEFAULT_ALPHA,
    DEFAULT_PEAK_CAP,
    AnchorSet,
    Estimator,
    InfluenceKind,
    cosine_distances,
    total_influence,
    unit_rows,
)
from .data import LabeledLogits, predict_and_score

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
GRAD_CHUNK = 4096


@dataclass
class TrainConfig:
    k: int = 512
    kind: InfluenceKind = InfluenceKind.GAUSSIAN
    epsilon: float = 1e-5
    max_epochs: int = 300
    min_epochs: int = 1
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 0  # 0 means full batch
    init: str = "sampled"
    init_peak_magnitude: float = 3.0
    init_variance_mean: float = 2.0
    init_variance_std: float = 0.5
    peak_cap: float = DEFAULT_PEAK_CAP
    freeze_positions: bool = False
    freeze_peaks: bool = False
    freeze_variances: bool = False
    seed: int = 0

    def __post_init__(self):
        self.kind = InfluenceKind.parse(self.kind)
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.min_epochs <= self.max_epochs:
            raise ValueError("min_epochs must lie in [1, max_epochs]")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("sampled", "random_normal"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        if not (self.peak_cap > 0 and self.init_peak_magnitude > 0):
            raise ValueError("peak_cap and init_peak_magnitude must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainReport:
    epochs_run: int
    final_loss: float
    final_train_estimate: float
    true_validation_accuracy: float
    stopped_by: str  # "tolerance", "epoch_cap" or "diverged"
    initial_loss: float
    loss_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, report: TrainReport, anchors: AnchorSet):
        super().__init__(f"non-finite loss after {report.epochs_run} epochs")
        self.report = report
        self.anchors = anchors


@dataclass
class AnchorGradients:
    positions: np.ndarray
    peaks: np.ndarray
    variances: np.ndarray


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------


def _positive_normal(rng, mean, std, size):
    out = rng.normal(mean, std, size)
    bad = out <= 0
    while bad.any():
        out[bad] = rng.normal(mean, std, int(bad.sum()))
        bad = out <= 0
    return out


def init_anchors(val: LabeledLogits, cfg: TrainConfig) -> AnchorSet:
    """Seeded anchor initialisation.

    ``sampled`` copies ``k`` validation rows (with replacement only when
    ``k > n``) and gives each a peak of ``+/- init_peak_magnitude`` according
    to whether that row is classified correctly. ``random_normal`` draws
    positions from a per-coordinate normal fitted to the validation logits and
    takes the peak sign from the nearest validation row in cosine distance.
    """
    if val.n == 0:
        raise ValueError("empty validation set")
    rng = np.random.default_rng(cfg.seed)
    _, correct, _ = predict_and_score(val)
    z = val.values
    if cfg.init == "sampled":
        idx = rng.choice(val.n, size=cfg.k, replace=cfg.k > val.n)
        positions = z[idx].copy()
        signs = np.where(correct[idx] == 1, 1.0, -1.0)
    else:
        mu, sd = z.mean(axis=0), z.std(axis=0)
        positions = rng.normal(mu, sd, size=(cfg.k, val.num_classes))
        nearest = np.argmin(cosine_distances(unit_rows(positions, "anchor"), unit_rows(z)), axis=1)
        signs = np.where(correct[nearest] == 1, 1.0, -1.0)
    variances = _positive_normal(rng, cfg.init_variance_mean, cfg.init_variance_std, cfg.k)
    return AnchorSet(positions, signs * cfg.init_peak_magnitude, variances)


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def _bce_terms(total, correct):
    # log-sigmoid is finite for any finite input; flooring the probabilities
    # would zero the gradient of every saturated sample
    return -(correct * log_expit(total) + (1 - correct) * log_expit(-total))


def bce_loss(val: LabeledLogits, anchors: AnchorSet, kind=InfluenceKind.GAUSSIAN) -> float:
    """Summed binary cross-entropy between ``p_true`` and correctness flags."""
    _, correct, _ = predict_and_score(val)
    total = total_influence(val.values, anchors, kind)
    return float(np.sum(_bce_terms(total, correct)))


def _forward_backward(z, correct, anchors: AnchorSet, kind, need_grad=True):
    """Loss, total influence and (optionally) gradients for one batch."""
    kind = InfluenceKind.parse(kind)
    a_norm = np.linalg.norm(anchors.positions, axis=1)
    a_unit = anchors.positions / a_norm[:, None]
    v, p = anchors.variances, anchors.peaks
    sq_v = v * v
    gp = np.zeros_like(p)
    gv = np.zeros_like(v)
    ga_z = np.zeros_like(anchors.positions)
    ga_cos = np.zeros_like(p)
    loss = 0.0
    totals = np.empty(z.shape[0])
    gauss = kind is InfluenceKind.GAUSSIAN
    for start in range(0, z.shape[0], GRAD_CHUNK):
        sl = slice(start, start + GRAD_CHUNK)
        zu = unit_rows(z[sl])
        cos = zu @ a_unit.T
        dist = np.subtract(1.0, cos)
        decay = dist * dist if gauss else dist.copy()
        decay *= -sq_v
        np.exp(decay, out=decay)
        total = decay @ p
        totals[sl] = total
        delta = correct[sl]
        loss += float(np.sum(_bce_terms(total, delta)))
        if not need_grad:
            continue
        g = expit(total) - delta  # dL/dInfl_i
        gp += decay.T @ g
        # dL/dInfl_ij = g_i p_j decay_ij; fold g_i in place, p_j later
        decay *= g[:, None]
        if gauss:
            # dL/d dist_ij = -2 v_j^2 p_j g_i decay_ij dist_ij
            decay *= dist
            s_dist = np.einsum("ij,ij->j", decay, dist)
            s_cos = np.einsum("ij,ij->j", decay, cos)
            gv += -2.0 * v * p * s_dist
            scale = -2.0 * sq_v * p
        else:
            # dL/d dist_ij = -v_j^2 p_j g_i decay_ij
            s_dist = np.einsum("ij,ij->j", decay, dist)
            s_cos = np.einsum("ij,ij->j", decay, cos)
            gv += -2.0 * v * p * s_dist
            scale = -sq_v * p
        ga_z += scale[:, None] * (decay.T @ zu)
        ga_cos += scale * s_cos
    grads = None
    if need_grad:
        # d dist / d a = -(z_hat - cos * a_hat) / |a|
        ga = -(ga_z - ga_cos[:, None] * a_unit) / a_norm[:, None]
        grads = AnchorGradients(ga, gp, gv)
    return loss, totals, grads


def gradients(batch: LabeledLogits, anchors: AnchorSet, kind=InfluenceKind.GAUSSIAN,
              freeze_positions=False, freeze_peaks=False, freeze_variances=False):
    """Analytic ``(dL/da, dL/dp, dL/dv)`` of the summed BCE; frozen groups get zeros."""
    if batch.n == 0:
        raise ValueError("empty batch")
    _, correct, _ = predict_and_score(batch)
    _, _, g = _forward_backward(batch.values, correct.astype(np.float64), anchors, kind)
    if freeze_positions:
        g.positions[:] = 0.0
    if freeze_peaks:
        g.peaks[:] = 0.0
    if freeze_variances:
        g.variances[:] = 0.0
    return g


# --------------------------------------------------------------------------
# optimisers
# --------------------------------------------------------------------------


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for name, g in grads.items():
            params[name] -= self.lr * g


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGD(cfg.learning_rate)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def train(val: LabeledLogits, cfg: TrainConfig, anchors: AnchorSet | None = None):
    """Fit anchors on ``val``; returns ``(AnchorSet, TrainReport)``.

    After every epoch the mean ``p_true`` over the whole validation set is
    compared with the true validation accuracy and training stops once they
    agree to within ``cfg.epsilon`` (checked from ``cfg.min_epochs`` on).
    """
    _, correct, acc = predict_and_score(val)
    correct = correct.astype(np.float64)
    z = val.values
    anchors = init_anchors(val, cfg) if anchors is None else anchors.copy()
    params = {"positions": anchors.positions, "peaks": anchors.peaks, "variances": anchors.variances}
    frozen = {
        "positions": cfg.freeze_positions,
        "peaks": cfg.freeze_peaks,
        "variances": cfg.freeze_variances,
    }
    opt = _make_optimizer(cfg)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    batch = cfg.batch_size if 0 < cfg.batch_size < val.n else val.n

    full_batch = batch == val.n
    initial_loss, _, _ = _forward_backward(z, correct, anchors, cfg.kind, need_grad=False)
    # in full-batch mode each epoch-end pass also supplies the next step's gradient
    cached = _forward_backward(z, correct, anchors, cfg.kind) if full_batch else None
    history = []
    estimate = float("nan")
    loss = initial_loss
    stopped_by = "epoch_cap"
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.arange(val.n) if full_batch else shuffle_rng.permutation(val.n)
        for start in range(0, val.n, batch):
            if full_batch:
                g = cached[2]
            else:
                idx = order[start:start + batch]
                _, _, g = _forward_backward(z[idx], correct[idx], anchors, cfg.kind)
            grads = {
                "positions": g.positions, "peaks": g.peaks, "variances": g.variances,
            }
            grads = {k: v for k, v in grads.items() if not frozen[k]}
            opt.step(params, grads)
            if not frozen["peaks"]:
                np.clip(anchors.peaks, -cfg.peak_cap, cfg.peak_cap, out=anchors.peaks)
            if not frozen["variances"]:
                np.maximum(anchors.variances, VARIANCE_FLOOR, out=anchors.variances)
        cached = _forward_backward(z, correct, anchors, cfg.kind, need_grad=full_batch)
        loss, totals, _ = cached
        estimate = float(np.mean(expit(totals)))
        history.append(loss)
        finite = math.isfinite(loss) and np.all(np.isfinite(anchors.positions))
        if not finite:
            report = TrainReport(epoch, loss, estimate, acc, "diverged", initial_loss, history)
            raise TrainingDiverged(report, anchors)
        if epoch >= cfg.min_epochs and abs(estimate - acc) < cfg.epsilon:
            stopped_by = "tolerance"
            break
    log.debug("trained %d anchors for %d epochs (%s)", anchors.k, epoch, stopped_by)
    report = TrainReport(epoch, loss, estimate, acc, stopped_by, initial_loss, history)
    return anchors, report


def fit_estimator(val: LabeledLogits, cfg: TrainConfig | None = None,
                  alpha: float = DEFAULT_ALPHA, anchors: AnchorSet | None = None):
    """Train and wrap into an :class:`Estimator`; returns ``(estimator, report)``."""
    cfg = cfg or TrainConfig()
    fitted, report = train(val, cfg, anchors)
    est = Estimator(fitted, cfg.kind, alpha, val.num_classes, cfg.peak_cap)
    return est, report
