"""Synthetic logit-producing classifiers and distribution shifts applied to logit sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledLogits, LogitMatrix

SHIFT_KINDS = (
    "label_shift_dirichlet",
    "class_imbalance_linear",
    "logit_noise",
    "logit_scale",
    "logit_translate",
)


def linear_priors(num_classes: int, start: float = 1.0, end: float = 3.0) -> np.ndarray:
    """Class priors rising linearly from ``start`` to ``end`` (relative), normalised."""
    w = np.linspace(start, end, num_classes)
    return w / w.sum()


@dataclass
class LinearScorer:
    """``z = W h + b`` on features rescaled to the Xavier variance condition.

    ``h = (x - center) / (scale * sqrt(d))`` so each embedding coordinate has
    variance ``1/d``, the Xavier variance of a preceding square layer.
    """

    weight: np.ndarray
    bias: np.ndarray
    center: np.ndarray
    scale: np.ndarray

    def embed(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center) / (self.scale * math.sqrt(x.shape[1]))

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.embed(x) @ self.weight.T + self.bias


@dataclass
class SynthTask:
    scorer: LinearScorer
    val: LabeledLogits
    test: LabeledLogits
    initial_val_logits: LogitMatrix
    train_accuracy: float
    epochs: int
    info: dict = field(default_factory=dict)


def xavier_normal(rng, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_out, fan_in))


def xavier_layer_logits(m: int, c: int, n: int, seed: int = 0,
                        embedding_std: float | None = None) -> np.ndarray:
    """Logits of a freshly Xavier-initialized ``m -> c`` layer on Gaussian embeddings.

    Embeddings are standard-normal draws scaled by ``embedding_std``, which
    defaults to ``1/sqrt(m)`` (the output scale of a Xavier-initialized square
    layer feeding this one). Bias is zero, as at initialization.
    """
    if m < 1 or c < 2 or n < 2:
        raise ValueError("need m >= 1, c >= 2, n >= 2")
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(m) if embedding_std is None else float(embedding_std)
    weight = xavier_normal(rng, c, m)
    return (std * rng.standard_normal((n, m))) @ weight.T


def sample_blobs(rng, means, spreads, labels):
    noise = rng.normal(size=(labels.size, means.shape[1]))
    return means[labels] + spreads[labels, None] * noise


def _nll_and_grad(w, b, h, y):
    z = h @ w.T + b
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    prob = e / e.sum(axis=1, keepdims=True)
    n = y.size
    loss = -np.mean(np.log(prob[np.arange(n), y] + 1e-300))
    prob[np.arange(n), y] -= 1.0
    prob /= n
    return loss, prob.T @ h, prob.sum(axis=0)


def synth_classifier(num_classes: int = 10, dim: int = 16, separation: float = 1.0,
                     priors=None, train_size: int = 20000, val_size: int = 10000,
                     test_size: int = 20000, spread=(1.0, 1.0), seed: int = 0,
                     learning_rate: float = 0.2, max_epochs: int = 3000,
                     patience: int = 25, tol: float = 1e-5) -> SynthTask:
    """Gaussian blobs scored by a multinomial logistic regression trained with Adam.

    Class ``y`` has mean ``separation * m_y`` with ``m_y ~ N(0, I_d)`` and
    isotropic spread interpolated across classes between ``spread[0]`` and
    ``spread[1]`` (in a seeded random class order). Training is full batch and
    stops once validation NLL has not improved by ``tol`` for ``patience``
    epochs.
    """
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    priors = linear_priors(num_classes, 1.0, 1.0) if priors is None else np.asarray(priors, float)
    if priors.shape != (num_classes,) or np.any(priors <= 0):
        if priors.shape != (num_classes,):
            raise ValueError(f"need {num_classes} class priors, got shape {priors.shape}")
        zero = np.flatnonzero(priors <= 0).tolist()
        raise ValueError(f"degenerate class priors: class {zero} has no mass")
    priors = priors / priors.sum()
    means = separation * rng.normal(size=(num_classes, dim))
    spreads = np.linspace(spread[0], spread[1], num_classes)[rng.permutation(num_classes)]

    def draw(n):
        y = rng.choice(num_classes, size=n, p=priors)
        return sample_blobs(rng, means, spreads, y), y

    x_tr, y_tr = draw(train_size)
    x_val, y_val = draw(val_size)
    x_te, y_te = draw(test_size)

    scorer = LinearScorer(
        xavier_normal(rng, num_classes, dim), np.zeros(num_classes),
        x_tr.mean(axis=0), x_tr.std(axis=0),
    )
    initial_val = LogitMatrix(scorer.logits(x_val))
    h_tr, h_val = scorer.embed(x_tr), scorer.embed(x_val)

    w, b = scorer.weight, scorer.bias
    mw, vw, mb, vb = (np.zeros_like(w), np.zeros_like(w), np.zeros_like(b), np.zeros_like(b))
    b1, b2 = 0.9, 0.999
    best, best_wb, stale, epoch = np.inf, (w.copy(), b.copy()), 0, 0
    for epoch in range(1, max_epochs + 1):
        _, gw, gb = _nll_and_grad(w, b, h_tr, y_tr)
        mw = b1 * mw + (1 - b1) * gw
        vw = b2 * vw + (1 - b2) * gw * gw
        mb = b1 * mb + (1 - b1) * gb
        vb = b2 * vb + (1 - b2) * gb * gb
        corr1, corr2 = 1 - b1**epoch, 1 - b2**epoch
        w = w - learning_rate * (mw / corr1) / (np.sqrt(vw / corr2) + 1e-8)
        b = b - learning_rate * (mb / corr1) / (np.sqrt(vb / corr2) + 1e-8)
        val_nll = _nll_and_grad(w, b, h_val, y_val)[0]
        if val_nll < best - tol:
            best, best_wb, stale = val_nll, (w.copy(), b.copy()), 0
        else:
            stale += 1
            if stale >= patience:
                break
    scorer.weight, scorer.bias = best_wb
    train_acc = float(np.mean(np.argmax(scorer.logits(x_tr), axis=1) == y_tr))
    return SynthTask(
        scorer,
        LabeledLogits(scorer.logits(x_val), y_val),
        LabeledLogits(scorer.logits(x_te), y_te),
        initial_val,
        train_acc,
        epoch,
        {"means": means, "spreads": spreads, "priors": priors},
    )


@dataclass
class ShiftSpec:
    """A distribution shift applied to a labeled logit set.

    Parameters by kind:
    ``label_shift_dirichlet``: ``concentration`` (``inf`` is the identity), ``size``;
    ``class_imbalance_linear``: ``start_ratio``, ``end_ratio``;
    ``logit_noise``: ``std``; ``logit_scale``: ``factor``;
    ``logit_translate``: ``magnitude``, ``band_offset``, ``fraction`` (moves a
    random subset of rows by ``band_offset`` along the all-ones direction plus a
    random vector of length ``magnitude`` orthogonal to it).
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        p = self.params
        positive = {
            "label_shift_dirichlet": ["concentration"],
            "class_imbalance_linear": ["start_ratio", "end_ratio"],
            "logit_scale": ["factor"],
        }.get(self.kind, [])
        for key in positive:
            if key in p and not p[key] > 0:
                raise ValueError(f"{self.kind}: {key} must be positive, got {p[key]}")
        if self.kind == "logit_noise" and p.get("std", 0.0) < 0:
            raise ValueError("logit_noise: std must be non-negative")
        if self.kind == "logit_translate" and not 0 <= p.get("fraction", 1.0) <= 1:
            raise ValueError("logit_translate: fraction must lie in [0, 1]")

    def label(self) -> str:
        args = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({args})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


def _resample(data: LabeledLogits, counts: np.ndarray, rng) -> LabeledLogits:
    chosen = []
    for cls, count in enumerate(counts):
        if count == 0:
            continue
        pool = np.flatnonzero(data.labels == cls)
        if pool.size == 0:
            raise ValueError(f"shift requires samples of class {cls} but none are present")
        chosen.append(rng.choice(pool, size=int(count), replace=count > pool.size))
    idx = np.concatenate(chosen)
    if idx.size == 0:
        raise ValueError("shift produced an empty set")
    return data.subset(np.sort(idx))


def apply_shift(data: LabeledLogits, spec: ShiftSpec) -> LabeledLogits:
    rng = np.random.default_rng(spec.seed)
    p = spec.params
    c = data.num_classes
    if spec.kind == "label_shift_dirichlet":
        conc = float(p.get("concentration", 1.0))
        if math.isinf(conc):
            return data
        size = int(p.get("size", data.n))
        priors = rng.dirichlet(np.full(c, conc))
        return _resample(data, rng.multinomial(size, priors), rng)
    if spec.kind == "class_imbalance_linear":
        ratios = np.linspace(float(p.get("start_ratio", 1.0)), float(p.get("end_ratio", 3.0)), c)
        keep = ratios / ratios.max()
        chosen = []
        for cls in range(c):
            pool = np.flatnonzero(data.labels == cls)
            count = int(round(pool.size * keep[cls]))
            if pool.size and count == 0:
                raise ValueError(f"class_imbalance_linear would empty class {cls}")
            chosen.append(rng.choice(pool, size=count, replace=False))
        return data.subset(np.sort(np.concatenate(chosen)))
    if spec.kind == "logit_noise":
        std = float(p.get("std", 0.0))
        if std == 0:
            return data
        return LabeledLogits(data.values + rng.normal(0, std, data.values.shape), data.labels)
    if spec.kind == "logit_scale":
        return LabeledLogits(data.values * float(p.get("factor", 1.0)), data.labels)
    # logit_translate
    magnitude = float(p.get("magnitude", 10.0))
    offset = float(p.get("band_offset", 0.0))
    fraction = float(p.get("fraction", 1.0))
    moved = rng.random(data.n) < fraction
    u = rng.normal(size=(int(moved.sum()), c))
    u -= u.mean(axis=1, keepdims=True)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    values = data.values.copy()
    values[moved] += magnitude * u + offset / math.sqrt(c)
    return LabeledLogits(values, data.labels)
