"""Softmax-confidence baselines: AC, DoC, ATC and IM, on temperature-scaled logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledLogits, as_values, predict_and_score, softmax

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
DEFAULT_BINS = 10


def nll(val: LabeledLogits, temperature: float) -> float:
    """Mean negative log-likelihood of the labels under ``softmax(z / T)``."""
    z = val.values / temperature
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(log_norm - z[np.arange(val.n), val.labels]))


def fit_temperature(val: LabeledLogits, lo: float = 0.05, hi: float = 20.0,
                    tol: float = 1e-6) -> float:
    """Golden-section search for the NLL-optimal temperature over ``log T``."""
    if val.n == 0:
        raise ValueError("empty validation set")
    if np.unique(val.labels).size < 2:
        raise ValueError("temperature scaling needs at least two distinct labels")

    def f(log_t):
        return nll(val, math.exp(log_t))

    a, b = math.log(lo), math.log(hi)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return math.exp((a + b) / 2.0)


def max_confidence(logits, temperature: float = 1.0) -> np.ndarray:
    return softmax(logits, temperature).max(axis=1)


def negative_entropy(logits, temperature: float = 1.0) -> np.ndarray:
    """``sum q log q`` of the tempered softmax; 0 for one-hot, ``-log c`` at uniform."""
    z = as_values(logits) / temperature
    z = z - z.max(axis=1, keepdims=True)
    log_q = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return np.sum(np.exp(log_q) * log_q, axis=1)


def ac_estimate(target, temperature: float = 1.0) -> float:
    """Average of the maximum softmax confidence."""
    return float(np.mean(max_confidence(target, temperature)))


def doc_estimate(val: LabeledLogits, target, temperature: float = 1.0) -> float:
    """Source accuracy shifted by the change in average confidence, clipped to ``[0, 1]``."""
    _, _, acc = predict_and_score(val)
    shift = ac_estimate(target, temperature) - ac_estimate(val, temperature)
    return float(np.clip(acc + shift, 0.0, 1.0))


def doc_printed_estimate(val: LabeledLogits, target, temperature: float = 1.0) -> float:
    """The variant with the source *error* in place of source accuracy (kept for reports)."""
    _, _, acc = predict_and_score(val)
    shift = ac_estimate(target, temperature) - ac_estimate(val, temperature)
    return float(np.clip(1.0 - acc + shift, 0.0, 1.0))


def atc_threshold(scores, error: float) -> float:
    """Threshold whose fraction of scores strictly below it best matches ``error``.

    Candidates are the sorted scores plus one value just above the maximum,
    so ``n + 1`` below-counts are achievable (fewer with ties). Ties in
    ``|fraction - error|`` go to the candidate with more scores below.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    n = s.size
    candidates = np.append(s, np.nextafter(s[-1], np.inf))
    below = np.searchsorted(s, candidates, side="left")
    gap = np.abs(below / n - error)
    best = np.flatnonzero(gap == gap.min())
    return float(candidates[best[np.argmax(below[best])]])


def atc_estimate(val: LabeledLogits, target, temperature: float = 1.0,
                 return_threshold: bool = False):
    """Fraction of target scores at or above the validation-matched threshold."""
    _, _, acc = predict_and_score(val)
    t = atc_threshold(negative_entropy(val, temperature), 1.0 - acc)
    est = float(np.mean(negative_entropy(target, temperature) >= t))
    return (est, t) if return_threshold else est


def confidence_bins(conf: np.ndarray, num_classes: int, num_bins: int) -> np.ndarray:
    """Equal-width bin index over ``[1/c, 1]``."""
    lo = 1.0 / num_classes
    idx = np.floor((conf - lo) / (1.0 - lo) * num_bins).astype(np.int64)
    return np.clip(idx, 0, num_bins - 1)


def im_estimate(val: LabeledLogits, target, temperature: float = 1.0,
                num_bins: int = DEFAULT_BINS) -> float:
    """Validation per-bin accuracy re-weighted by the target's confidence histogram."""
    scorer = CalibratedScorer.fit(val, temperature, num_bins)
    return scorer.im(target)


@dataclass
class CalibratedScorer:
    """Temperature plus the source summaries the DoC and IM estimates need."""

    temperature: float
    num_classes: int
    source_accuracy: float
    source_confidence: float
    histogram: np.ndarray
    bin_accuracy: np.ndarray
    atc_threshold: float

    @classmethod
    def fit(cls, val: LabeledLogits, temperature: float | None = None,
            num_bins: int = DEFAULT_BINS) -> "CalibratedScorer":
        if num_bins < 2:
            raise ValueError("IM needs at least 2 bins")
        if temperature is None:
            temperature = fit_temperature(val)
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        _, correct, acc = predict_and_score(val)
        conf = max_confidence(val, temperature)
        bins = confidence_bins(conf, val.num_classes, num_bins)
        counts = np.bincount(bins, minlength=num_bins)
        hits = np.bincount(bins, weights=correct, minlength=num_bins)
        bin_acc = np.where(counts > 0, hits / np.maximum(counts, 1), acc)
        t = atc_threshold(negative_entropy(val, temperature), 1.0 - acc)
        return cls(temperature, val.num_classes, acc, float(conf.mean()),
                   counts / val.n, bin_acc, t)

    def ac(self, target) -> float:
        return ac_estimate(target, self.temperature)

    def doc(self, target) -> float:
        return float(np.clip(self.source_accuracy + self.ac(target) - self.source_confidence, 0, 1))

    def doc_printed(self, target) -> float:
        shift = self.ac(target) - self.source_confidence
        return float(np.clip(1.0 - self.source_accuracy + shift, 0, 1))

    def atc(self, target) -> float:
        return float(np.mean(negative_entropy(target, self.temperature) >= self.atc_threshold))

    def im(self, target) -> float:
        conf = max_confidence(target, self.temperature)
        bins = confidence_bins(conf, self.num_classes, self.bin_accuracy.size)
        weights = np.bincount(bins, minlength=self.bin_accuracy.size) / conf.size
        return float(np.clip(weights @ self.bin_accuracy, 0.0, 1.0))

    def all(self, target) -> dict:
        return {"AC": self.ac(target), "DoC": self.doc(target),
                "IM": self.im(target), "ATC": self.atc(target)}
