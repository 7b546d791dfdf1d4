"""Anchors in logit space: influence functions, rectification and accuracy estimation."""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import as_values

DEFAULT_PEAK_CAP = 6.0
DEFAULT_ALPHA = 0.9
DEFAULT_CHUNK = 4096

ESTIMATOR_MAGIC = b"ALSE"
ESTIMATOR_VERSION = 1
_EST_HEADER = struct.Struct("<4sIBddIQ")


class InfluenceKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"

    @classmethod
    def parse(cls, value) -> "InfluenceKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {"g": "gaussian", "e": "exponential", "exp": "exponential"}
        return cls(aliases.get(key, key))


class RectifyRule(str, enum.Enum):
    """How "insufficient influence" is decided.

    ``aggregate`` compares the magnitude of the summed influence with the
    threshold; ``per_anchor`` rectifies only when every individual anchor's
    influence magnitude is below it.
    """

    AGGREGATE = "aggregate"
    PER_ANCHOR = "per_anchor"


@dataclass(frozen=True)
class Anchor:
    position: np.ndarray
    peak: float
    variance: float

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        if pos.ndim != 1 or not np.all(np.isfinite(pos)):
            raise ValueError("anchor position must be a finite vector")
        if not np.any(pos):
            raise ValueError("anchor position must have nonzero norm")
        if not (math.isfinite(self.peak) and math.isfinite(self.variance)):
            raise ValueError("anchor peak and variance must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "peak", float(self.peak))
        object.__setattr__(self, "variance", float(self.variance))


@dataclass
class AnchorSet:
    """``k`` anchors stored column-wise: positions ``(k, c)``, peaks and variances ``(k,)``."""

    positions: np.ndarray
    peaks: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64, ndmin=2)
        self.peaks = np.array(self.peaks, dtype=np.float64).reshape(-1)
        self.variances = np.array(self.variances, dtype=np.float64).reshape(-1)
        k = self.positions.shape[0]
        if k < 1:
            raise ValueError("an anchor set needs at least one anchor")
        if self.peaks.shape != (k,) or self.variances.shape != (k,):
            raise ValueError("positions, peaks and variances disagree on k")
        arrays = (self.positions, self.peaks, self.variances)
        if not all(np.all(np.isfinite(x)) for x in arrays):
            raise ValueError("anchor parameters must be finite")
        norms = np.linalg.norm(self.positions, axis=1)
        if np.any(norms == 0):
            raise ValueError(f"anchor {int(np.flatnonzero(norms == 0)[0])} has zero-norm position")

    @classmethod
    def from_anchors(cls, anchors) -> "AnchorSet":
        anchors = list(anchors)
        if not anchors:
            raise ValueError("an anchor set needs at least one anchor")
        return cls(
            np.stack([a.position for a in anchors]),
            [a.peak for a in anchors],
            [a.variance for a in anchors],
        )

    @property
    def k(self) -> int:
        return self.positions.shape[0]

    @property
    def num_classes(self) -> int:
        return self.positions.shape[1]

    def __len__(self):
        return self.k

    def __getitem__(self, j) -> Anchor:
        return Anchor(self.positions[j], self.peaks[j], self.variances[j])

    def __iter__(self):
        return (self[j] for j in range(self.k))

    def copy(self) -> "AnchorSet":
        return AnchorSet(self.positions.copy(), self.peaks.copy(), self.variances.copy())


@dataclass(frozen=True)
class Estimator:
    """A fitted anchor set together with everything needed at inference time."""

    anchors: AnchorSet
    kind: InfluenceKind = InfluenceKind.GAUSSIAN
    alpha: float = DEFAULT_ALPHA
    num_classes: int | None = None
    peak_cap: float = DEFAULT_PEAK_CAP

    def __post_init__(self):
        object.__setattr__(self, "kind", InfluenceKind.parse(self.kind))
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", self.anchors.num_classes)
        if self.num_classes != self.anchors.num_classes:
            raise ValueError("num_classes disagrees with anchor dimension")
        # validates alpha and peak_cap
        rect_threshold(self.kind, self.alpha, self.peak_cap)

    @property
    def threshold(self) -> float:
        return rect_threshold(self.kind, self.alpha, self.peak_cap)

    def with_alpha(self, alpha: float) -> "Estimator":
        return Estimator(self.anchors, self.kind, alpha, self.num_classes, self.peak_cap)


# --------------------------------------------------------------------------
# scalar reference path
# --------------------------------------------------------------------------


def cosine_distance(z, a) -> float:
    """``1 - cos(z, a)``, in ``[0, 2]``."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    nz, na = np.linalg.norm(z), np.linalg.norm(a)
    if nz == 0 or na == 0:
        raise ValueError("cosine distance is undefined for a zero-norm vector")
    cos = float(np.dot(z, a) / (nz * na))
    return 1.0 - min(1.0, max(-1.0, cos))


def _decay(dist, variance, kind: InfluenceKind):
    if kind is InfluenceKind.GAUSSIAN:
        return np.exp(-(variance**2) * dist**2)
    return np.exp(-(variance**2) * dist)


def influence_single(z, anchor: Anchor, kind=InfluenceKind.GAUSSIAN) -> float:
    kind = InfluenceKind.parse(kind)
    d = cosine_distance(z, anchor.position)
    return float(anchor.peak * _decay(d, anchor.variance, kind))


def influence_total(z, anchors: AnchorSet, kind=InfluenceKind.GAUSSIAN) -> float:
    total = 0.0
    for anchor in anchors:
        total += influence_single(z, anchor, kind)
    return total


def sigmoid(x):
    return expit(x)


def p_true(z, anchors: AnchorSet, kind=InfluenceKind.GAUSSIAN) -> float:
    return float(sigmoid(influence_total(z, anchors, kind)))


def p_rec(z, est: Estimator, rule=RectifyRule.AGGREGATE) -> float:
    rule = RectifyRule(rule)
    if rule is RectifyRule.AGGREGATE:
        total = influence_total(z, est.anchors, est.kind)
        sufficient = abs(total) >= est.threshold
    else:
        parts = [influence_single(z, a, est.kind) for a in est.anchors]
        total = sum(parts)
        sufficient = max(abs(x) for x in parts) >= est.threshold
    if sufficient:
        return float(sigmoid(total))
    return 1.0 / est.num_classes


# --------------------------------------------------------------------------
# thresholds
# --------------------------------------------------------------------------

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def _erfinv_guess(x: float) -> float:
    # single-precision polynomial approximation, refined by Newton below
    w = -math.log((1.0 - x) * (1.0 + x))
    if w < 5.0:
        w -= 2.5
        p = 2.81022636e-08
        for coef in (3.43273939e-07, -3.5233877e-06, -4.39150654e-06, 0.00021858087,
                     -0.00125372503, -0.00417768164, 0.246640727, 1.50140941):
            p = coef + p * w
    else:
        w = math.sqrt(w) - 3.0
        p = -0.000200214257
        for coef in (0.000100950558, 0.00134934322, -0.00367342844, 0.00573950773,
                     -0.0076224613, 0.00943887047, 1.00167406, 2.83297682):
            p = coef + p * w
    return p * x


def inverse_erf(x: float) -> float:
    """Inverse of the error function on ``(-1, 1)``."""
    x = float(x)
    if not -1.0 < x < 1.0:
        raise ValueError(f"inverse_erf is defined on (-1, 1), got {x}")
    if x == 0.0:
        return 0.0
    sign = 1.0 if x > 0 else -1.0
    x = abs(x)
    y = _erfinv_guess(x)
    tail = 1.0 - x
    for _ in range(6):
        # erf(y) - x == (1 - x) - erfc(y), better conditioned near 1
        err = (tail - math.erfc(y)) if x > 0.5 else (math.erf(y) - x)
        step = err / (_TWO_OVER_SQRT_PI * math.exp(-y * y))
        y -= step
        if abs(step) <= 1e-16 * max(1.0, y):
            break
    return sign * y


def rect_threshold(kind, alpha: float, peak_cap: float = DEFAULT_PEAK_CAP) -> float:
    """Influence cut-off below which a logit counts as out of support."""
    kind = InfluenceKind.parse(kind)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not peak_cap > 0:
        raise ValueError(f"peak_cap must be positive, got {peak_cap}")
    if kind is InfluenceKind.GAUSSIAN:
        return peak_cap * math.exp(-inverse_erf(alpha) ** 2)
    return peak_cap * (1.0 - alpha)


# --------------------------------------------------------------------------
# vectorised path
# --------------------------------------------------------------------------


def unit_rows(x: np.ndarray, what: str = "logit") -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    if zero.any():
        raise ValueError(f"{what} row {int(np.flatnonzero(zero)[0])} has zero norm")
    return x / norms


def cosine_distances(z_unit: np.ndarray, a_unit: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances between unit rows, shape ``(n, k)``."""
    return 1.0 - np.clip(z_unit @ a_unit.T, -1.0, 1.0)


def influence_components(values, anchors: AnchorSet, kind=InfluenceKind.GAUSSIAN) -> np.ndarray:
    """Per-sample, per-anchor influence matrix ``(n, k)``. Memory is ``O(nk)``."""
    kind = InfluenceKind.parse(kind)
    z_unit = unit_rows(np.atleast_2d(as_values(values)))
    a_unit = unit_rows(anchors.positions, "anchor")
    dist = cosine_distances(z_unit, a_unit)
    return _decay(dist, anchors.variances[None, :], kind) * anchors.peaks[None, :]


def _influence_chunks(values, anchors, kind, chunk_size, need_max):
    z = np.atleast_2d(as_values(values))
    if z.shape[1] != anchors.num_classes:
        raise ValueError(
            f"logits have {z.shape[1]} classes, anchors expect {anchors.num_classes}"
        )
    kind = InfluenceKind.parse(kind)
    a_unit = unit_rows(anchors.positions, "anchor")
    sq_var = anchors.variances**2
    n = z.shape[0]
    total = np.empty(n)
    peak_max = np.empty(n) if need_max else None
    for start in range(0, n, chunk_size):
        stop = min(n, start + chunk_size)
        try:
            z_unit = unit_rows(z[start:stop])
        except ValueError:
            norms = np.linalg.norm(z[start:stop], axis=1)
            row = start + int(np.flatnonzero(norms == 0)[0])
            raise ValueError(f"logit row {row} has zero norm") from None
        dist = cosine_distances(z_unit, a_unit)
        if kind is InfluenceKind.GAUSSIAN:
            dist *= dist
        decay = np.exp(-dist * sq_var)
        total[start:stop] = decay @ anchors.peaks
        if need_max:
            peak_max[start:stop] = np.max(decay * np.abs(anchors.peaks), axis=1)
    return total, peak_max


def total_influence(values, anchors: AnchorSet, kind=InfluenceKind.GAUSSIAN,
                    chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    return _influence_chunks(values, anchors, kind, chunk_size, False)[0]


def p_true_batch(values, anchors: AnchorSet, kind=InfluenceKind.GAUSSIAN,
                 chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    return sigmoid(total_influence(values, anchors, kind, chunk_size))


def p_rec_batch(values, est: Estimator, rule=RectifyRule.AGGREGATE,
                chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    rule = RectifyRule(rule)
    total, peak_max = _influence_chunks(
        values, est.anchors, est.kind, chunk_size, rule is RectifyRule.PER_ANCHOR
    )
    strength = np.abs(total) if rule is RectifyRule.AGGREGATE else peak_max
    return np.where(strength >= est.threshold, sigmoid(total), 1.0 / est.num_classes)


def estimate_accuracy(target, est: Estimator, rectify: bool = True,
                      rule=RectifyRule.AGGREGATE, chunk_size: int = DEFAULT_CHUNK):
    """Estimated accuracy on unlabeled ``target`` logits.

    Returns ``(estimate, per_sample_probabilities)``.
    """
    values = as_values(target)
    if values.ndim != 2 or values.shape[1] != est.num_classes:
        raise ValueError(
            f"target has shape {values.shape}, estimator expects {est.num_classes} classes"
        )
    if rectify:
        probs = p_rec_batch(values, est, rule, chunk_size)
    else:
        probs = p_true_batch(values, est.anchors, est.kind, chunk_size)
    return float(np.mean(probs)), probs


# --------------------------------------------------------------------------
# prediction surfaces
# --------------------------------------------------------------------------


@dataclass
class SurfaceGrid:
    """``p_true`` sampled on a regular grid over a 2-D affine slice of logit space.

    ``values[i, j]`` is the value at ``origin + u[j] * basis[0] + v[i] * basis[1]``;
    grid points with zero norm are skipped (NaN) and flagged in ``valid``.
    """

    origin: np.ndarray
    basis: np.ndarray
    u: np.ndarray
    v: np.ndarray
    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    def points(self) -> np.ndarray:
        uu, vv = np.meshgrid(self.u, self.v)
        return self.origin + uu[..., None] * self.basis[0] + vv[..., None] * self.basis[1]

    def rows(self):
        """Flat export rows ``(u, v, *logit, p_true)``; skipped points carry NaN."""
        pts = self.points()
        uu, vv = np.meshgrid(self.u, self.v)
        for i in range(self.values.shape[0]):
            for j in range(self.values.shape[1]):
                yield (float(uu[i, j]), float(vv[i, j]), *map(float, pts[i, j]),
                       float(self.values[i, j]))

    def write_csv(self, path) -> int:
        """Write :meth:`rows` with a header; returns the number of data rows."""
        c = self.origin.size
        header = ["u", "v", *(f"logit_{j}" for j in range(c)), "p_true"]
        count = 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in self.rows():
                writer.writerow(row)
                count += 1
        return count


def fit_plane(reference):
    """Best-fit 2-D plane of a logit cloud: ``(origin, basis)`` with orthonormal rows."""
    z = as_values(reference)
    origin = z.mean(axis=0)
    _, _, vt = np.linalg.svd(z - origin, full_matrices=False)
    basis = vt[:2]
    if basis.shape[0] < 2:
        raise ValueError("need at least two dimensions for a surface plane")
    return origin, basis


def grid_axes(reference, plane, shape=(50, 50), coverage=(1.0, 99.0)):
    """Grid coordinates spanning the central ``coverage`` percentiles of ``reference`` on ``plane``."""
    origin, basis = plane
    coords = (as_values(reference) - origin) @ basis.T
    lo = np.percentile(coords, coverage[0], axis=0)
    hi = np.percentile(coords, coverage[1], axis=0)
    return np.linspace(lo[0], hi[0], shape[1]), np.linspace(lo[1], hi[1], shape[0])


def surface_grid(est, plane, u, v) -> SurfaceGrid:
    """Evaluate ``p_true`` of ``est`` (an Estimator or ``(AnchorSet, kind)``) on a grid."""
    if isinstance(est, Estimator):
        anchors, kind = est.anchors, est.kind
    else:
        anchors, kind = est
    origin, basis = (np.asarray(x, dtype=np.float64) for x in plane)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    uu, vv = np.meshgrid(u, v)
    pts = origin + uu[..., None] * basis[0] + vv[..., None] * basis[1]
    flat = pts.reshape(-1, pts.shape[-1])
    valid = np.linalg.norm(flat, axis=1) > 0
    out = np.full(flat.shape[0], np.nan)
    if valid.any():
        out[valid] = p_true_batch(flat[valid], anchors, kind)
    return SurfaceGrid(origin, basis, u, v, out.reshape(uu.shape), valid.reshape(uu.shape))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

_KIND_CODES = {InfluenceKind.GAUSSIAN: 0, InfluenceKind.EXPONENTIAL: 1}


def save_estimator(path, est: Estimator) -> None:
    a = est.anchors
    records = np.empty((a.k, a.num_classes + 2), dtype="<f8")
    records[:, : a.num_classes] = a.positions
    records[:, -2] = a.peaks
    records[:, -1] = a.variances
    with open(path, "wb") as fh:
        fh.write(_EST_HEADER.pack(ESTIMATOR_MAGIC, ESTIMATOR_VERSION, _KIND_CODES[est.kind],
                                  est.alpha, est.peak_cap, est.num_classes, a.k))
        fh.write(records.tobytes())


def load_estimator(path) -> Estimator:
    raw = Path(path).read_bytes()
    if len(raw) < _EST_HEADER.size:
        raise ValueError(f"{path}: truncated estimator header")
    magic, version, kind, alpha, cap, c, k = _EST_HEADER.unpack_from(raw)
    if magic != ESTIMATOR_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != ESTIMATOR_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if kind not in (0, 1):
        raise ValueError(f"{path}: unknown influence kind code {kind}")
    expected = _EST_HEADER.size + 8 * k * (c + 2)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    records = np.frombuffer(raw, dtype="<f8", offset=_EST_HEADER.size).reshape(k, c + 2)
    anchors = AnchorSet(records[:, :c].copy(), records[:, -2].copy(), records[:, -1].copy())
    kind = InfluenceKind.GAUSSIAN if kind == 0 else InfluenceKind.EXPONENTIAL
    return Estimator(anchors, kind, alpha, c, cap)
