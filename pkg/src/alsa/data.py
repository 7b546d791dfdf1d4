"""Logit containers, softmax helpers, file formats and the band-width diagnostic."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BINARY_MAGIC = b"ALSA"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sIQIB")


class LogitFormatError(ValueError):
    """Raised when a logits file is malformed."""


@dataclass(frozen=True)
class LogitMatrix:
    """An ``n x c`` matrix of raw pre-softmax scores."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"logits must be 2-D, got shape {values.shape}")
        n, c = values.shape
        if n < 1:
            raise ValueError("logits need at least one row")
        if c < 2:
            raise ValueError(f"logits need at least 2 classes, got {c}")
        bad = ~np.isfinite(values)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise ValueError(f"non-finite logit in row {row}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class LabeledLogits:
    """Logits paired with integer ground-truth labels."""

    logits: LogitMatrix
    labels: np.ndarray

    def __post_init__(self):
        logits = self.logits
        if not isinstance(logits, LogitMatrix):
            logits = LogitMatrix(logits)
            object.__setattr__(self, "logits", logits)
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != logits.n:
            raise ValueError(
                f"expected {logits.n} labels, got shape {labels.shape}"
            )
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        out = (labels < 0) | (labels >= logits.num_classes)
        if out.any():
            row = int(np.flatnonzero(out)[0])
            raise ValueError(
                f"label {labels[row]} out of range [0, {logits.num_classes}) in row {row}"
            )
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def values(self) -> np.ndarray:
        return self.logits.values

    @property
    def num_classes(self) -> int:
        return self.logits.num_classes

    @property
    def n(self) -> int:
        return self.logits.n

    def __len__(self):
        return self.n

    def subset(self, idx) -> "LabeledLogits":
        return LabeledLogits(LogitMatrix(self.values[idx]), self.labels[idx])


def as_values(logits) -> np.ndarray:
    """Return the raw float array behind any of the logit containers."""
    if isinstance(logits, (LogitMatrix, LabeledLogits)):
        return logits.values
    return np.asarray(logits, dtype=np.float64)


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / temperature`` with max subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_values(logits) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(logits) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(as_values(logits), axis=1)


def predict_and_score(data: LabeledLogits):
    """Return ``(predicted labels, correctness flags, accuracy)``."""
    pred = predict(data)
    correct = (pred == data.labels).astype(np.int8)
    return pred, correct, float(correct.mean())


def correctness(data: LabeledLogits) -> np.ndarray:
    return predict_and_score(data)[1]


# --------------------------------------------------------------------------
# band width
# --------------------------------------------------------------------------


def ones_projection(logits) -> np.ndarray:
    """Signed length of each row's projection onto the unit all-ones vector."""
    z = as_values(logits)
    return z.sum(axis=1) / math.sqrt(z.shape[1])


def band_projection_stats(logits, confidence: float = 0.999):
    """Spread of the logits along the all-ones direction.

    Returns ``(std, (lo, hi))``: the unbiased standard deviation of the
    projection lengths and the empirical central ``confidence`` range, whose
    endpoints are order statistics of the projections.
    """
    if not 0 < confidence < 1:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    proj = np.sort(ones_projection(logits))
    n = proj.size
    if n < 2:
        raise ValueError("band statistics need at least 2 rows")
    tail = (1.0 - confidence) / 2.0
    lo = proj[int(math.floor(tail * (n - 1)))]
    hi = proj[int(math.ceil((1.0 - tail) * (n - 1)))]
    return float(np.std(proj, ddof=1)), (float(lo), float(hi))


def band_width_bound(m: int, c: int, z: float) -> float:
    """Upper bound ``4 z / sqrt(m + c)`` on the band width of a Xavier layer."""
    if m < 1 or c < 2 or not z > 0:
        raise ValueError(f"need m >= 1, c >= 2, z > 0 (got m={m}, c={c}, z={z})")
    return 4.0 * z * math.sqrt(1.0 / (m + c))


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def _format_from_path(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def save_logits(path, data, fmt: str | None = None) -> None:
    """Write a LogitMatrix or LabeledLogits as ``csv`` or ``binary``."""
    path = Path(path)
    fmt = _format_from_path(path, fmt)
    labels = data.labels if isinstance(data, LabeledLogits) else None
    values = as_values(data)
    n, c = values.shape
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, n, c, int(labels is not None)))
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
            if labels is not None:
                fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())
    elif fmt == "csv":
        header = [f"logit_{j}" for j in range(c)]
        if labels is not None:
            header.append("label")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(n):
                row = [repr(float(x)) for x in values[i]]
                if labels is not None:
                    row.append(str(int(labels[i])))
                writer.writerow(row)
    else:
        raise ValueError(f"unknown logits format {fmt!r}")


def load_logits(path, fmt: str | None = None):
    """Read a logits file; returns LabeledLogits when labels are present."""
    path = Path(path)
    fmt = _format_from_path(path, fmt)
    if fmt == "binary":
        return _load_binary(path)
    if fmt == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown logits format {fmt!r}")


def _load_binary(path: Path):
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise LogitFormatError(f"{path}: truncated header")
    magic, version, n, c, has_labels = _HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise LogitFormatError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise LogitFormatError(f"{path}: unsupported version {version}")
    if has_labels not in (0, 1):
        raise LogitFormatError(f"{path}: bad has_labels flag {has_labels}")
    expected = _HEADER.size + 8 * n * c + (4 * n if has_labels else 0)
    if len(raw) != expected:
        raise LogitFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", count=n * c, offset=_HEADER.size)
    values = values.reshape(n, c).astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        raise LogitFormatError(f"{path}: non-finite value in row {int(np.argwhere(bad)[0, 0])}")
    logits = LogitMatrix(values)
    if not has_labels:
        return logits
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=_HEADER.size + 8 * n * c)
    out = labels >= c
    if out.any():
        row = int(np.flatnonzero(out)[0])
        raise LogitFormatError(f"{path}: label {labels[row]} out of range in row {row}")
    return LabeledLogits(logits, labels.astype(np.int64))


def _load_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise LogitFormatError(f"{path}: empty file") from None
        has_labels = bool(header) and header[-1] == "label"
        c = len(header) - int(has_labels)
        if c < 2 or header[:c] != [f"logit_{j}" for j in range(c)]:
            raise LogitFormatError(f"{path}: malformed header {header}")
        width = len(header)
        rows, labels = [], []
        for i, rec in enumerate(reader):
            if not rec:
                continue
            if len(rec) != width:
                raise LogitFormatError(f"{path}: row {i} has {len(rec)} fields, expected {width}")
            try:
                vals = [float(x) for x in rec[:c]]
            except ValueError as exc:
                raise LogitFormatError(f"{path}: row {i}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise LogitFormatError(f"{path}: non-finite value in row {i}")
            rows.append(vals)
            if has_labels:
                try:
                    lab = int(rec[c])
                except ValueError:
                    raise LogitFormatError(f"{path}: row {i}: bad label {rec[c]!r}") from None
                if not 0 <= lab < c:
                    raise LogitFormatError(f"{path}: label {lab} out of range in row {i}")
                labels.append(lab)
    if not rows:
        raise LogitFormatError(f"{path}: no data rows")
    logits = LogitMatrix(np.array(rows, dtype=np.float64))
    if has_labels:
        return LabeledLogits(logits, np.array(labels, dtype=np.int64))
    return logits
