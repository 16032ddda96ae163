"""Domain types for the bivariate normal-normal model on the logit scale.

A diagnostic accuracy study contributes a 2x2 table (TP, FN, FP, TN). The
table is mapped to the pair ``Y_i = (logit Se_i, logit Sp_i)`` with a known
diagonal within-study covariance ``S_i``; the between-study covariance
``Sigma`` is shared by all studies and the marginal covariance of ``Y_i`` is
``S_i + Sigma``.

Most numerical routines in this package work on :class:`StudyData`, a
vectorised container holding all studies as ``(N, 2)`` arrays.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CORRECTIONS = ("zero-cell", "none")
CSV_HEADER = ("study", "tp", "fn", "fp", "tn")


class DataError(ValueError):
    """Raised for invalid study data (bad counts, malformed input files)."""


class DegenerateCovarianceError(ArithmeticError):
    """Raised when a marginal covariance ``S_i + Sigma`` is not positive definite."""


@dataclass(frozen=True)
class StudyCounts:
    study_id: str
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fn", "fp", "tn"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 0:
                raise DataError(f"study {self.study_id!r}: {name}={value!r} is not a non-negative integer")
            object.__setattr__(self, name, int(value))
        if self.tp + self.fn < 1:
            raise DataError(f"study {self.study_id!r}: no diseased subjects (tp+fn=0)")
        if self.fp + self.tn < 1:
            raise DataError(f"study {self.study_id!r}: no non-diseased subjects (fp+tn=0)")

    @property
    def has_zero_cell(self) -> bool:
        return min(self.tp, self.fn, self.fp, self.tn) == 0


@dataclass(frozen=True)
class LogitObservation:
    """Logit sensitivity/specificity of one study with its within-study variances."""

    y1: float
    y2: float
    s1sq: float
    s2sq: float
    study_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.y1) and math.isfinite(self.y2)):
            raise DataError(f"study {self.study_id!r}: non-finite logit value")
        if not (self.s1sq > 0 and self.s2sq > 0 and math.isfinite(self.s1sq) and math.isfinite(self.s2sq)):
            raise DataError(f"study {self.study_id!r}: within-study variances must be finite and > 0")


@dataclass(frozen=True)
class BetweenStudyCov:
    """Between-study covariance ``[[sigma1sq, sigma12], [sigma12, sigma2sq]]``."""

    sigma1sq: float
    sigma2sq: float
    sigma12: float = 0.0

    def __post_init__(self):
        tol = 1e-12
        if self.sigma1sq < -tol or self.sigma2sq < -tol:
            raise ValueError(f"negative between-study variance: {self.sigma1sq}, {self.sigma2sq}")
        bound = math.sqrt(max(self.sigma1sq, 0.0) * max(self.sigma2sq, 0.0))
        if abs(self.sigma12) > bound * (1 + 1e-9) + tol:
            raise ValueError(f"between-study covariance is not PSD (|sigma12|={abs(self.sigma12)} > {bound})")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.sigma1sq, self.sigma12], [self.sigma12, self.sigma2sq]])

    @property
    def rho(self) -> float:
        denom = math.sqrt(self.sigma1sq * self.sigma2sq)
        if denom == 0.0:
            return 0.0
        return max(-1.0, min(1.0, self.sigma12 / denom))

    @classmethod
    def from_tau(cls, tau1sq: float, tau2sq: float, rho: float) -> "BetweenStudyCov":
        return cls(tau1sq, tau2sq, rho * math.sqrt(tau1sq * tau2sq))

    @classmethod
    def from_matrix(cls, m) -> "BetweenStudyCov":
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), float(m[1, 1]), float(0.5 * (m[0, 1] + m[1, 0])))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.sigma1sq, self.sigma2sq, self.sigma12)


@dataclass(frozen=True)
class PooledMean:
    mu1: float
    mu2: float

    def __post_init__(self):
        if not (math.isfinite(self.mu1) and math.isfinite(self.mu2)):
            raise ValueError("pooled mean must be finite")

    @property
    def array(self) -> np.ndarray:
        return np.array([self.mu1, self.mu2])

    @classmethod
    def from_array(cls, a) -> "PooledMean":
        return cls(float(a[0]), float(a[1]))

    @property
    def sensitivity(self) -> float:
        return inverse_logit(self.mu1)

    @property
    def specificity(self) -> float:
        return inverse_logit(self.mu2)


@dataclass(frozen=True)
class StudyData:
    """All studies of a meta-analysis in array form.

    Attributes
    ----------
    y : ndarray, shape (N, 2)
        Logit sensitivity and logit specificity per study.
    s2 : ndarray, shape (N, 2)
        Within-study variances (diagonal of ``S_i``).
    study_ids : tuple of str
    """

    y: np.ndarray
    s2: np.ndarray
    study_ids: tuple = field(default=())

    def __post_init__(self):
        y = np.array(self.y, dtype=float, ndmin=2)
        s2 = np.array(self.s2, dtype=float, ndmin=2)
        if y.shape != s2.shape or y.ndim != 2 or y.shape[1] != 2:
            raise DataError(f"expected matching (N, 2) arrays, got {y.shape} and {s2.shape}")
        if not np.all(np.isfinite(y)):
            raise DataError("non-finite logit value")
        if not np.all(s2 > 0) or not np.all(np.isfinite(s2)):
            raise DataError("within-study variances must be finite and > 0")
        ids = tuple(self.study_ids) if self.study_ids else tuple(str(i + 1) for i in range(len(y)))
        if len(ids) != len(y):
            raise DataError("study_ids length does not match the data")
        y.setflags(write=False)
        s2.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "s2", s2)
        object.__setattr__(self, "study_ids", ids)

    def __len__(self):
        return self.y.shape[0]

    @property
    def n_studies(self) -> int:
        return self.y.shape[0]

    @classmethod
    def from_observations(cls, observations: Sequence[LogitObservation]) -> "StudyData":
        obs = list(observations)
        if not obs:
            raise DataError("no studies")
        return cls(
            y=[[o.y1, o.y2] for o in obs],
            s2=[[o.s1sq, o.s2sq] for o in obs],
            study_ids=tuple(o.study_id or str(i + 1) for i, o in enumerate(obs)),
        )

    @classmethod
    def from_counts(cls, counts: Iterable[StudyCounts], correction: str = "zero-cell") -> "StudyData":
        return cls.from_observations([logit_transform(c, correction) for c in counts])

    def observations(self) -> list[LogitObservation]:
        return [
            LogitObservation(float(a), float(b), float(c), float(d), sid)
            for (a, b), (c, d), sid in zip(self.y, self.s2, self.study_ids)
        ]

    def shifted(self, c) -> "StudyData":
        return StudyData(self.y + np.asarray(c, dtype=float), self.s2, self.study_ids)

    def subset(self, index) -> "StudyData":
        index = np.asarray(index)
        return StudyData(self.y[index], self.s2[index], tuple(np.asarray(self.study_ids, dtype=object)[index]))


def as_study_data(data) -> StudyData:
    """Coerce a :class:`StudyData` or a sequence of :class:`LogitObservation`."""
    if isinstance(data, StudyData):
        return data
    return StudyData.from_observations(data)


def logit(p):
    p = np.asarray(p, dtype=float)
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def inverse_logit(x):
    """Logistic function ``1 / (1 + exp(-x))``, overflow-safe, scalar or array."""
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return float(out) if out.ndim == 0 else out


def corrected_counts(counts: StudyCounts, correction: str = "zero-cell") -> tuple[float, float, float, float]:
    if correction not in CORRECTIONS:
        raise ValueError(f"unknown continuity correction {correction!r}; expected one of {CORRECTIONS}")
    cells = (counts.tp, counts.fn, counts.fp, counts.tn)
    if counts.has_zero_cell:
        if correction == "none":
            raise DataError(
                f"study {counts.study_id!r} has a zero cell {cells}; use the 0.5 zero-cell correction"
            )
        return tuple(c + 0.5 for c in cells)
    return tuple(float(c) for c in cells)


def logit_transform(counts: StudyCounts, correction: str = "zero-cell") -> LogitObservation:
    """Map a 2x2 table to logit sensitivity/specificity with delta-method variances.

    With ``correction="zero-cell"`` 0.5 is added to every cell of a table that
    contains a zero; ``"none"`` rejects such tables.
    """
    tp, fn, fp, tn = corrected_counts(counts, correction)
    return LogitObservation(
        y1=math.log(tp / fn),
        y2=math.log(tn / fp),
        s1sq=1.0 / tp + 1.0 / fn,
        s2sq=1.0 / tn + 1.0 / fp,
        study_id=counts.study_id,
    )


def marginal_covariances(data: StudyData, sigma) -> np.ndarray:
    """Stack of ``S_i + Sigma`` with shape (N, 2, 2)."""
    m = sigma.matrix if isinstance(sigma, BetweenStudyCov) else np.asarray(sigma, dtype=float)
    v = np.empty((data.n_studies, 2, 2))
    v[:, 0, 0] = data.s2[:, 0] + m[0, 0]
    v[:, 1, 1] = data.s2[:, 1] + m[1, 1]
    v[:, 0, 1] = v[:, 1, 0] = m[0, 1]
    return v


def inverse_2x2(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjugate inverse of a stack of symmetric 2x2 matrices; returns ``(inv, det)``.

    Raises :class:`DegenerateCovarianceError` unless every matrix is positive definite.
    """
    a, b, d = v[..., 0, 0], v[..., 0, 1], v[..., 1, 1]
    det = a * d - b * b
    if not (np.all(a > 0) and np.all(det > 0) and np.all(np.isfinite(det))):
        raise DegenerateCovarianceError("marginal covariance S_i + Sigma is not positive definite")
    inv = np.empty_like(v)
    inv[..., 0, 0] = d / det
    inv[..., 1, 1] = a / det
    inv[..., 0, 1] = inv[..., 1, 0] = -b / det
    return inv, det


def marginal_precision(obs: LogitObservation, sigma: BetweenStudyCov) -> np.ndarray:
    """``W_i = (S_i + Sigma)^{-1}`` for one study as a 2x2 array."""
    v = np.array([[obs.s1sq + sigma.sigma1sq, sigma.sigma12], [sigma.sigma12, obs.s2sq + sigma.sigma2sq]])
    w, _ = inverse_2x2(v)
    return w


def marginal_precisions(data: StudyData, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``W_i`` for every study; returns ``(W, det(S_i + Sigma))``."""
    return inverse_2x2(marginal_covariances(data, sigma))


def read_counts_csv(path) -> list[StudyCounts]:
    """Read a ``study,tp,fn,fp,tn`` CSV file.

    Errors carry the 1-based line number of the offending row.
    """
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip().lower() for h in header]
        if tuple(header) != CSV_HEADER:
            raise DataError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 5:
                raise DataError(f"{path}: line {lineno}: expected 5 fields, got {len(row)}")
            sid = row[0].strip()
            try:
                tp, fn, fp, tn = (int(cell.strip()) for cell in row[1:])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: counts must be integers, got {row[1:]}") from None
            try:
                out.append(StudyCounts(sid, tp, fn, fp, tn))
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    return out


def write_counts_csv(path, counts: Iterable[StudyCounts]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for c in counts:
            writer.writerow([c.study_id, c.tp, c.fn, c.fp, c.tn])
