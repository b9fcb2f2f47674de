"""Accuracy and group-fairness metrics for load regression.

Residuals are ``y_true - y_pred``: positive means the load was
underestimated, negative means it was overestimated.  Statistical parity
is female mean prediction minus male mean prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError

FEMALE, MALE = "female", "male"


@dataclass(frozen=True)
class Record:
    subject_id: str
    trial_id: str
    sex: str
    y_true: float
    y_pred: float


@dataclass
class GroupedPredictions:
    records: list[Record] = field(default_factory=list)

    def __post_init__(self):
        for r in self.records:
            if r.sex not in (FEMALE, MALE):
                raise DataError(f"unknown sex label {r.sex!r}")
            if not (np.isfinite(r.y_true) and np.isfinite(r.y_pred)):
                raise DataError(f"non-finite value in record {r}")

    @classmethod
    def from_arrays(cls, sex, y_true, y_pred, subject_ids=None, trial_ids=None):
        n = len(sex)
        subject_ids = subject_ids if subject_ids is not None else [""] * n
        trial_ids = trial_ids if trial_ids is not None else [""] * n
        return cls([Record(s, t, x, float(a), float(b))
                    for s, t, x, a, b in zip(subject_ids, trial_ids, sex, y_true, y_pred)])

    def group(self, sex: str) -> tuple[np.ndarray, np.ndarray]:
        rows = [(r.y_true, r.y_pred) for r in self.records if r.sex == sex]
        if not rows:
            return np.empty(0), np.empty(0)
        y, p = np.array(rows, dtype=float).T
        return y, p

    def _nonempty(self, sex):
        y, p = self.group(sex)
        if not len(y):
            raise ParameterError(f"no records in the {sex} group")
        return y, p


@dataclass
class MetricsReport:
    mae_overall: float
    mae_female: float | None
    mae_male: float | None
    sp: float | None
    prd: float | None
    nrd: float | None
    n_f: int
    n_m: int


def mae(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.size == 0:
        raise ParameterError("MAE of an empty set is undefined")
    return float(np.mean(np.abs(y_true - y_pred)))


def statistical_parity(g: GroupedPredictions) -> float:
    _, pf = g._nonempty(FEMALE)
    _, pm = g._nonempty(MALE)
    return float(pf.mean() - pm.mean())


def _residual_gap(g, clip):
    yf, pf = g._nonempty(FEMALE)
    ym, pm = g._nonempty(MALE)
    return float(abs(clip(yf - pf).mean() - clip(ym - pm).mean()))


def positive_residual_difference(g: GroupedPredictions) -> float:
    """Gap between groups in mean underestimation ``max(0, y - y_hat)``."""
    return _residual_gap(g, lambda r: np.maximum(0.0, r))


def negative_residual_difference(g: GroupedPredictions) -> float:
    """Gap between groups in mean overestimation ``min(0, y - y_hat)``."""
    return _residual_gap(g, lambda r: np.minimum(0.0, r))


def report(g: GroupedPredictions) -> MetricsReport:
    yf, pf = g.group(FEMALE)
    ym, pm = g.group(MALE)
    if not len(yf) + len(ym):
        raise ParameterError("cannot report on an empty prediction set")
    both = len(yf) and len(ym)
    try:
        return MetricsReport(
            mae_overall=mae(np.concatenate([yf, ym]), np.concatenate([pf, pm])),
            mae_female=mae(yf, pf) if len(yf) else None,
            mae_male=mae(ym, pm) if len(ym) else None,
            sp=statistical_parity(g) if both else None,
            prd=positive_residual_difference(g) if both else None,
            nrd=negative_residual_difference(g) if both else None,
            n_f=len(yf), n_m=len(ym))
    except ParameterError as exc:
        raise ParameterError(f"metrics report: {exc}") from exc
