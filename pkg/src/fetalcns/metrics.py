"""Image-level and patient-level evaluation.

Confusion matrices, accuracy/precision/recall/F1 with macro and micro
averaging, per-class / micro / macro ROC with AUC, precision-recall curves
with average precision, binary collapse of the five-way task, and the
gestational-age subgroup comparison.

AUC follows the rank (Mann-Whitney) definition - the probability a positive
outscores a negative with ties counted half - computed in exact integer
arithmetic so it agrees bit-for-bit with pair counting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import FIVE_CLASSES
from .errors import (
    AggregationError,
    GroupingError,
    LabelError,
    UndefinedMetricError,
)


@dataclass
class PredictionRecord:
    """Per-image class-probability vector plus its aggregation keys."""

    sample_id: str
    patient_id: str
    fold_id: int
    true_label: str
    probabilities: list[float]
    gestational_age_days: int | None = None

    def to_json_dict(self) -> dict:
        out = {
            "sample_id": self.sample_id,
            "patient_id": self.patient_id,
            "fold_id": self.fold_id,
            "true_label": self.true_label,
            "probabilities": [float(p) for p in self.probabilities],
        }
        if self.gestational_age_days is not None:
            out["gestational_age_days"] = self.gestational_age_days
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "PredictionRecord":
        return cls(
            sample_id=data["sample_id"],
            patient_id=data["patient_id"],
            fold_id=data["fold_id"],
            true_label=data["true_label"],
            probabilities=list(data["probabilities"]),
            gestational_age_days=data.get("gestational_age_days"),
        )


def write_predictions(records: Iterable[PredictionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json_dict()) + "\n")


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(PredictionRecord.from_json_dict(json.loads(line)))
    return records


def argmax_label(probabilities: Sequence[float]) -> int:
    """Highest-probability index; ties break to the lowest class index."""
    arr = np.asarray(probabilities)
    return int(np.argmax(arr))


@dataclass
class PatientAggregate:
    """Mean of a patient's per-image probability vectors."""

    patient_id: str
    true_label: str
    probabilities: list[float]
    predicted_index: int
    image_count: int
    gestational_age_days: int | None = None


def aggregate_patient(records: Sequence[PredictionRecord]) -> PatientAggregate:
    if not records:
        raise AggregationError("no records to aggregate")
    patient_ids = {r.patient_id for r in records}
    if len(patient_ids) != 1:
        raise AggregationError(f"records mix patients {sorted(patient_ids)}")
    lengths = {len(r.probabilities) for r in records}
    if len(lengths) != 1:
        raise AggregationError(f"records mix probability lengths {sorted(lengths)}")
    probs = np.mean([r.probabilities for r in records], axis=0)
    ga = next((r.gestational_age_days for r in records if r.gestational_age_days is not None), None)
    return PatientAggregate(
        patient_id=records[0].patient_id,
        true_label=records[0].true_label,
        probabilities=[float(p) for p in probs],
        predicted_index=argmax_label(probs),
        image_count=len(records),
        gestational_age_days=ga,
    )


def aggregate_patients(records: Sequence[PredictionRecord]) -> list[PatientAggregate]:
    """Group records by patient (sorted by id) and aggregate each group."""
    by_patient: dict[str, list[PredictionRecord]] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    return [aggregate_patient(by_patient[p]) for p in sorted(by_patient)]


# ---------------------------------------------------------------------------
# Confusion matrix and summary metrics


@dataclass
class ConfusionMatrix:
    """Rows = true label, columns = predicted label."""

    counts: np.ndarray  # C×C int64
    classes: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_json_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


def confusion(units, classes: Sequence[str]) -> ConfusionMatrix:
    """Count (true, predicted) pairs of records or patient aggregates.

    Units need ``true_label`` and ``probabilities``; prediction is the
    argmax with ties to the lowest index.
    """
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for u in units:
        if u.true_label not in index:
            raise LabelError(f"label {u.true_label!r} not in task classes {classes}")
        counts[index[u.true_label], argmax_label(u.probabilities)] += 1
    return ConfusionMatrix(counts=counts, classes=classes)


@dataclass
class SummaryMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    averaging: str
    undefined_classes: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "averaging": self.averaging,
            "undefined_classes": self.undefined_classes,
        }


def summary_metrics(matrix: ConfusionMatrix, averaging: str = "macro") -> SummaryMetrics:
    """Accuracy, precision, recall, F1 from a confusion matrix.

    Macro averages the per-class values uniformly; a class with a zero
    denominator contributes 0 and is flagged. Micro pools decisions, which
    for single-label classification makes precision = recall = accuracy.
    """
    if averaging not in ("macro", "micro"):
        raise LabelError(f"averaging must be macro or micro, got {averaging!r}")
    m = matrix.counts.astype(np.float64)
    total = m.sum()
    if total < 1:
        raise UndefinedMetricError("empty confusion matrix")
    accuracy = float(np.trace(m) / total)
    undefined: list[str] = []
    if averaging == "micro":
        precision = recall = accuracy
        f1 = accuracy
    else:
        row = m.sum(axis=1)
        col = m.sum(axis=0)
        diag = np.diag(m)
        precisions, recalls, f1s = [], [], []
        for i, cls in enumerate(matrix.classes):
            p = diag[i] / col[i] if col[i] > 0 else 0.0
            r = diag[i] / row[i] if row[i] > 0 else 0.0
            if col[i] == 0 or row[i] == 0:
                undefined.append(cls)
            f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
            precisions.append(p)
            recalls.append(r)
            f1s.append(f)
        precision = float(np.mean(precisions))
        recall = float(np.mean(recalls))
        f1 = float(np.mean(f1s))
    return SummaryMetrics(accuracy, precision, recall, f1, averaging, undefined)


# ---------------------------------------------------------------------------
# ROC / PR


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based fractional ranks with ties averaged."""
    order = np.argsort(values, kind="mergesort")
    s = values[order]
    n = len(values)
    boundary = np.r_[True, s[1:] != s[:-1]]
    group = np.cumsum(boundary) - 1
    counts = np.bincount(group)
    ends = np.cumsum(counts)
    starts = ends - counts
    mid = (starts + ends - 1) / 2.0 + 1.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = mid[group]
    return ranks


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores: Sequence[float], positives: Sequence[bool]) -> RocCurve:
    """ROC curve from a threshold sweep plus the rank-statistic AUC.

    The AUC equals P(score+ > score-) + 0.5 P(tie) exactly: doubled rank
    sums are integers, so the division matches pair counting bit-for-bit.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives, dtype=bool)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"ROC needs both classes; got {n_pos} positives, {n_neg} negatives"
        )
    ranks2 = np.rint(2.0 * _midranks(s)).astype(np.int64)
    num2 = int(ranks2[y].sum()) - n_pos * (n_pos + 1)
    auc = num2 / (2 * n_pos * n_neg)

    desc = np.argsort(-s, kind="mergesort")
    y_desc = y[desc]
    s_desc = s[desc]
    last_of_group = np.r_[s_desc[1:] != s_desc[:-1], True]
    tps = np.cumsum(y_desc)[last_of_group]
    fps = np.cumsum(~y_desc)[last_of_group]
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s_desc[last_of_group]]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=float(auc))


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    auc: float  # average precision (step interpolation)


def pr_auc(scores: Sequence[float], positives: Sequence[bool]) -> PrCurve:
    """Precision-recall sweep with the average-precision area
    sum_k (R_k - R_{k-1}) * P_k over descending distinct thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives, dtype=bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR curve needs at least one positive")
    desc = np.argsort(-s, kind="mergesort")
    y_desc = y[desc]
    s_desc = s[desc]
    last_of_group = np.r_[s_desc[1:] != s_desc[:-1], True]
    tps = np.cumsum(y_desc)[last_of_group].astype(np.float64)
    fps = np.cumsum(~y_desc)[last_of_group].astype(np.float64)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PrCurve(
        recall=recall,
        precision=precision,
        thresholds=s_desc[last_of_group],
        auc=ap,
    )


def _labels_and_probs(records, classes: tuple[str, ...]):
    index = {c: i for i, c in enumerate(classes)}
    y = np.empty(len(records), dtype=np.int64)
    probs = np.empty((len(records), len(classes)), dtype=np.float64)
    for i, r in enumerate(records):
        if r.true_label not in index:
            raise LabelError(f"label {r.true_label!r} not in task classes {classes}")
        if len(r.probabilities) != len(classes):
            raise LabelError(
                f"{len(r.probabilities)}-way probabilities for {len(classes)}-way task"
            )
        y[i] = index[r.true_label]
        probs[i] = r.probabilities
    return y, probs


MACRO_GRID_POINTS = 257


@dataclass
class MacroRocCurve:
    fpr_grid: np.ndarray
    mean_tpr: np.ndarray
    auc: float
    per_class_auc: dict[str, float]


def multiclass_roc(records, classes: Sequence[str], mode: str):
    """One-vs-rest ROC analysis of multiclass records.

    mode "per_class": {class: RocCurve}; "micro": RocCurve over pooled
    (sample, class) binary decisions; "macro": per-class curves linearly
    interpolated on a common 257-point FPR grid and averaged.
    """
    classes = tuple(classes)
    y, probs = _labels_and_probs(records, classes)
    if mode not in ("per_class", "micro", "macro"):
        raise LabelError(f"unknown roc mode {mode!r}")
    if mode == "micro":
        onehot = np.zeros_like(probs, dtype=bool)
        onehot[np.arange(len(y)), y] = True
        return roc_auc(probs.ravel(), onehot.ravel())
    curves: dict[str, RocCurve] = {}
    for i, cls in enumerate(classes):
        pos = y == i
        if pos.sum() == 0:
            raise UndefinedMetricError(f"class {cls!r} has no samples; ROC undefined")
        if pos.sum() == len(y):
            raise UndefinedMetricError(f"class {cls!r} has no negatives; ROC undefined")
        curves[cls] = roc_auc(probs[:, i], pos)
    if mode == "per_class":
        return curves
    grid = np.linspace(0.0, 1.0, MACRO_GRID_POINTS)
    mean_tpr = np.zeros_like(grid)
    for curve in curves.values():
        mean_tpr += np.interp(grid, curve.fpr, curve.tpr)
    mean_tpr /= len(curves)
    macro_auc = float(np.trapezoid(mean_tpr, grid))
    return MacroRocCurve(
        fpr_grid=grid,
        mean_tpr=mean_tpr,
        auc=macro_auc,
        per_class_auc={c: curves[c].auc for c in classes},
    )


# ---------------------------------------------------------------------------
# Binary collapse


def binary_collapse(records: Sequence[PredictionRecord]) -> list[PredictionRecord]:
    """Collapse five-way records to {Abnormal, Normal}.

    The Abnormal probability is the sum of the four anomaly probabilities,
    so total probability is preserved.
    """
    out = []
    for r in records:
        if len(r.probabilities) != len(FIVE_CLASSES):
            raise LabelError(
                f"binary collapse expects 5-way probabilities, got {len(r.probabilities)}"
            )
        abnormal = float(sum(r.probabilities[:-1]))
        normal = float(r.probabilities[-1])
        label = "Normal" if r.true_label == "Normal" else "Abnormal"
        out.append(
            PredictionRecord(
                sample_id=r.sample_id,
                patient_id=r.patient_id,
                fold_id=r.fold_id,
                true_label=label,
                probabilities=[abnormal, normal],
                gestational_age_days=r.gestational_age_days,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Subgroup comparison (rank-based test)

EXACT_TEST_MAX_N = 20


def mann_whitney_u(
    group_a: Sequence[float], group_b: Sequence[float]
) -> tuple[float, float, str]:
    """Two-sided Mann-Whitney U test; returns (U_a, p_value, method).

    For combined n <= 20 the p-value is exact: all C(n, n_a) assignments of
    the pooled values are enumerated and assignments whose U deviates from
    the null mean at least as much as observed are counted. Larger samples
    use the normal approximation with tie correction and a 0.5 continuity
    correction. Both routes are symmetric under swapping the groups.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise GroupingError(f"both groups must be non-empty, got sizes {n1}, {n2}")
    pooled = np.concatenate([a, b])
    n = n1 + n2
    ranks2 = np.rint(2.0 * _midranks(pooled)).astype(np.int64)  # doubled ranks: exact ints
    u2_obs = int(ranks2[:n1].sum()) - n1 * (n1 + 1)  # doubled U statistic of group a
    mu2 = n1 * n2  # doubled null mean
    u_a = u2_obs / 2.0

    if n <= EXACT_TEST_MAX_N:
        combos = np.fromiter(
            (i for combo in combinations(range(n), n1) for i in combo), dtype=np.int64
        ).reshape(-1, n1)
        u2_all = ranks2[combos].sum(axis=1) - n1 * (n1 + 1)
        extreme = np.abs(u2_all - mu2) >= abs(u2_obs - mu2)
        p = float(extreme.sum() / len(u2_all))
        return u_a, p, "mann-whitney-u-exact"

    tie_sizes = np.unique(ranks2, return_counts=True)[1]
    tie_term = float(np.sum(tie_sizes.astype(np.float64) ** 3 - tie_sizes))
    sigma_sq = (n1 * n2 / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if sigma_sq <= 0:
        return u_a, 1.0, "mann-whitney-u-normal"
    dev = max(abs(u_a - mu2 / 2.0) - 0.5, 0.0)  # continuity correction
    z = dev / math.sqrt(sigma_sq)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return u_a, p, "mann-whitney-u-normal"


def welch_t(group_a: Sequence[float], group_b: Sequence[float]) -> tuple[float, float, str]:
    """Two-sided Welch t test (unequal variances)."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise GroupingError("welch test needs at least 2 samples per group")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = len(a), len(b)
    se_sq = va / na + vb / nb
    if se_sq == 0:
        return 0.0, 1.0, "welch-t"
    t = (a.mean() - b.mean()) / math.sqrt(se_sq)
    df = se_sq**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    from scipy.stats import t as t_dist  # only this flag-gated path needs scipy

    p = float(2.0 * t_dist.sf(abs(t), df))
    return t, min(p, 1.0), "welch-t"


@dataclass
class SubgroupReport:
    group_a: list[float]
    group_b: list[float]
    statistic: float
    p_value: float
    test_name: str
    cutoff_days: int

    def to_json_dict(self) -> dict:
        return {
            "group_a": self.group_a,
            "group_b": self.group_b,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "test_name": self.test_name,
            "cutoff_days": self.cutoff_days,
        }


def subgroup_compare(
    records,
    classes: Sequence[str],
    cutoff_days: int = 140,
    method: str = "mannwhitney",
) -> SubgroupReport:
    """Compare true-class probability scores across the gestational-age cutoff.

    Group A holds records with age <= cutoff (default 140 days = 20 weeks),
    group B the rest. Every record must carry a gestational age.
    """
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    group_a: list[float] = []
    group_b: list[float] = []
    for r in records:
        if r.gestational_age_days is None:
            raise GroupingError(f"record without gestational age: {_unit_id(r)}")
        if r.true_label not in index:
            raise LabelError(f"label {r.true_label!r} not in task classes {classes}")
        score = float(r.probabilities[index[r.true_label]])
        (group_a if r.gestational_age_days <= cutoff_days else group_b).append(score)
    if not group_a or not group_b:
        raise GroupingError(
            f"cutoff {cutoff_days} leaves an empty group "
            f"({len(group_a)} vs {len(group_b)})"
        )
    if method == "mannwhitney":
        stat, p, name = mann_whitney_u(group_a, group_b)
    elif method == "welch":
        stat, p, name = welch_t(group_a, group_b)
    else:
        raise LabelError(f"unknown subgroup method {method!r}")
    return SubgroupReport(
        group_a=group_a,
        group_b=group_b,
        statistic=stat,
        p_value=p,
        test_name=name,
        cutoff_days=cutoff_days,
    )


def _unit_id(unit) -> str:
    return getattr(unit, "sample_id", None) or getattr(unit, "patient_id", "<unit>")
