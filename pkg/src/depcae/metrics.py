"""Classification metrics, AUROC, inter-rater agreement and stratified reports."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

# row order of the results table
METRIC_ORDER = ("tpr", "tnr", "fpr", "fnr", "gmean", "mcc", "precision", "recall",
                "specificity", "balanced_accuracy", "f1", "auroc")
METRIC_NAMES = {
    "tpr": "TPR", "tnr": "TNR", "fpr": "FPR", "fnr": "FNR", "gmean": "Gmean", "mcc": "MCC",
    "precision": "Precision", "recall": "Recall", "specificity": "Specificity",
    "balanced_accuracy": "Balanced Accuracy", "f1": "F1-score", "auroc": "AUROC",
}


class DegenerateWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, labels: Sequence[bool], predicted: Sequence[bool]) -> "ConfusionCounts":
        y = np.asarray(labels, bool)
        p = np.asarray(predicted, bool)
        if y.shape != p.shape:
            raise ValueError("labels and predictions differ in length")
        return cls(int((y & p).sum()), int((~y & p).sum()), int((~y & ~p).sum()), int((y & ~p).sum()))


@dataclass
class MetricsReport:
    tpr: float
    tnr: float
    fpr: float
    fnr: float
    gmean: float
    mcc: float
    precision: float
    recall: float
    specificity: float
    balanced_accuracy: float
    f1: float
    auroc: Optional[float] = None
    counts: Optional[ConfusionCounts] = None
    degenerate: Tuple[str, ...] = ()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["degenerate"] = list(self.degenerate)
        return d

    def consistency_errors(self, tol: float = 1e-12) -> List[str]:
        checks = {
            "tpr+fnr": (self.tpr + self.fnr, 1.0),
            "tnr+fpr": (self.tnr + self.fpr, 1.0),
            "recall": (self.recall, self.tpr),
            "specificity": (self.specificity, self.tnr),
            "gmean": (self.gmean, math.sqrt(self.tpr * self.tnr)),
            "balanced_accuracy": (self.balanced_accuracy, (self.tpr + self.tnr) / 2),
        }
        return [k for k, (a, b) in checks.items() if abs(a - b) > tol]


def _ratio(num: float, den: float, name: str, bad: list) -> float:
    if den == 0:
        bad.append(name)
        return 0.0
    return num / den


def confusion_metrics(counts: ConfusionCounts, auroc_value: Optional[float] = None) -> MetricsReport:
    """The twelve-metric block. Zero denominators give 0 and are listed in ``degenerate``.

    Complements (FNR, FPR) are taken as ``1 - rate`` so ``tpr + fnr == 1``
    holds even when a class is empty.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    bad: list = []
    tpr = _ratio(tp, tp + fn, "tpr", bad)
    tnr = _ratio(tn, tn + fp, "tnr", bad)
    precision = _ratio(tp, tp + fp, "precision", bad)
    f1 = _ratio(2 * precision * tpr, precision + tpr, "f1", bad)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = _ratio(tp * tn - fp * fn, math.sqrt(den), "mcc", bad)
    return MetricsReport(
        tpr=tpr, tnr=tnr, fpr=1.0 - tnr, fnr=1.0 - tpr, gmean=math.sqrt(tpr * tnr), mcc=mcc,
        precision=precision, recall=tpr, specificity=tnr, balanced_accuracy=(tpr + tnr) / 2,
        f1=f1, auroc=auroc_value, counts=counts, degenerate=tuple(bad))


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUROC from midranks; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(s, method="average")
    # twice the U statistic is an integer; keep it that way until the last division
    u2 = int(round(2 * ranks[y].sum())) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def evaluate(scored: Sequence, threshold: Optional[float] = None) -> MetricsReport:
    """Metrics for scored windows; ``label == 'anomalous'`` is the positive class."""
    y = [w.label == "anomalous" for w in scored]
    s = [w.anomaly_score for w in scored]
    if threshold is not None:
        pred = [sc > threshold for sc in s]
    else:
        pred = [bool(w.predicted) for w in scored]
    auc = auroc(s, y) if 0 < sum(y) < len(y) else None
    return confusion_metrics(ConfusionCounts.from_predictions(y, pred), auc)


# ---------------------------------------------------------------------------
# agreement
# ---------------------------------------------------------------------------

@dataclass
class AgreementReport:
    cohen_kappa: float
    krippendorff_alpha: float
    percent_agreement: float
    n: int
    degenerate: Tuple[str, ...] = ()


def _pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("rater label vectors must be 1-D and equal length")
    if a.size == 0:
        raise ValueError("empty label vectors")
    return a, b


def percent_agreement(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(a == b))


def cohen_kappa(a, b) -> float:
    """``(p_o - p_e) / (1 - p_e)`` with chance agreement from the raters' marginals."""
    a, b = _pair(a, b)
    cats = np.union1d(a, b)
    p_o = float(np.mean(a == b))
    p_e = float(sum(np.mean(a == c) * np.mean(b == c) for c in cats))
    if p_e == 1.0:
        warnings.warn("both raters used one identical category; kappa set to 1", DegenerateWarning, stacklevel=2)
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def krippendorff_alpha_binary(a, b) -> float:
    """Nominal Krippendorff alpha for two raters with no missing values."""
    a, b = _pair(a, b)
    cats = list(np.union1d(a, b))
    idx = {c: i for i, c in enumerate(cats)}
    k = len(cats)
    o = np.zeros((k, k))
    for x, y in zip(a, b):
        # each unit contributes both ordered pairs, weighted 1 / (m_u - 1) = 1
        o[idx[x], idx[y]] += 1
        o[idx[y], idx[x]] += 1
    n_c = o.sum(axis=1)
    n = n_c.sum()
    observed = o.sum() - np.trace(o)
    expected = (n_c.sum() ** 2 - (n_c ** 2).sum()) / (n - 1)
    if expected == 0:
        raise ValueError("no expected disagreement: every label is the same category")
    return float(1.0 - observed / expected)


def agreement_report(a, b) -> AgreementReport:
    bad = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        kappa = cohen_kappa(a, b)
    if caught:
        bad.append("cohen_kappa")
    try:
        alpha = krippendorff_alpha_binary(a, b)
    except ValueError:
        alpha = 1.0
        bad.append("krippendorff_alpha")
    return AgreementReport(kappa, alpha, percent_agreement(a, b), len(a), tuple(bad))


# ---------------------------------------------------------------------------
# stratified evaluation
# ---------------------------------------------------------------------------

NOT_REPORTABLE = "-"


@dataclass
class StratifiedReport:
    group_key: str
    rows: Dict[str, object]          # group -> MetricsReport or NOT_REPORTABLE
    average: Dict[str, float]
    n_anomalous: Dict[str, int] = field(default_factory=dict)


def stratified_eval(scored: Sequence, group_key: str, min_anomalous: int = 2) -> StratifiedReport:
    """Per-group metrics: the group's anomalous windows plus every normal window.

    Groups with fewer than ``min_anomalous`` anomalous windows are reported
    as ``"-"``. Predictions must already be set on the windows.
    """
    normals = [w for w in scored if w.label != "anomalous"]
    groups: Dict[str, list] = {}
    for w in scored:
        if w.label == "anomalous":
            g = (w.group or {}).get(group_key)
            if g is None:
                raise ValueError(f"anomalous window {w.window_id} has no {group_key!r} group")
            groups.setdefault(str(g), []).append(w)
    if not groups:
        raise ValueError(f"no anomalous windows carry a {group_key!r} group")
    rows: Dict[str, object] = {}
    for g in sorted(groups):
        anomalies = groups[g]
        if len(anomalies) < min_anomalous:
            rows[g] = NOT_REPORTABLE
            continue
        rows[g] = evaluate(anomalies + normals)
    reportable = [r for r in rows.values() if isinstance(r, MetricsReport)]
    average = {}
    if reportable:
        for name in METRIC_ORDER:
            vals = [getattr(r, name) for r in reportable if getattr(r, name) is not None]
            average[name] = float(np.mean(vals)) if vals else None
    return StratifiedReport(group_key, rows, average, {g: len(v) for g, v in groups.items()})


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def format_table(columns: Dict[str, object]) -> str:
    """Aligned text table, one metric per row, one column per report.

    Column values may be :class:`MetricsReport`, plain dicts of metrics, or
    ``"-"`` for a non-reportable column.
    """
    names = list(columns)
    width = max([len(n) for n in names] + [7])
    label_w = max(len(v) for v in METRIC_NAMES.values())
    lines = [" " * label_w + "  " + "  ".join(n.rjust(width) for n in names)]
    for key in METRIC_ORDER:
        cells = []
        for n in names:
            col = columns[n]
            if isinstance(col, MetricsReport):
                val = getattr(col, key)
            elif isinstance(col, dict):
                val = col.get(key)
            else:
                val = None
            cells.append(("-" if val is None else f"{val:.3f}").rjust(width))
        lines.append(METRIC_NAMES[key].ljust(label_w) + "  " + "  ".join(cells))
    return "\n".join(lines)


def report_json(columns: Dict[str, object]) -> str:
    out = {}
    for n, col in columns.items():
        out[n] = col.as_dict() if isinstance(col, MetricsReport) else col
    return json.dumps(out, indent=2, sort_keys=True, default=lambda o: asdict(o))
