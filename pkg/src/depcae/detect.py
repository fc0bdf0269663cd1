"""Window scoring and operating-threshold selection from proxy outliers."""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from depcae.loss import DepthWeights, per_window_scores
from depcae.model import DepCaeModel
from depcae.tensor import ShapeError

METHODS = ("annotated-proxy-maxF1", "iqr-proxy-maxF1")


class DegenerateProxyWarning(UserWarning):
    pass


class SingleClassProxyError(ValueError):
    pass


@dataclass
class ScoredWindow:
    window_id: str
    anomaly_score: float
    label: Optional[str] = None
    predicted: Optional[bool] = None
    group: Optional[dict] = None

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


@dataclass
class ThresholdReport:
    threshold: float
    method: str
    n_candidates: int
    n_proxy_positive: int
    n_proxy_negative: int
    proxy_f1: float
    flagged: bool = False
    note: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def score_windows(model: DepCaeModel, windows: Sequence, depth_weights: Optional[DepthWeights] = None,
                  batch_size: int = 4, workers: int = 1) -> List[ScoredWindow]:
    """Reconstruction error of every window; depth-weighted when weights are given.

    Windows may be :class:`~depcae.pipeline.Window` objects or bare arrays.
    Batchnorm runs on its running statistics here, so a window's score does
    not depend on which windows share its batch, and batches can be scored
    by ``workers`` threads without changing any result.
    """
    def score_batch(i):
        chunk = windows[i:i + batch_size]
        frames = np.stack([np.asarray(getattr(w, "frames", w), dtype=np.float32) for w in chunk])
        if frames.shape[1:] != model.input_shape:
            raise ShapeError(f"window shape {frames.shape[1:]} does not match model input {model.input_shape}")
        scores = per_window_scores(frames, model.forward(frames), depth_weights)
        return [ScoredWindow(w.id if hasattr(w, "id") else str(i + j), float(sc), getattr(w, "label", None),
                             None, getattr(w, "group", None)) for j, (w, sc) in enumerate(zip(chunk, scores))]

    starts = range(0, len(windows), batch_size)
    was_training = model.training
    # switch modes once, outside the workers, so no thread sees another's toggle
    model.set_training(False)
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                batches = list(pool.map(score_batch, starts))
        else:
            batches = [score_batch(i) for i in starts]
    finally:
        model.set_training(was_training)
    return [w for batch in batches for w in batch]


def iqr_proxy_labels(train_scores: Sequence[float]) -> np.ndarray:
    """Flag scores above ``Q3 + 1.5 * IQR`` (linear-interpolated quartiles)."""
    x = np.asarray(train_scores, dtype=np.float64)
    if x.size < 4:
        raise ValueError(f"need at least 4 scores for IQR proxies, got {x.size}")
    q1, q3 = np.percentile(x, [25, 75])
    iqr = q3 - q1
    labels = x > q3 + 1.5 * iqr
    if iqr == 0:
        warnings.warn("training scores have zero IQR; no proxy outliers", DegenerateProxyWarning, stacklevel=2)
    elif not labels.any():
        warnings.warn("IQR fence flags no training score; proxy set is single-class",
                      DegenerateProxyWarning, stacklevel=2)
    return labels


def _f1_counts(tp: int, fp: int, fn: int):
    """F1 as an exact fraction ``(num, den)``."""
    return 2 * tp, 2 * tp + fp + fn


def select_threshold_max_f1(candidate_scores: Sequence[float], proxy_labels: Sequence[bool],
                            method: str = "annotated-proxy-maxF1") -> ThresholdReport:
    """Pick the candidate ``t`` maximising F1 of ``score > t``; ties go to the larger ``t``.

    F1 values are compared as exact fractions, so the choice is free of
    rounding ties.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    s = np.asarray(candidate_scores, dtype=np.float64)
    y = np.asarray(proxy_labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassProxyError(
            "proxy set has a single class; fall back to the IQR method or add proxy outliers")
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    # tp/fp among scores strictly greater than each unique value
    uniq_desc, first = np.unique(-ss, return_index=True)
    cum_pos = np.concatenate([[0], np.cumsum(yy)])
    cum_neg = np.concatenate([[0], np.cumsum(~yy)])
    best = None
    for val, idx in zip(-uniq_desc, first):
        tp, fp = int(cum_pos[idx]), int(cum_neg[idx])
        num, den = _f1_counts(tp, fp, n_pos - tp)
        if best is None or num * best[2] > best[1] * den or (num * best[2] == best[1] * den and val > best[0]):
            best = (float(val), num, den)
    t, num, den = best
    f1 = num / den if den else 0.0
    return ThresholdReport(t, method, int(s.size), n_pos, n_neg, f1, flagged=f1 < 1.0,
                           note="" if f1 == 1.0 else "proxy set not separable by any candidate")


def threshold_from_iqr(train_scores: Sequence[float]) -> ThresholdReport:
    """IQR proxies then max-F1. With no IQR outliers the largest training score is used."""
    s = np.asarray(train_scores, dtype=np.float64)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        labels = iqr_proxy_labels(s)
    for w in caught:
        warnings.warn(w.message, w.category, stacklevel=2)
    if not labels.any():
        return ThresholdReport(float(s.max()), "iqr-proxy-maxF1", int(s.size), 0, int(s.size), 0.0,
                               flagged=True, note="degenerate proxy set: threshold is the largest training score")
    return select_threshold_max_f1(s, labels, "iqr-proxy-maxF1")


def threshold_from_annotations(train_scored: Sequence[ScoredWindow]) -> ThresholdReport:
    """Annotated proxy outliers are positives, every other training window negative."""
    scores = [w.anomaly_score for w in train_scored]
    labels = [w.label == "proxy_outlier" for w in train_scored]
    return select_threshold_max_f1(scores, labels, "annotated-proxy-maxF1")


def classify(scored: Sequence[ScoredWindow], threshold: float) -> List[bool]:
    preds = []
    for w in scored:
        w.predicted = bool(w.anomaly_score > threshold)
        preds.append(w.predicted)
    return preds


def write_scores_csv(scored: Sequence[ScoredWindow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["window_id", "score", "label", "predicted"])
        for w in scored:
            pred = "" if w.predicted is None else int(w.predicted)
            writer.writerow([w.window_id, repr(w.anomaly_score), w.label or "", pred])
    return path


def read_scores_csv(path) -> List[ScoredWindow]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pred = None if row["predicted"] == "" else bool(int(row["predicted"]))
            out.append(ScoredWindow(row["window_id"], float(row["score"]), row["label"] or None, pred))
    return out
