"""Detection metrics: point-wise F1, threshold sweeps, PR-AUC and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .detector import CalibrationTable, DetectorConfig, accumulate, alarm_runs, evidence, p_value, refine_boundaries
from .errors import InsufficientDataError, UndefinedMetric
from .numerics import pearson_correlation_matrix

N_QUANTILES = 256


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int


def confusion(pred, true) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    true = np.asarray(true).astype(bool)
    if pred.shape != true.shape:
        raise ValueError(f"prediction length {pred.size} != label length {true.size}")
    tp = int(np.count_nonzero(pred & true))
    fp = int(np.count_nonzero(pred & ~true))
    fn = int(np.count_nonzero(~pred & true))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


def f1(pred, true):
    """Point-wise (precision, recall, F1); no point adjustment, 0 for empty denominators."""
    c = confusion(pred, true)
    return _prf(c.tp, c.fp, c.fn)


@dataclass
class SweepResult:
    best_f1: float
    best_alpha: Optional[float]
    best_h: float
    best_precision: float = 0.0
    best_recall: float = 0.0
    grid: list = field(default_factory=list)  # (alpha, h, precision, recall, f1)
    best_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "best_f1": self.best_f1,
            "best_alpha": self.best_alpha,
            "best_h": self.best_h,
            "best_precision": self.best_precision,
            "best_recall": self.best_recall,
        }


def h_grid(s, n_quantiles: int = N_QUANTILES) -> np.ndarray:
    """Quantiles of the score series plus 0, sorted and de-duplicated."""
    s = np.asarray(s, dtype=np.float64)
    qs = np.quantile(s, np.linspace(0.0, 1.0, n_quantiles)) if s.size else np.zeros(0)
    return np.unique(np.concatenate([[0.0], qs]))


def alpha_grid(alpha_max: float = 1.0, n: int = 20, floor: float = 1e-6) -> np.ndarray:
    """Geometric grid on ``[floor, alpha_max]``; ``alpha_max = 1`` means the open range ``[floor, 1)``."""
    top = min(alpha_max, 1.0 - 1e-9)
    if top <= floor:
        return np.array([top])
    return np.geomspace(floor, top, n)


def sequential_labels(s, beta, h: float, boundary_correction: bool = True) -> np.ndarray:
    if not boundary_correction:
        return (np.asarray(s) > h).astype(np.int8)
    return refine_boundaries(alarm_runs(s, h), s, beta)[1]


def best_f1_sweep(
    losses,
    table: CalibrationTable,
    labels,
    alpha_values: Sequence[float],
    delta: int = 5,
    epsilon: float = 1e-8,
    boundary_correction: bool = True,
    h_values: Optional[Sequence[float]] = None,
    keep_grid: bool = True,
) -> SweepResult:
    """Best point-wise F1 over an (alpha, h) grid of the sequential detector.

    For each alpha the h grid is the 256-quantile set of that alpha's score
    series plus 0, unless ``h_values`` is given. Ties keep the smaller alpha,
    then the smaller h.
    """
    labels = np.asarray(labels).astype(np.int8)
    p = p_value(table, np.asarray(losses, dtype=np.float64))
    best = SweepResult(-1.0, None, 0.0)
    for alpha in sorted(float(a) for a in alpha_values):
        beta = evidence(p, DetectorConfig(alpha=alpha, h=0.0, delta=delta, epsilon=epsilon))
        s = accumulate(beta, delta)
        hs = h_grid(s) if h_values is None else np.sort(np.asarray(h_values, dtype=np.float64))
        for h in hs:
            pred = sequential_labels(s, beta, h, boundary_correction)
            pr, rc, f = f1(pred, labels)
            if keep_grid:
                best.grid.append((alpha, float(h), pr, rc, f))
            if f > best.best_f1:
                best.best_f1, best.best_alpha, best.best_h = f, alpha, float(h)
                best.best_precision, best.best_recall = pr, rc
                best.best_labels = pred
    best.best_f1 = max(best.best_f1, 0.0)
    return best


def point_based_sweep(losses, labels, n_quantiles: int = N_QUANTILES) -> SweepResult:
    """Best F1 when each step is flagged by ``loss > h`` alone."""
    g = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int8)
    best = SweepResult(-1.0, None, 0.0)
    for h in h_grid(g, n_quantiles):
        pred = (g > h).astype(np.int8)
        pr, rc, f = f1(pred, labels)
        best.grid.append((None, float(h), pr, rc, f))
        if f > best.best_f1:
            best.best_f1, best.best_h, best.best_precision, best.best_recall = f, float(h), pr, rc
            best.best_labels = pred
    best.best_f1 = max(best.best_f1, 0.0)
    return best


def pr_auc(scores, labels) -> float:
    """Area under the precision-recall curve (trapezoidal).

    Thresholds sweep the unique scores from high to low; the curve starts
    at recall 0 with the precision of the first threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetric("PR-AUC is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    hits = labels[order].astype(np.float64)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    # keep the last index of each run of equal scores
    last = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[precision[0]], precision])
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))


def nn_sep(normal, anomalous) -> float:
    """Mean anomaly-to-normal over mean normal-to-normal nearest-neighbour distance."""
    normal = np.asarray(normal, dtype=np.float64)
    anomalous = np.asarray(anomalous, dtype=np.float64)
    if normal.ndim == 1:
        normal = normal[:, None]
    if anomalous.ndim == 1:
        anomalous = anomalous[:, None]
    if normal.shape[0] < 2 or anomalous.shape[0] < 1:
        raise InsufficientDataError("need >= 2 normal points and >= 1 anomalous point")
    tree = cKDTree(normal)
    d_nn = tree.query(normal, k=2)[0][:, 1]
    d_an = tree.query(anomalous, k=1)[0]
    denom = float(d_nn.mean())
    if denom == 0.0:
        raise UndefinedMetric("normal-to-normal nearest-neighbour distance is zero")
    return float(d_an.mean()) / denom


def spurious_correlation(true_values, reconstructed_values):
    """Per-channel mean |corr - corr_hat| and its average over channels.

    Correlations of constant channels (NaN) are taken as 0.
    """
    true_values = np.asarray(true_values, dtype=np.float64)
    reconstructed_values = np.asarray(reconstructed_values, dtype=np.float64)
    if true_values.shape != reconstructed_values.shape:
        raise ValueError("true and reconstructed values must have the same shape")
    phi = np.nan_to_num(pearson_correlation_matrix(true_values), nan=0.0)
    phi_hat = np.nan_to_num(pearson_correlation_matrix(reconstructed_values), nan=0.0)
    per_channel = np.abs(phi - phi_hat).mean(axis=1)
    return per_channel, float(per_channel.mean())


def label_segments(labels) -> np.ndarray:
    return alarm_runs(np.asarray(labels), 0.5)


def add_fap_curve(s, labels, h_values) -> np.ndarray:
    """Rows of (h, average detection delay, average false-alarm period).

    Delay is measured from each true segment's start to its first alarm
    (``s > h``) inside the segment; missed segments count their full length.
    The false-alarm period is the number of normal steps per alarm onset on
    a normal step (``inf`` when there are none).
    """
    s = np.asarray(s, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    segs = label_segments(labels)
    if segs.shape[0] == 0:
        raise ValueError("labels contain no anomaly segment")
    n_normal = int(np.count_nonzero(~labels))
    rows = []
    for h in h_values:
        alarm = s > h
        delays = []
        for a, b in segs:
            hit = np.flatnonzero(alarm[a : b + 1])
            delays.append(hit[0] if hit.size else b - a + 1)
        onset = alarm & ~np.r_[False, alarm[:-1]]
        n_false = int(np.count_nonzero(onset & ~labels))
        fap = n_normal / n_false if n_false else float("inf")
        rows.append((float(h), float(np.mean(delays)), fap))
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def aggregate_entities(results, protocol: int) -> dict:
    """Combine per-entity predictions.

    ``results`` is a sequence of mappings with ``pred`` and ``labels``.
    Protocol 2 averages entity-wise F1; protocols 1 and 3 score the
    concatenated predictions once.
    """
    results = list(results)
    if not results:
        raise ValueError("no entity results to aggregate")
    if protocol not in (1, 2, 3):
        raise ValueError("protocol must be 1, 2 or 3")
    per_entity = [f1(r["pred"], r["labels"]) for r in results]
    if protocol == 2:
        pr = float(np.mean([x[0] for x in per_entity]))
        rc = float(np.mean([x[1] for x in per_entity]))
        f = float(np.mean([x[2] for x in per_entity]))
    else:
        pred = np.concatenate([np.asarray(r["pred"]) for r in results])
        true = np.concatenate([np.asarray(r["labels"]) for r in results])
        pr, rc, f = f1(pred, true)
    return {
        "protocol": protocol,
        "precision": pr,
        "recall": rc,
        "f1": f,
        "n_entities": len(results),
        "per_entity_f1": [x[2] for x in per_entity],
    }
