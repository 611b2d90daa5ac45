"""Sequential anomaly scoring on top of per-step reconstruction losses.

Each test loss becomes an empirical p-value against the sorted validation
losses, then log-evidence ``beta = log(alpha / (p + eps))``. Evidence is
accumulated CUSUM-style with a reset after ``delta`` consecutive negative
evidences; an alarm is raised while the accumulated score exceeds ``h``.
Alarm segments are widened back to the last zero of the score and trimmed
to the last positive evidence.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, DegenerateConfig, DegenerateFitError, HeuristicUnavailable, InsufficientDataError
from .numerics import gmm_fit_1d


@dataclass(frozen=True)
class CalibrationTable:
    sorted_losses: np.ndarray

    @property
    def size(self) -> int:
        return self.sorted_losses.size


@dataclass(frozen=True)
class DetectorConfig:
    alpha: float = 0.01
    h: float = 5.0
    delta: int = 5
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.h < 0:
            raise ValueError("h must be >= 0")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


@dataclass
class ScoreState:
    s: float = 0.0
    t: int = 0
    recent_negative: deque = field(default_factory=deque)


@dataclass(frozen=True)
class DetectionSegment:
    t_a: int
    t_b: int
    t_a_star: int
    t_b_star: int
    peak_s: float

    def to_dict(self) -> dict:
        return {
            "t_a": self.t_a,
            "t_b": self.t_b,
            "t_a_star": self.t_a_star,
            "t_b_star": self.t_b_star,
            "peak_s": self.peak_s,
        }


def calibrate(val_losses) -> CalibrationTable:
    losses = np.asarray(val_losses, dtype=np.float64).ravel()
    if losses.size == 0:
        raise CalibrationError("calibration needs at least one validation loss")
    return CalibrationTable(np.sort(losses, kind="stable"))


def p_value(table: CalibrationTable, g):
    """Fraction of calibration losses >= g. Works on scalars and arrays."""
    g_arr = np.asarray(g, dtype=np.float64)
    at_least = table.size - np.searchsorted(table.sorted_losses, g_arr, side="left")
    p = at_least / table.size
    return float(p) if g_arr.ndim == 0 else p


def evidence(p, config: DetectorConfig):
    if config.alpha == 0:
        raise DegenerateConfig("alpha = 0 makes every evidence -inf")
    p_arr = np.asarray(p, dtype=np.float64)
    beta = np.log(config.alpha / (p_arr + config.epsilon))
    return float(beta) if p_arr.ndim == 0 else beta


def accumulate_step(state: ScoreState, beta: float, config: DetectorConfig) -> float:
    """Advance the accumulator by one evidence value; returns the new score.

    The score is forced to 0 when the previous ``delta`` evidences were all
    negative, whatever the current evidence. With fewer than ``delta`` past
    evidences the reset never fires.
    """
    hist = state.recent_negative
    if len(hist) == config.delta and all(hist):
        state.s = 0.0
    else:
        state.s = max(state.s + beta, 0.0)
    hist.append(beta < 0)
    if len(hist) > config.delta:
        hist.popleft()
    state.t += 1
    return state.s


def accumulate(betas, delta: int) -> np.ndarray:
    """Score series for a whole evidence series (same recursion as accumulate_step)."""
    betas = np.asarray(betas, dtype=np.float64)
    out = np.empty(betas.size)
    s = 0.0
    neg_run = 0  # consecutive negative evidences ending at the previous step
    for i, b in enumerate(betas.tolist()):
        if neg_run >= delta:
            s = 0.0
        else:
            s = s + b
            if s < 0.0:
                s = 0.0
        out[i] = s
        neg_run = neg_run + 1 if b < 0 else 0
    return out


def alarm_runs(s, h: float) -> np.ndarray:
    """Maximal runs of ``s > h`` as an ``[k, 2]`` array of inclusive (start, end)."""
    above = np.asarray(s) > h
    if not above.any():
        return np.zeros((0, 2), dtype=int)
    edges = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return np.stack([starts, ends], axis=1)


@dataclass(frozen=True)
class StreamResult:
    g: np.ndarray
    p: np.ndarray
    beta: np.ndarray
    s: np.ndarray
    raw_segments: np.ndarray  # [k, 2]


def detect_stream(losses, table: CalibrationTable, config: DetectorConfig) -> StreamResult:
    g = np.asarray(losses, dtype=np.float64)
    p = p_value(table, g)
    beta = evidence(p, config)
    s = accumulate(beta, config.delta)
    return StreamResult(g, np.atleast_1d(p), np.atleast_1d(beta), s, alarm_runs(s, config.h))


def _last_index_where(mask: np.ndarray) -> np.ndarray:
    # out[t] = largest i <= t with mask[i], or -1
    idx = np.where(mask, np.arange(mask.size), -1)
    return np.maximum.accumulate(idx) if idx.size else idx


def refine_boundaries(segments, s, beta):
    """Widen/trim raw alarm segments and produce final 0/1 labels.

    Onset moves back to the latest index ``<= t_a`` where the score is 0
    (the stream start if none); offset moves to the latest index in
    ``[t_a, t_b]`` with positive evidence (``t_b`` if none). Overlapping
    refined segments are merged. Labels are 1 exactly on the union of
    refined segments.
    """
    s = np.asarray(s, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    segments = np.asarray(segments, dtype=int).reshape(-1, 2)
    labels = np.zeros(s.size, dtype=np.int8)
    if segments.shape[0] == 0:
        return [], labels
    last_zero = _last_index_where(s == 0.0)
    last_pos = _last_index_where(beta > 0.0)
    ta, tb = segments[:, 0], segments[:, 1]
    ta_star = np.maximum(last_zero[ta], 0)
    tb_cand = last_pos[tb]
    tb_star = np.where(tb_cand >= ta, tb_cand, tb)
    cover = np.zeros(s.size + 1, dtype=np.int64)
    np.add.at(cover, ta_star, 1)
    np.add.at(cover, tb_star + 1, -1)
    labels[np.cumsum(cover[:-1]) > 0] = 1
    peaks = [float(s[a : b + 1].max()) for a, b in segments]
    out = [
        DetectionSegment(int(a), int(b), int(a_s), int(b_s), pk)
        for a, b, a_s, b_s, pk in zip(ta, tb, ta_star, tb_star, peaks)
    ]
    return merge_segments(out), labels


def merge_segments(segments):
    """Merge refined segments whose ``[t_a*, t_b*]`` ranges overlap or touch."""
    merged = []
    for seg in sorted(segments, key=lambda x: x.t_a_star):
        if merged and seg.t_a_star <= merged[-1].t_b_star + 1:
            prev = merged[-1]
            merged[-1] = DetectionSegment(
                prev.t_a, max(prev.t_b, seg.t_b), prev.t_a_star,
                max(prev.t_b_star, seg.t_b_star), max(prev.peak_s, seg.peak_s),
            )
        else:
            merged.append(seg)
    return merged


def predict_labels(losses, table: CalibrationTable, config: DetectorConfig) -> np.ndarray:
    res = detect_stream(losses, table, config)
    return refine_boundaries(res.raw_segments, res.s, res.beta)[1]


def finalized_prefix(s) -> int:
    """Number of leading labels that no future input can change.

    Any later alarm segment starts its refined onset at or after the last
    zero of the score, so labels strictly before that index are final.
    """
    zeros = np.flatnonzero(np.asarray(s) == 0.0)
    return int(zeros[-1]) if zeros.size else 0


def alpha_max_heuristic(val_losses, k_components: int = 2, seed: int = 0) -> float:
    """Upper end of the alpha search range from a 1-D GMM of validation losses.

    Takes the component whose mean is nearest zero, sets a loss threshold
    at its mean plus one standard deviation and returns the fraction of
    validation losses above it.
    """
    losses = np.asarray(val_losses, dtype=np.float64).ravel()
    try:
        gmm = gmm_fit_1d(losses, k_components, seed)
    except (DegenerateFitError, InsufficientDataError) as exc:
        raise HeuristicUnavailable(str(exc)) from exc
    i = int(np.argmin(np.abs(gmm.means)))
    threshold = gmm.means[i] + math.sqrt(gmm.variances[i])
    ecdf = np.count_nonzero(losses <= threshold) / losses.size
    alpha_max = 1.0 - ecdf
    if alpha_max <= 0.0:
        raise HeuristicUnavailable("no validation loss exceeds the component threshold")
    return float(alpha_max)
