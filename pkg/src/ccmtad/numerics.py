"""Dense linear algebra, clustering primitives and statistical helpers.

Everything here is a pure function of its inputs and works in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateFitError, InsufficientDataError

GELU_COEF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715

_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 100
_SIGN_EPS = 1e-12


@dataclass(frozen=True)
class EigenResult:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # column i pairs with eigenvalue i


@dataclass(frozen=True)
class Gmm1d:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: float
    history: tuple = field(default=(), repr=False)  # mean log-likelihood per EM iteration

    @property
    def stds(self) -> np.ndarray:
        return np.sqrt(self.variances)


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    history: tuple = field(default=(), repr=False)  # inertia after each assignment step


def pearson_correlation_matrix(series) -> np.ndarray:
    """Pearson correlation between the columns of an ``N x C`` array.

    Rows and columns that belong to a constant channel are NaN (including
    the diagonal entry); everything else lies in ``[-1, 1]``.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2:
        raise ContractViolation(f"expected a 2-D array, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InsufficientDataError("correlation needs at least two observations")
    centered = x - x.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", centered, centered))
    constant = np.ptp(x, axis=0) == 0
    norms[constant] = np.nan
    with np.errstate(invalid="ignore", divide="ignore"):
        z = centered / norms
        corr = z.T @ z
    np.clip(corr, -1.0, 1.0, out=corr)
    active = ~constant
    corr[active, active] = 1.0
    return corr


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    out = vectors.copy()
    for i in range(out.shape[1]):
        col = out[:, i]
        nz = np.flatnonzero(np.abs(col) > _SIGN_EPS)
        if nz.size and col[nz[0]] < 0:
            out[:, i] = -col
    return out


def symmetric_eig(m, tol: float = _JACOBI_TOL) -> EigenResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Converges when the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||m||_F)``. Eigenvalues come back ascending, eigenvectors
    unit-norm with their first non-negligible component positive.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {a.shape}")
    if a.size and np.max(np.abs(a - a.T)) > 1e-9:
        raise ContractViolation("matrix is not symmetric within 1e-9")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    threshold = tol * max(1.0, float(np.linalg.norm(a)))

    for _ in range(_JACOBI_MAX_SWEEPS):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off < threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    return EigenResult(values[order], _sign_fix(v[:, order]))


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    return np.maximum(d, 0.0)


def _kmeans_pp(points, k, rng):
    """Greedy k-means++ seeding.

    Each new center is the best of ``2 + floor(ln k)`` D^2-sampled candidates,
    judged by the resulting potential (sum of squared distances to the
    nearest center).
    """
    n = points.shape[0]
    n_trials = 2 + int(math.log(k)) if k > 1 else 1
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            cand = rng.integers(n, size=n_trials)
        else:
            cand = np.searchsorted(np.cumsum(closest), rng.random(n_trials) * total, side="right")
            cand = np.minimum(cand, n - 1)
        cand_d = np.minimum(closest[None, :], _sq_dists(points, points[cand]).T)
        best = int(np.argmin(cand_d.sum(axis=1)))
        centers[i] = points[cand[best]]
        closest = cand_d[best]
    return centers


def _lloyd(points, centers, max_iter):
    k = centers.shape[0]
    labels = None
    history = []
    for _ in range(max_iter):
        d = _sq_dists(points, centers)
        new_labels = np.argmin(d, axis=1)
        inertia = float(d[np.arange(points.shape[0]), new_labels].sum())
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                centers[j] = points[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # each empty cluster takes the point farthest from its own center
            own = d[np.arange(points.shape[0]), labels].copy()
            for j in empty:
                far = int(np.argmax(own))
                centers[j] = points[far]
                own[far] = -1.0
    d = _sq_dists(points, centers)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(points.shape[0]), labels].sum())
    return labels, centers, inertia, history


def kmeans_fit(points, k: int, seed: int, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """K-Means with k-means++ seeding; best of ``n_init`` restarts by inertia.

    Ties in inertia keep the earliest restart. Labels are 0-based and every
    cluster is non-empty.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _kmeans_pp(x, k, rng)
        labels, centers, inertia, history = _lloyd(x, centers, max_iter)
        if np.unique(labels).size < k:
            labels = _force_nonempty(x, labels, k)
            centers = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
            inertia = float(_sq_dists(x, centers)[np.arange(n), labels].sum())
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, centers, inertia, tuple(history))
    return best


def _force_nonempty(x, labels, k):
    # only reachable with duplicated points; hand unused labels to the
    # points farthest from their cluster mean
    labels = labels.copy()
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        movable = np.flatnonzero(counts[labels] > 1)
        means = np.stack([x[labels == i].mean(axis=0) if counts[i] else x[0] for i in range(k)])
        dist = np.sum((x[movable] - means[labels[movable]]) ** 2, axis=1)
        labels[movable[int(np.argmax(dist))]] = j
    return labels


def kmeans(points, k: int, seed: int) -> np.ndarray:
    return kmeans_fit(points, k, seed).labels


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points in singleton clusters contribute 0.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise DegenerateFitError("silhouette is undefined for a single cluster")
    dist = np.sqrt(_sq_dists(x, x))
    np.fill_diagonal(dist, 0.0)
    counts = np.bincount(inv)
    # sums[i, c] = total distance from point i to cluster c
    onehot = np.zeros((x.shape[0], uniq.size))
    onehot[np.arange(x.shape[0]), inv] = 1.0
    sums = dist @ onehot
    own = counts[inv]
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        if own[i] == 1:
            continue
        a = sums[i, inv[i]] / (own[i] - 1)
        others = np.delete(sums[i] / counts, inv[i])
        b = others.min()
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def _gmm_loglik(x, weights, means, variances):
    log_comp = (
        np.log(weights)[None, :]
        - 0.5 * np.log(2.0 * np.pi * variances)[None, :]
        - 0.5 * (x[:, None] - means[None, :]) ** 2 / variances[None, :]
    )
    peak = log_comp.max(axis=1, keepdims=True)
    log_norm = peak[:, 0] + np.log(np.exp(log_comp - peak).sum(axis=1))
    return log_comp, log_norm


def gmm_fit_1d(samples, k: int, seed: int, tol: float = 1e-8, max_iter: int = 500) -> Gmm1d:
    """Fit a 1-D Gaussian mixture by EM, initialised from seeded K-Means.

    Stops when the mean log-likelihood improves by less than ``tol`` or
    after ``max_iter`` iterations.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.size < 10 * k:
        raise InsufficientDataError(f"need at least {10 * k} samples for k={k}")
    total_var = float(x.var())
    if total_var == 0.0:
        raise DegenerateFitError("all samples are equal")
    var_floor = 1e-10 * total_var

    labels = kmeans(x[:, None], k, seed) if k > 1 else np.zeros(x.size, dtype=int)
    resp = np.zeros((x.size, k))
    resp[np.arange(x.size), labels] = 1.0

    history = []
    weights = means = variances = None
    prev = -np.inf
    for _ in range(max_iter):
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / x.size
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, var_floor)
        log_comp, log_norm = _gmm_loglik(x, weights, means, variances)
        ll = float(log_norm.mean())
        history.append(ll)
        resp = np.exp(log_comp - log_norm[:, None])
        if ll - prev < tol:
            break
        prev = ll
    weights = weights / weights.sum()
    return Gmm1d(weights, means, variances, history[-1] * x.size, tuple(history))


def gelu(x) -> np.ndarray:
    """Tanh-approximation GELU: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    return gelu_tanh(x)[0]


def gelu_tanh(x):
    """GELU together with its inner tanh, which the derivative reuses."""
    x = np.asarray(x, dtype=np.float64)
    t = np.tanh(x * (GELU_COEF + (GELU_COEF * GELU_CUBIC) * (x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x, t=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    if t is None:
        t = np.tanh(x * (GELU_COEF + (GELU_COEF * GELU_CUBIC) * x2))
    return 0.5 * (1.0 + t) + (0.5 * GELU_COEF) * x * (1.0 - t * t) * (1.0 + 3.0 * GELU_CUBIC * x2)
