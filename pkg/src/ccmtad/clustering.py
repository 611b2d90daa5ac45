"""Channel clustering from absolute-correlation profiles.

The default strategy groups channels whose correlation profiles (rows of
``|corr|``) point in similar directions: a cosine-similarity graph over the
profiles is embedded with the normalized Laplacian and the embedding is
clustered with K-Means. Channels with an all-zero profile (constant
channels) form the last cluster on their own.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics
from .errors import ContractViolation

STRATEGIES = ("profile-spectral", "channel-similarity-spectral", "abs-corr-spectral", "kmeans-profiles")
DEGREE_FLOOR = 1e-12


@dataclass(frozen=True)
class CorrelationProfiles:
    phi_abs: np.ndarray  # C x C, NaN replaced by 0
    zero_profile: np.ndarray  # indices f_d
    active: np.ndarray  # indices f_c


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray  # length C, 0-based cluster index
    n_clusters: int
    strategy: str = "profile-spectral"
    silhouette: Optional[float] = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "labels", labels)
        used = np.unique(labels)
        if not np.array_equal(used, np.arange(self.n_clusters)):
            raise ContractViolation(f"cluster labels {used.tolist()} do not cover 0..{self.n_clusters - 1}")

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "M": int(self.n_clusters),
            "labels": [int(k) for k in self.labels],
            "silhouette": self.silhouette,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterAssignment":
        return cls(np.array(d["labels"], dtype=int), int(d["M"]), d.get("strategy", "profile-spectral"), d.get("silhouette"))


def compute_profiles(train_values) -> CorrelationProfiles:
    phi = numerics.pearson_correlation_matrix(train_values)
    phi_abs = np.abs(np.nan_to_num(phi, nan=0.0))
    zero = np.flatnonzero(~phi_abs.any(axis=1))
    active = np.flatnonzero(phi_abs.any(axis=1))
    return CorrelationProfiles(phi_abs, zero, active)


def profile_similarity_graph(profile_rows) -> np.ndarray:
    """Cosine similarity between profile rows, zero diagonal."""
    rows = np.asarray(profile_rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise ContractViolation("zero-norm profile row; such channels belong to the zero-profile group")
    unit = rows / norms[:, None]
    w = unit @ unit.T
    np.fill_diagonal(w, 0.0)
    return np.clip(w, 0.0, 1.0)


def _inv_sqrt_degree(w):
    return 1.0 / np.sqrt(np.maximum(w.sum(axis=1), DEGREE_FLOOR))


def normalized_laplacian(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    s = _inv_sqrt_degree(w)
    lap = np.eye(w.shape[0]) - s[:, None] * w * s[None, :]
    return 0.5 * (lap + lap.T)


def spectral_embed_and_cluster(w, n_clusters: int, seed: int) -> np.ndarray:
    """Eigenvectors 2..k+1 of the normalized Laplacian, rescaled by D^-1/2, then K-Means.

    Exactly one eigenvector (the smallest) is skipped, even when the graph
    has several zero eigenvalues.
    """
    n = w.shape[0]
    if n_clusters == 1:
        return np.zeros(n, dtype=int)
    n_vec = min(n_clusters, n - 1)
    eig = numerics.symmetric_eig(normalized_laplacian(w))
    v = eig.eigenvectors[:, 1 : 1 + n_vec]
    u = _inv_sqrt_degree(w)[:, None] * v
    return numerics.kmeans(u, n_clusters, seed)


def _relabel(labels: np.ndarray) -> np.ndarray:
    # canonical numbering: clusters ordered by first member channel
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    mapping = np.empty(order.size, dtype=int)
    mapping[order] = np.arange(order.size)
    uniq = np.unique(labels)
    return mapping[np.searchsorted(uniq, labels)]


def spectral_cluster(profiles: CorrelationProfiles, n_clusters: int, seed: int = 0) -> ClusterAssignment:
    c = profiles.phi_abs.shape[0]
    if not 1 <= n_clusters <= c:
        raise ValueError(f"M must lie in [1, {c}], got {n_clusters}")
    if n_clusters == 1:
        return ClusterAssignment(np.zeros(c, dtype=int), 1, "profile-spectral")
    active, zero = profiles.active, profiles.zero_profile
    n_active_clusters = n_clusters - 1 if zero.size else n_clusters
    if zero.size and n_clusters < 2:
        raise ValueError("zero-profile channels need M >= 2")
    if n_active_clusters > active.size:
        raise ValueError(f"{n_active_clusters} clusters requested for {active.size} active channels")
    labels = np.full(c, n_clusters - 1, dtype=int)
    if n_active_clusters >= 1 and active.size:
        sub = profiles.phi_abs[np.ix_(active, active)]
        w = profile_similarity_graph(sub)
        labels[active] = _relabel(spectral_embed_and_cluster(w, n_active_clusters, seed))
    return ClusterAssignment(labels, n_clusters, "profile-spectral")


def channel_similarity_graph(train_values) -> np.ndarray:
    """max(0, cosine similarity) between raw channel series, zero diagonal."""
    x = np.asarray(train_values, dtype=np.float64)
    norms = np.linalg.norm(x, axis=0)
    safe = np.where(norms == 0, 1.0, norms)
    unit = x / safe
    w = np.maximum(unit.T @ unit, 0.0)
    w[:, norms == 0] = 0.0
    w[norms == 0, :] = 0.0
    np.fill_diagonal(w, 0.0)
    return np.minimum(w, 1.0)


def abs_corr_graph(profiles: CorrelationProfiles) -> np.ndarray:
    w = profiles.phi_abs.copy()
    np.fill_diagonal(w, 0.0)
    return w


def cluster_variants(
    strategy: str,
    n_clusters: int,
    seed: int = 0,
    profiles: Optional[CorrelationProfiles] = None,
    train_values=None,
) -> ClusterAssignment:
    """Dispatch to one of the clustering strategies.

    ``channel-similarity-spectral`` needs ``train_values``; every other
    strategy works from ``profiles`` (computed from ``train_values`` when
    omitted).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown clustering strategy {strategy!r}; choose from {STRATEGIES}")
    if profiles is None:
        if train_values is None:
            raise ValueError("need profiles or train_values")
        profiles = compute_profiles(train_values)
    if strategy == "profile-spectral":
        return spectral_cluster(profiles, n_clusters, seed)
    c = profiles.phi_abs.shape[0]
    if not 1 <= n_clusters <= c:
        raise ValueError(f"M must lie in [1, {c}], got {n_clusters}")
    if strategy == "kmeans-profiles":
        labels = numerics.kmeans(profiles.phi_abs, n_clusters, seed)
    elif strategy == "abs-corr-spectral":
        labels = spectral_embed_and_cluster(abs_corr_graph(profiles), n_clusters, seed)
    else:
        if train_values is None:
            raise ValueError("channel-similarity-spectral needs the raw training values")
        labels = spectral_embed_and_cluster(channel_similarity_graph(train_values), n_clusters, seed)
    return ClusterAssignment(_relabel(labels), n_clusters, strategy)


@dataclass(frozen=True)
class ClusterCountCandidate:
    n_clusters: int
    silhouette: float
    has_singleton: bool
    assignment: ClusterAssignment


def select_cluster_count(profiles: CorrelationProfiles, m_range: Sequence[int], seed: int = 0):
    """Score each candidate M by the silhouette of its assignment on the profile rows.

    Returns ``(recommended_M, candidates)``. Candidates that leave any
    cluster with a single channel are kept in the report but flagged and
    skipped for the recommendation unless every candidate is flagged.
    Ties go to the smallest M.
    """
    m_values = sorted(set(int(m) for m in m_range))
    if not m_values:
        raise ValueError("empty range of cluster counts")
    candidates = []
    for m in m_values:
        assignment = spectral_cluster(profiles, m, seed)
        if m == 1:
            score = float("nan")
        else:
            score = numerics.silhouette(profiles.phi_abs, assignment.labels)
        assignment = ClusterAssignment(assignment.labels, m, assignment.strategy, score)
        has_singleton = bool(np.any(assignment.sizes == 1))
        candidates.append(ClusterCountCandidate(m, score, has_singleton, assignment))
    pool = [c for c in candidates if not c.has_singleton and not np.isnan(c.silhouette)]
    if not pool:
        pool = [c for c in candidates if not np.isnan(c.silhouette)] or candidates
    best = pool[0]
    for cand in pool[1:]:
        if cand.silhouette > best.silhouette:
            best = cand
    return best.n_clusters, candidates
