"""Building blocks with hand-written backward passes."""

from __future__ import annotations

import numpy as np

TEMPORAL_MIXERS = ("causal", "unit", "dense")


def causal_mask(length: int, kind: str = "causal") -> np.ndarray:
    """Temporal weight mask Gamma.

    ``causal``: upper triangular with every entry of column j equal to 1/j
    (1-based). ``unit``: upper triangular ones. ``dense``: all ones, i.e. an
    ordinary non-causal linear layer.
    """
    if kind == "dense":
        return np.ones((length, length))
    upper = np.triu(np.ones((length, length)))
    if kind == "unit":
        return upper
    if kind == "causal":
        return upper / np.arange(1, length + 1)[None, :]
    raise ValueError(f"unknown temporal mixer {kind!r}; choose from {TEMPORAL_MIXERS}")


def causal_linear_forward(x, theta, gamma, bias):
    """``x (Gamma * theta) + bias`` along the last axis.

    Output position j only sees input positions i <= j when gamma is upper
    triangular.
    """
    return np.asarray(x, dtype=np.float64) @ (gamma * theta) + bias


class BatchNorm:
    """Per-feature normalization over every leading axis (batch x time)."""

    def __init__(self, name: str, eps: float = 1e-5, momentum: float = 0.1):
        self.name = name
        self.eps = eps
        self.momentum = momentum

    def forward(self, x, params, state, train: bool, update_running: bool = True):
        gamma = params[f"{self.name}.gamma"]
        beta = params[f"{self.name}.beta"]
        flat = x.reshape(-1, x.shape[-1])
        if train:
            mu = flat.mean(axis=0)
            var = flat.var(axis=0)
            if update_running:
                n = flat.shape[0]
                m = self.momentum
                unbiased = var * n / max(n - 1, 1)
                state[f"{self.name}.running_mean"] = (1 - m) * state[f"{self.name}.running_mean"] + m * mu
                state[f"{self.name}.running_var"] = (1 - m) * state[f"{self.name}.running_var"] + m * unbiased
        else:
            mu = state[f"{self.name}.running_mean"]
            var = state[f"{self.name}.running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return gamma * xhat + beta, (xhat, inv, gamma, train)

    @staticmethod
    def backward(dy, cache):
        xhat, inv, gamma, train = cache
        d = dy.shape[-1]
        dy2 = dy.reshape(-1, d)
        xh2 = xhat.reshape(-1, d)
        dgamma = np.einsum("ij,ij->j", dy2, xh2)
        dbeta = dy2.sum(axis=0)
        dxhat = dy2 * gamma
        if train:
            n = dy2.shape[0]
            dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xh2 * np.einsum("ij,ij->j", dxhat, xh2))
        else:
            dx = dxhat * inv
        return dx.reshape(dy.shape), dgamma, dbeta

