"""Adam training loop, series scoring and input-gradient diagnostics."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..data import windows as make_windows
from ..errors import InsufficientDataError, TrainingDiverged
from .network import CausalMixerNet, ModelConfig, loss_mse, loss_mse_grad

log = logging.getLogger(__name__)

# windows are always scored in chunks of this exact size (the tail chunk is
# padded) so BLAS sees identical shapes and scores are bit-reproducible
SCORE_CHUNK = 256


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "train_loss": list(self.train_loss),
            "val_loss": list(self.val_loss),
            "initial_val_loss": self.initial_val_loss,
            "wall_time": self.wall_time,
        }


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _as_windows(data, L):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        return make_windows(data, L)
    return data


def evaluate_loss(net: CausalMixerNet, windows) -> float:
    """Eval-mode last-step MSE over a set of windows."""
    g = window_losses(net, windows)
    return float(g.mean()) if g.size else float("nan")


def fit(net: CausalMixerNet, train, val=None, config: ModelConfig = None) -> TrainReport:
    """Train ``net`` in place with Adam on shuffled mini-batches.

    ``train`` and ``val`` are either ``T x C`` series (windowed with stride
    1) or pre-built ``[N, L, C]`` window arrays.
    """
    cfg = config or net.config
    report = TrainReport()
    start = time.perf_counter()
    train_w = _as_windows(train, cfg.L)
    val_w = None if val is None else _as_windows(val, cfg.L)
    if val_w is not None:
        report.initial_val_loss = evaluate_loss(net, val_w)
    if cfg.epochs == 0:
        report.wall_time = time.perf_counter() - start
        return report

    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(net.params, cfg.learning_rate)
    n = train_w.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = train_w[order[lo : lo + cfg.batch_size]]
            out, cache = net.forward(batch, train=True)
            loss = loss_mse(out, batch)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, bi)
            grads, _ = net.backward(loss_mse_grad(out, batch), cache)
            opt.step(net.params, grads)
            net.remask()
            total += loss * batch.shape[0]
        report.train_loss.append(total / n)
        if val_w is not None:
            report.val_loss.append(evaluate_loss(net, val_w))
        log.info(
            "epoch %d/%d train %.6g val %s", epoch + 1, cfg.epochs, report.train_loss[-1],
            f"{report.val_loss[-1]:.6g}" if report.val_loss else "-",
        )
    report.wall_time = time.perf_counter() - start
    return report


def reconstruct_windows(net: CausalMixerNet, windows) -> np.ndarray:
    """Eval-mode last-step reconstructions ``[N, C]`` in fixed-size padded chunks."""
    n = windows.shape[0]
    out = np.empty((n, net.n_channels))
    for lo in range(0, n, SCORE_CHUNK):
        chunk = windows[lo : lo + SCORE_CHUNK]
        m = chunk.shape[0]
        if m < SCORE_CHUNK:
            pad = np.repeat(chunk[-1:], SCORE_CHUNK - m, axis=0)
            chunk = np.concatenate([chunk, pad], axis=0)
        rec, _ = net.forward(chunk, train=False)
        out[lo : lo + m] = rec[:m, -1, :]
    return out


def window_losses(net: CausalMixerNet, windows) -> np.ndarray:
    rec = reconstruct_windows(net, windows)
    diff = rec - windows[:, -1, :]
    return np.mean(diff * diff, axis=1)


def reconstruct_series(net: CausalMixerNet, values) -> np.ndarray:
    """Per-step losses ``g_t`` for ``t = L-1 .. T-1`` (stride-1 windows, eval mode)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < net.config.L:
        raise InsufficientDataError(f"need at least {net.config.L} steps, got {values.shape[0]}")
    return window_losses(net, make_windows(values, net.config.L))


def input_gradient_map(net: CausalMixerNet, window, t_eval: int, c_eval: int) -> np.ndarray:
    """``|d loss / d x|`` over the ``L x C`` input window, eval mode.

    The loss is the squared reconstruction error of channel ``c_eval`` at
    window position ``t_eval``; it depends on the inputs both through the
    network and through the target value itself.
    """
    window = np.asarray(window, dtype=np.float64)
    L, C = net.config.L, net.n_channels
    if window.shape != (L, C):
        raise ValueError(f"window must have shape ({L}, {C}), got {window.shape}")
    if not (0 <= t_eval < L and 0 <= c_eval < C):
        raise ValueError(f"(t, c) = ({t_eval}, {c_eval}) outside the {L} x {C} window")
    x = window[None]
    out, cache = net.forward(x, train=False)
    err = out[0, t_eval, c_eval] - x[0, t_eval, c_eval]
    dout = np.zeros_like(out)
    dout[0, t_eval, c_eval] = 2.0 * err
    _, dx = net.backward(dout, cache)
    dx[0, t_eval, c_eval] -= 2.0 * err
    return np.abs(dx[0])
