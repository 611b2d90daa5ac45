"""The cluster-aware multi-embedding causal-mixer reconstruction network."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..clustering import ClusterAssignment
from ..errors import ContractViolation, InfeasibleAllocation
from ..numerics import gelu_grad, gelu_tanh
from .layers import TEMPORAL_MIXERS, BatchNorm, causal_mask


@dataclass(frozen=True)
class ModelConfig:
    L: int = 24
    d: int = 128
    d_f: int = 1
    n_blocks: int = 2
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 512
    seed: int = 0
    temporal_mixer: str = "causal"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("L must be >= 2")
        if self.d_f < 1 or self.n_blocks < 1 or self.d < 1:
            raise ValueError("d, d_f and n_blocks must be >= 1")
        if self.temporal_mixer not in TEMPORAL_MIXERS:
            raise ValueError(f"temporal_mixer must be one of {TEMPORAL_MIXERS}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def allocate_embedding_dims(cluster_sizes, d: int) -> np.ndarray:
    """Split ``d`` embedding units across clusters in proportion to their sizes.

    Clusters 1..M-1 get ``floor(C_i / C * d)``, the last cluster takes the
    remainder. Any zero is then raised to 1 and paid for by the currently
    largest allocation.
    """
    sizes = np.asarray(cluster_sizes, dtype=int)
    m = sizes.size
    if m == 0 or np.any(sizes < 1):
        raise ValueError("cluster sizes must be >= 1")
    if d < m:
        raise InfeasibleAllocation(f"embedding dim {d} cannot give {m} clusters one unit each")
    total = int(sizes.sum())
    dims = np.array([(int(s) * d) // total for s in sizes[:-1]] + [0], dtype=int)
    dims[-1] = d - dims[:-1].sum()
    while np.any(dims < 1):
        i = int(np.flatnonzero(dims < 1)[0])
        dims[i] += 1
        dims[int(np.argmax(dims))] -= 1
    return dims


class CausalMixerNet:
    """Reconstruction network over ``L x C`` windows.

    Parameters live in ``self.params`` (name -> float64 array) and batch-norm
    running statistics in ``self.state``. Temporal weights are stored raw;
    the mask is applied in every forward pass, and masked entries are also
    kept at exactly zero in storage.
    """

    def __init__(self, n_channels: int, assignment: ClusterAssignment, config: ModelConfig, init: bool = True):
        if assignment.labels.size != n_channels:
            raise ContractViolation("cluster assignment does not match the channel count")
        self.config = config
        self.assignment = assignment
        self.n_channels = n_channels
        self.groups = [assignment.members(k) for k in range(assignment.n_clusters)]
        self.dims = allocate_embedding_dims([g.size for g in self.groups], config.d)
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)])
        self.gamma = causal_mask(config.L, config.temporal_mixer)
        self.masked = self.gamma == 0
        self.bn = {}
        for name in self.bn_names:
            self.bn[name] = BatchNorm(name, config.bn_eps, config.bn_momentum)
        self.params = {}
        self.state = {}
        if init:
            self._init(np.random.default_rng(config.seed))

    # -- structure

    @property
    def bn_names(self):
        names = ["bn0"]
        for b in range(self.config.n_blocks):
            names += [f"block{b}.bn_t", f"block{b}.bn_e"]
        return names + ["bn_out"]

    def param_shapes(self) -> dict:
        cfg = self.config
        L, d, h = cfg.L, cfg.d, cfg.d * cfg.d_f
        shapes = {}
        for k, (g, dk) in enumerate(zip(self.groups, self.dims)):
            shapes[f"embed{k}.weight"] = (g.size, int(dk))
            shapes[f"embed{k}.bias"] = (int(dk),)
        for name in self.bn_names:
            shapes[f"{name}.gamma"] = (d,)
            shapes[f"{name}.beta"] = (d,)
        for b in range(cfg.n_blocks):
            p = f"block{b}"
            shapes[f"{p}.t1.weight"] = (L, L)
            shapes[f"{p}.t1.bias"] = (L,)
            shapes[f"{p}.t2.weight"] = (L, L)
            shapes[f"{p}.t2.bias"] = (L,)
            shapes[f"{p}.e1.weight"] = (d, h)
            shapes[f"{p}.e1.bias"] = (h,)
            shapes[f"{p}.e2.weight"] = (h, d)
            shapes[f"{p}.e2.bias"] = (d,)
        shapes["head.weight"] = (d, self.n_channels)
        shapes["head.bias"] = (self.n_channels,)
        return shapes

    def _init(self, rng):
        shapes = self.param_shapes()
        for name, shape in shapes.items():
            layer, kind = name.rsplit(".", 1)
            if kind == "gamma":
                self.params[name] = np.ones(shape)
            elif kind == "beta":
                self.params[name] = np.zeros(shape)
            else:
                fan_in = shapes[f"{layer}.weight"][0]
                bound = 1.0 / math.sqrt(fan_in)
                self.params[name] = rng.uniform(-bound, bound, size=shape)
        for name in self.bn_names:
            self.state[f"{name}.running_mean"] = np.zeros(self.config.d)
            self.state[f"{name}.running_var"] = np.ones(self.config.d)
        self.remask()

    def temporal_weight_names(self):
        return [f"block{b}.{t}.weight" for b in range(self.config.n_blocks) for t in ("t1", "t2")]

    def remask(self):
        for name in self.temporal_weight_names():
            self.params[name][self.masked] = 0.0

    def effective_temporal_weight(self, name: str) -> np.ndarray:
        return self.gamma * self.params[name]

    # -- forward / backward

    def forward(self, x, train: bool = False, update_running: bool = True):
        """Reconstruct a batch of windows ``[B, L, C]``.

        Returns ``(reconstruction, cache)``. In train mode batch-norm uses
        batch statistics (and updates running statistics unless
        ``update_running`` is False); in eval mode it uses running
        statistics only, so each window is processed independently.
        """
        x = np.asarray(x, dtype=np.float64)
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.L or x.shape[2] != self.n_channels:
            raise ContractViolation(f"expected windows of shape [B, {cfg.L}, {self.n_channels}], got {x.shape}")
        p = self.params
        B, L, d = x.shape[0], cfg.L, cfg.d
        n = B * L

        xd = np.empty((n, d))
        for k, g in enumerate(self.groups):
            lo, hi = self.offsets[k], self.offsets[k + 1]
            xd[:, lo:hi] = x[:, :, g].reshape(n, g.size) @ p[f"embed{k}.weight"] + p[f"embed{k}.bias"]
        z0, c_bn0 = self.bn["bn0"].forward(xd, p, self.state, train, update_running)

        z = z0
        blocks = []
        for b in range(cfg.n_blocks):
            pre = f"block{b}"
            th1 = self.effective_temporal_weight(f"{pre}.t1.weight")
            th2 = self.effective_temporal_weight(f"{pre}.t2.weight")
            # temporal mixer works on [B*d, L]
            xc = z.reshape(B, L, d).transpose(0, 2, 1).reshape(B * d, L)
            h1 = xc @ th1 + p[f"{pre}.t1.bias"]
            a1, t1 = gelu_tanh(h1)
            h2 = a1 @ th2 + p[f"{pre}.t2.bias"]
            r1 = h2.reshape(B, d, L).transpose(0, 2, 1).reshape(n, d) + z
            xe, c_bnt = self.bn[f"{pre}.bn_t"].forward(r1, p, self.state, train, update_running)
            g1 = xe @ p[f"{pre}.e1.weight"] + p[f"{pre}.e1.bias"]
            a2, t2 = gelu_tanh(g1)
            xe2 = a2 @ p[f"{pre}.e2.weight"] + p[f"{pre}.e2.bias"]
            z_next, c_bne = self.bn[f"{pre}.bn_e"].forward(xe2 + xe + z, p, self.state, train, update_running)
            blocks.append((xc, h1, t1, a1, c_bnt, xe, g1, t2, a2, c_bne))
            z = z_next

        xh, c_out = self.bn["bn_out"].forward(z + z0, p, self.state, train, update_running)
        out = xh @ p["head.weight"] + p["head.bias"]
        cache = {"x": x, "c_bn0": c_bn0, "blocks": blocks, "c_out": c_out, "xh": xh, "B": B}
        return out.reshape(B, L, self.n_channels), cache

    def backward(self, dout, cache):
        """Gradients of a scalar loss given ``dL/d(reconstruction)``.

        Returns ``(grads, dx)`` where ``grads`` mirrors ``self.params`` and
        ``dx`` is the gradient with respect to the input windows.
        Temporal weight gradients are multiplied by the mask, so masked
        entries are exactly zero.
        """
        cfg = self.config
        p = self.params
        x = cache["x"]
        B, L, d = cache["B"], cfg.L, cfg.d
        n = B * L
        grads = {}
        dout2 = np.asarray(dout, dtype=np.float64).reshape(n, self.n_channels)

        grads["head.weight"] = cache["xh"].T @ dout2
        grads["head.bias"] = dout2.sum(axis=0)
        dxh = dout2 @ p["head.weight"].T
        dsum, grads["bn_out.gamma"], grads["bn_out.beta"] = BatchNorm.backward(dxh, cache["c_out"])
        dz = dsum
        dz0 = dsum.copy()

        for b in reversed(range(cfg.n_blocks)):
            pre = f"block{b}"
            xc, h1, t1, a1, c_bnt, xe, g1, t2, a2, c_bne = cache["blocks"][b]
            dr2, grads[f"{pre}.bn_e.gamma"], grads[f"{pre}.bn_e.beta"] = BatchNorm.backward(dz, c_bne)
            grads[f"{pre}.e2.weight"] = a2.T @ dr2
            grads[f"{pre}.e2.bias"] = dr2.sum(axis=0)
            dg1 = (dr2 @ p[f"{pre}.e2.weight"].T) * gelu_grad(g1, t2)
            grads[f"{pre}.e1.weight"] = xe.T @ dg1
            grads[f"{pre}.e1.bias"] = dg1.sum(axis=0)
            dxe = dr2 + dg1 @ p[f"{pre}.e1.weight"].T
            dr1, grads[f"{pre}.bn_t.gamma"], grads[f"{pre}.bn_t.beta"] = BatchNorm.backward(dxe, c_bnt)
            dz_in = dr2 + dr1

            dh2 = dr1.reshape(B, L, d).transpose(0, 2, 1).reshape(B * d, L)
            th2 = self.effective_temporal_weight(f"{pre}.t2.weight")
            th1 = self.effective_temporal_weight(f"{pre}.t1.weight")
            grads[f"{pre}.t2.weight"] = self.gamma * (a1.T @ dh2)
            grads[f"{pre}.t2.bias"] = dh2.sum(axis=0)
            dh1 = (dh2 @ th2.T) * gelu_grad(h1, t1)
            grads[f"{pre}.t1.weight"] = self.gamma * (xc.T @ dh1)
            grads[f"{pre}.t1.bias"] = dh1.sum(axis=0)
            dxc = dh1 @ th1.T
            dz = dz_in + dxc.reshape(B, d, L).transpose(0, 2, 1).reshape(n, d)

        dz0 += dz
        dxd, grads["bn0.gamma"], grads["bn0.beta"] = BatchNorm.backward(dz0, cache["c_bn0"])
        dx = np.zeros_like(x)
        for k, g in enumerate(self.groups):
            lo, hi = self.offsets[k], self.offsets[k + 1]
            dpart = dxd[:, lo:hi]
            grads[f"embed{k}.weight"] = x[:, :, g].reshape(n, g.size).T @ dpart
            grads[f"embed{k}.bias"] = dpart.sum(axis=0)
            dx[:, :, g] = (dpart @ p[f"embed{k}.weight"].T).reshape(B, L, g.size)
        return grads, dx

    # -- bookkeeping

    def count_parameters(self) -> dict:
        shapes = self.param_shapes()
        size = {k: int(np.prod(s)) for k, s in shapes.items()}
        counts = {
            "embedding_weights": sum(v for k, v in size.items() if k.startswith("embed") and k.endswith("weight")),
            "embedding": sum(v for k, v in size.items() if k.startswith("embed")),
            "temporal_mixer": sum(v for k, v in size.items() if ".t1." in k or ".t2." in k),
            "embedding_mixer": sum(v for k, v in size.items() if ".e1." in k or ".e2." in k),
            "batch_norm": sum(v for k, v in size.items() if k.endswith((".gamma", ".beta"))),
            "head": size["head.weight"] + size["head.bias"],
        }
        counts["total"] = sum(size.values())
        return counts

    def copy(self) -> "CausalMixerNet":
        other = CausalMixerNet(self.n_channels, self.assignment, self.config, init=False)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.state = {k: v.copy() for k, v in self.state.items()}
        return other


def loss_mse(reconstruction, target) -> float:
    """Mean squared error of the last time step, averaged over batch and channels."""
    diff = np.asarray(reconstruction)[:, -1, :] - np.asarray(target)[:, -1, :]
    return float(np.mean(diff * diff))


def loss_mse_grad(reconstruction, target) -> np.ndarray:
    reconstruction = np.asarray(reconstruction)
    grad = np.zeros_like(reconstruction)
    b, _, c = reconstruction.shape
    grad[:, -1, :] = 2.0 * (reconstruction[:, -1, :] - np.asarray(target)[:, -1, :]) / (b * c)
    return grad
