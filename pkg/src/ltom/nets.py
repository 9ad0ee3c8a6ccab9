"""Encoders, the attention ToM predictor, the confidence head and the denoiser MLP.

Every net is a stateless description (parameter paths and shapes); the
numbers live in a ParamStore and are passed in at call time, so a forward
pass is a pure function of (params, input).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tensor
from .autodiff import tensor as T
from .autodiff.tensor import DimensionError


def _check_dim(what: str, x: Tensor, dim: int) -> None:
    if x.data.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"{what}: expected input of shape (batch, {dim}), got {x.shape}")


def linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return T.matmul(x, store[f"{prefix}.W"]) + store[f"{prefix}.b"]


def _linear_shapes(prefix: str, fan_in: int, fan_out: int) -> dict[str, tuple]:
    return {f"{prefix}.W": (fan_in, fan_out), f"{prefix}.b": (1, fan_out)}


class Net:
    def param_shapes(self) -> dict[str, tuple]:
        raise NotImplementedError


@dataclass
class MlpEncoder(Net):
    prefix: str
    in_dim: int
    out_dim: int
    hidden: tuple = (64, 64)

    def param_shapes(self):
        dims = (self.in_dim, *self.hidden, self.out_dim)
        shapes = {}
        for i in range(len(dims) - 1):
            shapes.update(_linear_shapes(f"{self.prefix}.l{i}", dims[i], dims[i + 1]))
        return shapes

    def __call__(self, store: ParamStore, obs) -> Tensor:
        x = T.as_tensor(obs)
        _check_dim(self.prefix, x, self.in_dim)
        n = len(self.hidden) + 1
        for i in range(n):
            x = linear(store, f"{self.prefix}.l{i}", x)
            if i < n - 1:
                x = T.relu(x)
        return x


def encode(enc: MlpEncoder, store: ParamStore, obs) -> Tensor:
    return enc(store, obs)


@dataclass
class TomPredictor(Net):
    """psi_{u->v}: query from u's consensus embedding, key/value from v's ego embedding.

    The key/value sequence has length 1, so each head's attention weight is a
    softmax over a single score and equals 1 exactly.
    """

    prefix: str
    d_con: int = 32
    d_ego: int = 32
    d_model: int = 32
    n_heads: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def param_shapes(self):
        p = self.prefix
        shapes = _linear_shapes(f"{p}.q", self.d_con, self.d_model)
        shapes.update(_linear_shapes(f"{p}.k", self.d_ego, self.d_model))
        shapes.update(_linear_shapes(f"{p}.v", self.d_ego, self.d_model))
        shapes.update(_linear_shapes(f"{p}.o", self.d_model, self.d_ego))
        return shapes

    def attend(self, store, h_con_u, h_ego_v) -> tuple[Tensor, list[Tensor]]:
        q_in, kv_in = T.as_tensor(h_con_u), T.as_tensor(h_ego_v)
        _check_dim(f"{self.prefix} query", q_in, self.d_con)
        _check_dim(f"{self.prefix} key/value", kv_in, self.d_ego)
        q = linear(store, f"{self.prefix}.q", q_in)
        k = linear(store, f"{self.prefix}.k", kv_in)
        v = linear(store, f"{self.prefix}.v", kv_in)
        dh = self.d_model // self.n_heads
        scale = 1.0 / math.sqrt(dh)
        heads, weights = [], []
        for h in range(self.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            qh, kh, vh = (T.slice_cols(t, lo, hi) for t in (q, k, v))
            # one key per query -> (batch, 1) scores
            scores = T.reduce("sum", qh * kh, axis=1) * scale
            w = T.softmax_rows(scores)
            weights.append(w)
            heads.append(w * vh)
        out = linear(store, f"{self.prefix}.o", T.concat(heads))
        return out, weights

    def __call__(self, store, h_con_u, h_ego_v) -> Tensor:
        return self.attend(store, h_con_u, h_ego_v)[0]


def tom_predict(psi: TomPredictor, store: ParamStore, h_con_u, h_ego_v) -> Tensor:
    return psi(store, h_con_u, h_ego_v)


@dataclass
class ConfidenceHead(Net):
    """Shared trunk LN/ReLU feature extractor with one sigmoid head per agent."""

    agents: tuple = (0, 1)
    d_con: int = 32
    width1: int = 64
    width2: int = 32
    prefix: str = "conf"

    def param_shapes(self):
        p = self.prefix
        shapes = _linear_shapes(f"{p}.trunk.l0", self.d_con, self.width1)
        shapes[f"{p}.trunk.ln.gain"] = (1, self.width1)
        shapes[f"{p}.trunk.ln.bias"] = (1, self.width1)
        shapes.update(_linear_shapes(f"{p}.trunk.l1", self.width1, self.width2))
        for a in self.agents:
            shapes.update(_linear_shapes(f"{p}.head{a}", self.width2, 1))
        return shapes

    def logit(self, store, agent_id, h_con) -> Tensor:
        if agent_id not in self.agents:
            raise KeyError(f"unknown agent id {agent_id!r} (registered: {list(self.agents)})")
        x = T.as_tensor(h_con)
        _check_dim(self.prefix, x, self.d_con)
        p = self.prefix
        z = T.layernorm(linear(store, f"{p}.trunk.l0", x))
        z = T.relu(z * store[f"{p}.trunk.ln.gain"] + store[f"{p}.trunk.ln.bias"])
        z = T.relu(linear(store, f"{p}.trunk.l1", z))
        return linear(store, f"{p}.head{agent_id}", z)

    def __call__(self, store, agent_id, h_con) -> Tensor:
        return T.sigmoid(self.logit(store, agent_id, h_con))


def confidence(head: ConfidenceHead, store: ParamStore, agent_id, h_con) -> Tensor:
    return head(store, agent_id, h_con)


def timestep_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps -> (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserNet(Net):
    """(noisy chunk, timestep embedding, conditioning) -> predicted noise."""

    prefix: str
    chunk_dim: int
    cond_dim: int
    width: int = 128
    n_layers: int = 3
    temb_dim: int = 16

    def param_shapes(self):
        dims = [self.chunk_dim + self.temb_dim + self.cond_dim]
        dims += [self.width] * (self.n_layers - 1) + [self.chunk_dim]
        shapes = {}
        for i in range(len(dims) - 1):
            shapes.update(_linear_shapes(f"{self.prefix}.l{i}", dims[i], dims[i + 1]))
        return shapes

    def __call__(self, store, x_t, t, cond) -> Tensor:
        x_t, cond = T.as_tensor(x_t), T.as_tensor(cond)
        _check_dim(f"{self.prefix} sample", x_t, self.chunk_dim)
        _check_dim(f"{self.prefix} conditioning", cond, self.cond_dim)
        t = np.broadcast_to(np.atleast_1d(t), (x_t.shape[0],))
        x = T.concat([x_t, Tensor(timestep_embedding(t, self.temb_dim)), cond])
        for i in range(self.n_layers):
            x = linear(store, f"{self.prefix}.l{i}", x)
            if i < self.n_layers - 1:
                x = T.relu(x)
        return x


# ---------------------------------------------------------------------------
# initialisation


def _param_rng(seed: int, path: str) -> np.random.Generator:
    # keyed by path so adding or removing unrelated nets never shifts values
    return np.random.default_rng([seed, zlib.crc32(path.encode("utf-8"))])


def init_value(path: str, shape: tuple, seed: int) -> np.ndarray:
    leaf = path.rsplit(".", 1)[-1]
    if leaf == "W":
        fan_in, fan_out = shape
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return _param_rng(seed, path).uniform(-a, a, size=shape)
    if leaf == "gain":
        return np.ones(shape)
    if leaf == "rho":
        return np.eye(shape[0])
    return np.zeros(shape)


def init_params(nets, seed: int, store: ParamStore | None = None) -> ParamStore:
    """Xavier-uniform weights, zero biases, unit LayerNorm gains; deterministic per seed."""
    store = ParamStore() if store is None else store
    for net in nets:
        for path, shape in net.param_shapes().items():
            store.add(path, init_value(path, shape, seed))
    return store


@dataclass
class NetDims:
    ego_obs: int = 5
    con_obs: int = 8
    obs_horizon: int = 2
    d_ego: int = 32
    d_con: int = 32
    hidden: tuple = (64, 64)
    tom_d_model: int = 32
    tom_heads: int = 2
    denoiser_width: int = 128
    denoiser_layers: int = 3
    temb_dim: int = 16
    conf_width1: int = 64
    conf_width2: int = 32

    @property
    def ego_in(self) -> int:
        return self.ego_obs * self.obs_horizon

    @property
    def con_in(self) -> int:
        return self.con_obs * self.obs_horizon
