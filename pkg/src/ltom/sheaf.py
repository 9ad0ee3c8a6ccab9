"""Cellular-sheaf consensus: the auxiliary training losses and Laplacian sync.

Node stalks hold consensus embeddings, edge stalks are R^{d_con}.  Embeddings
are row vectors (or row batches), so a restriction map ``R`` acts as
``h @ R``; the default map is the identity and is stored as ``None``.

Batched inputs (shape (b, d)) are averaged over the batch, which for a single
row reduces to the plain per-edge expression.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .autodiff import tensor as T
from .autodiff.tensor import DomainError


class StabilityWarning(UserWarning):
    """Laplacian step size outside the contraction bound."""


class ConfigError(ValueError):
    pass


Edge = tuple


@dataclass
class SheafGraph:
    nodes: tuple
    edges: tuple
    d: int = 32
    restriction: dict = field(default_factory=dict)  # (node, edge) -> R, applied as h @ R

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        self.edges = tuple(tuple(e) for e in self.edges)
        for u, v in self.edges:
            if u not in self.nodes or v not in self.nodes:
                raise ValueError(f"edge {(u, v)} references an unregistered node")
            if u == v:
                raise ValueError(f"self-loop on node {u!r}")

    @classmethod
    def pair(cls, d: int = 32) -> "SheafGraph":
        return cls(nodes=(0, 1), edges=((0, 1),), d=d)

    @classmethod
    def path(cls, n: int, d: int) -> "SheafGraph":
        return cls(nodes=tuple(range(n)), edges=tuple((i, i + 1) for i in range(n - 1)), d=d)

    def rho(self, node, edge):
        return self.restriction.get((node, tuple(edge)))

    def neighbors(self, u) -> list:
        out = []
        for a, b in self.edges:
            if a == u:
                out.append((b, (a, b)))
            elif b == u:
                out.append((a, (a, b)))
        return out

    def max_degree(self) -> int:
        return max((len(self.neighbors(u)) for u in self.nodes), default=0)

    def identity_maps(self) -> bool:
        return all(self.rho(n, e) is None for e in self.edges for n in e)


def restrict(graph: SheafGraph, node, edge, h):
    R = graph.rho(node, edge)
    if R is None:
        return h
    if isinstance(h, Tensor) or isinstance(R, Tensor):
        return T.matmul(h, R)
    return np.asarray(h) @ np.asarray(R)


@dataclass
class ConsensusBundle:
    h: dict  # node -> (b, d_con) consensus embeddings
    c: dict = field(default_factory=dict)  # node -> (b, 1) confidences in (0, 1)
    residuals: dict = field(default_factory=dict)  # edge -> last computed residual

    def __post_init__(self):
        # bare vectors become single-row batches
        for store in (self.h, self.c):
            for k, x in store.items():
                if not isinstance(x, Tensor):
                    store[k] = np.atleast_2d(np.asarray(x, dtype=np.float64))

    def get(self, node):
        try:
            return self.h[node]
        except KeyError:
            raise KeyError(f"no consensus embedding for node {node!r}") from None


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    lambda_ent: float = 0.01
    eta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lambda_ent"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {val}")
        if not 0.0 < self.eta < 1.0:
            raise ConfigError(f"eta must lie in (0, 1), got {self.eta}")


# ---------------------------------------------------------------------------
# training losses


def loss_nc(graph: SheafGraph, bundle: ConsensusBundle) -> Tensor:
    """Sum over edges of ||R_u h_u - R_v h_v||^2 (batch-averaged)."""
    total = Tensor(0.0)
    for e in graph.edges:
        u, v = e
        r = T.sub(restrict(graph, u, e, bundle.get(u)), restrict(graph, v, e, bundle.get(v)))
        bundle.residuals[e] = r.data
        total = total + T.reduce("mean", T.reduce("sq_l2", r, axis=1))
    return total


def loss_tom(
    graph: SheafGraph,
    predictors: Mapping,
    store,
    h_con: Mapping,
    h_ego: Mapping,
    stop_target: bool = True,
) -> Tensor:
    """Squared error of each directional ToM prediction of the neighbour's ego embedding."""
    total = Tensor(0.0)
    for u, v in graph.edges:
        for src, dst in ((u, v), (v, u)):
            psi = predictors.get((src, dst))
            if psi is None:
                raise ConfigError(f"missing ToM predictor for direction {src}->{dst}")
            target = h_ego[dst]
            pred = psi(store, h_con[src], h_ego[dst])
            tgt = T.detach(target) if stop_target else target
            total = total + T.reduce("mean", T.reduce("sq_l2", T.sub(tgt, pred), axis=1))
    return total


def entropy(c) -> Tensor:
    """Binary entropy -c log c - (1-c) log(1-c), elementwise."""
    c = T.as_tensor(c)
    one_minus = 1.0 - c
    return -(c * T.log(c) + one_minus * T.log(one_minus))


def loss_conf(
    graph: SheafGraph,
    bundle: ConsensusBundle,
    lambda_ent: float,
    detach_target: bool = True,
    detach_weight: bool = False,
    entropy_sign: float = 1.0,
) -> Tensor:
    """Confidence-directed alignment plus the confidence-entropy regulariser.

    Per edge: (1 + |c_u - c_v|) * [1{c_u>=c_v} ||h_v - h_u|| + 1{c_v>=c_u} ||h_u - h_v||]
    + lambda_ent * (H(c_u) + H(c_v)).  Norms are unsquared.  With
    ``detach_target`` the higher-confidence side of each active term is a
    constant, so only the lower-confidence embedding is pulled.
    ``entropy_sign=-1`` subtracts the entropy instead, which rewards
    confidences near 0.5 rather than near 0 or 1.
    """
    total = Tensor(0.0)
    for e in graph.edges:
        u, v = e
        cu, cv = T.as_tensor(bundle.c[u]), T.as_tensor(bundle.c[v])
        for c in (cu, cv):
            if np.any(c.data <= 0.0) or np.any(c.data >= 1.0):
                raise DomainError("confidence values must lie strictly inside (0, 1)")
        hu, hv = T.as_tensor(bundle.get(u)), T.as_tensor(bundle.get(v))
        u_leads = Tensor((cu.data >= cv.data).astype(np.float64))
        v_leads = Tensor((cv.data >= cu.data).astype(np.float64))
        sg = T.detach if detach_target else (lambda x: x)
        pull_v = T.reduce("l2", T.sub(hv, sg(hu)), axis=1)
        pull_u = T.reduce("l2", T.sub(hu, sg(hv)), axis=1)
        diff = T.sub(cu, cv)
        weight = 1.0 + T.abs_(T.detach(diff) if detach_weight else diff)
        align = weight * (u_leads * pull_v + v_leads * pull_u)
        ent = (entropy(cu) + entropy(cv)) * (entropy_sign * lambda_ent)
        total = total + T.reduce("mean", align + ent)
    return total


def loss_total(weights: LossWeights, l_nc=None, l_tom=None, l_conf=None) -> Tensor:
    """alpha * L_nc + beta * L_tom + gamma * L_conf; absent components count as zero."""
    out = None
    for w, comp in ((weights.alpha, l_nc), (weights.beta, l_tom), (weights.gamma, l_conf)):
        if comp is None:
            continue
        term = T.as_tensor(comp) * w
        out = term if out is None else out + term
    return Tensor(0.0) if out is None else out


# ---------------------------------------------------------------------------
# inference-time synchronisation


def laplacian_step(graph: SheafGraph, h: Mapping, eta: float) -> dict:
    """One simultaneous step h_u <- h_u - eta * sum_{v in N(u)} R_u^T (R_u h_u - R_v h_v).

    With identity maps this is h_u <- h_u - eta * sum_v (h_u - h_v).  The
    transpose stands in for the inverse of a general restriction map.
    """
    bound = 1.0 / (2.0 * max(graph.max_degree(), 1))
    if not 0.0 < eta <= bound:
        warnings.warn(
            f"eta={eta} outside the stability bound (0, {bound}] for max degree "
            f"{graph.max_degree()}",
            StabilityWarning,
            stacklevel=2,
        )
    h = {n: np.asarray(v, dtype=np.float64) for n, v in h.items()}
    out = {}
    for u in graph.nodes:
        lap = np.zeros_like(h[u])
        for v, e in graph.neighbors(u):
            r = restrict(graph, u, e, h[u]) - restrict(graph, v, e, h[v])
            R = graph.rho(u, e)
            lap = lap + (r if R is None else r @ np.asarray(R).T)
        out[u] = h[u] - eta * lap
    return out


def sync(graph: SheafGraph, h: Mapping, eta: float, n_steps: int = 1) -> dict:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    for _ in range(n_steps):
        h = laplacian_step(graph, h, eta)
    return h


PAIR_LAPLACIAN = np.array([[1.0, -1.0], [-1.0, 1.0]])


def consistency_operator(eta: float) -> np.ndarray:
    """The 2x2 update [[1-eta, eta], [eta, 1-eta]] = I - eta * L for two nodes."""
    return np.eye(2) - eta * PAIR_LAPLACIAN


def verify_equivalence(h_u, h_v, eta: float) -> float:
    """Max |difference| between the 2x2 consistency operator and one Laplacian step."""
    h_u = np.asarray(h_u, dtype=np.float64)
    h_v = np.asarray(h_v, dtype=np.float64)
    H = np.stack([h_u, h_v])
    # (I - eta L) H evaluated as H - eta (L H), which is exact when h_u == h_v
    via_matrix = H - eta * (PAIR_LAPLACIAN @ H)
    graph = SheafGraph.pair(d=h_u.shape[-1])
    with warnings.catch_warnings():
        # eta = 0 is a legitimate identity check here
        warnings.simplefilter("ignore", StabilityWarning)
        stepped = laplacian_step(graph, {0: h_u, 1: h_v}, eta)
    via_laplacian = np.stack([stepped[0], stepped[1]])
    return float(np.max(np.abs(via_matrix - via_laplacian)))


def disagreement_energy(graph: SheafGraph, h: Mapping) -> float:
    return float(
        sum(
            np.sum((restrict(graph, u, (u, v), h[u]) - restrict(graph, v, (u, v), h[v])) ** 2)
            for u, v in graph.edges
        )
    )
