"""Per-variant network layout: which nets exist, how observations become conditioning."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..autodiff import ParamStore, Tensor
from ..autodiff import tensor as T
from ..config import ExperimentConfig, SheafConfig
from ..diffusion import DiffusionPolicy, NoiseSchedule, make_schedule
from ..env import AGENTS
from ..nets import ConfidenceHead, DenoiserNet, MlpEncoder, Net, NetDims, TomPredictor, init_params
from ..sheaf import LossWeights, SheafGraph
from ..variants import Variant

ACTION_DIM = 2


@dataclass
class RestrictionMaps(Net):
    """Learned linear node-to-edge maps, initialised to the identity."""

    nodes: tuple = AGENTS
    d: int = 32
    prefix: str = "sheaf"

    def path(self, node) -> str:
        return f"{self.prefix}.node{node}.rho"

    def param_shapes(self):
        return {self.path(n): (self.d, self.d) for n in self.nodes}


def effective_weights(variant: Variant, sheaf: SheafConfig) -> LossWeights:
    """The configured loss weights with the components a variant does not use forced to zero."""
    w = sheaf.weights()
    return LossWeights(
        alpha=w.alpha if variant.uses_nc else 0.0,
        beta=w.beta if variant.uses_tom else 0.0,
        gamma=w.gamma if variant.uses_conf else 0.0,
        lambda_ent=w.lambda_ent,
        eta=w.eta,
    )


@dataclass
class PolicyModel:
    variant: Variant
    dims: NetDims
    schedule: NoiseSchedule
    horizon: int
    sheaf: SheafConfig = field(default_factory=SheafConfig)
    # filled in __post_init__
    enc_ego: dict = field(default_factory=dict)
    enc_con: dict = field(default_factory=dict)
    denoiser: dict = field(default_factory=dict)
    tom: dict = field(default_factory=dict)
    conf: ConfidenceHead | None = None
    rho: RestrictionMaps | None = None

    def __post_init__(self):
        d = self.dims
        chunk = ACTION_DIM * self.horizon
        if self.variant.decentralized:
            for i in AGENTS:
                self.enc_ego[i] = MlpEncoder(f"agent{i}.enc_ego", d.ego_in, d.d_ego, tuple(d.hidden))
                self.enc_con[i] = MlpEncoder(f"agent{i}.enc_con", d.con_in, d.d_con, tuple(d.hidden))
                self.denoiser[i] = DenoiserNet(f"agent{i}.denoiser", chunk, d.d_ego + d.d_con,
                                               d.denoiser_width, d.denoiser_layers, d.temb_dim)
            if self.variant.uses_tom:
                for u, v in ((0, 1), (1, 0)):
                    self.tom[(u, v)] = TomPredictor(f"tom.{u}to{v}", d.d_con, d.d_ego,
                                                    d.tom_d_model, d.tom_heads)
            if self.variant.uses_conf:
                self.conf = ConfidenceHead(AGENTS, d.d_con, d.conf_width1, d.conf_width2)
            if self.variant.uses_nc and self.sheaf.restriction == "learned":
                self.rho = RestrictionMaps(AGENTS, d.d_con)
        else:
            # the centralized policy sees both agents' full observations
            for i in AGENTS:
                self.enc_ego[i] = MlpEncoder(f"cdp.enc_ego{i}", d.ego_in, d.d_ego, tuple(d.hidden))
            self.enc_con["joint"] = MlpEncoder("cdp.enc_con", 2 * d.con_in, d.d_con, tuple(d.hidden))
            self.denoiser["joint"] = DenoiserNet("cdp.denoiser", 2 * chunk, 2 * d.d_ego + d.d_con,
                                                 d.denoiser_width, d.denoiser_layers, d.temb_dim)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, variant=None) -> "PolicyModel":
        variant = Variant.parse(variant if variant is not None else cfg.train.variant)
        dc = cfg.diffusion
        return cls(variant, cfg.model, make_schedule(dc.T, dc.beta_min, dc.beta_max), dc.horizon,
                   cfg.sheaf)

    # -- structure ---------------------------------------------------------

    def nets(self) -> list[Net]:
        out = [*self.enc_ego.values(), *self.enc_con.values(), *self.denoiser.values(),
               *self.tom.values()]
        out += [n for n in (self.conf, self.rho) if n is not None]
        return out

    def init(self, seed: int) -> ParamStore:
        return init_params(self.nets(), seed)

    def policy(self, key) -> DiffusionPolicy:
        return DiffusionPolicy(self.schedule, self.denoiser[key])

    def active_params(self, weights: LossWeights) -> list[str]:
        """Parameters that receive a gradient under ``weights``; only these are optimised."""
        nets = [*self.enc_ego.values(), *self.enc_con.values(), *self.denoiser.values()]
        if weights.beta > 0:
            nets += list(self.tom.values())
        if self.conf is not None and weights.gamma > 0:
            if not self.sheaf.detach_conf_weight or weights.lambda_ent > 0:
                nets.append(self.conf)
        if self.rho is not None and weights.alpha > 0:
            nets.append(self.rho)
        return [p for net in nets for p in net.param_shapes()]

    def graph(self, store: ParamStore | None = None, as_arrays: bool = False) -> SheafGraph:
        g = SheafGraph.pair(self.dims.d_con)
        if self.rho is not None and store is not None:
            for n in AGENTS:
                R = store[self.rho.path(n)]
                g.restriction[(n, (0, 1))] = R.data if as_arrays else R
        return g

    # -- forward pieces ----------------------------------------------------

    def embed(self, store: ParamStore, agent: int, ego, con) -> tuple[Tensor, Tensor]:
        """(h_ego, h_con) for one decentralized agent."""
        return self.enc_ego[agent](store, ego), self.enc_con[agent](store, con)

    def joint_cond(self, store: ParamStore, egos, cons) -> Tensor:
        """Conditioning of the centralized policy from both agents' observations."""
        h = [self.enc_ego[i](store, egos[i]) for i in AGENTS]
        h.append(self.enc_con["joint"](store, T.concat([T.as_tensor(c) for c in cons])))
        return T.concat(h)


def cond_vector(h_ego, h_con) -> Tensor:
    return T.concat([T.as_tensor(h_ego), T.as_tensor(h_con)])
