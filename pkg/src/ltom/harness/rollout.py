"""Receding-horizon rollouts, batched over episode seeds.

Each inference step, every agent observes, encodes, optionally exchanges its
consensus embedding (LATENT_TOM_SL), samples an action chunk and executes the
first ``exec_steps`` actions of it.  All randomness comes from per-(episode,
agent) generators, so the two agents' inference can run in either order or
concurrently with identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..autodiff import tensor as T
from ..config import FailureSpec, RolloutConfig
from ..env import AGENTS, CON_DIM, EGO_DIM, EnvConfig, metrics, observe, reset, step
from ..sheaf import sync
from ..variants import Variant
from .model import ACTION_DIM, cond_vector
from .train import Checkpoint


class MessageAccountingError(AssertionError):
    pass


def expected_messages(variant: Variant, inference_steps: int, n_sync_steps: int = 1) -> int:
    """One consensus embedding each way per sync round, only for the syncing variant."""
    return 2 * n_sync_steps * inference_steps if variant.syncs else 0


@dataclass
class RolloutRecord:
    seed: int
    variant: str
    gains: tuple
    failure: FailureSpec | None
    goal: np.ndarray
    blocks: list = field(default_factory=list)  # pose after each step, starting with the reset pose
    pushers: list = field(default_factory=list)
    ego_obs: list = field(default_factory=list)  # (2, 5) per step
    con_obs: list = field(default_factory=list)  # (2, 8) per step
    actions: list = field(default_factory=list)  # executed (2, 2) per step
    h_con_pre: list = field(default_factory=list)  # (2, d_con) per inference step
    h_con_post: list = field(default_factory=list)
    messages: int = 0
    inference_steps: int = 0
    metrics: dict = field(default_factory=dict)
    wall_hits: int = 0

    @property
    def steps(self) -> int:
        return len(self.actions)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "variant": self.variant,
            "gains": list(self.gains),
            "failure": None if self.failure is None else
            [self.failure.agent, self.failure.start_step, self.failure.duration],
            "steps": self.steps,
            "inference_steps": self.inference_steps,
            "messages": self.messages,
            "wall_hits": self.wall_hits,
            **self.metrics,
        }


class Controller:
    """A trained checkpoint turned into per-agent (or joint) action-chunk samplers."""

    def __init__(self, ckpt: Checkpoint, deterministic: bool = False, concurrent: bool = False):
        self.ckpt = ckpt
        self.model = ckpt.model
        self.store = ckpt.store
        self.norm = ckpt.norm
        self.variant = ckpt.variant
        self.deterministic = deterministic
        self.concurrent = concurrent
        self.a_max = ckpt.config.env.a_max
        self.sheaf = ckpt.config.sheaf

    def _map(self, fn):
        if self.concurrent:
            with ThreadPoolExecutor(max_workers=len(AGENTS)) as pool:
                return list(pool.map(fn, AGENTS))
        return [fn(i) for i in AGENTS]

    def _decode(self, x: np.ndarray) -> np.ndarray:
        """Normalised flat chunk -> (b, H, 2) clamped actions."""
        acts = self.norm.unframes("act", x).reshape(x.shape[0], -1, ACTION_DIM)
        return np.clip(acts, -self.a_max, self.a_max)

    def encode(self, agent: int, ego: np.ndarray, con: np.ndarray):
        with T.no_grad():
            h_ego, h_con = self.model.embed(self.store, agent, self.norm.frames("ego", ego),
                                            self.norm.frames("con", con))
        return h_ego.data, h_con.data

    def sample(self, agent, cond: np.ndarray, rngs) -> np.ndarray:
        x = self.model.policy(agent).sample(self.store, cond, rngs, deterministic=self.deterministic)
        return self._decode(x)

    def plan(self, ego: np.ndarray, con: np.ndarray, rngs: list) -> dict:
        """Chunks for a batch of episodes.

        ``ego``/``con`` are (2, b, history) raw observation histories and
        ``rngs[i]`` the per-episode generators of agent ``i``.  Returns
        {"chunks": (b, 2, H, 2), "h_pre"/"h_post": (2, b, d) or None, "messages": per row}.
        """
        if not self.variant.decentralized:
            with T.no_grad():
                cond = self.model.joint_cond(
                    self.store,
                    [self.norm.frames("ego", ego[i]) for i in AGENTS],
                    [self.norm.frames("con", con[i]) for i in AGENTS],
                ).data
            acts = self.sample("joint", cond, rngs[0])
            b, hh = acts.shape[0], acts.shape[1] // 2
            chunks = acts.reshape(b, hh, 2, ACTION_DIM).transpose(0, 2, 1, 3)
            return {"chunks": chunks, "h_pre": None, "h_post": None, "messages": 0}

        encoded = self._map(lambda i: self.encode(i, ego[i], con[i]))
        h_ego = {i: encoded[i][0] for i in AGENTS}
        h_pre = {i: encoded[i][1] for i in AGENTS}
        h_post, messages = h_pre, 0
        if self.variant.syncs:
            # each agent sends its embedding to the other, then both apply the same update
            messages = 2 * self.sheaf.n_sync_steps
            graph = self.model.graph(self.store, as_arrays=True)
            h_post = sync(graph, h_pre, self.sheaf.eta, self.sheaf.n_sync_steps)
        chunks = self._map(lambda i: self.sample(i, cond_vector(h_ego[i], h_post[i]).data, rngs[i]))
        return {
            "chunks": np.stack(chunks, axis=1),
            "h_pre": np.stack([h_pre[i] for i in AGENTS]),
            "h_post": np.stack([h_post[i] for i in AGENTS]),
            "messages": messages,
        }


def _check_failure(failure: FailureSpec | None, max_steps: int) -> None:
    if failure is not None and failure.start_step + failure.duration > max_steps:
        raise ValueError(f"failure window {failure} extends past max_steps={max_steps}")


def rollout(ckpt: Checkpoint, rcfg: RolloutConfig, seeds=None, env: EnvConfig | None = None) -> list[RolloutRecord]:
    """Run ``rcfg.n_episodes`` episodes (or the given ``seeds``) in lock-step."""
    variant = Variant.parse(rcfg.variant)
    if variant is not ckpt.variant:
        raise ValueError(f"checkpoint holds {ckpt.variant.value}, rollout asks for {variant.value}")
    env = replace(ckpt.config.env if env is None else env, g_left=rcfg.g_left, g_right=rcfg.g_right)
    _check_failure(rcfg.failure, env.max_steps)
    seeds = list(range(rcfg.seed, rcfg.seed + rcfg.n_episodes)) if seeds is None else list(seeds)
    ctl = Controller(ckpt, rcfg.deterministic, rcfg.concurrent_agents)
    dc = ckpt.config.diffusion
    n_hist = ckpt.config.model.obs_horizon
    n_sync = ckpt.config.sheaf.n_sync_steps

    B = len(seeds)
    states = [reset(env, s) for s in seeds]
    obs_rngs = [[np.random.default_rng([s, 1, i]) for i in AGENTS] for s in seeds]
    # the joint policy draws from its own stream; decentralized agents from one each
    streams = (0, 1) if variant.decentralized else (2,)
    smp_rngs = [[np.random.default_rng([s, 3, k]) for k in streams] for s in seeds]
    records = [RolloutRecord(s, variant.value, env.gains, rcfg.failure, states[b].goal.copy(),
                             blocks=[states[b].block.copy()], pushers=[states[b].pushers.copy()])
               for b, s in enumerate(seeds)]
    hist_ego = np.zeros((B, 2, n_hist, EGO_DIM))
    hist_con = np.zeros((B, 2, n_hist, CON_DIM))
    chunks = np.zeros((B, 2, dc.horizon, ACTION_DIM))
    live = list(range(B))

    for t in range(env.max_steps):
        if not live:
            break
        for b in live:
            for i in AGENTS:
                o = observe(states[b], env, i, obs_rngs[b][i])
                if t == 0:
                    hist_ego[b, i] = o.ego
                    hist_con[b, i] = o.con
                else:
                    hist_ego[b, i] = np.roll(hist_ego[b, i], -1, axis=0)
                    hist_con[b, i] = np.roll(hist_con[b, i], -1, axis=0)
                    hist_ego[b, i, -1] = o.ego
                    hist_con[b, i, -1] = o.con
                records[b].ego_obs.append(hist_ego[b, i, -1].copy())
                records[b].con_obs.append(hist_con[b, i, -1].copy())

        if t % dc.exec_steps == 0:
            rows = np.array(live)
            ego = hist_ego[rows].reshape(len(rows), 2, -1).transpose(1, 0, 2)
            con = hist_con[rows].reshape(len(rows), 2, -1).transpose(1, 0, 2)
            rngs = [[smp_rngs[b][k] for b in rows] for k in range(len(streams))]
            out = ctl.plan(ego, con, rngs)
            chunks[rows] = out["chunks"]
            for j, b in enumerate(rows):
                rec = records[b]
                rec.inference_steps += 1
                rec.messages += out["messages"]
                if out["h_pre"] is not None:
                    rec.h_con_pre.append(out["h_pre"][:, j].copy())
                    rec.h_con_post.append(out["h_post"][:, j].copy())

        k = t % dc.exec_steps
        still = []
        for b in live:
            a = chunks[b, :, k].copy()
            if rcfg.failure is not None and rcfg.failure.frozen(t):
                a[rcfg.failure.agent] = 0.0
            states[b] = step(states[b], env, a[0], a[1])
            rec = records[b]
            rec.actions.append(states[b].last_actions.copy())
            rec.blocks.append(states[b].block.copy())
            rec.pushers.append(states[b].pushers.copy())
            if not metrics(states[b], env)["success"]:
                still.append(b)
        live = still

    for b, rec in enumerate(records):
        rec.metrics = metrics(states[b], env)
        rec.wall_hits = states[b].wall_hits
        for name in ("ego_obs", "con_obs"):
            seq = getattr(rec, name)
            setattr(rec, name, np.array(seq).reshape(-1, 2, seq[0].shape[-1]))
        for name in ("blocks", "pushers", "actions", "h_con_pre", "h_con_post"):
            setattr(rec, name, np.array(getattr(rec, name)))
        want = expected_messages(variant, rec.inference_steps, n_sync)
        if rec.messages != want:
            raise MessageAccountingError(
                f"seed {rec.seed}: {rec.messages} messages for {rec.inference_steps} inference steps, expected {want}")
    return records
