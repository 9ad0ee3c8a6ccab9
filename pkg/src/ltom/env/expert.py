"""Scripted two-pusher expert and demonstration collection."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pusht import (
    AGENTS,
    LEFT,
    RIGHT,
    EnvConfig,
    PushTState,
    clamp_action,
    contact_offsets,
    heading,
    lateral,
    metrics,
    observe,
    reset,
    step,
    wrap_angle,
)


@dataclass(frozen=True)
class ExpertConfig:
    v_max: float = 0.015  # face push per step at full speed
    k_push: float = 0.5  # forward speed per metre of remaining distance
    k_rot: float = 0.5  # fraction of the heading error removed per step
    ready_tol: float = 0.02  # pushing needs both pushers this close behind/beside their contact points
    goal_tol: float = 0.005
    rot_tol: float = 0.01
    # dataset collection
    hold_steps: int = 4  # zero-action steps recorded after the expert finishes
    action_noise: float = 0.25  # executed-action perturbation, fraction of a_max
    turn_noise: float = 0.0  # extra opposite-sign push perturbation, fraction of a_max
    noise_cutoff: float = 0.05  # no perturbation once the goal is this close
    stall_prob: float = 0.05  # per-step chance that one agent's executed actions are zeroed for a while
    stall_max: int = 20  # longest such stall, in steps
    plan_horizon: int = 8  # length of the noise-free action plan recorded per step
    success_trans: float = 0.02
    success_rot: float = 0.02


def _remaining(state: PushTState) -> float:
    return float((state.goal[:2] - state.block[:2]) @ heading(state.block[2]))


def expert_done(state: PushTState, cfg: EnvConfig, ex: ExpertConfig) -> bool:
    remaining = _remaining(state)
    err = wrap_angle(state.block[2] - state.goal[2])
    return remaining < ex.goal_tol and abs(err) < ex.rot_tol


def expert_action(state: PushTState, cfg: EnvConfig, ex: ExpertConfig = ExpertConfig()):
    """Proportional two-phase controller using the true side gains.

    Both pushers first servo onto their contact points; only once both are
    there does either push.  Face pushes are v -/+ a heading correction, each
    divided by that side's gain so the commanded rotation is -k_rot * error.
    """
    if expert_done(state, cfg, ex):
        return np.zeros(2), np.zeros(2)
    theta = state.block[2]
    f, l = heading(theta), lateral(theta)
    offsets = [contact_offsets(state, cfg, i) for i in AGENTS]
    actions = [gap * f - lat * l for gap, lat, _ in offsets]
    # a loose gate: small lateral drift is corrected while pushing rather than by stopping
    ready = all(gap <= ex.ready_tol and abs(lat) <= ex.ready_tol for gap, lat, _ in offsets)
    if ready:
        remaining = float((state.goal[:2] - state.block[:2]) @ f)
        v = min(ex.v_max, ex.k_push * max(remaining, 0.0))
        corr = ex.k_rot * wrap_angle(theta - state.goal[2]) / (2.0 * cfg.kappa)
        face = {LEFT: max(0.0, v - corr), RIGHT: max(0.0, v + corr)}
        for i, g in zip(AGENTS, cfg.gains):
            # a pusher slightly inside the face pushes from where it is
            gap, lat, _ = offsets[i]
            actions[i] = (max(gap, 0.0) + face[i] / g) * f - lat * l
    return clamp_action(actions[LEFT], cfg), clamp_action(actions[RIGHT], cfg)


@dataclass
class Episode:
    seed: int
    ego: np.ndarray  # (2, n, 5)
    con: np.ndarray  # (2, n, 8)
    act: np.ndarray  # (2, n, 2) expert labels
    plan: np.ndarray | None = None  # (2, n, plan_horizon, 2) noise-free continuation from each step
    final: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.act.shape[1]


def expert_plan(state: PushTState, cfg: EnvConfig, ex: ExpertConfig, horizon: int) -> np.ndarray:
    """(2, horizon, 2) actions the expert would take from ``state`` with no perturbation."""
    plan = np.zeros((2, horizon, 2))
    for k in range(horizon):
        a_u, a_v = expert_action(state, cfg, ex)
        plan[0, k], plan[1, k] = a_u, a_v
        state = step(state, cfg, a_u, a_v)
    return plan


def run_expert(cfg: EnvConfig, seed: int, ex: ExpertConfig = ExpertConfig(),
               noise: float = 0.0, record: bool = True):
    """Roll the expert out from ``reset(cfg, seed)``.

    ``noise`` perturbs executed actions (std = noise * a_max) while the
    recorded labels stay clean: the per-step label and the noise-free plan
    from that step.  With ``noise > 0`` and ``ex.stall_prob > 0`` an agent
    occasionally holds still for up to ``ex.stall_max`` steps, so the data
    also shows how the expert waits for and realigns with a stalled partner.
    Returns (episode or None, final state, per-step dtheta).
    """
    state = reset(cfg, seed)
    obs_rngs = [np.random.default_rng([seed, 1, i]) for i in AGENTS]
    noise_rng = np.random.default_rng([seed, 2])
    ego, con, act, plan, dthetas = [], [], [], [], []
    held, stall_agent, stall_left = 0, 0, 0
    while state.step < cfg.max_steps:
        a_u, a_v = expert_action(state, cfg, ex)
        done = expert_done(state, cfg, ex)
        if noise > 0 and ex.stall_prob > 0 and not done and stall_left == 0:
            if noise_rng.random() < ex.stall_prob:
                stall_agent, stall_left = int(noise_rng.integers(2)), int(noise_rng.integers(1, ex.stall_max + 1))
        stalled = stall_agent if stall_left > 0 and not done else None
        if record:
            obs = [observe(state, cfg, i, obs_rngs[i]) for i in AGENTS]
            ego.append([o.ego for o in obs])
            con.append([o.con for o in obs])
            act.append([a_u, a_v])
            plan.append(expert_plan(state, cfg, ex, ex.plan_horizon))
        if done:
            held += 1
            if held > ex.hold_steps:
                break
        elif noise > 0 and _remaining(state) > ex.noise_cutoff:
            jitter = noise * cfg.a_max * noise_rng.standard_normal((2, 2))
            a_u, a_v = a_u + jitter[0], a_v + jitter[1]
            if ex.turn_noise > 0:
                # pushes of opposite sign along the heading turn the block
                turn = ex.turn_noise * cfg.a_max * noise_rng.standard_normal() * heading(state.block[2])
                a_u, a_v = a_u + turn, a_v - turn
        if stalled is not None:
            stall_left -= 1
            if stalled == LEFT:
                a_u = np.zeros(2)
            else:
                a_v = np.zeros(2)
        prev = state.block[2]
        state = step(state, cfg, a_u, a_v)
        dthetas.append(wrap_angle(state.block[2] - prev))
    episode = None
    if record:
        episode = Episode(seed, np.swapaxes(np.array(ego), 0, 1), np.swapaxes(np.array(con), 0, 1),
                          np.swapaxes(np.array(act), 0, 1), np.swapaxes(np.array(plan), 0, 1),
                          final=metrics(state, cfg))
    return episode, state, np.array(dthetas)


def expert_succeeded(state: PushTState, ex: ExpertConfig = ExpertConfig()) -> bool:
    trans = float(np.linalg.norm(state.block[:2] - state.goal[:2]))
    rot = abs(wrap_angle(state.block[2] - state.goal[2]))
    return trans < ex.success_trans and rot < ex.success_rot


@dataclass
class DemoDataset:
    config: EnvConfig
    expert: ExpertConfig
    episodes: list
    n_discarded: int = 0
    seed: int = 0

    def norm_stats(self) -> dict:
        ego = np.concatenate([e.ego.reshape(-1, e.ego.shape[-1]) for e in self.episodes])
        con = np.concatenate([e.con.reshape(-1, e.con.shape[-1]) for e in self.episodes])
        act = np.concatenate([e.act.reshape(-1, 2) for e in self.episodes])

        def stats(a):
            return {"mean": a.mean(axis=0).tolist(), "std": np.maximum(a.std(axis=0), 1e-3).tolist()}

        return {"ego": stats(ego), "con": stats(con), "act": stats(act)}


def gen_dataset(cfg: EnvConfig, n_episodes: int, seed: int,
                ex: ExpertConfig = ExpertConfig(), max_discards: int | None = None) -> DemoDataset:
    """Collect ``n_episodes`` successful expert rollouts; failures are resampled.

    More than ``max_discards`` failures (default: 10 per requested episode plus
    10) means the expert cannot solve this configuration, and raises.
    """
    if not cfg.symmetric:
        raise ValueError("demonstrations must be collected with symmetric gains")
    limit = 10 * n_episodes + 10 if max_discards is None else max_discards
    episodes, discarded = [], 0
    ss = np.random.SeedSequence(seed)
    while len(episodes) < n_episodes:
        if discarded > limit:
            raise ValueError(f"expert failed {discarded} episodes while collecting {n_episodes}; "
                             "check env.max_steps and the expert tolerances")
        ep_seed = int(ss.spawn(1)[0].generate_state(1)[0])
        episode, final, _ = run_expert(cfg, ep_seed, ex, noise=ex.action_noise)
        if expert_succeeded(final, ex):
            episodes.append(episode)
        else:
            discarded += 1
    return DemoDataset(cfg, ex, episodes, discarded, seed)


# ---------------------------------------------------------------------------
# JSON-lines file: one header line, then one record per step


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a).reshape(-1)]


def _config_dict(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}


def write_dataset(ds: DemoDataset, path: str | Path) -> str:
    """Write the dataset and return the sha256 of the file."""
    lines = [json.dumps({
        "type": "header",
        "env": _config_dict(ds.config),
        "expert": _config_dict(ds.expert),
        "norm": ds.norm_stats(),
        "n_episodes": len(ds.episodes),
        "n_discarded": ds.n_discarded,
        "seed": ds.seed,
    }, sort_keys=True)]
    for k, ep in enumerate(ds.episodes):
        for t in range(len(ep)):
            lines.append(json.dumps({
                "episode": k,
                "seed": ep.seed,
                "step": t,
                "obs_u": {"ego": _floats(ep.ego[0, t]), "con": _floats(ep.con[0, t])},
                "obs_v": {"ego": _floats(ep.ego[1, t]), "con": _floats(ep.con[1, t])},
                "act_u": _floats(ep.act[0, t]),
                "act_v": _floats(ep.act[1, t]),
                "plan_u": _floats(ep.plan[0, t]),
                "plan_v": _floats(ep.plan[1, t]),
            }, sort_keys=True))
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def _tupled(d: dict) -> dict:
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}


def read_dataset(path: str | Path) -> tuple[DemoDataset, dict]:
    """Load a dataset file; returns (dataset, header)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        rows: dict[int, list] = {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rows.setdefault(rec["episode"], []).append(rec)
    episodes = []
    for k in sorted(rows):
        recs = sorted(rows[k], key=lambda r: r["step"])
        ego = np.array([[r["obs_u"]["ego"] for r in recs], [r["obs_v"]["ego"] for r in recs]])
        con = np.array([[r["obs_u"]["con"] for r in recs], [r["obs_v"]["con"] for r in recs]])
        act = np.array([[r["act_u"] for r in recs], [r["act_v"] for r in recs]])
        plan = np.array([[r["plan_u"] for r in recs], [r["plan_v"] for r in recs]])
        episodes.append(Episode(recs[0]["seed"], ego, con, act, plan.reshape(2, len(recs), -1, 2)))
    ds = DemoDataset(EnvConfig(**_tupled(header["env"])), ExpertConfig(**header["expert"]),
                     episodes, header["n_discarded"], header["seed"])
    return ds, header
