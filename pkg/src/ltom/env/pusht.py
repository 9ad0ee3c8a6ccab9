"""Quasi-static two-pusher Push-T surrogate.

The block is pushed from behind at two contact points on its rear face, one
per agent.  Agent 0 ("left") and agent 1 ("right") are named as seen looking
back at the pushers from the goal, which makes a stronger left push turn the
block counter-clockwise:

    d_i   = g_i * (forward travel of pusher i past the face)
    shift = (d_L + d_R) / 2 along the block heading
    dtheta = kappa * (d_L - d_R)

Units are metres and radians in the unit-square workspace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

LEFT, RIGHT = 0, 1
AGENTS = (LEFT, RIGHT)
EGO_DIM = 5
CON_DIM = 8


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class EnvConfig:
    g_left: float = 1.0
    g_right: float = 1.0
    contact_radius: float = 0.05
    kappa: float = 2.0  # rad per metre of differential push
    a_max: float = 0.02
    max_steps: int = 300
    sigma_con: float = 0.01
    seed: int = 0
    # layout
    half_depth: float = 0.05  # block centre to rear face
    half_span: float = 0.06  # lateral offset of each contact point
    home_gap: float = 0.08  # pushers start this far behind their contact points
    nominal_heading: float = math.pi / 2
    heading_jitter: float = 0.2
    start_x: tuple = (0.35, 0.65)
    start_y: tuple = (0.15, 0.30)
    goal_dist: tuple = (0.25, 0.40)
    # evaluation thresholds (strict less-than)
    success_trans: float = 0.03
    success_rot: float = 0.1

    def __post_init__(self):
        if self.g_left <= 0 or self.g_right <= 0:
            raise ValueError("side gains must be positive")
        if self.sigma_con < 0:
            raise ValueError("sigma_con must be nonnegative")

    @property
    def gains(self) -> tuple[float, float]:
        return (self.g_left, self.g_right)

    @property
    def symmetric(self) -> bool:
        return self.g_left == self.g_right

    def with_gains(self, g_left: float, g_right: float) -> "EnvConfig":
        return replace(self, g_left=g_left, g_right=g_right)


@dataclass(frozen=True)
class PushTState:
    block: np.ndarray  # (x, y, theta)
    goal: np.ndarray  # (gx, gy, theta_g)
    pushers: np.ndarray  # (2, 2)
    last_actions: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    step: int = 0
    wall_hits: int = 0


@dataclass(frozen=True)
class Observation:
    ego: np.ndarray  # pusher x, y, last action x, y, contact flag
    con: np.ndarray  # block x, y, sin, cos, goal x, y, sin, cos (+ per-agent noise)


def heading(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def lateral(theta: float) -> np.ndarray:
    return np.array([-math.sin(theta), math.cos(theta)])


def contact_point(block: np.ndarray, cfg: EnvConfig, agent: int) -> np.ndarray:
    theta = block[2]
    side = -1.0 if agent == LEFT else 1.0
    return block[:2] - cfg.half_depth * heading(theta) + side * cfg.half_span * lateral(theta)


def contact_offsets(state: PushTState, cfg: EnvConfig, agent: int) -> tuple[float, float, float]:
    """(gap behind the face, lateral offset, distance) of a pusher from its contact point."""
    theta = state.block[2]
    rel = state.pushers[agent] - contact_point(state.block, cfg, agent)
    gap = -float(rel @ heading(theta))
    lat = float(rel @ lateral(theta))
    return gap, lat, float(math.hypot(rel[0], rel[1]))


def in_contact(state: PushTState, cfg: EnvConfig, agent: int) -> bool:
    return contact_offsets(state, cfg, agent)[2] <= cfg.contact_radius


def reset(cfg: EnvConfig, seed: int) -> PushTState:
    """Random start pose; the goal lies straight ahead and keeps the start orientation."""
    rng = np.random.default_rng(seed)
    theta = cfg.nominal_heading + rng.uniform(-cfg.heading_jitter, cfg.heading_jitter)
    x = rng.uniform(*cfg.start_x)
    y = rng.uniform(*cfg.start_y)
    dist = rng.uniform(*cfg.goal_dist)
    block = np.array([x, y, wrap_angle(theta)])
    goal_xy = block[:2] + dist * heading(block[2])
    goal = np.array([goal_xy[0], goal_xy[1], block[2]])
    home = np.stack(
        [contact_point(block, cfg, a) - cfg.home_gap * heading(block[2]) for a in AGENTS]
    )
    return PushTState(block=block, goal=goal, pushers=home)


def clamp_action(a, cfg: EnvConfig) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=np.float64), -cfg.a_max, cfg.a_max)


def step(state: PushTState, cfg: EnvConfig, a_u, a_v) -> PushTState:
    actions = np.stack([clamp_action(a_u, cfg), clamp_action(a_v, cfg)])
    theta = state.block[2]
    f = heading(theta)
    pushes = np.zeros(2)
    pushers = state.pushers + actions
    engaged = []
    for i, g in zip(AGENTS, cfg.gains):
        gap, _, dist = contact_offsets(state, cfg, i)
        if dist > cfg.contact_radius:
            continue
        engaged.append(i)
        travel = float(actions[i] @ f)
        excess = max(0.0, travel - max(gap, 0.0))
        pushes[i] = g * excess
    block = state.block.copy()
    block[:2] = block[:2] + 0.5 * (pushes[LEFT] + pushes[RIGHT]) * f
    block[2] = wrap_angle(theta + cfg.kappa * (pushes[LEFT] - pushes[RIGHT]))
    hits = state.wall_hits
    clamped = np.clip(block[:2], 0.0, 1.0)
    if np.any(clamped != block[:2]):
        hits += 1
        block[:2] = clamped
    # an engaged pusher rides on its face: whatever the face did not absorb
    # (gain < 1, the other side pushing less) leaves it on the face, not inside the block
    f_new = heading(block[2])
    for i in engaged:
        ahead = float((pushers[i] - contact_point(block, cfg, i)) @ f_new)
        if ahead > 0.0:
            pushers[i] = pushers[i] - ahead * f_new
    clamped_p = np.clip(pushers, 0.0, 1.0)
    if np.any(clamped_p != pushers):
        hits += 1
        pushers = clamped_p
    return PushTState(block=block, goal=state.goal, pushers=pushers,
                      last_actions=actions, step=state.step + 1, wall_hits=hits)


def _pose_features(pose: np.ndarray) -> list[float]:
    return [pose[0], pose[1], math.sin(pose[2]), math.cos(pose[2])]


def observe(state: PushTState, cfg: EnvConfig, agent_id: int, rng: np.random.Generator) -> Observation:
    """Exact ego part; shared-scene part with this agent's own observation noise."""
    if agent_id not in AGENTS:
        raise KeyError(f"unknown agent {agent_id!r}")
    ego = np.array([
        *state.pushers[agent_id],
        *state.last_actions[agent_id],
        1.0 if in_contact(state, cfg, agent_id) else 0.0,
    ])
    con = np.array(_pose_features(state.block) + _pose_features(state.goal))
    con = con + cfg.sigma_con * rng.standard_normal(CON_DIM)
    return Observation(ego=ego, con=con)


def metrics(state: PushTState, cfg: EnvConfig) -> dict:
    trans = float(np.linalg.norm(state.block[:2] - state.goal[:2]))
    rot = abs(wrap_angle(state.block[2] - state.goal[2]))
    return {
        "trans_err": trans,
        "rot_err": rot,
        "success": bool(trans < cfg.success_trans and rot < cfg.success_rot),
    }


def mirror_state(state: PushTState, axis_x: float = 0.5) -> PushTState:
    """Reflect across the vertical line x = axis_x and swap the two agents."""

    def mx(p):
        p = np.array(p, dtype=np.float64)
        p[..., 0] = 2.0 * axis_x - p[..., 0]
        return p

    def mpose(pose):
        out = mx(pose)
        out[2] = wrap_angle(math.pi - pose[2])
        return out

    la = state.last_actions.copy()
    la[:, 0] = -la[:, 0]
    return PushTState(block=mpose(state.block), goal=mpose(state.goal),
                      pushers=mx(state.pushers)[::-1].copy(), last_actions=la[::-1].copy(),
                      step=state.step, wall_hits=state.wall_hits)
