"""Demonstrations -> normalised (observation history, action chunk) training pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..env import AGENTS, DemoDataset


@dataclass
class Normalizer:
    """Per-dimension standardisation of ego/con observation frames and actions."""

    stats: dict  # {"ego"|"con"|"act": {"mean": [...], "std": [...]}}

    def _ms(self, key):
        s = self.stats[key]
        return np.asarray(s["mean"], dtype=np.float64), np.asarray(s["std"], dtype=np.float64)

    def frames(self, key: str, x: np.ndarray) -> np.ndarray:
        """Standardise ``x`` whose last axis is a whole number of frames of ``key``."""
        mean, std = self._ms(key)
        k = x.shape[-1] // mean.size
        return (x - np.tile(mean, k)) / np.tile(std, k)

    def unframes(self, key: str, x: np.ndarray) -> np.ndarray:
        mean, std = self._ms(key)
        k = x.shape[-1] // mean.size
        return x * np.tile(std, k) + np.tile(mean, k)

    def to_dict(self) -> dict:
        return self.stats


def history(frames: np.ndarray, t: int, n: int) -> np.ndarray:
    """Concatenate frames t-n+1 .. t (earliest first), repeating frame 0 before the start."""
    idx = [max(t - k, 0) for k in range(n - 1, -1, -1)]
    return np.concatenate([frames[i] for i in idx])


def chunk(actions: np.ndarray, t: int, horizon: int) -> np.ndarray:
    """Actions t .. t+horizon-1, zero-padded past the end of the episode."""
    out = np.zeros((horizon, actions.shape[-1]))
    seg = actions[t : t + horizon]
    out[: len(seg)] = seg
    return out.reshape(-1)


@dataclass
class TrainingSet:
    ego: np.ndarray  # (2, N, ego_obs * obs_horizon), normalised
    con: np.ndarray  # (2, N, con_obs * obs_horizon), normalised
    act: np.ndarray  # (2, N, 2 * horizon), normalised
    norm: Normalizer

    def __len__(self) -> int:
        return self.act.shape[1]


def build_training_set(ds: DemoDataset, horizon: int, obs_horizon: int,
                       norm: Normalizer | None = None) -> TrainingSet:
    """Chunk targets are the expert's noise-free plan from each step when the
    dataset carries one long enough, else the recorded labels that followed."""
    norm = Normalizer(ds.norm_stats()) if norm is None else norm
    ego, con, act = ([[] for _ in AGENTS] for _ in range(3))
    for ep in ds.episodes:
        use_plan = ep.plan is not None and ep.plan.shape[2] >= horizon
        for t in range(len(ep)):
            for i in AGENTS:
                ego[i].append(history(ep.ego[i], t, obs_horizon))
                con[i].append(history(ep.con[i], t, obs_horizon))
                if use_plan:
                    act[i].append(ep.plan[i, t, :horizon].reshape(-1))
                else:
                    act[i].append(chunk(ep.act[i], t, horizon))
    ego, con, act = (np.array(x) for x in (ego, con, act))
    return TrainingSet(norm.frames("ego", ego), norm.frames("con", con), norm.frames("act", act), norm)
