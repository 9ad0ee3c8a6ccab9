"""Experiment configuration: one JSON document, dotted-path overrides, a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .env import EnvConfig, ExpertConfig
from .nets import NetDims
from .sheaf import LossWeights
from .variants import Variant


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_episodes: int = 150
    seed: int = 0


@dataclass
class DiffusionConfig:
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.02
    horizon: int = 8  # actions per sampled chunk
    exec_steps: int = 4  # actions executed before re-planning

    def __post_init__(self):
        if not 1 <= self.exec_steps <= self.horizon:
            raise ConfigError("need 1 <= exec_steps <= horizon")


@dataclass
class SheafConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    lambda_ent: float = 0.01
    eta: float = 0.5
    n_sync_steps: int = 1
    edges: list = field(default_factory=lambda: [[0, 1]])
    restriction: str = "identity"  # or "learned"
    stop_tom_target: bool = True
    detach_conf_target: bool = True
    detach_conf_weight: bool = False
    entropy_sign: float = 1.0

    def __post_init__(self):
        if self.restriction not in ("identity", "learned"):
            raise ConfigError(f"restriction must be 'identity' or 'learned', got {self.restriction!r}")
        if self.n_sync_steps < 1:
            raise ConfigError("n_sync_steps must be >= 1")
        if self.entropy_sign not in (1.0, -1.0):
            raise ConfigError("entropy_sign must be +1 or -1")
        if [sorted(e) for e in self.edges] != [[0, 1]]:
            raise ConfigError("the two-agent task supports exactly one edge [0, 1]")
        self.weights()

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.lambda_ent, self.eta)


@dataclass
class TrainConfig:
    variant: str = "LATENT_TOM"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    ema_decay: float = 0.0  # 0 disables the parameter moving average used at inference

    def __post_init__(self):
        Variant.parse(self.variant)
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")


@dataclass
class FailureSpec:
    agent: int = 1
    start_step: int = 12
    duration: int = 20

    def __post_init__(self):
        if self.agent not in (0, 1):
            raise ConfigError(f"failure agent must be 0 or 1, got {self.agent}")
        if self.start_step < 0 or self.duration < 1:
            raise ConfigError("failure window needs start_step >= 0 and duration >= 1")

    def frozen(self, step: int) -> bool:
        return self.start_step <= step < self.start_step + self.duration

    @classmethod
    def parse(cls, text: str) -> "FailureSpec":
        """'agent:start:duration', e.g. '1:12:20'."""
        try:
            agent, start, duration = (int(x) for x in text.split(":"))
        except ValueError:
            raise ConfigError(f"failure spec must look like AGENT:START:DURATION, got {text!r}") from None
        return cls(agent, start, duration)


@dataclass
class RolloutConfig:
    variant: str = "LATENT_TOM"
    n_episodes: int = 50
    g_left: float = 1.0
    g_right: float = 1.0
    failure: FailureSpec | None = None
    seed: int = 100_000  # evaluation seeds are seed, seed + 1, ...
    deterministic: bool = False
    concurrent_agents: bool = False

    def __post_init__(self):
        Variant.parse(self.variant)


@dataclass
class EvalConfig:
    variants: list = field(default_factory=lambda: [v.value for v in Variant])
    ood_gains: list = field(default_factory=lambda: [1.0, 0.5])
    failure: FailureSpec = field(default_factory=FailureSpec)


@dataclass
class PathsConfig:
    dataset: str = "runs/demos.jsonl"
    checkpoints: str = "runs/checkpoints"
    reports: str = "runs/reports"


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: NetDims = field(default_factory=NetDims)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sheaf: SheafConfig = field(default_factory=SheafConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return to_dict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return build(cls, data)


# ---------------------------------------------------------------------------
# dict <-> dataclass


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    return obj


def _dataclass_in(tp):
    """The dataclass inside ``tp`` (handles ``X | None``), else None."""
    if dataclasses.is_dataclass(tp):
        return tp
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        for arg in typing.get_args(tp):
            if dataclasses.is_dataclass(arg):
                return arg
    return None


def build(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key '{where}'")
        tp = hints[key]
        sub = _dataclass_in(tp)
        if sub is not None and isinstance(value, dict):
            value = build(sub, value, where + ".")
        elif typing.get_origin(tp) is tuple or tp is tuple:
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply 'a.b.c=value' strings to a nested dict (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for i, part in enumerate(parts[:-1]):
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"cannot set '{key}': '{'.'.join(parts[: i + 1])}' is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: str | Path | None = None, overrides=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    base = to_dict(ExperimentConfig())
    merged = _merge(base, data)
    return ExperimentConfig.from_dict(apply_overrides(merged, overrides))


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
