"""Evaluation sweeps over variant x gain regime x failure mode, plus the collapse probe."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from ..autodiff import tensor as T
from ..config import ExperimentConfig, FailureSpec, RolloutConfig
from ..env import AGENTS
from ..variants import Variant
from .data import TrainingSet
from .rollout import rollout
from .train import Checkpoint, load_checkpoint

SUMMARY_COLUMNS = (
    "variant", "regime", "failure", "n", "success_rate",
    "trans_median", "trans_iqr", "rot_median", "rot_iqr",
    "mean_steps", "messages_per_inference",
)


def thread_cap(default: int = 1) -> int:
    raw = os.environ.get("LTOM_THREADS", "")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        return default


def _iqr(x) -> float:
    q75, q25 = np.percentile(x, [75, 25])
    return float(q75 - q25)


def summarize(records) -> dict:
    trans = np.array([r.metrics["trans_err"] for r in records])
    rot = np.array([r.metrics["rot_err"] for r in records])
    inf = sum(r.inference_steps for r in records)
    return {
        "n": len(records),
        "success_rate": float(np.mean([r.metrics["success"] for r in records])),
        "trans_median": float(np.median(trans)),
        "trans_iqr": _iqr(trans),
        "rot_median": float(np.median(rot)),
        "rot_iqr": _iqr(rot),
        "mean_steps": float(np.mean([r.steps for r in records])),
        "messages_per_inference": sum(r.messages for r in records) / max(inf, 1),
    }


@dataclass(frozen=True)
class Cell:
    variant: Variant
    regime: str  # "InD" or "OOD"
    failure: FailureSpec | None

    @property
    def failure_label(self) -> str:
        f = self.failure
        return "none" if f is None else f"freeze:{f.agent}:{f.start_step}:{f.duration}"


@dataclass
class SuiteReport:
    config_hash: str
    rows: list = field(default_factory=list)  # one summary dict per cell
    episodes: list = field(default_factory=list)  # one dict per episode
    absent: list = field(default_factory=list)  # variants without a checkpoint

    def row(self, variant, regime: str = "InD", failure: str = "none") -> dict | None:
        name = Variant.parse(variant).value
        for r in self.rows:
            if r["variant"] == name and r["regime"] == regime and r["failure"] == failure:
                return r
        return None

    def table(self) -> str:
        head = f"{'variant':<14}{'regime':<7}{'failure':<18}{'succ':>6}{'trans_med':>11}{'rot_med':>10}{'rot_iqr':>9}{'msg/inf':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r['variant']:<14}{r['regime']:<7}{r['failure']:<18}{r['success_rate']:>6.2f}"
                         f"{r['trans_median']:>11.4f}{r['rot_median']:>10.4f}{r['rot_iqr']:>9.4f}"
                         f"{r['messages_per_inference']:>9.2f}")
        for v in self.absent:
            lines.append(f"{v:<14}(absent: no checkpoint)")
        return "\n".join(lines)

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, jsonl_path = out / "summary.csv", out / "episodes.jsonl"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            w = csv.writer(fh)
            w.writerow(SUMMARY_COLUMNS)
            for r in self.rows:
                w.writerow([r[c] if isinstance(r[c], str) else repr(r[c]) for c in SUMMARY_COLUMNS])
        with open(jsonl_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", "config_hash": self.config_hash,
                                 "absent": self.absent}, sort_keys=True) + "\n")
            for e in self.episodes:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
        return csv_path, jsonl_path


def _resolve(ckpt) -> Checkpoint | None:
    if ckpt is None or isinstance(ckpt, Checkpoint):
        return ckpt
    path = Path(ckpt)
    return load_checkpoint(path) if (path / "meta.json").exists() else None


def evaluate_suite(
    checkpoints: Mapping,
    cfg: ExperimentConfig,
    regimes=("InD", "OOD"),
    failures=(None,),
    n_episodes: int | None = None,
    seed: int | None = None,
    threads: int | None = None,
) -> SuiteReport:
    """Roll out every (variant, regime, failure) cell on the same evaluation seeds.

    ``checkpoints`` maps variant names to checkpoint directories (or loaded
    checkpoints); missing or absent ones are listed in the report and skipped.
    """
    n_episodes = cfg.rollout.n_episodes if n_episodes is None else n_episodes
    seed = cfg.rollout.seed if seed is None else seed
    gains = {"InD": (1.0, 1.0), "OOD": tuple(cfg.eval.ood_gains)}
    report = SuiteReport(cfg.hash())
    loaded = {}
    for name, ck in checkpoints.items():
        variant = Variant.parse(name)
        ck = _resolve(ck)
        if ck is None:
            report.absent.append(variant.value)
        else:
            loaded[variant] = ck
    cells = [Cell(v, reg, f) for v in loaded for reg in regimes for f in failures]

    def run(cell: Cell):
        g_left, g_right = gains[cell.regime]
        rcfg = replace(cfg.rollout, variant=cell.variant.value, n_episodes=n_episodes, seed=seed,
                       g_left=g_left, g_right=g_right, failure=cell.failure)
        return rollout(loaded[cell.variant], rcfg)

    n_threads = thread_cap() if threads is None else threads
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    for cell, records in zip(cells, results):
        report.rows.append({"variant": cell.variant.value, "regime": cell.regime,
                            "failure": cell.failure_label, **summarize(records)})
        for r in records:
            report.episodes.append({"regime": cell.regime, "cell_failure": cell.failure_label,
                                    **r.summary()})
    return report


def collapse_probe(ckpt: Checkpoint, tset: TrainingSet, max_rows: int = 4096) -> dict:
    """Mean over dimensions of the batch variance of h_con, per agent."""
    if not ckpt.variant.decentralized:
        raise ValueError("the collapse probe needs per-agent consensus encoders")
    n = min(len(tset), max_rows)
    out = {}
    with T.no_grad():
        for i in AGENTS:
            h = ckpt.model.enc_con[i](ckpt.store, tset.con[i][:n]).data
            out[i] = float(np.mean(np.var(h, axis=0)))
    return out
