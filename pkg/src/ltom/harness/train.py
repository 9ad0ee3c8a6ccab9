"""Centralised training: per-agent diffusion cloning loss plus the weighted auxiliary losses."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import ParamStore, Tape, adam_step, load_params, read_arrays, save_params, write_arrays
from ..autodiff import tensor as T
from ..config import ExperimentConfig
from ..env import AGENTS
from ..sheaf import ConsensusBundle, loss_conf, loss_nc, loss_tom, loss_total
from ..variants import Variant
from .data import Normalizer, TrainingSet
from .model import PolicyModel, cond_vector, effective_weights

CURVE_COLUMNS = ("epoch", "L_bc", "L_nc", "L_tom", "L_conf", "L_tot")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class Trainer:
    """Owns the parameters, Adam state and batch RNG of one training run."""

    def __init__(self, cfg: ExperimentConfig, tset: TrainingSet, variant=None,
                 store: ParamStore | None = None):
        self.cfg = cfg
        self.tset = tset
        self.model = PolicyModel.from_config(cfg, variant)
        self.variant = self.model.variant
        self.weights = effective_weights(self.variant, cfg.sheaf)
        self.store = self.model.init(cfg.train.seed) if store is None else store
        self.active = self.model.active_params(self.weights)
        self.rng = np.random.default_rng(cfg.train.seed)
        self.epoch = 0
        self.step = 0
        self.curve: list[dict] = []
        # moving average of the trained parameters; checkpoints serve it for inference
        self.ema = ({n: self.store.params[n].data.copy() for n in self.active}
                    if cfg.train.ema_decay > 0 else None)

    # -- losses --------------------------------------------------------------

    def _aux(self, h_ego: dict, h_con: dict):
        """Auxiliary losses: live tensors for the weighted ones, logged values for all."""
        m, s, w, sc = self.model, self.store, self.weights, self.cfg.sheaf
        graph = m.graph(s)

        def nc():
            return loss_nc(graph, ConsensusBundle(dict(h_con)))

        def tom():
            return loss_tom(graph, m.tom, s, h_con, h_ego, stop_target=sc.stop_tom_target)

        def conf():
            c = {i: m.conf(s, i, h_con[i]) for i in AGENTS}
            return loss_conf(graph, ConsensusBundle(dict(h_con), c), w.lambda_ent,
                             detach_target=sc.detach_conf_target,
                             detach_weight=sc.detach_conf_weight, entropy_sign=sc.entropy_sign)

        specs = (("L_nc", w.alpha, nc, True),
                 ("L_tom", w.beta, tom, bool(m.tom)),
                 ("L_conf", w.gamma, conf, m.conf is not None))
        live, values = {}, {}
        for name, weight, fn, available in specs:
            if weight > 0:
                live[name] = fn()
                values[name] = live[name].item()
            elif available:
                with T.no_grad():
                    values[name] = fn().item()
            else:
                values[name] = math.nan
        return live, values

    def losses(self, idx: np.ndarray):
        """(training objective, logged component values) for one batch."""
        m, s, ts = self.model, self.store, self.tset
        if not self.variant.decentralized:
            cond = m.joint_cond(s, [ts.ego[i][idx] for i in AGENTS], [ts.con[i][idx] for i in AGENTS])
            x0 = np.concatenate([ts.act[i][idx] for i in AGENTS], axis=1)
            l_bc = m.policy("joint").training_loss(s, cond, x0, self.rng)
            nan = math.nan
            return l_bc, {"L_bc": l_bc.item(), "L_nc": nan, "L_tom": nan, "L_conf": nan, "L_tot": 0.0}
        h_ego, h_con, l_bc = {}, {}, None
        for i in AGENTS:
            h_ego[i], h_con[i] = m.embed(s, i, ts.ego[i][idx], ts.con[i][idx])
            li = m.policy(i).training_loss(s, cond_vector(h_ego[i], h_con[i]), ts.act[i][idx], self.rng)
            l_bc = li if l_bc is None else l_bc + li
        live, values = self._aux(h_ego, h_con)
        values["L_bc"] = l_bc.item()
        objective = l_bc
        if live:
            aux = loss_total(self.weights, live.get("L_nc"), live.get("L_tom"), live.get("L_conf"))
            values["L_tot"] = aux.item()
            objective = l_bc + aux
        else:
            values["L_tot"] = 0.0
        return objective, values

    # -- optimisation ---------------------------------------------------------

    def train_step(self, idx: np.ndarray) -> dict:
        with Tape() as tape:
            objective, values = self.losses(idx)
        if not math.isfinite(objective.item()):
            self._abort(f"non-finite loss {objective.item()} at epoch {self.epoch}, step {self.step}: {values}")
        self.store.zero_grad()
        tape.backward(objective, self.store)
        bad = [n for n in self.active if not np.all(np.isfinite(self.store.grads[n]))]
        if bad:
            self._abort(f"non-finite gradient at step {self.step} in: {', '.join(bad[:5])}")
        tc = self.cfg.train
        adam_step(self.store, tc.lr, tc.beta1, tc.beta2, tc.eps, names=self.active)
        if self.ema is not None:
            d = tc.ema_decay
            for n in self.active:
                self.ema[n] *= d
                self.ema[n] += (1.0 - d) * self.store.params[n].data
        self.step += 1
        return values

    def run_epoch(self) -> dict:
        n = len(self.tset)
        order = self.rng.permutation(n)
        bs = self.cfg.train.batch_size
        sums = dict.fromkeys(CURVE_COLUMNS[1:], 0.0)
        n_batches = 0
        for lo in range(0, n, bs):
            values = self.train_step(order[lo : lo + bs])
            for k in sums:
                sums[k] += values[k]
            n_batches += 1
        self.epoch += 1
        row = {"epoch": self.epoch, **{k: v / n_batches for k, v in sums.items()}}
        self.curve.append(row)
        return row

    def fit(self, until: int | None = None, abort_dir: str | Path | None = None, log=None) -> list[dict]:
        """Train until ``until`` epochs in total (default: the configured count)."""
        self._abort_dir = abort_dir
        until = self.cfg.train.epochs if until is None else until
        while self.epoch < until:
            row = self.run_epoch()
            if log is not None:
                log(row)
        return self.curve

    def _abort(self, message: str):
        path = None
        if getattr(self, "_abort_dir", None) is not None:
            # parameters are untouched by the failing step, so they are the last good ones
            path = Path(self._abort_dir) / "last_good"
            self.save(path)
            message += f"; last good checkpoint written to {path}"
        raise TrainingAborted(message, path)

    # -- persistence ------------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_params(self.store, path / "params.ltom")
        write_arrays(path / "optim.ltom", self.store.optim_dict())
        if self.ema is not None:
            write_arrays(path / "ema.ltom", self.ema)
        meta = {
            "variant": self.variant.value,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "norm": self.tset.norm.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            "curve": self.curve,
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def resume(cls, path: str | Path, tset: TrainingSet) -> "Trainer":
        ckpt = load_checkpoint(path, averaged=False)
        tr = cls(ckpt.config, tset, ckpt.variant, store=ckpt.store)
        tr.store.load_optim(read_arrays(Path(path) / "optim.ltom"))
        if tr.ema is not None:
            tr.ema = read_arrays(Path(path) / "ema.ltom")
        tr.rng.bit_generator.state = ckpt.meta["rng_state"]
        tr.epoch = ckpt.meta["epoch"]
        tr.step = ckpt.meta["step"]
        tr.curve = list(ckpt.meta["curve"])
        return tr


@dataclass
class Checkpoint:
    variant: Variant
    config: ExperimentConfig
    model: PolicyModel
    store: ParamStore
    norm: Normalizer
    meta: dict


def load_checkpoint(path: str | Path, averaged: bool = True) -> Checkpoint:
    """Load a checkpoint; with ``averaged`` the moving-average weights replace the raw ones."""
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    cfg = ExperimentConfig.from_dict(meta["config"])
    variant = Variant.parse(meta["variant"])
    model = PolicyModel.from_config(cfg, variant)
    store = load_params(path / "params.ltom")
    if averaged and (path / "ema.ltom").exists():
        for n, v in read_arrays(path / "ema.ltom").items():
            store.params[n].data = v
    expected = {p for net in model.nets() for p in net.param_shapes()}
    if set(store.params) != expected:
        raise ValueError(f"{path}: parameters do not match a {variant.value} model")
    return Checkpoint(variant, cfg, model, store, Normalizer(meta["norm"]), meta)


def as_variant(ckpt: Checkpoint, variant) -> Checkpoint:
    """Reuse a checkpoint for another variant that trains on exactly the same objective.

    LATENT_TOM and LATENT_TOM_SL differ only at inference (the sync step), so
    one training run serves both.
    """
    variant = Variant.parse(variant)
    sheaf = ckpt.config.sheaf
    same_loss = effective_weights(variant, sheaf) == effective_weights(ckpt.variant, sheaf)
    model = PolicyModel.from_config(ckpt.config, variant)
    same_params = {p for net in model.nets() for p in net.param_shapes()} == set(ckpt.store.params)
    if not (same_loss and same_params):
        raise ValueError(f"a {ckpt.variant.value} checkpoint cannot stand in for {variant.value}")
    return Checkpoint(variant, ckpt.config, model, ckpt.store, ckpt.norm,
                      {**ckpt.meta, "variant": variant.value, "trained_as": ckpt.variant.value})


def write_curve(curve: list[dict], path: str | Path, header: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row["epoch"], *(repr(float(row[k])) for k in CURVE_COLUMNS[1:])])


def read_curve(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in CURVE_COLUMNS[1:]}} for r in rows]


def train(cfg: ExperimentConfig, tset: TrainingSet, variant=None,
          out_dir: str | Path | None = None, log=None) -> Trainer:
    """Train one variant to completion; writes checkpoint + loss curve when ``out_dir`` is given."""
    tr = Trainer(cfg, tset, variant)
    tr.fit(abort_dir=out_dir, log=log)
    if out_dir is not None:
        tr.save(out_dir)
        write_curve(tr.curve, Path(out_dir) / "loss_curve.csv",
                    header=f"variant={tr.variant.value} config_hash={cfg.hash()}")
    return tr
