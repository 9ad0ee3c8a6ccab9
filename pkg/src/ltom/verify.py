"""Numerical verification battery: gradient oracles, consensus algebra, entropy, env symmetry.

Each check reports the worst error it saw against its tolerance, so a failing
run names the offending op or identity and by how much it missed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import OPS, ParamStore, Tensor, finite_diff_check
from .autodiff import tensor as T
from .autodiff.gradcheck import OP_PROBES, check_op
from .env import AGENTS, EnvConfig, ExpertConfig, mirror_state, reset, run_expert, step
from .nets import ConfidenceHead, DenoiserNet, MlpEncoder, TomPredictor, init_params
from .sheaf import (
    ConsensusBundle,
    SheafGraph,
    StabilityWarning,
    entropy,
    loss_conf,
    loss_nc,
    loss_tom,
    sync,
    verify_equivalence,
)

GRAD_TOL = 1e-4
EXACT_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_error) and self.max_error <= self.tolerance

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:<34} max_err={self.max_error:.3e}  tol={self.tolerance:.0e}{extra}"


# ---------------------------------------------------------------------------
# gradients


def check_ops(n_points: int = 10, seed: int = 0) -> list[CheckResult]:
    out = []
    for name in sorted(OPS):
        if name not in OP_PROBES:
            out.append(CheckResult(f"grad.op.{name}", math.inf, GRAD_TOL, "no probe registered"))
            continue
        try:
            err = check_op(name, n_points=n_points, seed=seed)
        except Exception as exc:  # a broken backward rule may raise instead of returning garbage
            out.append(CheckResult(f"grad.op.{name}", math.inf, GRAD_TOL, f"{type(exc).__name__}: {exc}"))
            continue
        out.append(CheckResult(f"grad.op.{name}", err, GRAD_TOL))
    return out


def _param_fn(store: ParamStore, path: str, forward):
    """Scalar function of one parameter tensor, every other parameter held fixed."""
    def f(t: Tensor) -> Tensor:
        saved = store.params[path]
        store.params[path] = t
        try:
            return forward()
        finally:
            store.params[path] = saved
    return f


def _worst_over(store: ParamStore, forward, inputs: dict) -> tuple[float, str]:
    """Max relative error over every parameter tensor of ``store`` and the given inputs."""
    worst, where = 0.0, ""
    for path in store.params:
        err = finite_diff_check(_param_fn(store, path, forward), store[path].data)
        if err > worst:
            worst, where = err, path
    for name, (fn, x) in inputs.items():
        err = finite_diff_check(fn, x)
        if err > worst:
            worst, where = err, name
    return worst, where


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return T.reduce("sum", out * w)


def check_nets(n_points: int = 10, seed: int = 0, batch: int = 3) -> list[CheckResult]:
    """Finite differences through each composed network, w.r.t. inputs and all parameters."""
    d_in, d = 6, 5
    enc = MlpEncoder("enc", d_in, d, (7, 7))
    tom = TomPredictor("tom", d, d, 4, 2)
    conf = ConfidenceHead((0, 1), d, 6, 4)
    den = DenoiserNet("den", 4, d, 8, 3, 4)
    results = []
    cases = {
        "grad.net.encoder": enc,
        "grad.net.tom_predictor": tom,
        "grad.net.confidence_head": conf,
        "grad.net.denoiser": den,
    }
    for name, net in cases.items():
        worst, where = 0.0, ""
        for k in range(n_points):
            rng = np.random.default_rng([seed, k, len(name)])
            store = init_params([net], seed=seed + k)
            for p in store.params.values():
                # move biases and gains off their init values so every path is exercised
                p.data = p.data + 0.1 * rng.standard_normal(p.shape)
            if net is enc:
                x = rng.standard_normal((batch, d_in))
                w = rng.standard_normal((batch, d))
                fwd = (lambda x=x, w=w, s=store: _scalar(enc(s, x), w))
                inputs = {"obs": ((lambda t, s=store, w=w: _scalar(enc(s, t), w)), x)}
            elif net is tom:
                hu, hv = rng.standard_normal((batch, d)), rng.standard_normal((batch, d))
                w = rng.standard_normal((batch, d))
                fwd = (lambda hu=hu, hv=hv, w=w, s=store: _scalar(tom(s, hu, hv), w))
                inputs = {"h_con_u": ((lambda t, s=store, hv=hv, w=w: _scalar(tom(s, t, hv), w)), hu),
                          "h_ego_v": ((lambda t, s=store, hu=hu, w=w: _scalar(tom(s, hu, t), w)), hv)}
            elif net is conf:
                h = rng.standard_normal((batch, d))
                w = rng.standard_normal((batch, 1))
                fwd = (lambda h=h, w=w, s=store: _scalar(conf(s, 0, h), w) + _scalar(conf(s, 1, h), w))
                inputs = {"h_con": ((lambda t, s=store, w=w: _scalar(conf(s, 1, t), w)), h)}
            else:
                x = rng.standard_normal((batch, 4))
                c = rng.standard_normal((batch, d))
                t = rng.integers(1, 50, size=batch)
                w = rng.standard_normal((batch, 4))
                fwd = (lambda x=x, c=c, t=t, w=w, s=store: _scalar(den(s, x, t, c), w))
                inputs = {"x_t": ((lambda a, s=store, c=c, t=t, w=w: _scalar(den(s, a, t, c), w)), x),
                          "cond": ((lambda a, s=store, x=x, t=t, w=w: _scalar(den(s, x, t, a), w)), c)}
            err, at = _worst_over(store, fwd, inputs)
            if err > worst:
                worst, where = err, at
        results.append(CheckResult(name, worst, GRAD_TOL, f"worst at {where}" if where else ""))
    return results


def check_losses(n_points: int = 10, seed: int = 0, batch: int = 3, d: int = 5) -> list[CheckResult]:
    """Finite differences of the three consensus losses w.r.t. their embedding/confidence inputs."""
    graph = SheafGraph.pair(d)
    worst = {"grad.loss.nc": 0.0, "grad.loss.tom": 0.0, "grad.loss.conf": 0.0}
    for k in range(n_points):
        rng = np.random.default_rng([seed, 7, k])
        hu, hv = rng.standard_normal((batch, d)), rng.standard_normal((batch, d))
        # keep confidences apart so the leader indicator is constant under the probe step
        cu = rng.uniform(0.55, 0.95, (batch, 1))
        cv = cu - rng.uniform(0.1, 0.4, (batch, 1))
        cv = np.where(rng.random((batch, 1)) < 0.5, cv, 1.0 - cv)
        preds = {(0, 1): TomPredictor("tom.0to1", d, d, 4, 2), (1, 0): TomPredictor("tom.1to0", d, d, 4, 2)}
        store = init_params(list(preds.values()), seed=seed + k)
        eu, ev = rng.standard_normal((batch, d)), rng.standard_normal((batch, d))

        R = {n: np.eye(d) + 0.3 * rng.standard_normal((d, d)) for n in AGENTS}

        def nc(t):
            return loss_nc(graph, ConsensusBundle({0: t, 1: hv}))

        def nc_map(t):
            g = SheafGraph.pair(d)
            g.restriction = {(0, (0, 1)): t, (1, (0, 1)): R[1]}
            return loss_nc(g, ConsensusBundle({0: hu, 1: hv}))

        def tom(t):
            return loss_tom(graph, preds, store, {0: t, 1: hv}, {0: eu, 1: ev}, stop_target=False)

        def tom_ego(t):
            return loss_tom(graph, preds, store, {0: hu, 1: hv}, {0: t, 1: ev}, stop_target=False)

        def conf_h(t):
            return loss_conf(graph, ConsensusBundle({0: t, 1: hv}, {0: cu, 1: cv}), 0.3, detach_target=False)

        def conf_c(t):
            return loss_conf(graph, ConsensusBundle({0: hu, 1: hv}, {0: t, 1: cv}), 0.3, detach_target=False)

        worst["grad.loss.nc"] = max(worst["grad.loss.nc"], finite_diff_check(nc, hu),
                                    finite_diff_check(nc_map, R[0]))
        worst["grad.loss.tom"] = max(worst["grad.loss.tom"], finite_diff_check(tom, hu),
                                     finite_diff_check(tom_ego, eu))
        worst["grad.loss.conf"] = max(worst["grad.loss.conf"], finite_diff_check(conf_h, hu),
                                      finite_diff_check(conf_c, cu))
    return [CheckResult(n, e, GRAD_TOL) for n, e in worst.items()]


# ---------------------------------------------------------------------------
# consensus algebra and entropy


def check_equivalence(n_draws: int = 1000, seed: int = 0, d: int = 32) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_draws):
        h_u, h_v = rng.standard_normal(d), rng.standard_normal(d)
        eta = rng.uniform(0.0, 0.5)
        worst = max(worst, verify_equivalence(h_u, h_v, eta))
    return CheckResult("consensus.operator_equivalence", worst, EXACT_TOL, f"{n_draws} draws")


def check_spectral(n_draws: int = 100, seed: int = 0, d: int = 32) -> list[CheckResult]:
    """Two-node sync: disagreement scales by (1 - 2 eta), node sum is kept, eta = 0.5 agrees."""
    rng = np.random.default_rng(seed)
    graph = SheafGraph.pair(d)
    decay = total = agree = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        for _ in range(n_draws):
            h = {0: rng.standard_normal(d), 1: rng.standard_normal(d)}
            eta = rng.uniform(0.01, 0.5)
            out = sync(graph, h, eta)
            decay = max(decay, float(np.max(np.abs((out[0] - out[1]) - (1 - 2 * eta) * (h[0] - h[1])))))
            total = max(total, float(np.max(np.abs((out[0] + out[1]) - (h[0] + h[1])))))
            half = sync(graph, h, 0.5)
            agree = max(agree, float(np.max(np.abs(half[0] - half[1]))))
    return [
        CheckResult("consensus.disagreement_decay", decay, EXACT_TOL),
        CheckResult("consensus.node_sum_preserved", total, EXACT_TOL),
        CheckResult("consensus.half_step_agreement", agree, EXACT_TOL),
    ]


def check_entropy(n_draws: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    c = rng.uniform(1e-3, 1 - 1e-3, n_draws)
    with T.no_grad():
        half = abs(entropy(np.array([0.5])).item() - math.log(2.0))
        sym = float(np.max(np.abs(entropy(c).data - entropy(1.0 - c).data)))
    return [CheckResult("entropy.half_is_ln2", half, EXACT_TOL),
            CheckResult("entropy.reflection_symmetry", sym, EXACT_TOL)]


# ---------------------------------------------------------------------------
# environment


def _mirror_action(a: np.ndarray) -> np.ndarray:
    return np.array([-a[0], a[1]])


def check_env(n_seeds: int = 20, seed: int = 0) -> list[CheckResult]:
    """Mirror equivariance of the step map, and zero rotation under the symmetric expert."""
    cfg = EnvConfig()
    rng = np.random.default_rng(seed)
    mirror_err = 0.0
    for s in range(n_seeds):
        state = reset(cfg, seed + s)
        for _ in range(30):
            a = rng.uniform(-cfg.a_max, cfg.a_max, (2, 2))
            a[:, 1] = np.abs(a[:, 1])  # mostly forward, so pushes happen
            nxt = step(state, cfg, a[0], a[1])
            mirrored = step(mirror_state(state), cfg, _mirror_action(a[1]), _mirror_action(a[0]))
            want = mirror_state(nxt)
            diff = max(float(np.max(np.abs(mirrored.block[:2] - want.block[:2]))),
                       abs(float(np.angle(np.exp(1j * (mirrored.block[2] - want.block[2]))))),
                       float(np.max(np.abs(mirrored.pushers - want.pushers))))
            mirror_err = max(mirror_err, diff)
            state = nxt
    rot = 0.0
    for s in range(n_seeds):
        _, _, dth = run_expert(cfg, seed + s, ExpertConfig(), noise=0.0, record=False)
        if dth.size:
            rot = max(rot, float(np.max(np.abs(dth))))
    return [CheckResult("env.mirror_equivariance", mirror_err, EXACT_TOL, f"{n_seeds} seeds x 30 steps"),
            CheckResult("env.symmetric_expert_rotation", rot, EXACT_TOL, f"{n_seeds} seeds")]


# ---------------------------------------------------------------------------


def run_battery(seed: int = 0, n_points: int = 10, n_equiv: int = 1000) -> list[CheckResult]:
    results = check_ops(n_points, seed)
    results += check_nets(n_points, seed)
    results += check_losses(n_points, seed)
    results.append(check_equivalence(n_equiv, seed))
    results += check_spectral(seed=seed)
    results += check_entropy(seed=seed)
    results += check_env(seed=seed)
    return results


def all_passed(results) -> bool:
    return all(r.passed for r in results)
