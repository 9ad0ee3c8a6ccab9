"""``ltom`` command line: gen-data, train, rollout, eval, verify.

Exit codes: 0 success, 2 I/O or configuration error, 3 training abort,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, FailureSpec, load_config
from .variants import ALL_VARIANTS, Variant

EXIT_OK, EXIT_IO, EXIT_ABORT, EXIT_VERIFY = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON experiment config (defaults used when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable, e.g. --set train.seed=7")


def _load(args) -> ExperimentConfig:
    return load_config(args.config, args.overrides)


def _checkpoint_dir(cfg: ExperimentConfig, variant: Variant) -> Path:
    return Path(cfg.paths.checkpoints) / variant.value


def _training_set(cfg: ExperimentConfig, dataset: str | None):
    from .env import read_dataset
    from .harness import build_training_set

    ds, _ = read_dataset(dataset or cfg.paths.dataset)
    return build_training_set(ds, cfg.diffusion.horizon, cfg.model.obs_horizon)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .env import gen_dataset, write_dataset

    cfg = _load(args)
    out = Path(args.out or cfg.paths.dataset)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = gen_dataset(cfg.env, cfg.data.n_episodes, cfg.data.seed, cfg.expert)
    digest = write_dataset(ds, out)
    n_steps = sum(len(e) for e in ds.episodes)
    print(f"episodes={len(ds.episodes)} discarded={ds.n_discarded} steps={n_steps}")
    print(f"sha256={digest}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import TrainingAborted, train

    overrides = list(args.overrides)
    if args.variant:
        overrides.append(f"train.variant={Variant.parse(args.variant).value}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    variant = Variant.parse(cfg.train.variant)
    out = Path(args.out) if args.out else _checkpoint_dir(cfg, variant)
    tset = _training_set(cfg, args.dataset)

    def log(row):
        if not args.quiet:
            print(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)

    try:
        train(cfg, tset, variant, out_dir=out, log=log)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    print(f"wrote {out} (config_hash={cfg.hash()})")
    return EXIT_OK


def _failure(text: str | None) -> FailureSpec | None:
    return FailureSpec.parse(text) if text else None


def cmd_rollout(args) -> int:
    from .harness import load_checkpoint, rollout, summarize

    cfg = _load(args)
    variant = Variant.parse(args.variant)
    ckpt = load_checkpoint(args.checkpoint or _checkpoint_dir(cfg, variant))
    gains = tuple(cfg.eval.ood_gains) if args.ood else (1.0, 1.0)
    rcfg = replace(cfg.rollout, variant=variant.value, g_left=gains[0], g_right=gains[1],
                   failure=_failure(args.failure),
                   n_episodes=args.episodes or cfg.rollout.n_episodes,
                   seed=cfg.rollout.seed if args.seed is None else args.seed,
                   deterministic=args.deterministic or cfg.rollout.deterministic)
    records = rollout(ckpt, rcfg)
    summary = summarize(records)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", "config_hash": cfg.hash(), **summary}, sort_keys=True) + "\n")
            for r in records:
                fh.write(json.dumps(r.summary(), sort_keys=True) + "\n")
        print(f"wrote {out}")
    print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import evaluate_suite

    cfg = _load(args)
    names = args.variants or list(cfg.eval.variants)
    variants = [Variant.parse(v) for v in names]
    checkpoints = {v.value: _checkpoint_dir(cfg, v) for v in variants}
    regimes = ("InD", "OOD") if args.ood else ("InD",)
    failures = (None,) if not args.failure else (None, FailureSpec.parse(args.failure))
    report = evaluate_suite(checkpoints, cfg, regimes=regimes, failures=failures,
                            n_episodes=args.episodes, seed=args.seed)
    out = Path(args.out or cfg.paths.reports)
    csv_path, jsonl_path = report.write(out)
    print(f"config_hash={report.config_hash}")
    print(report.table())
    print(f"wrote {csv_path} and {jsonl_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import all_passed, run_battery

    results = run_battery(seed=args.seed)
    ok = all_passed(results)
    if args.json:
        print(json.dumps({"passed": ok, "checks": [r.to_dict() for r in results]}, indent=1))
    else:
        for r in results:
            print(r.line())
        failed = [r.name for r in results if not r.passed]
        print("all checks passed" if ok else f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="ltom", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)
    known = ", ".join(v.value for v in ALL_VARIANTS)

    p = sub.add_parser("gen-data", help="collect expert demonstrations", formatter_class=fmt)
    _common(p)
    p.add_argument("--out", default=None, help="dataset path; unset means paths.dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant", formatter_class=fmt)
    _common(p)
    p.add_argument("--variant", default=None, help=f"one of {known}; unset means train.variant")
    p.add_argument("--seed", type=int, default=None, help="training seed; unset means train.seed")
    p.add_argument("--dataset", default=None, help="dataset path; unset means paths.dataset")
    p.add_argument("--out", default=None, help="checkpoint directory; unset means paths.checkpoints/VARIANT")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch loss lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="roll out one trained variant", formatter_class=fmt)
    _common(p)
    p.add_argument("--variant", required=True, help=f"one of {known}")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory; unset means paths.checkpoints/VARIANT")
    p.add_argument("--ood", action="store_true", help="use the asymmetric eval.ood_gains")
    p.add_argument("--failure", default=None, metavar="AGENT:START:DURATION", help="freeze one agent")
    p.add_argument("--episodes", type=int, default=None, help="episode count; unset means rollout.n_episodes")
    p.add_argument("--seed", type=int, default=None, help="first episode seed; unset means rollout.seed")
    p.add_argument("--deterministic", action="store_true", help="sample without injected noise")
    p.add_argument("--out", default=None, help="per-episode JSON-lines output")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="evaluate variants across regimes", formatter_class=fmt)
    _common(p)
    p.add_argument("--variants", nargs="+", default=None, help="variants to evaluate; unset means eval.variants")
    p.add_argument("--ood", action="store_true", help="add the OOD gain regime to InD")
    p.add_argument("--failure", default=None, metavar="AGENT:START:DURATION",
                   help="add cells with this freeze next to the no-failure ones")
    p.add_argument("--episodes", type=int, default=None, help="episodes per cell; unset means rollout.n_episodes")
    p.add_argument("--seed", type=int, default=None, help="first episode seed; unset means rollout.seed")
    p.add_argument("--out", default=None, help="report directory; unset means paths.reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the numerical verification battery", formatter_class=fmt)
    p.add_argument("--json", action="store_true", help="emit machine-readable results")
    p.add_argument("--seed", type=int, default=0, help="seed for the random probe points")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        # ValueError covers config errors, bad variant names and failure specs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
