"""Command-line interface: ``fppdrift {gen,train,simulate,eval,bound}``.

Training runs read a flat ``key = value`` config file (``#`` starts a
comment, lists are comma separated); command-line flags override file
values. Every run writes the fully resolved config next to its outputs, and
feeding that file back reproduces the run.

Exit codes: 0 success, 1 validation or input error, 2 numerical divergence.
Errors are also printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import gen_synthetic1, gen_synthetic23, load_bundle, load_snapshots, save_bundle, save_snapshots, synthetic1_drift
from .evaluation import (
    SinkhornConfig,
    Theorem4Params,
    coupled_error_experiment,
    sinkhorn,
    theorem4_bound,
)
from .nn_core import load_params, save_params
from .sde import SampleBatch, SdeConfig, ShiftedDrift, rollout
from .seeding import derive_seed
from .train import TrainConfig, config_dict, train_fpp

logger = logging.getLogger("fppdrift")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# key -> (parser, default); TrainConfig fields plus run plumbing
_RUN_KEYS = {
    "data_dir": (str, None),
    "out_dir": (str, None),
    "checkpoint_every": (int, 0),
    "eval_epsilon": (float, None),
    "eval_replicates": (int, 1),
}


def _parse_list(cast):
    def parse(text):
        text = str(text).strip()
        if text in ("", "none", "None"):
            return None
        return tuple(cast(v) for v in text.split(",") if v.strip())

    return parse


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(cast):
    def parse(text):
        t = str(text).strip()
        return None if t in ("", "none", "None") else cast(t)

    return parse


_TRAIN_PARSERS = {
    "iters": int,
    "critic_steps": int,
    "lr": float,
    "lr_g": _optional(float),
    "lr_f": _optional(float),
    "lr_final_frac": float,
    "alpha": float,
    "observed_indices": _parse_list(int),
    "hessian_mode": str,
    "detach_path": _parse_bool,
    "trapezoid": str,
    "node_stride": int,
    "g_hidden": _parse_list(int),
    "f_hidden": _parse_list(int),
    "sn_iters": int,
    "boundary_scale": float,
    "boundary_per_time": _parse_bool,
    "seed": int,
}


def read_config_text(text: str) -> dict[str, str]:
    out, errors = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key = value")
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    if errors:
        raise ConfigError(errors)
    return out


def resolve_run_config(raw: dict[str, str]):
    """Validate raw string values; returns ``(TrainConfig, run_options)``."""
    errors, train_kw, run = [], {}, {k: d for k, (_, d) in _RUN_KEYS.items()}
    for key, value in raw.items():
        if key in _TRAIN_PARSERS:
            try:
                parsed = _TRAIN_PARSERS[key](value)
            except (TypeError, ValueError) as exc:
                errors.append(f"{key}: {exc}")
                continue
            if parsed is not None or key in ("lr_g", "lr_f", "observed_indices"):
                train_kw[key] = parsed
        elif key in _RUN_KEYS:
            cast = _RUN_KEYS[key][0]
            try:
                run[key] = None if str(value).strip() in ("", "none", "None") else cast(value)
            except ValueError as exc:
                errors.append(f"{key}: {exc}")
        else:
            errors.append(f"unknown key {key!r}")
    cfg = None
    # field checks run even when other keys failed, so every problem is reported at once
    try:
        probe = TrainConfig.__new__(TrainConfig)
        for f in fields(TrainConfig):
            setattr(probe, f.name, train_kw.get(f.name, f.default))
        errors.extend(probe.validate())
    except TypeError as exc:
        errors.append(str(exc))
    if run["data_dir"] is None:
        errors.append("data_dir is required")
    if run["out_dir"] is None:
        errors.append("out_dir is required")
    if run["checkpoint_every"] is not None and run["checkpoint_every"] < 0:
        errors.append("checkpoint_every must be >= 0")
    if run["eval_replicates"] is not None and run["eval_replicates"] < 1:
        errors.append("eval_replicates must be >= 1")
    if errors:
        raise ConfigError(errors)
    cfg = TrainConfig(**train_kw)
    return cfg, run


def format_config(cfg: TrainConfig, run: dict) -> str:
    lines = ["# resolved fppdrift run configuration"]
    for key, value in {**run, **config_dict(cfg)}.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


# -- commands ------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.dataset == "syn1":
        bundle = gen_synthetic1(args.dim, args.n, args.seed)
    elif args.dataset in ("syn2", "syn3"):
        bundle = gen_synthetic23(int(args.dataset[-1]), args.dim, args.n, args.seed)
    else:
        raise ConfigError([f"unknown dataset {args.dataset!r}"])
    written = save_bundle(bundle, args.out)
    print(json.dumps({"written": [str(p) for p in written]}))
    return 0


def evaluate_generator(bundle, g, cfg: TrainConfig, eval_indices, sk: SinkhornConfig, replicates: int = 1) -> dict:
    """Roll the drift out from the test batch at ``m_0`` and score each eval time."""
    m0 = (cfg.observed_indices or bundle.train_indices)[0]
    x0 = bundle.test[m0].points
    idx = [t for t in eval_indices if t in bundle.test]
    if not idx:
        return {}
    start = SampleBatch(m0, np.tile(x0, (replicates, 1)))
    scfg = SdeConfig(bundle.sigma, bundle.dt, max(idx) - m0, derive_seed(cfg.seed, "eval"))
    snaps = rollout(start, g, scfg, [t - m0 for t in idx])
    out = {}
    for t, s in zip(idx, snaps):
        res = sinkhorn(s, bundle.test[t], sk)
        out[str(t)] = res.to_dict()
    return out


def cmd_train(args) -> int:
    raw = read_config_text(Path(args.config).read_text()) if args.config else {}
    for flag, key in (("alpha", "alpha"), ("hessian", "hessian_mode"), ("iters", "iters"), ("seed", "seed"),
                      ("data", "data_dir"), ("out", "out_dir"), ("lr", "lr")):
        v = getattr(args, flag)
        if v is not None:
            raw[key] = str(v)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    cfg, run = resolve_run_config(raw)
    data_dir = Path(run["data_dir"])
    if not (data_dir / "metadata.json").exists():
        raise ConfigError([f"dataset directory {data_dir} has no metadata.json"])
    bundle = load_bundle(data_dir)
    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(format_config(cfg, run))
    every = run["checkpoint_every"] or 0
    ckpt_dir = out / "checkpoints"

    def on_iteration(i, report):
        log_fh.write(json.dumps(report.log_record(i)) + "\n")
        if every and (i + 1) % every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            save_params(report.g, ckpt_dir / f"g_iter{i + 1}.json")

    with open(out / "train_log.jsonl", "w") as log_fh:
        report = train_fpp(bundle, cfg, on_iteration=on_iteration)
    save_params(report.g, out / "g.json")
    for n, f in enumerate(report.critics, start=1):
        save_params(f, out / f"critic_{n}.json")
    if report.boundary is not None:
        bs = report.boundary if isinstance(report.boundary, list) else [report.boundary]
        json.dump([b.to_dict() for b in bs], open(out / "boundary.json", "w"), indent=2)
    sk = SinkhornConfig(epsilon=run["eval_epsilon"])
    ev = evaluate_generator(bundle, report.g, cfg, bundle.eval_indices, sk, run["eval_replicates"])
    (out / "eval_report.json").write_text(json.dumps(ev, indent=2))
    print(json.dumps({"out_dir": str(out), "eval": {t: r["value"] for t, r in ev.items()}}))
    return 0


def cmd_simulate(args) -> int:
    g = load_params(args.checkpoint)
    batches = load_snapshots(args.x0)
    x0 = batches[0]
    record = [int(r) for r in args.record.split(",")] if args.record else [args.steps]
    if any(r > args.steps or r < 0 for r in record):
        raise ConfigError([f"record entries must lie in [0, {args.steps}]"])
    cfg = SdeConfig(args.sigma, args.dt, max(args.steps, 1), args.seed)
    snaps = rollout(x0, g, cfg, sorted(record))
    save_snapshots(snaps, args.out)
    print(json.dumps({"out": args.out, "t_index": [s.time_index for s in snaps]}))
    return 0


def cmd_eval(args) -> int:
    pred = {b.time_index: b for b in load_snapshots(args.pred)}
    truth = {b.time_index: b for b in load_snapshots(args.truth)}
    sk = SinkhornConfig(epsilon=args.epsilon, debias=not args.plain)
    if len(pred) == 1 and len(truth) == 1:
        pairs = [(next(iter(pred.values())), next(iter(truth.values())))]
    else:
        common = sorted(set(pred) & set(truth))
        if not common:
            raise ConfigError(["prediction and truth share no t_index"])
        pairs = [(pred[t], truth[t]) for t in common]
    results = []
    for p, t in pairs:
        r = sinkhorn(p, t, sk).to_dict()
        r["t_index"] = t.time_index
        r["seeds"] = None
        results.append(r)
    out = results[0] if len(results) == 1 else results
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_bound(args) -> int:
    p = Theorem4Params(args.eps, args.K, args.L, args.T, args.dt, args.ex0sq)
    out = {"bound": theorem4_bound(p)}
    out["params"] = {"eps_gen": p.eps_gen, "K": p.K, "L": p.L, "T": p.T, "dt": p.dt, "ex0_sq": p.ex0_sq}
    if args.coupled is not None:
        n_steps = int(round(args.T / args.dt))
        g_r = synthetic1_drift(args.dim)
        g_f = ShiftedDrift(g_r, np.full(args.dim, args.coupled))
        res = coupled_error_experiment(g_r, g_f, SdeConfig(args.sigma, args.dt, n_steps, args.seed), args.n,
                                       L=args.L, K=args.K, dim=args.dim)
        out["coupled"] = {
            "empirical_error": res.empirical_error,
            "bound": res.bound,
            "discrete_bound": res.discrete_bound,
            "eps_gen": res.eps_gen,
            "grid_resolution": res.grid_resolution,
            "seed": args.seed,
        }
    print(json.dumps(out, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fppdrift", description="Learn SDE drifts from snapshot data.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--dataset", required=True, choices=["syn1", "syn2", "syn3"])
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a drift network")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--alpha", type=float)
    p.add_argument("--hessian", choices=["laplacian", "full"])
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="roll a trained drift forward")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x0", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--record", help="comma separated step indices (default: last step)")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="Sinkhorn W2 between two snapshot files")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--plain", action="store_true", help="plan transport cost instead of the debiased divergence")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bound", help="evaluate the drift error bound")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--K", type=float, required=True)
    p.add_argument("--L", type=float, required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--ex0sq", type=float, default=0.0)
    p.add_argument("--coupled", type=float, metavar="SHIFT", help="also run the coupled experiment with this drift shift")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bound)
    return ap


def _fail(code: int, kind: str, message: str, details=None) -> int:
    payload = {"error": kind, "message": message}
    if details:
        payload["details"] = details
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(1, "validation", str(exc), exc.errors)
    except FloatingPointError as exc:
        return _fail(2, "divergence", str(exc))
    except (ValueError, FileNotFoundError, OSError) as exc:
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
