"""Command-line front end.

Exit codes: 0 success, 1 numerical/internal failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import _io, planning
from .critic import StepSchedule
from .driver import RnacConfig, rnac_train
from .rmdp import (
    FeatureMaps,
    LogLinearPolicy,
    NominalModel,
    build_garnet,
    build_gridworld,
    random_features,
    tabular_features,
    with_restart,
)
from .uncertainty import UncertaintyConfig
from .verify import run_checks


class UsageError(Exception):
    pass


def bundled_model_path() -> Path:
    return Path(str(resources.files("rnac") / "data" / "garnet5.json"))


def _load_model(path) -> NominalModel:
    path = Path(path or bundled_model_path())
    if not path.exists():
        raise UsageError(f"model file not found: {path}")
    return NominalModel.load(path)


def _load_config(args) -> dict:
    if not args.config:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    return json.loads(path.read_text())


def _merged(args, file_cfg: dict, key: str, default=None):
    """Flag value if given, else config-file value, else ``default``."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    return file_cfg.get(key, default)


def _uncertainty(args, file_cfg) -> UncertaintyConfig:
    base = file_cfg.get("uncertainty", {})
    return UncertaintyConfig(
        kind=_merged(args, base, "kind", "none"),
        delta=_merged(args, base, "delta", 0.0),
        m=_merged(args, base, "m", 2),
    )


def _features(model: NominalModel, args, file_cfg) -> FeatureMaps:
    kind = _merged(args, file_cfg, "features", "tabular")
    if kind == "tabular":
        return tabular_features(model.n_states, model.n_actions)
    if kind == "random":
        d_v = int(_merged(args, file_cfg, "dv", 3))
        d_p = int(_merged(args, file_cfg, "dp", 4))
        return random_features(int(_merged(args, file_cfg, "seed", 0)), model.n_states,
                               model.n_actions, d_v, d_p)
    raise UsageError(f"unknown feature kind {kind!r}")


def _write(path, text: str):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_env(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.kind == "garnet":
        model = build_garnet(seed, args.states, args.actions, args.branching, args.gamma)
    else:
        model = build_gridworld(args.width, args.height, args.slip, args.gamma)
        if args.restart:
            model = with_restart(model)
    text = model.to_json()
    _write(args.out, text)
    print(_io.content_hash(text), file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_solve(args) -> int:
    file_cfg = _load_config(args)
    model = _load_model(_merged(args, file_cfg, "model"))
    cfg = _uncertainty(args, file_cfg)
    tol = float(_merged(args, file_cfg, "tol", 1e-10))
    sol = planning.robust_value_iteration_optimal(model, cfg, tol=tol)
    out = {"v_star": sol.values, "pi_star": sol.policy, "iterations": sol.iterations, "tol": tol}
    _write(_merged(args, file_cfg, "out"), _io.dumps(out) + "\n")
    return 0


def _rnac_config(args, file_cfg, cfg: UncertaintyConfig) -> RnacConfig:
    def sched(prefix):
        # flags are --critic-c0 etc.; the config file nests {"critic_step": {"c0": ..}}
        base = file_cfg.get(f"{prefix}_step", {})
        c0, k0 = getattr(args, f"{prefix}_c0", None), getattr(args, f"{prefix}_k0", None)
        return StepSchedule(float(base.get("c0", 1.0) if c0 is None else c0),
                            float(base.get("k0", 100.0) if k0 is None else k0))

    return RnacConfig(
        T=int(_merged(args, file_cfg, "T", 100)),
        K=int(_merged(args, file_cfg, "K", 2000)),
        N=int(_merged(args, file_cfg, "N", 2000)),
        schedule_kind=_merged(args, file_cfg, "schedule", file_cfg.get("schedule_kind", "constant")),
        eta0=_merged(args, file_cfg, "eta0"),
        uncertainty=cfg,
        seed=int(_merged(args, file_cfg, "seed", 0)),
        log_every=int(_merged(args, file_cfg, "log_every", 1)),
        critic_step=sched("critic"),
        actor_step=sched("actor"),
        M=_merged(args, file_cfg, "M"),
    )


def cmd_train(args) -> int:
    file_cfg = _load_config(args)
    model = _load_model(_merged(args, file_cfg, "model"))
    cfg = _uncertainty(args, file_cfg)
    features = _features(model, args, file_cfg)
    config = _rnac_config(args, file_cfg, cfg)
    policy, record = rnac_train(model, features, config, oracle=not args.no_oracle)
    out = _merged(args, file_cfg, "out")
    _write(out, record.to_csv(include_timing=not args.no_timing))
    summary = dict(record.summary, theta=policy.theta)
    summary_path = args.summary or (str(Path(out).with_suffix(".json")) if out else None)
    if summary_path:
        Path(summary_path).write_text(_io.dumps(summary) + "\n")
    else:
        print(_io.dumps(summary), file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    try:
        model = _load_model(args.model)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"[FAIL] invariants/model_invariants: {e}")
        return 1
    results = run_checks(model, only=args.only, seed=args.seed or 0)
    if not results:
        raise UsageError(f"no check matches {args.only!r}")
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def _sweep_point(model_json: str, feature_desc: dict, delta: float, base: dict):
    model = NominalModel.from_json(model_json)
    if feature_desc["kind"] == "tabular":
        f = tabular_features(model.n_states, model.n_actions)
    else:
        f = random_features(feature_desc["seed"], model.n_states, model.n_actions,
                            feature_desc["dv"], feature_desc["dp"])
    m = base["uncertainty"]["m"]
    conf = RnacConfig.from_dict(dict(base, uncertainty={"kind": "ds", "delta": delta, "m": m}))
    policy, _ = rnac_train(model, f, conf, oracle=False)
    return policy.theta


def cmd_sweep(args) -> int:
    file_cfg = _load_config(args)
    deltas = _merged(args, file_cfg, "deltas", [0.0, 0.05, 0.1])
    if isinstance(deltas, str):
        deltas = [float(x) for x in deltas.split(",") if x.strip()]
    if not deltas:
        raise UsageError("delta grid is empty")
    model = _load_model(_merged(args, file_cfg, "model"))
    m = int(_merged(args, file_cfg, "m", 2))
    cfg = UncertaintyConfig("ds", 0.0, m)
    config = _rnac_config(args, file_cfg, cfg)
    features = _features(model, args, file_cfg)
    fk = {"kind": _merged(args, file_cfg, "features", "tabular"),
          "seed": config.seed, "dv": features.d_v, "dp": features.d_p}
    base = config.to_dict()
    grid = sorted(set([0.0] + [float(d) for d in deltas]))
    for d in grid:
        UncertaintyConfig("ds", d, m)  # validate before any training
    jobs = int(args.jobs or 1)
    text = model.to_json()
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            thetas = list(ex.map(_sweep_point, [text] * len(grid), [fk] * len(grid), grid,
                                 [base] * len(grid)))
    else:
        thetas = [_sweep_point(text, fk, d, base) for d in grid]
    policies = {d: LogLinearPolicy(th, features, model.n_actions) for d, th in zip(grid, thetas)}

    lines = ["delta,robust_value,nominal_value,gap,baseline_robust_value"]
    for d in [float(x) for x in deltas]:
        ucfg = UncertaintyConfig("ds", d, m)
        pol = policies[d]
        v_rob = float(model.rho @ planning.robust_policy_value(model, pol, ucfg))
        v_nom = float(model.rho @ planning.policy_value(model, pol))
        v_star = float(model.rho @ planning.robust_value_iteration_optimal(model, ucfg).values)
        v_base = float(model.rho @ planning.robust_policy_value(model, policies[0.0], ucfg))
        lines.append(",".join(_io.fmt_float(x) for x in (d, v_rob, v_nom, v_star - v_rob, v_base)))
    _write(_merged(args, file_cfg, "out"), "\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--config", help="JSON run config; flags override its values")

    unc = argparse.ArgumentParser(add_help=False)
    unc.add_argument("--kind", choices=["ds", "ipm", "rcontam", "none"])
    unc.add_argument("--delta", type=float)
    unc.add_argument("--m", type=int)

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--model")
    train.add_argument("--T", type=int)
    train.add_argument("--K", type=int)
    train.add_argument("--N", type=int)
    train.add_argument("--schedule", choices=["constant", "geometric"])
    train.add_argument("--eta0", type=float)
    train.add_argument("--M", type=float, help="mismatch coefficient for the geometric schedule")
    train.add_argument("--features", choices=["tabular", "random"])
    train.add_argument("--dv", type=int)
    train.add_argument("--dp", type=int)
    train.add_argument("--log-every", dest="log_every", type=int)
    for prefix in ("critic", "actor"):
        train.add_argument(f"--{prefix}-c0", dest=f"{prefix}_c0", type=float)
        train.add_argument(f"--{prefix}-k0", dest=f"{prefix}_k0", type=float)

    p = argparse.ArgumentParser(prog="rnac", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-env", parents=[common], help="generate a model file")
    g.add_argument("--kind", choices=["garnet", "gridworld"], default="garnet")
    g.add_argument("--states", type=int, default=5)
    g.add_argument("--actions", type=int, default=3)
    g.add_argument("--branching", type=int, default=2)
    g.add_argument("--gamma", type=float, default=0.9)
    g.add_argument("--width", type=int, default=3)
    g.add_argument("--height", type=int, default=3)
    g.add_argument("--slip", type=float, default=0.1)
    g.add_argument("--restart", action="store_true", help="teleport from the goal to rho")
    g.set_defaults(func=cmd_gen_env)

    s = sub.add_parser("solve", parents=[common, unc], help="robust value iteration")
    s.add_argument("--model")
    s.add_argument("--tol", type=float)
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", parents=[common, unc, train], help="run RNAC")
    t.add_argument("--summary", help="summary JSON path (default: --out with .json)")
    t.add_argument("--no-timing", action="store_true", help="write 0 for wallclock_ms")
    t.add_argument("--no-oracle", action="store_true", help="skip oracle values and gaps")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", parents=[common], help="run the property checks")
    v.add_argument("--model")
    v.add_argument("--only", help="check group or name")
    v.set_defaults(func=cmd_verify)

    w = sub.add_parser("sweep", parents=[common, train], help="train across a delta grid")
    w.add_argument("--deltas", help="comma-separated radii, e.g. 0,0.05,0.1")
    w.add_argument("--m", type=int)
    w.add_argument("--jobs", type=int)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError, json.JSONDecodeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
