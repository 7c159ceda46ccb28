"""Command-line entry point: data synthesis, training, evaluation and closed-loop simulation.

Every command reads an optional flat JSON config whose keys are the command's
options; flags given on the command line override the file. Outputs land in
``--out``. With a fixed seed every ``summary.json`` is byte-identical across
runs; wall-clock measurements are kept in separate files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .agent import AgentConfig, FeatureScaler, MicrogridEnv, check_meta, decoupled_q_rollout, model_meta, train
from .bench import LearnedPolicy, evaluate, write_records
from .microgrid import MicrogridParams, balance_residual, build_mpc_problem, sub_action_space
from .milp import BnbConfig
from .mpc import receding_horizon_run
from .neural import load_network, save_network
from .profiles import ProfileSet, SynthConfig, synthesize_split, write_split
from .sl import Dataset, SlConfig, generate_dataset, train_sl

log = logging.getLogger("mldrl")

DATA_OPTIONS = {"data": None, "synth_seed": 1, "days": 365}
DEFAULT_THRESHOLDS = {"RL": {"optimality_gap_pct": 5.0, "infeasibility_rate_per_1000": 50.0}}

COMMANDS: dict[str, dict] = {
    "synth-data": {f.name: f.default for f in fields(SynthConfig)},
    "gen-dataset": {"np": 4, "samples": 1000, "seed": 0, "node_limit": 100_000, "params": {}, **DATA_OPTIONS},
    "train-rl": {"np": 4, **{k: v for k, v in asdict(AgentConfig()).items()}, "params": {}, **DATA_OPTIONS},
    "train-sl": {"dataset": None, **asdict(SlConfig()), **DATA_OPTIONS},
    "evaluate": {"np": [4], "pool": 200, "seed": 7, "rl_model": [], "sl_model": [], "node_limit": 100_000,
                 "gap_floor": 1e-3, "params": {}, "thresholds": DEFAULT_THRESHOLDS, **DATA_OPTIONS},
    "simulate": {"policy": "optimal", "model": None, "np": 4, "steps": 48, "start": 0, "x0": None,
                 "split": "test", "node_limit": 100_000, "params": {}, **DATA_OPTIONS},
}

HELP = {
    "synth-data": "write synthetic train/test profile sets",
    "gen-dataset": "solve random states to optimality and store the binary labels",
    "train-rl": "train the decoupled Q-network",
    "train-sl": "train the supervised classifier on a labeled dataset",
    "evaluate": "compare learned policies against branch-and-bound on held-out states",
    "simulate": "closed-loop receding-horizon run with a chosen discrete policy",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _parse_value(default, text: str):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, dict):
        return json.loads(text)
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mldrl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "evaluate":
            p.add_argument("--assert", dest="assert_", action="store_true",
                           help="exit nonzero when a threshold is violated")
        for key, default in defaults.items():
            kw = {"dest": key, "default": argparse.SUPPRESS}
            if isinstance(default, list):
                kw.update(nargs="+", type=int if key == "np" else str)
            elif default is None:
                kw.update(type=str)
            else:
                kw.update(type=lambda t, d=default: _parse_value(d, t))
            p.add_argument(_flag(key), **kw)
    return parser


def resolve_options(command: str, config_path: str | None, overrides: dict) -> dict:
    """Defaults, then the config file, then command-line flags; unknown keys are usage errors."""
    defaults = COMMANDS[command]
    opts = json.loads(json.dumps(defaults))
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        for key, value in data.items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} for {command}")
            opts[key] = value
    opts.update(overrides)
    for key, default in defaults.items():
        value = opts[key]
        if isinstance(default, list) and not isinstance(value, list):
            opts[key] = [value]
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            opts[key] = float(value)
    return opts


def _build(cls, opts: dict):
    """Dataclass from the matching options; validation failures become usage errors."""
    try:
        return cls(**{f.name: opts[f.name] for f in fields(cls)})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__} options: {exc}") from None


def _params(opts: dict) -> MicrogridParams:
    try:
        return MicrogridParams.from_dict(opts.get("params") or {})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"params: {exc}") from None


def _profiles(opts: dict) -> tuple[ProfileSet, ProfileSet]:
    """Train and test profiles from ``data`` or, without it, the seeded synthetic split."""
    if opts["data"]:
        d = Path(opts["data"])
        try:
            return ProfileSet.load(d / "train"), ProfileSet.load(d / "test")
        except (OSError, ValueError) as exc:
            raise UsageError(f"data: {exc}") from None
    return synthesize_split(SynthConfig(seed=int(opts["synth_seed"]), days=int(opts["days"])))


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def _load_model(path: str):
    try:
        net, meta = load_network(path)
        N_p, params, scaler = check_meta(meta, net)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return net, meta, N_p, params, scaler


# ---------------------------------------------------------------- commands


def cmd_synth_data(opts: dict, out: Path) -> int:
    cfg = _build(SynthConfig, opts)
    train_set, test_set = synthesize_split(cfg)
    write_split(out, train_set, test_set, {"synth": asdict(cfg)})
    _write_json(out / "summary.json", {"synth": asdict(cfg), "train_steps": len(train_set),
                                       "test_steps": len(test_set),
                                       "train_mean": train_set.rows().mean(axis=0).tolist(),
                                       "test_mean": test_set.rows().mean(axis=0).tolist()})
    return 0


def cmd_gen_dataset(opts: dict, out: Path) -> int:
    params = _params(opts)
    train_set, _ = _profiles(opts)
    env = MicrogridEnv(params, int(opts["np"]), train_set)
    ds = generate_dataset(env, int(opts["samples"]), int(opts["seed"]), BnbConfig(node_limit=int(opts["node_limit"])),
                          progress=lambda i, n: log.info("draw %d, %d samples", i + 1, n) if (i + 1) % 100 == 0 else None)
    for s in ds.skipped:
        log.warning("skipped draw %d (k=%d): %s", s["draw"], s["k"], s["status"])
    ds.save(out / "dataset.json")
    labels = ds.labels()
    _write_json(out / "summary.json", {"N_p": ds.N_p, "samples": len(ds), "skipped": len(ds.skipped),
                                       "seed": ds.seed, "distinct_labels": int(np.unique(labels).size)})
    return 0


def cmd_train_rl(opts: dict, out: Path) -> int:
    params = _params(opts)
    train_set, _ = _profiles(opts)
    cfg = _build(AgentConfig, opts)
    env = MicrogridEnv(params, int(opts["np"]), train_set)

    def progress(e):
        if (e.episode + 1) % 50 == 0:
            log.info("episode %d reward %.3f loss %.4f xi %.2f", e.episode + 1, e.mean_reward, e.loss, e.xi)

    res = train(env, cfg, progress)
    meta = model_meta("rl", env, res.scaler, res.reward_scale, {"config": asdict(cfg)})
    save_network(res.net, out / "model.json", meta)
    _write_rows(out / "train_log.csv", res.log_rows())
    tail = res.log[-max(1, len(res.log) // 10):]
    _write_json(out / "summary.json", {
        "N_p": env.N_p, "episodes": cfg.episodes, "seed": cfg.seed,
        "reward_scale": asdict(res.reward_scale),
        "final_mean_reward": float(np.mean([e.mean_reward for e in tail])),
        "final_infeasible_episode_share": float(np.mean([e.infeasible for e in tail])),
        "aborted_episodes": int(sum(e.aborted for e in res.log)),
    })
    return 0


def cmd_train_sl(opts: dict, out: Path) -> int:
    if not opts["dataset"]:
        raise UsageError("train-sl needs a dataset (--dataset or the 'dataset' config key)")
    try:
        ds = Dataset.load(opts["dataset"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_set, _ = _profiles(opts)
    cfg = _build(SlConfig, opts)
    scaler = FeatureScaler.fit(ds.params, train_set, cfg.feature_set)
    res = train_sl(ds, scaler, cfg, lambda e: log.info("epoch %d loss %.4f holdout acc %s", e.epoch + 1, e.loss,
                                                       e.holdout_accuracy) if (e.epoch + 1) % 10 == 0 else None)
    env = MicrogridEnv(ds.params, ds.N_p, train_set)
    meta = model_meta("sl", env, scaler, None, {"config": asdict(cfg), "dataset_samples": len(ds)})
    save_network(res.net, out / "model.json", meta)
    _write_rows(out / "train_log.csv", [asdict(e) for e in res.log])
    _write_json(out / "summary.json", {"N_p": ds.N_p, "samples": len(ds), "holdout": int(res.holdout_index.size),
                                       "final_loss": res.log[-1].loss,
                                       "train_accuracy": res.log[-1].train_accuracy,
                                       "holdout_accuracy": res.holdout_accuracy})
    return 0


def check_thresholds(summary: dict, thresholds: dict) -> list[str]:
    """Violations of ``{method: {metric: upper bound}}`` over ``{N_p: {method: metrics}}``."""
    failures = []
    for N_p, methods in summary.items():
        for method, limits in thresholds.items():
            if method not in methods:
                continue
            for metric, bound in limits.items():
                value = methods[method].get(metric)
                if value is None or value > bound:
                    failures.append(f"N_p={N_p} {method} {metric}={value} exceeds {bound}")
    return failures


def cmd_evaluate(opts: dict, out: Path, assert_: bool = False) -> int:
    # load every artifact first so a bad path fails before any solving
    models = []
    for kind, key in (("RL", "rl_model"), ("SL", "sl_model")):
        for path in opts[key]:
            if not Path(path).is_file():
                raise UsageError(f"{key}: model artifact {path} not found")
            models.append((kind, *_load_model(path)))
    _, test_set = _profiles(opts)
    base_params = _params(opts)
    bnb = BnbConfig(node_limit=int(opts["node_limit"]))
    summary, timing, all_records = {}, {}, []
    for N_p in opts["np"]:
        mine = [m for m in models if m[3] == N_p]
        params = mine[0][4] if mine else base_params
        if any(m[4] != params for m in mine):
            raise UsageError(f"models for N_p={N_p} disagree on microgrid parameters")
        env = MicrogridEnv(params, N_p, test_set)
        methods = {}
        for kind, net, _, _, _, scaler in mine:
            name = kind if kind not in methods else f"{kind}{sum(k.startswith(kind) for k in methods) + 1}"
            methods[name] = LearnedPolicy(net, scaler, env)
        records, summaries = evaluate(env, methods, int(opts["pool"]), int(opts["seed"]), bnb, float(opts["gap_floor"]),
                                      progress=lambda i: log.info("N_p=%d state %d", N_p, i + 1) if (i + 1) % 20 == 0 else None)
        all_records += records
        summary[str(N_p)] = {s.method: s.deterministic() for s in summaries}
        timing[str(N_p)] = {s.method: s.timing() for s in summaries}
        for s in summaries:
            log.info("N_p=%d %s gap %s%% infeasible %.1f/1000 max %.1f ms", N_p, s.method, s.optimality_gap_pct,
                     s.infeasibility_rate_per_1000, s.time_max_ms)
    write_records(all_records, out / "records.csv")
    _write_json(out / "summary.json", {"pool": int(opts["pool"]), "seed": int(opts["seed"]), "N_p": summary})
    _write_json(out / "timing.json", {"N_p": timing})
    if assert_:
        failures = check_thresholds(summary, opts["thresholds"])
        for f in failures:
            print(f"threshold violated: {f}", file=sys.stderr)
        return 1 if failures else 0
    return 0


def cmd_simulate(opts: dict, out: Path) -> int:
    train_set, test_set = _profiles(opts)
    profiles = {"train": train_set, "test": test_set}.get(opts["split"])
    if profiles is None:
        raise UsageError(f"split must be 'train' or 'test', got {opts['split']!r}")
    policy_name = opts["policy"]
    if policy_name == "optimal":
        params, N_p = _params(opts), int(opts["np"])
        policy = "exact"
    elif policy_name in ("rl", "sl"):
        if not opts["model"]:
            raise UsageError(f"policy {policy_name} needs --model")
        net, _, N_p, params, scaler = _load_model(opts["model"])
        space = sub_action_space(params)

        def policy(chi):
            indices, _ = decoupled_q_rollout(net, scaler, chi, N_p, "greedy")
            # identical units are interchangeable; the canonical pattern satisfies the unit ordering
            return space.to_eps_d([space.canonical(int(i)) for i in indices])
    else:
        raise UsageError(f"policy must be optimal, rl or sl, got {policy_name!r}")
    steps, k0 = int(opts["steps"]), int(opts["start"])
    if k0 < 0 or k0 + steps + N_p > len(profiles):
        raise UsageError(f"start {k0} with {steps} steps runs past the {len(profiles)}-step profile")
    x0 = float(opts["x0"]) if opts["x0"] is not None else 0.5 * (params.x_b_min + params.x_b_max)
    problem = build_mpc_problem(params, N_p, order_units=True)
    traj = receding_horizon_run(problem, [x0], lambda k: profiles.window(k, N_p), k0, steps, policy,
                                BnbConfig(node_limit=int(opts["node_limit"])), state_names=("x_b",))
    traj.to_csv(out / "trajectory.csv")
    costs = [s.stage_cost for s in traj.steps]
    applied = [s for s in traj.steps if s.first is not None]
    residual = max((abs(balance_residual(np.concatenate([s.first.u_c, s.first.u_d]), s.gamma0)) for s in applied),
                   default=0.0)
    levels = np.array([s.x[0] for s in traj.steps])
    overshoot = float(max(0.0, np.max(levels - params.x_b_max), np.max(params.x_b_min - levels)))
    _write_json(out / "summary.json", {
        "policy": policy_name, "N_p": N_p, "steps": steps, "start": k0, "x0": x0,
        "total_cost": float(np.sum(costs)), "fallback_count": traj.fallback_count,
        "failed_steps": int(sum(s.first is None for s in traj.steps)),
        "max_balance_residual": float(residual), "max_storage_violation": overshoot,
    })
    print(f"fallback count: {traj.fallback_count}")
    return 0


HANDLERS = {
    "synth-data": cmd_synth_data, "gen-dataset": cmd_gen_dataset, "train-rl": cmd_train_rl,
    "train-sl": cmd_train_sl, "evaluate": cmd_evaluate, "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    ns = vars(args)
    overrides = {k: ns[k] for k in COMMANDS[args.command] if k in ns}
    try:
        opts = resolve_options(args.command, args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handler = HANDLERS[args.command]
        if args.command == "evaluate":
            return handler(opts, out, args.assert_)
        return handler(opts, out)
    except UsageError as exc:
        parser.error(f"{args.command}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
