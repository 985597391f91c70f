"""Command-line entry point: train | eval | verify | oracle | plotdata.

Settings come from an INI-style config file (sections [env], [agent], [run])
overridden by command-line flags; every effective value is echoed into the run
manifest so any command can be reproduced from the manifest alone. The
``verify`` suites return exit code 0 only when every pinned tolerance holds.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import autodiff as ad
from .agent import AgentConfig, OracleQPolicy, RecurrentPolicy, run_equivariance_suite
from .envs import CarFlag1dConfig, CarFlag2dConfig, export_pomdp, make_env
from .pomdp import (
    HistoryMdp,
    check_invariance,
    exact_q,
    save_tables,
    verify_belief_invariance,
    verify_value_invariance,
)

RUN_ROOT_ENV = "EQUIPOMDP_RUN_ROOT"

# Pinned acceptance tolerances for the verification suites.
EQUIVARIANCE_TOL = 1e-8
BELIEF_TOL = 1e-12
VALUE_TOL = 1e-9
GRADCHECK_TOL = 1e-4


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config file handling.
# ---------------------------------------------------------------------------

ENV_KEYS = {
    "kind": str,
    "half_size": int,
    "grid_size": int,
    "offset": int,
    "info_region_size": int,
    "max_steps": int,
}
AGENT_KEYS = {
    "variant": str, "lstm_init": str, "n_envs": int, "n_steps": int,
    "discount": float, "learning_rate": float, "value_coef": float,
    "entropy_coef": float, "grad_clip": float, "total_steps": int,
    "eval_interval": int, "eval_episodes": int, "eval_greedy": bool,
    "lstm_fields": int, "head_fields": int, "conv_fields": str,
    "lstm_single_tanh": bool, "feed_prev_action": bool,
}
RUN_KEYS = {"seed": int, "out": str, "group": str}
# [architecture] is informational output in manifests: layer list with
# representation annotations; its keys are not read back.
SECTIONS = {"env": ENV_KEYS, "agent": AGENT_KEYS, "run": RUN_KEYS,
            "architecture": None}


def _coerce(key: str, raw: str, want):
    if want is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean {key}={raw!r}")
    try:
        return want(raw)
    except ValueError as e:
        raise UsageError(f"cannot parse {key}={raw!r} as {want.__name__}") from e


def load_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file {path} not found")
    out = {section: {} for section in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise UsageError(f"unknown config section [{section}]")
        schema = SECTIONS[section]
        if schema is None:  # informational section, not read back
            continue
        for key, raw in parser.items(section):
            if key not in schema:
                raise UsageError(f"unknown config key {key!r} in section [{section}]")
            out[section][key] = _coerce(key, raw, schema[key])
    return out


def _parse_conv_fields(raw) -> tuple:
    if isinstance(raw, tuple):
        return raw
    try:
        return tuple(int(x) for x in str(raw).split(",") if x.strip())
    except ValueError as e:
        raise UsageError(f"cannot parse conv_fields={raw!r}") from e


def build_configs(args) -> tuple[object, AgentConfig, dict]:
    """Merge defaults, config file, and flags (flags win) into typed configs."""
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {
        "env": {}, "agent": {}, "run": {}}

    env_over = dict(file_cfg["env"])
    for flag, key in (("env", "kind"), ("half_size", "half_size"),
                      ("grid_size", "grid_size"), ("offset", "offset"),
                      ("info_region_size", "info_region_size"),
                      ("max_steps", "max_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            env_over[key] = value
    kind = env_over.pop("kind", None)
    if kind is None:
        raise UsageError("no environment selected; pass --env or set [env] kind")
    try:
        if kind == "carflag1d":
            env_over.pop("grid_size", None)
            env_over.pop("info_region_size", None)
            env_over = {("info_offset" if k == "offset" else k): v
                        for k, v in env_over.items()}
            env_cfg = CarFlag1dConfig(**env_over)
        elif kind == "carflag2d":
            env_over.pop("half_size", None)
            env_over = {("info_offset" if k == "offset" else k): v
                        for k, v in env_over.items()}
            env_cfg = CarFlag2dConfig(**env_over)
        else:
            raise UsageError(f"unknown env kind {kind!r} (carflag1d or carflag2d)")
    except ValueError as e:
        raise UsageError(str(e)) from e

    agent_over = dict(file_cfg["agent"])
    for flag, key in (("agent", "variant"), ("lstm_init", "lstm_init"),
                      ("n_envs", "n_envs"), ("n_steps", "n_steps"),
                      ("gamma", "discount"), ("lr", "learning_rate"),
                      ("value_coef", "value_coef"), ("entropy_coef", "entropy_coef"),
                      ("grad_clip", "grad_clip"), ("steps", "total_steps"),
                      ("eval_interval", "eval_interval"),
                      ("eval_episodes", "eval_episodes"),
                      ("eval_greedy", "eval_greedy"),
                      ("lstm_fields", "lstm_fields"), ("head_fields", "head_fields"),
                      ("conv_fields", "conv_fields"),
                      ("lstm_single_tanh", "lstm_single_tanh"),
                      ("feed_prev_action", "feed_prev_action")):
        value = getattr(args, flag, None)
        if value is not None:
            agent_over[key] = value
    run_over = dict(file_cfg["run"])
    for flag in ("seed", "out", "group"):
        value = getattr(args, flag, None)
        if value is not None:
            run_over[flag] = value
    seed = run_over.get("seed", 0)
    if "conv_fields" in agent_over:
        agent_over["conv_fields"] = _parse_conv_fields(agent_over["conv_fields"])
    try:
        agent_cfg = AgentConfig(seed=seed, **agent_over)
    except ValueError as e:
        raise UsageError(str(e)) from e

    expected_group = "reflection2" if kind == "carflag1d" else "c4"
    group = run_over.get("group", "auto")
    if group not in ("auto", expected_group):
        raise UsageError(
            f"group {group!r} does not match {kind} (needs {expected_group}); "
            "the equivariant agent requires the domain's own symmetry group")
    run_over["group"] = expected_group
    run_over["seed"] = seed
    return env_cfg, agent_cfg, run_over


def default_out_dir(kind: str, agent_cfg: AgentConfig) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{kind}-{agent_cfg.variant}-s{agent_cfg.seed}"


# ---------------------------------------------------------------------------
# Manifests.
# ---------------------------------------------------------------------------

def write_manifest(path, env_cfg, agent_cfg: AgentConfig, run: dict,
                   architecture: list[str] | None = None) -> None:
    parser = configparser.ConfigParser()
    kind = "carflag1d" if isinstance(env_cfg, CarFlag1dConfig) else "carflag2d"
    env_items = {"kind": kind}
    for key, value in asdict(env_cfg).items():
        out_key = "offset" if key == "info_offset" else key
        if out_key in ENV_KEYS:
            env_items[out_key] = str(value)
    parser["env"] = env_items
    agent_items = {}
    for key, value in asdict(agent_cfg).items():
        if key == "seed":
            continue
        if key == "conv_fields":
            value = ",".join(str(v) for v in value)
        agent_items[key] = str(value)
    parser["agent"] = agent_items
    parser["run"] = {k: str(v) for k, v in run.items()}
    if architecture:
        parser["architecture"] = {f"layer{i}": line
                                  for i, line in enumerate(architecture)}
    with open(path, "w") as f:
        parser.write(f)


def read_manifest(path):
    cfg = load_config_file(path)

    class _Args:
        pass

    args = _Args()
    args.config = str(path)
    return build_configs(args)


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    env_cfg, agent_cfg, run = build_configs(args)
    kind = "carflag1d" if isinstance(env_cfg, CarFlag1dConfig) else "carflag2d"
    out_dir = Path(run.get("out") or default_out_dir(kind, agent_cfg))
    out_dir.mkdir(parents=True, exist_ok=True)
    run["out"] = str(out_dir)
    probe = RecurrentPolicy(env_cfg, agent_cfg, np.random.default_rng(0))
    write_manifest(out_dir / "manifest.ini", env_cfg, agent_cfg, run,
                   architecture=probe.describe())
    result = agent_mod.train(env_cfg, agent_cfg, out_dir)
    last = result.rows[-1] if result.rows else None
    print(f"trained {agent_cfg.total_steps} steps over {result.episodes} episodes "
          f"in {result.wall_seconds:.1f}s")
    if last is not None:
        print(f"final eval: step={last[0]} success_rate={last[2]:.3f} "
              f"mean_return={last[3]:.3f}")
    print(f"curve: {result.curve_path}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    env_cfg, agent_cfg, run = read_manifest(run_dir / "manifest.ini")
    checkpoint = args.checkpoint
    if checkpoint in ("best", "final"):
        checkpoint = run_dir / f"{checkpoint}.ckpt"
    policy = RecurrentPolicy(env_cfg, agent_cfg, np.random.default_rng(0))
    policy.load_state(ad.load_checkpoint(checkpoint))
    seed = args.seed if args.seed is not None else agent_cfg.seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 55)))
    state_rng = (np.random.default_rng(np.random.SeedSequence((seed, 56)))
                 if agent_cfg.lstm_init == "random" else None)
    success, mean_return = agent_mod.evaluate(
        policy, env_cfg, args.episodes, rng, greedy=args.greedy, state_rng=state_rng)
    print(f"episodes={args.episodes} success_rate={success:.4f} "
          f"mean_return={mean_return:.4f}")
    if args.dump_trace:
        from .envs import episode_trace
        env = make_env(env_cfg, np.random.default_rng((seed, 57)))
        actions = []
        runner = agent_mod.PolicyRunner(policy, greedy=args.greedy, state_rng=state_rng)
        obs = env.reset()
        runner.reset()
        while True:
            a = runner.act(obs, rng)
            actions.append(a)
            obs, _, term, trunc = env.step(a)
            if term or trunc:
                break
        lines = episode_trace(make_env(env_cfg, np.random.default_rng((seed, 57))), actions)
        Path(args.dump_trace).write_text("\n".join(lines) + "\n")
        print(f"trace written to {args.dump_trace}")
    return 0


def _verify_env_tables(args):
    env_cfg, _, _ = build_configs(args)
    return export_pomdp(env_cfg, discount=args.gamma)


def cmd_verify(args) -> int:
    suite = {"lemma1": "belief", "belief-invariance": "belief",
             "theorem1": "value", "value-invariance": "value",
             "equivariance": "equivariance", "invariance": "invariance",
             "gradcheck": "gradcheck"}.get(args.suite)
    if suite is None:
        raise UsageError(f"unknown verify suite {args.suite!r}")
    t0 = time.perf_counter()

    if suite == "equivariance":
        worst = run_equivariance_suite(networks=args.networks, histories=args.histories,
                                       max_len=args.max_len, seed=args.seed or 0,
                                       lstm_init=args.lstm_init or "zero")
        passed = worst["max"] < EQUIVARIANCE_TOL
        print(f"RESULT equivariance passed={passed} actor={worst['actor']:.3e} "
              f"critic={worst['critic']:.3e} tolerance={EQUIVARIANCE_TOL:.1e}")
    elif suite == "invariance":
        pomdp, binding, _ = _verify_env_tables(args)
        report = check_invariance(pomdp, binding)
        for line in report.lines()[:40]:
            print(line)
        passed = report.passed
    elif suite == "belief":
        pomdp, binding, _ = _verify_env_tables(args)
        report = verify_belief_invariance(pomdp, binding, depth=args.depth,
                                          tolerance=BELIEF_TOL)
        for line in report.lines():
            print(line)
        passed = report.passed
    elif suite == "value":
        pomdp, binding, _ = _verify_env_tables(args)
        report = verify_value_invariance(pomdp, binding, horizon=args.horizon,
                                         tolerance=VALUE_TOL)
        for line in report.lines():
            print(line)
        passed = report.passed
    else:  # gradcheck
        battery = ad.primitive_gradcheck_battery(args.seed or 0)
        loss_err = agent_mod.a2c_loss_gradcheck(args.seed or 0)
        worst = max(max(battery.values()), loss_err)
        for name in sorted(battery):
            print(f"gradcheck {name}: {battery[name]:.3e}")
        print(f"gradcheck a2c_loss: {loss_err:.3e}")
        passed = worst < GRADCHECK_TOL
        print(f"RESULT gradcheck passed={passed} max_rel_err={worst:.3e} "
              f"tolerance={GRADCHECK_TOL:.1e}")
    print(f"elapsed {time.perf_counter() - t0:.2f}s")
    return 0 if passed else 1


def cmd_oracle(args) -> int:
    env_cfg, _, _ = build_configs(args)
    out_dir = Path(args.out or "oracle-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    pomdp, binding, maps = export_pomdp(env_cfg, discount=args.gamma)
    solution = exact_q(pomdp, horizon=args.horizon, node_budget=args.node_budget)
    save_tables(out_dir / "model.tables", pomdp)
    with open(out_dir / "qtable.txt", "w") as f:
        f.write(f"# optimal action values, horizon {args.horizon}, "
                f"discount %.17g\n" % pomdp.discount)
        for h in sorted(solution.q, key=lambda h: (len(h), h)):
            hs = ",".join(str(x) for x in h)
            qs = " ".join("%.12g" % v for v in solution.q[h])
            f.write(f"{hs}|{qs}\n")

    # spot-check: each stored value must satisfy the one-step recursion
    hm = HistoryMdp(pomdp)
    rng = np.random.default_rng(0)
    keys = list(solution.q)
    worst = 0.0
    for i in rng.choice(len(keys), size=min(50, len(keys)), replace=False):
        h = keys[int(i)]
        for a in range(pomdp.n_actions):
            probs = hm.obs_probs(h, a)
            expect = hm.expected_reward(h, a) + pomdp.discount * sum(
                probs[o] * solution.values.get(h + (a, int(o)), 0.0)
                for o in np.flatnonzero(probs > 1e-15))
            worst = max(worst, abs(expect - solution.q[h][a]))
    print(f"bellman spot-check max residual: {worst:.3e}")

    env = make_env(env_cfg, np.random.default_rng(np.random.SeedSequence((args.seed or 0, 77))))
    oracle = OracleQPolicy(solution, maps)
    success, mean_return = agent_mod.run_episodes(
        oracle, env, args.episodes, np.random.default_rng((args.seed or 0, 78)))
    with open(out_dir / "oracle_report.txt", "w") as f:
        f.write(f"nodes={solution.node_count} horizon={args.horizon}\n")
        f.write(f"bellman_spot_check={worst:.6e}\n")
        f.write(f"greedy_success_rate={success:.6f} episodes={args.episodes}\n")
        f.write(f"greedy_mean_return={mean_return:.6f}\n")
    print(f"solved {solution.node_count} histories; greedy success over "
          f"{args.episodes} episodes: {success:.3f}")
    print(f"written: {out_dir / 'model.tables'}, {out_dir / 'qtable.txt'}, "
          f"{out_dir / 'oracle_report.txt'}")
    return 0


def cmd_plotdata(args) -> int:
    curves = []
    for item in args.runs:
        path = Path(item)
        if path.is_dir():
            path = path / "curve.csv"
        if not path.exists():
            raise UsageError(f"no curve file at {path}")
        rows = path.read_text().strip().splitlines()
        if rows[0] != agent_mod.CURVE_HEADER:
            raise UsageError(f"{path} does not look like a curve file")
        data = [line.split(",") for line in rows[1:]]
        curves.append([(int(r[0]), float(r[2])) for r in data])
    if not curves:
        raise UsageError("no input curves")
    steps = [tuple(s for s, _ in c) for c in curves]
    if len(set(steps)) != 1:
        raise UsageError("curve files have mismatched evaluation steps; "
                         "aggregate only runs with identical eval grids")
    out_path = Path(args.out)
    with open(out_path, "w") as f:
        f.write("step,success_rate_mean,success_rate_std,n_seeds\n")
        for i, step in enumerate(steps[0]):
            vals = np.array([c[i][1] for c in curves])
            f.write("%d,%.10g,%.10g,%d\n" % (step, vals.mean(), vals.std(), len(vals)))
    print(f"aggregated {len(curves)} curves into {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------

def _add_env_flags(p):
    p.add_argument("--env", choices=["carflag1d", "carflag2d"], default=None)
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--half-size", dest="half_size", type=int, default=None)
    p.add_argument("--grid-size", dest="grid_size", type=int, default=None)
    p.add_argument("--offset", type=int, default=None,
                   help="information-region offset; nonzero breaks the symmetry")
    p.add_argument("--info-region-size", dest="info_region_size", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--group", default=None,
                   help="symmetry group override (auto, reflection2, c4)")
    p.add_argument("--gamma", type=float, default=0.99)


def _add_agent_flags(p):
    p.add_argument("--agent", choices=list(agent_mod.VARIANTS), default=None)
    p.add_argument("--lstm-init", dest="lstm_init", choices=["zero", "random"],
                   default=None)
    p.add_argument("--steps", type=int, default=None, help="total env steps")
    p.add_argument("--n-envs", dest="n_envs", type=int, default=None)
    p.add_argument("--n-steps", dest="n_steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--value-coef", dest="value_coef", type=float, default=None)
    p.add_argument("--entropy-coef", dest="entropy_coef", type=float, default=None)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, default=None)
    p.add_argument("--eval-interval", dest="eval_interval", type=int, default=None)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int, default=None)
    p.add_argument("--eval-greedy", dest="eval_greedy", action="store_true", default=None)
    p.add_argument("--lstm-fields", dest="lstm_fields", type=int, default=None)
    p.add_argument("--head-fields", dest="head_fields", type=int, default=None)
    p.add_argument("--conv-fields", dest="conv_fields", default=None,
                   help="comma-separated field counts per conv layer")
    p.add_argument("--lstm-single-tanh", dest="lstm_single_tanh", action="store_true",
                   default=None)
    p.add_argument("--feed-prev-action", dest="feed_prev_action", action="store_true",
                   default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="equipomdp",
        description="Symmetry-aware recurrent actor-critic agents with exact "
                    "verification oracles on CarFlag domains.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent and write curve/checkpoints")
    _add_env_flags(p)
    _add_agent_flags(p)
    p.add_argument("--out", default=None, help=f"run directory (default under "
                   f"${RUN_ROOT_ENV} or ./runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run from its manifest")
    p.add_argument("--run", required=True, help="run directory with manifest.ini")
    p.add_argument("--checkpoint", default="best", help="best, final, or a path")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-trace", dest="dump_trace", default=None,
                   help="write one episode trace to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a verification suite (exit 0 iff it passes)")
    p.add_argument("suite", help="equivariance | invariance | lemma1 | theorem1 | gradcheck")
    _add_env_flags(p)
    p.add_argument("--horizon", type=int, default=6)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--networks", type=int, default=100)
    p.add_argument("--histories", type=int, default=10)
    p.add_argument("--max-len", dest="max_len", type=int, default=50)
    p.add_argument("--lstm-init", dest="lstm_init", choices=["zero", "random"],
                   default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("oracle", help="solve an exported instance exactly and "
                                      "evaluate the greedy policy")
    _add_env_flags(p)
    p.add_argument("--horizon", type=int, default=6)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--node-budget", dest="node_budget", type=int, default=2_000_000)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("plotdata", help="aggregate curve files into mean/std per step")
    p.add_argument("runs", nargs="+", help="run directories or curve.csv paths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
