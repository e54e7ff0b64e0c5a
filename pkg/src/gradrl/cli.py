"""Command-line front end: config parsing, run orchestration, result emission.

Commands: train-grad, attack, eval, solve-matrix, ablate. Configuration is a
JSON file; repeated --set key=value flags override dotted paths. Every
default is materialized and echoed to <out>/config.json before any work.

Exit codes: 0 success, 2 config error, 3 runtime error, 4 non-converged.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_NONCONVERGED = 4

COMMANDS = ("train-grad", "attack", "eval", "solve-matrix", "ablate")


class ConfigError(ValueError):
    """Schema violation, reported with a dotted path."""


# Schema: {key: (default, validator)}; nested dicts nest schemas.
def _num(lo=None, hi=None, integer=False):
    def check(path, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {v!r}")
        if integer and int(v) != v:
            raise ConfigError(f"{path}: expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"{path}: {v} below minimum {lo}")
        if hi is not None and v > hi:
            raise ConfigError(f"{path}: {v} above maximum {hi}")
        return int(v) if integer else float(v)
    return check


def _choice(*options):
    def check(path, v):
        if v not in options:
            raise ConfigError(f"{path}: {v!r} not one of {options}")
        return v
    return check


def _any(path, v):
    return v


def _str(path, v):
    if not isinstance(v, str):
        raise ConfigError(f"{path}: expected a string, got {v!r}")
    return v


def _opt(validator):
    def check(path, v):
        return None if v is None else validator(path, v)
    return check


def _bool(path, v):
    if not isinstance(v, bool):
        raise ConfigError(f"{path}: expected a boolean, got {v!r}")
    return v


def _num_list(path, v):
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{path}: expected a nonempty list of numbers")
    return [_num()(f"{path}[{i}]", x) for i, x in enumerate(v)]


def _int_list(path, v):
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{path}: expected a nonempty list of integers")
    return [_num(integer=True)(f"{path}[{i}]", x) for i, x in enumerate(v)]


BUDGET_SCHEMA = {
    "epsilon": (0.1, _num(lo=0.0)),
    "epsilon_bar": (0.02, _num(lo=0.0)),
    "norm": ("linf", _choice("linf", "l2")),
    "domain": ("state", _choice("state", "action", "mixed", "model_uncertainty")),
    "alpha": (None, _opt(_num(lo=0.0, hi=1.0))),
}

SCHEMA = {
    "command": (None, _opt(_choice(*COMMANDS))),
    "env": {
        "name": ("pointmass", _choice("matrix", "pointmass", "balance")),
        "params": (None, _any),
    },
    "budget": BUDGET_SCHEMA,
    "action_budget": {**BUDGET_SCHEMA, "domain": ("action", _choice("action"))},
    "oracle": {
        "steps_per_iteration": (2048, _num(lo=1, integer=True)),
        "minibatch_size": (256, _num(lo=1, integer=True)),
        "epochs": (10, _num(lo=1, integer=True)),
        "clip_ratio": (0.2, _num(lo=1e-6, hi=0.999999)),
        "gae_lambda": (0.95, _num(lo=1e-9, hi=1.0)),
        "discount": (0.99, _num(lo=1e-9, hi=1.0)),
        "learning_rate": (3e-4, _num(lo=0.0)),
        "value_learning_rate": (None, _opt(_num(lo=0.0))),
        "entropy_coef": (None, _opt(_num(lo=0.0))),
        "value_coef": (0.5, _num(lo=0.0)),
        "max_grad_norm": (0.5, _num(lo=1e-9)),
        "target_kl": (0.03, _num(lo=1e-9)),
        "iterations": (50, _num(lo=1, integer=True)),
        "normalize_obs": (True, _bool),
        "normalize_rewards": (True, _bool),
    },
    "engine": {
        "epochs": (30, _num(lo=1, integer=True)),
        "threshold": (None, _opt(_num())),
        "warmup_fraction": (0.5, _num(lo=0.0, hi=1.0)),
        "payoff_episodes": (20, _num(lo=1, integer=True)),
        "oracle_mode": ("rl", _choice("rl", "exact")),
        "attacker_kind": ("paad", _choice("paad", "acad", "mixed", "memorized",
                                          "random")),
        "solver_tol": (1e-8, _num(lo=0.0)),
    },
    "eval": {
        "episodes": (100, _num(lo=1, integer=True)),
        "restarts": (3, _num(lo=1, integer=True)),
        "alpha_grid": ([0.0, 0.05, 0.1, 0.15, 0.2], _num_list),
        "epsilon_grid": ([0.0, 0.05, 0.1], _num_list),
        "epsilon_bar_grid": (None, _opt(_num_list)),
        "attacker_kind": ("paad", _choice("paad", "acad", "mixed", "memorized",
                                          "random")),
    },
    "checkpoint": (None, _opt(_str)),
    "seed": (0, _num(integer=True)),
    "seeds": ([0, 1, 2, 3, 4], _int_list),
    "workers": (1, _num(lo=1, integer=True)),
    "out": (None, _opt(_str)),
}


def _validate(schema: dict, given: dict, path: str = "") -> dict:
    out = {}
    unknown = set(given) - set(schema)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key {path}{key}")
    for key, spec in schema.items():
        here = f"{path}{key}"
        if isinstance(spec, dict):
            sub = given.get(key, {})
            if sub is None:
                sub = {}
            if not isinstance(sub, dict):
                raise ConfigError(f"{here}: expected an object")
            out[key] = _validate(spec, sub, path=f"{here}.")
        else:
            default, validator = spec
            value = given.get(key, copy.deepcopy(default))
            out[key] = value if value is None and key not in given \
                else validator(here, value)
            if value is None and key not in given:
                out[key] = default
    return out


def _apply_override(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a config section")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[keys[-1]] = value


def parse_config(path: str | None = None, overrides=(), command: str | None = None,
                 seed: int | None = None, out: str | None = None) -> dict:
    """Validated config with every default resolved; flags beat file values."""
    given = {}
    if path is not None:
        try:
            with open(path) as fh:
                given = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _apply_override(given, dotted, raw)
    if command is not None:
        file_cmd = given.get("command")
        if file_cmd is not None and file_cmd != command:
            raise ConfigError(
                f"command: config file says {file_cmd!r} but {command!r} was invoked")
        given["command"] = command
    if seed is not None:
        given["seed"] = seed
    if out is not None:
        given["out"] = out
    cfg = _validate(SCHEMA, given)
    if cfg["budget"]["epsilon_bar"] > cfg["budget"]["epsilon"] * 2.0 \
            and cfg["budget"]["epsilon"] > 0:
        print("warning: epsilon_bar exceeds 2*epsilon; the coupled attacker "
              "degenerates to the plain attacker", file=sys.stderr)
    return cfg


def _echo_config(cfg: dict) -> None:
    if cfg.get("out"):
        os.makedirs(cfg["out"], exist_ok=True)
        with open(os.path.join(cfg["out"], "config.json"), "w") as fh:
            json.dump(cfg, fh, sort_keys=True, indent=1)


def _resolve_matrix(params: dict | None, seed: int) -> np.ndarray:
    params = params or {}
    payoff = params.get("payoff", "rps")
    if isinstance(payoff, str):
        if payoff == "rps":
            return np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])
        raise ConfigError(f"env.params.payoff: unknown preset {payoff!r}")
    if isinstance(payoff, dict):
        size = int(payoff.get("size", 4))
        mseed = int(payoff.get("seed", seed))
        return np.random.default_rng(mseed).uniform(-1.0, 1.0, size=(size, size))
    return np.asarray(payoff, dtype=float)


def _build_env(cfg: dict):
    from .envs import make_env

    name = cfg["env"]["name"]
    params = dict(cfg["env"]["params"] or {})
    if name == "matrix":
        params["payoff"] = _resolve_matrix(cfg["env"]["params"], cfg["seed"])
    return make_env(name, params, seed=cfg["seed"])


def _budget_from_cfg(block: dict):
    from .perturb import AttackDomain, PerturbationBudget

    return PerturbationBudget(
        epsilon=block["epsilon"], epsilon_bar=block["epsilon_bar"],
        norm=block["norm"], domain=AttackDomain(block["domain"]),
        alpha=block.get("alpha"),
    )


def _oracle_from_cfg(cfg: dict):
    from .oracle import OracleConfig

    block = dict(cfg["oracle"])
    return OracleConfig(**block)


def _cmd_solve_matrix(cfg: dict) -> int:
    from .meta_game import solve_zero_sum

    payoff = _resolve_matrix(cfg["env"]["params"], cfg["seed"])
    sol = solve_zero_sum(payoff, tol=cfg["engine"]["solver_tol"])
    print(f"value: {sol.value!r}")
    print(f"row strategy: {sol.sigma_row.probs.tolist()}")
    print(f"col strategy: {sol.sigma_col.probs.tolist()}")
    if cfg.get("out"):
        with open(os.path.join(cfg["out"], "solution.json"), "w") as fh:
            json.dump({
                "value": sol.value,
                "sigma_row": sol.sigma_row.probs.tolist(),
                "sigma_col": sol.sigma_col.probs.tolist(),
            }, fh, sort_keys=True, indent=1)
    return EXIT_OK


def _cmd_train_grad(cfg: dict) -> int:
    from .engine import EngineConfig, run_grad
    from .perturb import AttackDomain

    env = _build_env(cfg)
    budget = None
    action_budget = None
    if not env.two_player:
        budget = _budget_from_cfg(cfg["budget"])
        if budget.domain is AttackDomain.MIXED or cfg["engine"]["attacker_kind"] == "mixed":
            budget = _budget_from_cfg({**cfg["budget"], "domain": "state"})
            action_budget = _budget_from_cfg(cfg["action_budget"])
    engine_cfg = EngineConfig(
        epochs=cfg["engine"]["epochs"], threshold=cfg["engine"]["threshold"],
        warmup_fraction=cfg["engine"]["warmup_fraction"],
        payoff_episodes=cfg["engine"]["payoff_episodes"],
        oracle_mode=cfg["engine"]["oracle_mode"],
        attacker_kind=cfg["engine"]["attacker_kind"],
        solver_tol=cfg["engine"]["solver_tol"], seed=cfg["seed"],
        budget=budget, action_budget=action_budget,
    )
    sigma_a, sigma_v, state, report = run_grad(
        engine_cfg, env, oracle_config=_oracle_from_cfg(cfg), out_dir=cfg.get("out"))
    print(f"epochs run: {report.epochs_run}")
    print(f"exploitability history: {[round(e, 6) for e in report.exploit_history]}")
    print(f"converged: {report.converged}")
    if cfg.get("out"):
        from .policy import save_policy

        agent = state.agent_pop[int(np.argmax(sigma_a.probs))]
        save_policy(agent, os.path.join(cfg["out"], "agent-top.ckpt"))
    return EXIT_OK if report.converged else EXIT_NONCONVERGED


def _load_agent(cfg: dict):
    from .policy import load_policy

    path = cfg.get("checkpoint")
    if not path:
        raise ConfigError("checkpoint: this command requires a checkpoint path")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint: no file at {path}")
    return load_policy(path)


def _cmd_attack(cfg: dict) -> int:
    from .eval_harness import EvalCell, EvalReport, attack_from_scratch
    from .policy import save_policy

    agent = _load_agent(cfg)
    env = _build_env(cfg)
    budget = _budget_from_cfg(cfg["budget"])
    report = EvalReport()
    for s in cfg["seeds"]:
        res = attack_from_scratch(agent, cfg["eval"]["attacker_kind"], budget, env,
                                  _oracle_from_cfg(cfg), seed=int(s),
                                  n_episodes=cfg["eval"]["episodes"],
                                  restarts=cfg["eval"]["restarts"])
        report.add(EvalCell(kind=cfg["eval"]["attacker_kind"], epsilon=budget.epsilon,
                            epsilon_bar=budget.epsilon_bar, alpha=None, seed=int(s),
                            episodes=cfg["eval"]["episodes"],
                            mean_return=res.attacked_return,
                            std_return=res.attacked_std))
        print(f"seed {s}: attacked return {res.attacked_return!r}")
        if cfg.get("out") and res.attachment.director is not None:
            save_policy(res.attachment.director,
                        os.path.join(cfg["out"], f"attacker-seed-{s}.ckpt"),
                        kind=cfg["eval"]["attacker_kind"],
                        budget_config=budget.to_config())
    _write_report(cfg, report, "attack")
    return EXIT_OK


def _cmd_eval(cfg: dict) -> int:
    from .eval_harness import EvalCell, EvalReport, model_uncertainty_sweep, natural_eval

    agent = _load_agent(cfg)
    env = _build_env(cfg)
    stats = natural_eval(agent, env, n_episodes=cfg["eval"]["episodes"],
                         seeds=cfg["seeds"])
    print(f"natural return: mean {stats['mean']!r} median {stats['median']!r}")
    report = EvalReport()
    for s, row in stats["per_seed"].items():
        report.add(EvalCell(kind="natural", epsilon=None, epsilon_bar=None,
                            alpha=None, seed=int(s), episodes=row["episodes"],
                            mean_return=row["mean"], std_return=row["std"]))
    sweep = model_uncertainty_sweep(agent, env, cfg["eval"]["alpha_grid"],
                                    n_episodes=cfg["eval"]["episodes"],
                                    seeds=cfg["seeds"])
    report.cells.extend(sweep.cells)
    _write_report(cfg, report, "eval")
    return EXIT_OK


def _cmd_ablate(cfg: dict) -> int:
    from .eval_harness import epsilon_bar_ablation

    agent = _load_agent(cfg)
    env = _build_env(cfg)
    eps = cfg["budget"]["epsilon"]
    grid = cfg["eval"]["epsilon_bar_grid"] or [eps / 10.0, eps / 5.0, 2.0 * eps]
    report = epsilon_bar_ablation(agent, env, eps, grid, _oracle_from_cfg(cfg),
                                  seeds=cfg["seeds"],
                                  attacker_kind=cfg["eval"]["attacker_kind"],
                                  episodes=cfg["eval"]["episodes"],
                                  restarts=cfg["eval"]["restarts"],
                                  norm=cfg["budget"]["norm"],
                                  workers=cfg["workers"])
    for cell in report.cells:
        print(f"epsilon_bar {cell.epsilon_bar} seed {cell.seed}: {cell.mean_return!r}")
    _write_report(cfg, report, "ablate")
    return EXIT_OK


def _write_report(cfg: dict, report, stem: str) -> None:
    if cfg.get("out"):
        report.write_csv(os.path.join(cfg["out"], f"{stem}.csv"))
        report.write_summary(os.path.join(cfg["out"], f"{stem}-summary.json"))


_DISPATCH = {
    "solve-matrix": _cmd_solve_matrix,
    "train-grad": _cmd_train_grad,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def dispatch(cfg: dict) -> int:
    """Run the configured command; exit code semantics per module contract."""
    command = cfg.get("command")
    if command not in _DISPATCH:
        raise ConfigError(f"command: {command!r} is not one of {COMMANDS}")
    _echo_config(cfg)
    return _DISPATCH[command](cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradrl",
        description="Double-oracle robust RL against temporally-coupled adversaries")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, overrides=args.set, command=args.command,
                           seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return dispatch(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
