"""``qcpo train | eval | verify``.

A run config is a YAML file with three sections::

    env:      {env_id: two_path, ...}        # EnvConfig fields
    trainer:  {mode: qcpo, eps0: 0.1, ...}   # TrainerConfig fields
    output:   {dir: runs/demo, metrics: metrics.csv, checkpoint: checkpoint.npz, log_every: 10}

Unknown keys are rejected.  ``--set section.key=value`` overrides a field; the
value is parsed as YAML, so ``--set trainer.hidden=[32,32]`` works.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import yaml

from .cmdp import EnvConfig, episode_cost_sum, make_env
from .lagrange import empirical_quantile
from .oracle import SUITE, run_suite
from .trainer import METRIC_COLUMNS, Agent, Trainer, TrainerConfig

log = logging.getLogger("qcpo")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INTERRUPT = 0, 1, 2, 130


class ConfigError(ValueError):
    pass


@dataclass
class OutputConfig:
    dir: str = "runs/latest"
    metrics: str = "metrics.csv"
    checkpoint: str = "checkpoint.npz"
    resolved: str = "resolved_config.yaml"
    log_every: int = 10


SECTIONS = {"env": EnvConfig, "trainer": TrainerConfig, "output": OutputConfig}


@dataclass
class RunConfig:
    env: EnvConfig
    trainer: TrainerConfig
    output: OutputConfig

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out


def _key_lines(text: str) -> dict:
    """``(section, key) -> line`` for diagnostics."""
    lines = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for k, v in root.value:
        lines[(k.value, None)] = k.start_mark.line + 1
        if isinstance(v, yaml.MappingNode):
            for kk, _ in v.value:
                lines[(k.value, kk.value)] = kk.start_mark.line + 1
    return lines


def _where(path: str, lines: dict, section: str, key: Optional[str] = None) -> str:
    line = lines.get((section, key))
    return f"{path}:{line}" if line else path


def parse_overrides(items) -> dict:
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        if key.count(".") != 1:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = key.split(".")
        out.setdefault(section, {})[name] = yaml.safe_load(raw)
    return out


def _coerce_floats(cls, values: dict) -> dict:
    # YAML 1.1 reads 1e-3 as a string; accept it wherever the default is a float
    out = dict(values)
    for f in fields(cls):
        if isinstance(f.default, float) and isinstance(out.get(f.name), str):
            try:
                out[f.name] = float(out[f.name])
            except ValueError:
                raise ValueError(f"{f.name} must be a number, got {out[f.name]!r}") from None
    return out


def load_config(path: str, overrides=None) -> RunConfig:
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        text = fh.read()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines = _key_lines(text)
    for section, values in parse_overrides(overrides).items():
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"{path}: section {section!r} must be a mapping")
        raw[section].update(values)
    built = {}
    for section in raw:
        if section not in SECTIONS:
            raise ConfigError(f"{_where(path, lines, section)}: unknown section {section!r}; "
                              f"expected one of {sorted(SECTIONS)}")
    for section, cls in SECTIONS.items():
        values = raw.get(section) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"{_where(path, lines, section)}: section {section!r} must be a mapping")
        known = {f.name for f in fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError(f"{_where(path, lines, section, key)}: unknown key {section}.{key}")
        try:
            built[section] = cls(**_coerce_floats(cls, values))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{_where(path, lines, section)}: invalid {section} section: {exc}") from exc
    return RunConfig(**built)


# -- train --------------------------------------------------------------------------

def _finite_row(m) -> list:
    row = m.row()
    for name, v in zip(METRIC_COLUMNS, row):
        if isinstance(v, float) and not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name} at iteration {m.iter}")
    return row


def cmd_train(config_path: str, overrides=None) -> int:
    try:
        cfg = load_config(config_path, overrides)
    except FileNotFoundError as exc:
        print(f"error: config file not found: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = cfg.output
    os.makedirs(out.dir, exist_ok=True)
    with open(os.path.join(out.dir, out.resolved), "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    trainer = Trainer(cfg.trainer, cfg.env)
    metrics_path = os.path.join(out.dir, out.metrics)
    status = EXIT_OK
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

        def sink(m):
            writer.writerow(_finite_row(m))
            fh.flush()
            if out.log_every and m.iter % out.log_every == 0:
                log.info("iter %d steps %d return %.3f outage %.3f lambda %.3f", m.iter, m.env_steps,
                         m.avg_return_100ep, m.outage_prob_100ep, m.lam)

        try:
            trainer.run(sink)
        except KeyboardInterrupt:
            log.warning("interrupted; writing final checkpoint")
            status = EXIT_INTERRUPT
    trainer.agent.save(os.path.join(out.dir, out.checkpoint),
                       extra={"env": cfg.env.__dict__, "iterations": trainer.iteration})
    print(f"wrote {metrics_path} ({trainer.iteration} rows) and {os.path.join(out.dir, out.checkpoint)}")
    return status


# -- eval ---------------------------------------------------------------------------

def evaluate(agent: Agent, env_config: EnvConfig, n_episodes: int, d_th: float, gamma: float = 1.0,
             eps0: float = 0.1, seed: int = 0, greedy: bool = False) -> dict:
    """Roll out the frozen policy and summarise return and cost sums."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    env = make_env(env_config)
    if env.obs_dim != agent.obs_dim or env.n_actions != agent.n_actions:
        raise ValueError(f"checkpoint expects obs_dim={agent.obs_dim}, n_actions={agent.n_actions}; "
                         f"env {env_config.env_id} has obs_dim={env.obs_dim}, n_actions={env.n_actions}")
    rng = np.random.default_rng(seed)
    returns, costs = [], []
    for _ in range(n_episodes):
        obs = env.reset(int(rng.integers(2**63)))
        step_rewards, step_costs = [], []
        while True:
            a = agent.policy.greedy(obs) if greedy else agent.policy.sample(obs, rng)[0]
            tr = env.step(a)
            step_rewards.append(tr.reward)
            step_costs.append(tr.cost)
            obs = tr.next_state
            if tr.done or tr.truncated:
                break
        returns.append(math.fsum(step_rewards))
        costs.append(episode_cost_sum(step_costs, gamma))
    costs_arr = np.asarray(costs)
    return {
        "env_id": env_config.env_id,
        "n_episodes": n_episodes,
        "gamma": gamma,
        "d_th": d_th,
        "eps0": eps0,
        "avg_return": float(np.mean(returns)),
        "avg_cost_sum": float(costs_arr.mean()),
        "outage": float(np.mean(costs_arr > d_th)),
        "empirical_quantile": empirical_quantile(costs_arr, 1.0 - eps0),
        "episode_costs": [float(c) for c in costs],
    }


def cmd_eval(checkpoint_path: str, env_id: Optional[str], n_episodes: int, d_th: float, gamma: float = 1.0,
             eps0: float = 0.1, seed: int = 0, greedy: bool = False, out: Optional[str] = None) -> int:
    if n_episodes < 1:
        print("error: --n-episodes must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        agent = Agent.load(checkpoint_path)
    except FileNotFoundError:
        print(f"error: checkpoint not found: {checkpoint_path}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    saved = dict(getattr(agent, "extra", {}).get("env") or {})
    if env_id is not None and saved.get("env_id", env_id) != env_id:
        saved = {}
    env_config = EnvConfig(**{**saved, "env_id": env_id or saved.get("env_id", "two_path")})
    try:
        summary = evaluate(agent, env_config, n_episodes, d_th, gamma, eps0, seed, greedy)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = json.dumps(summary, sort_keys=True)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


# -- verify -------------------------------------------------------------------------

def cmd_verify(only=None, json_path: Optional[str] = None) -> int:
    try:
        results = run_suite(only)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    if json_path:
        with open(json_path, "w") as fh:
            json.dump([{"name": r.name, "passed": r.passed, "detail": r.detail, "data": r.data} for r in results],
                      fh, indent=2, default=float)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcpo", description="Quantile-constrained policy optimisation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a YAML run config")
    t.add_argument("config")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")

    e = sub.add_parser("eval", help="evaluate a checkpoint with a frozen policy")
    e.add_argument("checkpoint")
    e.add_argument("--env", default=None, help="env id (default: the one stored in the checkpoint)")
    e.add_argument("--n-episodes", type=int, default=1000)
    e.add_argument("--d-th", type=float, default=10.0)
    e.add_argument("--eps0", type=float, default=0.1)
    e.add_argument("--gamma", type=float, default=1.0, help="discount for episode cost sums (default 1)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--greedy", action="store_true")
    e.add_argument("--out", default=None, help="also write the summary JSON here")

    v = sub.add_parser("verify", help="run the oracle suite")
    v.add_argument("--only", action="append", choices=sorted(SUITE), default=None)
    v.add_argument("--json", dest="json_path", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    if args.command == "train":
        return cmd_train(args.config, args.overrides)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.env, args.n_episodes, args.d_th, args.gamma, args.eps0,
                        args.seed, args.greedy, args.out)
    return cmd_verify(args.only, args.json_path)


if __name__ == "__main__":
    sys.exit(main())
