"""Command-line entry point.

Precedence for every setting: built-in default, then the JSON file given by
--config, then explicit flags. Exit codes: 0 success, 2 configuration error,
3 I/O error.

Examples:
  dpselect sweep --scenario bimodal:number=1 --mechanism gem \
      --mechanism mgem --eps 0.1,1 --trials 2000 --out s1.csv
  dpselect select --scores 0,1,0.5 --sens 1,2,1 --mechanism rnm_exp --eps 1
  dpselect bandit --mechanism ucb --mechanism mgem --replications 5
  dpselect verify-dp --case laplace_rnmh --k 3 --eps 1 --trials 1000000
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from dpselect import analysis, bandit, harness, heuristics
from dpselect.core import MechanismSpec, RngStream, make_problem
from dpselect.harness import ConfigError, ExperimentConfig
from dpselect.mechanisms import select
from dpselect.scenarios import ScenarioSpec, TrialSet, build_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
SEED_ENV = "DPSELECT_SEED"


# ---------------------------------------------------------------------------
# Parsing helpers


def _coerce(text: str):
  for cast in (int, float):
    try:
      return cast(text)
    except ValueError:
      pass
  if text.lower() in ("true", "false"):
    return text.lower() == "true"
  return text


def _parse_kv(text: str) -> Dict[str, Any]:
  out = {}
  for part in filter(None, text.split(",")):
    if "=" not in part:
      raise ConfigError(f"expected key=value, got {part!r}")
    key, value = part.split("=", 1)
    out[key.strip()] = _coerce(value.strip())
  return out


def parse_mechanism(item) -> MechanismSpec:
  """'gem', 'rs_gamma:gamma=0.01,noise=exponential' or a JSON object."""
  try:
    if isinstance(item, MechanismSpec):
      return item
    if isinstance(item, dict):
      return MechanismSpec(**item)
    kind, _, rest = str(item).partition(":")
    return MechanismSpec(kind.strip(), **_parse_kv(rest))
  except (TypeError, ValueError) as e:
    raise ConfigError(f"bad mechanism {item!r}: {e}") from None


def parse_scenario(item, trials: Optional[int] = None) -> ScenarioSpec:
  """'bimodal:number=1', 'increasing_corr:t=5' or a JSON object."""
  try:
    if isinstance(item, dict):
      fields = dict(item)
    else:
      kind, _, rest = str(item).partition(":")
      fields = {"kind": kind.strip(), "params": _parse_kv(rest)}
      params = fields["params"]
      for key in ("candidates", "trials"):
        if key in params:
          fields[key] = int(params.pop(key))
    if trials is not None and "trials" not in fields:
      fields["trials"] = trials
    return ScenarioSpec(**fields)
  except (TypeError, ValueError) as e:
    raise ConfigError(f"bad scenario {item!r}: {e}") from None


def parse_floats(text: str) -> List[float]:
  try:
    return [float(x) for x in text.split(",") if x.strip()]
  except ValueError:
    raise ConfigError(f"expected a comma-separated list of numbers: {text!r}"
                     ) from None


def load_config(path: Optional[str]) -> Dict[str, Any]:
  if path is None:
    return {}
  with open(path, encoding="utf-8") as fh:
    try:
      data = json.load(fh)
    except json.JSONDecodeError as e:
      raise ConfigError(f"{path}: invalid JSON ({e})") from None
  if not isinstance(data, dict):
    raise ConfigError(f"{path}: top level must be an object")
  return data


def resolve_seed(flag: Optional[int], config: Dict[str, Any]) -> int:
  if flag is not None:
    return flag
  if "seed" in config:
    return int(config["seed"])
  env = os.environ.get(SEED_ENV)
  if env is not None:
    try:
      return int(env)
    except ValueError:
      raise ConfigError(f"{SEED_ENV} must be an integer") from None
  return 0


def _pick(flag, config: Dict[str, Any], key: str, default=None):
  if flag is not None:
    return flag
  return config.get(key, default)


def _mechanisms(args, config, default: Sequence[str]) -> List[MechanismSpec]:
  items = args.mechanism or config.get("mechanisms") or list(default)
  return [parse_mechanism(m) for m in items]


# ---------------------------------------------------------------------------
# Output


def _emit(records: List[Dict[str, Any]], fmt: str, out: Optional[str]):
  if fmt == "json":
    text = json.dumps(records, indent=2, default=_json_default) + "\n"
  else:
    buf = io.StringIO()
    if records:
      writer = csv.DictWriter(buf, fieldnames=list(records[0]))
      writer.writeheader()
      for r in records:
        writer.writerow({k: repr(v) if isinstance(v, float) else v
                         for k, v in r.items()})
    text = buf.getvalue()
  if out is None:
    sys.stdout.write(text)
  else:
    with open(out, "w", encoding="utf-8", newline="") as fh:
      fh.write(text)


def _json_default(value):
  if isinstance(value, np.generic):
    return value.item()
  if isinstance(value, np.ndarray):
    return value.tolist()
  raise TypeError(f"not serializable: {type(value)}")


# ---------------------------------------------------------------------------
# Subcommands


def _problem_from_args(args, config, seed):
  scores = _pick(args.scores, config, "scores")
  sens = _pick(args.sens, config, "sensitivities")
  if scores is not None or sens is not None:
    if scores is None or sens is None:
      raise ConfigError("give both --scores and --sens")
    if isinstance(scores, str):
      scores = parse_floats(scores)
    if isinstance(sens, str):
      sens = parse_floats(sens)
    try:
      return make_problem(scores, sens)
    except ValueError as e:
      raise ConfigError(str(e)) from None
  scen = _pick(args.scenario, config, "scenario")
  if scen is None:
    raise ConfigError("give --scores/--sens or --scenario")
  data = build_scenario(parse_scenario(scen),
                        RngStream(seed).child("scenario").generator())
  if isinstance(data, TrialSet):
    return data.problem(0)
  return data


def cmd_select(args, config) -> int:
  seed = resolve_seed(args.seed, config)
  problem = _problem_from_args(args, config, seed)
  specs = _mechanisms(args, config, ["rnm_exp"])
  eps_list = parse_floats(args.eps) if args.eps else config.get("epsilons",
                                                                [1.0])
  records = []
  for spec in specs:
    for eps in eps_list:
      gen = RngStream(seed).child(spec.label, repr(float(eps))).generator()
      out = select(spec.with_epsilon(float(eps)), problem, gen)
      records.append({"mechanism": spec.label, "epsilon": float(eps),
                      "chosen_index": out.chosen_index,
                      "chosen_score": float(problem.scores[out.chosen_index]),
                      "optimal_index": problem.optimal_index,
                      "branch": out.branch or "", "seed": seed})
  _emit(records, args.format, _pick(args.out, config, "output"))
  return EXIT_OK


def build_experiment(args, config) -> ExperimentConfig:
  seed = resolve_seed(args.seed, config)
  trials = int(_pick(args.trials, config, "trials", 1000))
  ingest = _pick(getattr(args, "input", None), config, "ingest_path")
  scen = _pick(args.scenario, config, "scenario")
  scenario = None if scen is None else parse_scenario(scen, trials)
  if args.eps:
    epsilons = parse_floats(args.eps)
  else:
    epsilons = config.get("epsilons", harness.DEFAULT_EPSILONS)
  return ExperimentConfig(
      scenario=scenario,
      mechanisms=_mechanisms(args, config, ["random", "rnm_exp", "gem",
                                            "mgem"]),
      epsilons=[float(e) for e in epsilons], trials=trials, seed=seed,
      output=_pick(args.out, config, "output"), ingest_path=ingest,
      top_k=int(_pick(getattr(args, "top_k", None), config, "top_k", 500)))


def cmd_sweep(args, config) -> int:
  exp = build_experiment(args, config)
  rows = harness.run_sweep(exp)
  if args.format == "json":
    text = harness.rows_to_json(rows) + "\n"
  else:
    text = harness.rows_to_csv(rows)
  if exp.output is None:
    sys.stdout.write(text)
  else:
    with open(exp.output, "w", encoding="utf-8", newline="") as fh:
      fh.write(text)
  return EXIT_OK


def cmd_ingest(args, config) -> int:
  if _pick(args.input, config, "ingest_path") is None:
    raise ConfigError("ingest needs --input")
  if not (args.mechanism or config.get("mechanisms")):
    users = harness.ingest_scores(_pick(args.input, config, "ingest_path"),
                                  int(_pick(args.top_k, config, "top_k", 500)))
    records = [{"user_id": u.user_id, "candidates": u.problem.k,
                "best_item": u.item_ids[u.problem.optimal_index],
                "best_score": u.problem.optimal_score} for u in users]
    _emit(records, args.format, _pick(args.out, config, "output"))
    return EXIT_OK
  args.scenario = None
  return cmd_sweep(args, config)


def cmd_correlate(args, config) -> int:
  seed = resolve_seed(args.seed, config)
  problem = _problem_from_args(args, config, seed)
  eps = parse_floats(args.eps)[0] if args.eps else float(
      config.get("epsilon", 1.0))
  beta = float(_pick(args.beta, config, "beta", 0.05))
  report = heuristics.correlation_report(problem.scores, problem.sensitivities)
  flags = heuristics.utility_bound_flags(problem, eps, beta)
  record = {**dataclasses.asdict(report), **dataclasses.asdict(flags),
            "epsilon": eps, "beta": beta, "candidates": problem.k}
  _emit([record], args.format, _pick(args.out, config, "output"))
  return EXIT_OK


def _counterexample(case: str, k: int, eps: float, gamma: float):
  if case == "laplace_rnmh":
    return analysis.laplace_rnmh_counterexample(k, eps)
  if case == "exponential_rnmh":
    return analysis.exponential_rnmh_counterexample(eps)
  if case == "rs_exponential":
    return analysis.rs_exponential_counterexample(k, gamma, eps)
  raise ConfigError(f"unknown case {case!r}")


def cmd_verify_dp(args, config) -> int:
  seed = resolve_seed(args.seed, config)
  case = _pick(args.case, config, "case", "laplace_rnmh")
  k = int(_pick(args.k, config, "k", 3))
  eps = parse_floats(args.eps)[0] if args.eps else float(
      config.get("epsilon", 1.0))
  gamma = float(_pick(args.gamma, config, "gamma", 0.5))
  trials = int(_pick(args.trials, config, "trials", 10**6))
  if trials < 1:
    raise ConfigError("trials must be positive")
  try:
    ce = _counterexample(case, k, eps, gamma)
  except ValueError as e:
    raise ConfigError(str(e)) from None
  rep = ce.verify(trials, RngStream(seed).child("verify", case).generator())
  record = {"case": case, "k": k, "epsilon": eps, "trials": trials,
            "prob_d1": ce.prob_d1, "prob_d2": ce.prob_d2,
            "count_d1": rep.count_d1, "count_d2": rep.count_d2,
            "empirical_ratio": rep.empirical_ratio,
            "analytic_ratio": ce.analytic_ratio, "ci_low": rep.ci_low,
            "ci_high": rep.ci_high, "e_eps": math.exp(eps),
            "reliable": rep.reliable, "seed": seed}
  _emit([record], args.format, _pick(args.out, config, "output"))
  return EXIT_OK


def _bandit_config(args, config) -> bandit.BanditConfig:
  fields = dict(config.get("bandit", {}))
  for name in ("horizon", "t_shift", "window"):
    value = getattr(args, name)
    if value is not None:
      fields[name] = value
  for key in ("means_before", "sds_before", "reward_clip",
              "quantile_levels"):
    if key in fields:
      fields[key] = tuple(fields[key])
  try:
    return bandit.BanditConfig(**fields)
  except (TypeError, ValueError) as e:
    raise ConfigError(f"bad bandit config: {e}") from None


def cmd_bandit(args, config) -> int:
  seed = resolve_seed(args.seed, config)
  cfg = _bandit_config(args, config)
  reps = int(_pick(args.replications, config, "replications", 1))
  policies = args.mechanism or config.get("mechanisms") or [
      bandit.UCB, "krr", "rnm_exp", "gem", "mgem"]
  parsed = [p if p == bandit.UCB else parse_mechanism(p) for p in policies]
  traj_dir = _pick(args.trajectory_dir, config, "trajectory_dir")
  if traj_dir is not None:
    Path(traj_dir).mkdir(parents=True, exist_ok=True)
  records = []
  for policy in parsed:
    label = policy if isinstance(policy, str) else policy.label
    for rep in range(reps):
      stream = RngStream(seed).child("bandit", label, rep)
      try:
        tr = bandit.run_bandit(cfg, policy, stream)
      except ValueError as e:
        raise ConfigError(str(e)) from None
      cum = tr.cumulative_reward
      records.append({"policy": label, "replication": rep,
                      "final_reward": float(cum[-1]),
                      "post_shift_reward": float(cum[-1] -
                                                 cum[cfg.t_shift - 1]),
                      "seed": seed})
      if traj_dir is not None:
        tr.to_csv(Path(traj_dir) / f"{label}_{rep}.csv")
  _emit(records, args.format, _pick(args.out, config, "output"))
  return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parser


def build_parser() -> argparse.ArgumentParser:
  common = argparse.ArgumentParser(add_help=False)
  common.add_argument("--seed", type=int, default=None,
                      help=f"master seed (fallback: ${SEED_ENV}, then 0)")
  common.add_argument("--config", default=None, help="JSON config file")
  common.add_argument("--out", default=None, help="output path (default stdout)")
  common.add_argument("--format", choices=("csv", "json"), default="csv")
  common.add_argument("--trials", type=int, default=None)
  common.add_argument("--eps", default=None, help="comma-separated epsilons")
  common.add_argument("--mechanism", action="append", default=None,
                      help="kind[:key=value,...]; repeatable")
  common.add_argument("-v", "--verbose", action="store_true")

  parser = argparse.ArgumentParser(
      prog="dpselect",
      description="Private selection under heterogeneous sensitivities.")
  sub = parser.add_subparsers(dest="command", required=True)

  def problem_flags(p):
    p.add_argument("--scenario", default=None,
                   help="kind[:key=value,...], e.g. bimodal:number=1")
    p.add_argument("--scores", default=None, help="comma-separated scores")
    p.add_argument("--sens", default=None,
                   help="comma-separated sensitivities")

  p = sub.add_parser("select", parents=[common], help="one-shot selection")
  problem_flags(p)
  p.set_defaults(func=cmd_select)

  p = sub.add_parser("sweep", parents=[common],
                     help="epsilon grid x mechanisms on a scenario")
  p.add_argument("--scenario", default=None)
  p.add_argument("--input", default=None, help="score matrix CSV instead")
  p.add_argument("--top-k", dest="top_k", type=int, default=None)
  p.set_defaults(func=cmd_sweep)

  p = sub.add_parser("ingest", parents=[common],
                     help="load a user_id,item_id,score file")
  p.add_argument("--input", default=None)
  p.add_argument("--top-k", dest="top_k", type=int, default=None)
  p.set_defaults(func=cmd_ingest, scenario=None)

  p = sub.add_parser("correlate", parents=[common],
                     help="correlation heuristics and utility-bound flags")
  problem_flags(p)
  p.add_argument("--beta", type=float, default=None)
  p.set_defaults(func=cmd_correlate)

  p = sub.add_parser("verify-dp", parents=[common],
                     help="Monte Carlo privacy-loss ratio on known leaks")
  p.add_argument("--case", default=None,
                 choices=("laplace_rnmh", "exponential_rnmh",
                          "rs_exponential"))
  p.add_argument("--k", type=int, default=None)
  p.add_argument("--gamma", type=float, default=None)
  p.set_defaults(func=cmd_verify_dp)

  p = sub.add_parser("bandit", parents=[common],
                     help="two-armed bandit with a distribution shift")
  p.add_argument("--horizon", type=int, default=None)
  p.add_argument("--t-shift", dest="t_shift", type=int, default=None)
  p.add_argument("--window", type=int, default=None)
  p.add_argument("--replications", type=int, default=None)
  p.add_argument("--trajectory-dir", dest="trajectory_dir", default=None)
  p.set_defaults(func=cmd_bandit)
  return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
  parser = build_parser()
  args = parser.parse_args(argv)
  logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                      format="%(levelname)s %(name)s: %(message)s")
  try:
    config = load_config(args.config)
    return args.func(args, config)
  except ConfigError as e:
    print(f"dpselect: config error: {e}", file=sys.stderr)
    return EXIT_CONFIG
  except OSError as e:
    print(f"dpselect: I/O error: {e}", file=sys.stderr)
    return EXIT_IO
  except ValueError as e:
    print(f"dpselect: config error: {e}", file=sys.stderr)
    return EXIT_CONFIG


if __name__ == "__main__":
  sys.exit(main())
