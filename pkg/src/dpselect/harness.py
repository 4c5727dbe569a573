"""Experiment orchestration: MSE evaluation, sweeps and score-file ingestion."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from dpselect.core import (DEFAULT_SENSITIVITY_FLOOR, MechanismSpec,
                           RngLike, RngStream, SelectionProblem,
                           as_generator, make_problem)
from dpselect.mechanisms import select_many
from dpselect.scenarios import ScenarioSpec, TrialSet, build_scenario

logger = logging.getLogger(__name__)

DEFAULT_EPSILONS = tuple(float(e) for e in np.geomspace(0.01, 16, 12))
SWEEP_COLUMNS = ("scenario", "mechanism", "epsilon", "trials", "mse",
                 "ci_low", "ci_high", "seed")


class ConfigError(ValueError):
  """Invalid experiment configuration (CLI exit code 2)."""


@dataclasses.dataclass(frozen=True)
class MseEstimate:
  mse: float
  ci_low: float
  ci_high: float
  trials: int

  def __float__(self):
    return self.mse


def _score_rows(data: Union[SelectionProblem, TrialSet], trials: int):
  if isinstance(data, SelectionProblem):
    return data.scores, data.sensitivities, trials
  rows = data.clipped_scores
  if trials > rows.shape[0]:
    rows = np.resize(rows, (trials, rows.shape[1]))
  return rows[:trials], data.sensitivities, None


def squared_gaps(data: Union[SelectionProblem, TrialSet],
                 mechanism: MechanismSpec, epsilon: Optional[float],
                 trials: int, rng: RngLike) -> np.ndarray:
  """Per-trial (best score - selected score)^2.

  For a TrialSet, trial i uses row i of the clipped scores (cycling if more
  trials than rows are requested) and its own optimum.
  """
  if trials < 1:
    raise ValueError("trials must be positive")
  spec = mechanism if epsilon is None else mechanism.with_epsilon(epsilon)
  scores, sens, size = _score_rows(data, trials)
  picks = select_many(spec, scores, sens, rng, size=size)
  rows = np.broadcast_to(scores, (trials, len(sens)))
  best = rows.max(axis=1)
  chosen = rows[np.arange(trials), picks]
  return (best - chosen)**2


def mse_estimate(gaps: np.ndarray, z: float = 1.959964) -> MseEstimate:
  """Mean with a normal-approximation interval."""
  gaps = np.asarray(gaps, dtype=float)
  n = gaps.size
  mean = float(gaps.mean())
  half = z * float(gaps.std(ddof=1)) / math.sqrt(n) if n > 1 else math.inf
  return MseEstimate(mean, mean - half, mean + half, n)


def evaluate_mse(data: Union[SelectionProblem, TrialSet],
                 mechanism: MechanismSpec, epsilon: Optional[float],
                 trials: int, rng: RngLike) -> float:
  return float(np.mean(squared_gaps(data, mechanism, epsilon, trials, rng)))


def evaluate_mse_ci(data, mechanism, epsilon, trials, rng) -> MseEstimate:
  return mse_estimate(squared_gaps(data, mechanism, epsilon, trials, rng))


def mean_selected_score(mechanism: MechanismSpec, problem: SelectionProblem,
                        trials: int, rng: RngLike) -> float:
  picks = select_many(mechanism, problem.scores, problem.sensitivities, rng,
                      size=trials)
  return float(problem.scores[picks].mean())


def log_score_ratio(mech_a: MechanismSpec, mech_b: MechanismSpec,
                    problem: SelectionProblem, trials: int = 50,
                    rng: RngLike = None) -> float:
  """log(mean selected score of A / mean selected score of B).

  Raises:
    ValueError: if either mean is not positive. Shift the scores to be
      positive before calling; no shift is applied here.
  """
  gen = as_generator(rng)
  a = mean_selected_score(mech_a, problem, trials, gen)
  b = mean_selected_score(mech_b, problem, trials, gen)
  if a <= 0 or b <= 0:
    raise ValueError(
        f"mean selected scores must be positive (got {a:.4g}, {b:.4g}); "
        "shift the scores by a constant first")
  return math.log(a / b)


# ---------------------------------------------------------------------------
# Score matrix ingestion


@dataclasses.dataclass(frozen=True)
class ScoreMatrix:
  """Sparse users x items score triplets."""

  user_ids: List[str]
  item_ids: List[str]
  users: np.ndarray    # row index per triplet
  items: np.ndarray    # column index per triplet
  scores: np.ndarray


def read_score_matrix(path: Union[str, Path]) -> ScoreMatrix:
  """Reads `user_id,item_id,score` CSV triplets (UTF-8, header required)."""
  with open(path, newline="", encoding="utf-8") as fh:
    return parse_score_matrix(fh)


def parse_score_matrix(fh: Iterable[str]) -> ScoreMatrix:
  reader = csv.reader(fh)
  header = next(reader, None)
  if header is None or [h.strip() for h in header] != [
      "user_id", "item_id", "score"]:
    raise ValueError("score file must start with 'user_id,item_id,score'")
  user_index: dict = {}
  item_index: dict = {}
  users, items, scores = [], [], []
  for lineno, row in enumerate(reader, start=2):
    if not row or all(not cell.strip() for cell in row):
      continue
    if len(row) != 3:
      raise ValueError(f"line {lineno}: expected 3 fields, got {len(row)}")
    try:
      value = float(row[2])
    except ValueError:
      raise ValueError(f"line {lineno}: bad score {row[2]!r}") from None
    if not math.isfinite(value):
      raise ValueError(f"line {lineno}: non-finite score")
    users.append(user_index.setdefault(row[0].strip(), len(user_index)))
    items.append(item_index.setdefault(row[1].strip(), len(item_index)))
    scores.append(value)
  return ScoreMatrix(list(user_index), list(item_index),
                     np.asarray(users, dtype=np.int64),
                     np.asarray(items, dtype=np.int64),
                     np.asarray(scores, dtype=float))


def item_sensitivities(matrix: ScoreMatrix, q_lo: float = 0.01,
                       q_hi: float = 0.99,
                       floor: float = DEFAULT_SENSITIVITY_FLOOR) -> np.ndarray:
  """Per-item p99 - p1 of the scores across users; constant items get floor."""
  n_items = len(matrix.item_ids)
  out = np.full(n_items, floor)
  order = np.argsort(matrix.items, kind="stable")
  items = matrix.items[order]
  scores = matrix.scores[order]
  bounds = np.searchsorted(items, np.arange(n_items + 1))
  for j in range(n_items):
    col = scores[bounds[j]:bounds[j + 1]]
    if col.size == 0:
      continue
    width = float(np.quantile(col, q_hi) - np.quantile(col, q_lo))
    out[j] = width if width > 0 else floor
  return out


@dataclasses.dataclass(frozen=True)
class IngestedUser:
  user_id: str
  item_ids: List[str]
  problem: SelectionProblem


def ingest_scores(matrix: Union[ScoreMatrix, str, Path],
                  top_k: int = 500) -> List[IngestedUser]:
  """One SelectionProblem per user over that user's top-k scored items.

  Sensitivities are computed once across all users and then subset.
  """
  if not isinstance(matrix, ScoreMatrix):
    matrix = read_score_matrix(matrix)
  sens = item_sensitivities(matrix)
  by_user = defaultdict(list)
  for pos, u in enumerate(matrix.users):
    by_user[int(u)].append(pos)
  out = []
  for u, user_id in enumerate(matrix.user_ids):
    positions = np.asarray(by_user.get(u, []), dtype=np.int64)
    if positions.size == 0:
      logger.warning("user %s has no scores; skipped", user_id)
      continue
    scores = matrix.scores[positions]
    items = matrix.items[positions]
    keep = np.argsort(-scores, kind="stable")[:top_k]
    out.append(IngestedUser(user_id, [matrix.item_ids[i] for i in items[keep]],
                            make_problem(scores[keep], sens[items[keep]])))
  return out


# ---------------------------------------------------------------------------
# Sweeps


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
  scenario: Optional[ScenarioSpec]
  mechanisms: Sequence[MechanismSpec]
  epsilons: Sequence[float] = DEFAULT_EPSILONS
  trials: int = 1000
  seed: int = 0
  output: Optional[str] = None
  ingest_path: Optional[str] = None
  top_k: int = 500

  def __post_init__(self):
    if not self.mechanisms:
      raise ConfigError("at least one mechanism is required")
    if not self.epsilons:
      raise ConfigError("at least one epsilon is required")
    if any(not e > 0 for e in self.epsilons):
      raise ConfigError("epsilons must be positive")
    if self.trials < 1:
      raise ConfigError("trials must be positive")
    if (self.scenario is None) == (self.ingest_path is None):
      raise ConfigError("give exactly one of a scenario or an ingest path")

  @property
  def scenario_label(self) -> str:
    if self.scenario is None:
      return f"ingest:{Path(self.ingest_path).name}"
    params = ",".join(f"{k}={v}" for k, v in sorted(self.scenario.params.items()))
    return f"{self.scenario.kind}({params})" if params else self.scenario.kind


@dataclasses.dataclass(frozen=True)
class SweepRow:
  scenario: str
  mechanism: str
  epsilon: float
  trials: int
  mse: float
  ci_low: float
  ci_high: float
  seed: int


def _mechanism_label(spec: MechanismSpec) -> str:
  return spec.label


def run_sweep(config: ExperimentConfig) -> List[SweepRow]:
  """Evaluates every (mechanism, epsilon) cell on the configured data.

  Each cell draws from its own stream derived from the seed and the cell's
  labels, so cells are independent and the table is reproducible.
  """
  root = RngStream(config.seed)
  rows = []
  if config.scenario is not None:
    data = [build_scenario(config.scenario, root.child("scenario").generator())]
  else:
    data = [u.problem for u in ingest_scores(config.ingest_path, config.top_k)]
  for spec in config.mechanisms:
    for eps in config.epsilons:
      stream = root.child(_mechanism_label(spec), repr(float(eps)))
      gen = stream.generator()
      gaps = np.concatenate([
          squared_gaps(d, spec, eps, config.trials, gen) for d in data])
      est = mse_estimate(gaps)
      rows.append(SweepRow(config.scenario_label, _mechanism_label(spec),
                           float(eps), config.trials, est.mse, est.ci_low,
                           est.ci_high, config.seed))
  return rows


def _fmt(value) -> str:
  if isinstance(value, float):
    return repr(value)
  return str(value)


def write_rows_csv(rows: Sequence[SweepRow], fh) -> None:
  """RFC 4180 CSV. The CRLF terminator makes the writer quote any field
  holding a bare carriage return, so every string round-trips.

  Raises:
    ValueError: if a field contains a NUL character, which CSV cannot hold.
  """
  writer = csv.writer(fh)
  writer.writerow(SWEEP_COLUMNS)
  for r in rows:
    cells = [_fmt(getattr(r, c)) for c in SWEEP_COLUMNS]
    if any("\0" in cell for cell in cells):
      raise ValueError("CSV fields cannot contain NUL characters")
    writer.writerow(cells)


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
  buf = io.StringIO()
  write_rows_csv(rows, buf)
  return buf.getvalue()


def read_rows_csv(text: str) -> List[SweepRow]:
  reader = csv.DictReader(io.StringIO(text, newline=""))
  out = []
  for rec in reader:
    out.append(SweepRow(rec["scenario"], rec["mechanism"],
                        float(rec["epsilon"]), int(rec["trials"]),
                        float(rec["mse"]), float(rec["ci_low"]),
                        float(rec["ci_high"]), int(rec["seed"])))
  return out


def rows_to_json(rows: Sequence[SweepRow]) -> str:
  return json.dumps([dataclasses.asdict(r) for r in rows], indent=2)
