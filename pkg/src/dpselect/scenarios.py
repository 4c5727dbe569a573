"""Synthetic selection scenarios and quantile-based sensitivity estimation.

Trial-based scenarios draw N score vectors, set each candidate's sensitivity
to the width of its 10%-90% empirical quantile band, and clip the scores into
that band. Quantiles use linear interpolation between order statistics.
"""

from __future__ import annotations

import dataclasses
import math
from typing import List, Optional

import numpy as np

from dpselect.core import RngLike, SelectionProblem, as_generator, make_problem

DEFAULT_CANDIDATES = 100
DEFAULT_TRIALS = 1000


@dataclasses.dataclass(frozen=True)
class TrialSet:
  raw_scores: np.ndarray         # (N, k)
  clipped_scores: np.ndarray     # (N, k)
  sensitivities: np.ndarray      # (k,)
  quantile_lo: Optional[float] = 0.1
  quantile_hi: Optional[float] = 0.9
  p_lo: Optional[np.ndarray] = None
  p_hi: Optional[np.ndarray] = None

  @property
  def trials(self) -> int:
    return self.clipped_scores.shape[0]

  @property
  def k(self) -> int:
    return self.clipped_scores.shape[1]

  def mean_scores(self) -> np.ndarray:
    return self.clipped_scores.mean(axis=0)

  def problem(self, i: int) -> SelectionProblem:
    return make_problem(self.clipped_scores[i], self.sensitivities)


@dataclasses.dataclass(frozen=True)
class ScenarioSpec:
  kind: str
  params: dict = dataclasses.field(default_factory=dict)
  candidates: int = DEFAULT_CANDIDATES
  trials: int = DEFAULT_TRIALS

  def __post_init__(self):
    if self.kind not in SCENARIO_KINDS:
      raise ValueError(f"unknown scenario {self.kind!r}")
    if self.candidates < 2:
      raise ValueError("a scenario needs at least two candidates")
    if self.trials < 1:
      raise ValueError("a scenario needs at least one trial")


SCENARIO_KINDS = ("bimodal", "s4_lognormal_means", "s5_linear", "s6_uniform",
                  "increasing_corr", "polarized")


def estimate_sensitivities(raw_scores, q_lo: float = 0.1,
                           q_hi: float = 0.9) -> TrialSet:
  """Per-candidate quantile-band sensitivities and clipped scores."""
  raw = np.asarray(raw_scores, dtype=float)
  if raw.ndim != 2 or raw.shape[0] < 2:
    raise ValueError("need an (N, k) score matrix with N >= 2")
  if not 0.0 <= q_lo <= q_hi <= 1.0:
    raise ValueError("quantile levels must satisfy 0 <= lo <= hi <= 1")
  p_lo = np.quantile(raw, q_lo, axis=0)
  p_hi = np.quantile(raw, q_hi, axis=0)
  clipped = np.clip(raw, p_lo, p_hi)
  return TrialSet(raw, clipped, p_hi - p_lo, q_lo, q_hi, p_lo, p_hi)


# ---------------------------------------------------------------------------
# Scenarios 1-3: deterministic bimodal problems


def gen_bimodal(n: int, frac_high: float, q_hi: float, q_lo: float, d_hi,
                d_lo) -> SelectionProblem:
  """ceil(frac_high * n) candidates at (q_hi, d_hi), the rest at (q_lo, d_lo).

  `d_hi`/`d_lo` may also be sequences, in which case they are cycled over
  the members of the group.
  """
  if not 0.0 <= frac_high <= 1.0:
    raise ValueError("frac_high must lie in [0, 1]")
  n_high = math.ceil(frac_high * n)
  n_low = n - n_high
  d_high = np.resize(np.asarray(d_hi, dtype=float), n_high)
  d_low = np.resize(np.asarray(d_lo, dtype=float), n_low)
  scores = np.concatenate([np.full(n_high, q_hi), np.full(n_low, q_lo)])
  return make_problem(scores, np.concatenate([d_high, d_low]))


def bimodal_scenario(number: int, n: int = DEFAULT_CANDIDATES,
                     frac_high: float = 0.5) -> SelectionProblem:
  """Scenario 1 (positive), 2 (negative) or 3 (no correlation).

  High scores are 1, low scores -1, sensitivities 1 or 1.8. In scenario 3
  each score group alternates between the two sensitivities.
  """
  if number == 1:
    return gen_bimodal(n, frac_high, 1.0, -1.0, 1.8, 1.0)
  if number == 2:
    return gen_bimodal(n, frac_high, 1.0, -1.0, 1.0, 1.8)
  if number == 3:
    return gen_bimodal(n, frac_high, 1.0, -1.0, [1.0, 1.8], [1.0, 1.8])
  raise ValueError("bimodal scenarios are numbered 1, 2, 3")


# ---------------------------------------------------------------------------
# Scenarios 4-6 and the increasing-correlation family


def truncated_normal(gen: np.random.Generator, loc: float, scale: float,
                     low: float, high: float, size: int) -> np.ndarray:
  """Rejection sampling from the parent normal, consumed in order."""
  out = np.empty(0)
  while out.size < size:
    draw = gen.normal(loc, scale, size=2 * (size - out.size) + 16)
    keep = draw[(draw >= low) & (draw <= high)]
    out = np.concatenate([out, keep])
  return out[:size]


def _sigma_profile(gen, k):
  return truncated_normal(gen, 0.5, 1.0, 0.01, 0.7, k)


def gen_trialset_s4(seed: RngLike, candidates: int = DEFAULT_CANDIDATES,
                    trials: int = DEFAULT_TRIALS) -> TrialSet:
  """Normal(log a, sigma_a^2) for a = 1..k with sigma sorted ascending."""
  gen = as_generator(seed)
  sigma = np.sort(_sigma_profile(gen, candidates))
  a = np.arange(1, candidates + 1)
  raw = gen.normal(np.log(a), sigma, size=(trials, candidates))
  return estimate_sensitivities(raw)


def s4_sigmas(seed: RngLike, candidates: int = DEFAULT_CANDIDATES):
  """The sorted sigma profile used by `gen_trialset_s4` for this seed."""
  return np.sort(_sigma_profile(as_generator(seed), candidates))


def gen_trialset_s5(seed: RngLike, candidates: int = DEFAULT_CANDIDATES,
                    trials: int = DEFAULT_TRIALS) -> TrialSet:
  """Normal(0.1 a, sd = 2.3 - 0.02 a) for a = 1..k."""
  gen = as_generator(seed)
  a = np.arange(1, candidates + 1)
  sd = 2.3 - 0.02 * a
  if np.any(sd <= 0):
    raise ValueError("scenario 5 needs at most 114 candidates")
  raw = gen.normal(0.1 * a, sd, size=(trials, candidates))
  return estimate_sensitivities(raw)


def gen_trialset_s6(seed: RngLike, candidates: int = DEFAULT_CANDIDATES,
                    trials: int = DEFAULT_TRIALS) -> TrialSet:
  """Normal(mu_a, sigma_a), mu uniform on [0, 1], sigma truncated normal."""
  gen = as_generator(seed)
  mu = gen.uniform(0.0, 1.0, size=candidates)
  sigma = _sigma_profile(gen, candidates)
  raw = gen.normal(mu, sigma, size=(trials, candidates))
  return estimate_sensitivities(raw)


def gen_trialset_increasing_corr(t_param: float, seed: RngLike,
                                 candidates: int = DEFAULT_CANDIDATES,
                                 trials: int = DEFAULT_TRIALS) -> TrialSet:
  """Scores linear in a latent sensitivity variable with slope t/5.

  Each candidate gets a latent x_a ~ N(0, 1) for the whole scenario and its
  sensitivity is x_a - min x. Every trial draws fresh z_a ~ N(0, 1) and sets
  the score to (t x_a + z_a)/5 shifted so the trial minimum is 0. The sign
  and strength of the score/sensitivity correlation follow t.
  """
  gen = as_generator(seed)
  x = gen.standard_normal(candidates)
  z = gen.standard_normal((trials, candidates))
  raw = (t_param * x + z) / 5.0
  raw = raw - raw.min(axis=1, keepdims=True)
  return TrialSet(raw, raw, x - x.min(), None, None)


# ---------------------------------------------------------------------------
# Polarized populations (combined GEM experiments)


@dataclasses.dataclass(frozen=True)
class PolarizedData:
  scores: np.ndarray          # (users, k), clipped into the quantile band
  sensitivities: np.ndarray   # (k,)
  groups: np.ndarray          # (users,) 0 or 1

  def problems(self) -> List[SelectionProblem]:
    return [make_problem(row, self.sensitivities) for row in self.scores]


def polarized_base_scores(candidates: int = DEFAULT_CANDIDATES):
  """Group-0 and group-1 base scores: -8 + 8a/k and 8 - 8a/k."""
  a = np.arange(candidates)
  step = 8.0 * a / candidates
  return -8.0 + step, 8.0 - step


def gen_polarized_data(users: int = 5000,
                       candidates: int = DEFAULT_CANDIDATES,
                       sigma: float = 0.5, seed: RngLike = 0,
                       q_lo: float = 0.05, q_hi: float = 0.95) -> PolarizedData:
  """Two equal user groups with opposite linear score profiles plus noise.

  Sensitivities are the 5%-95% quantile bands of each candidate's scores
  across all users, which makes them large where the groups disagree most;
  the group-0 profile is then negatively correlated with sensitivity and
  the group-1 profile positively.
  """
  if users % 2:
    raise ValueError("the user count must be even")
  if sigma < 0:
    raise ValueError("sigma must be nonnegative")
  gen = as_generator(seed)
  base0, base1 = polarized_base_scores(candidates)
  half = users // 2
  groups = np.repeat([0, 1], half)
  base = np.where(groups[:, None] == 0, base0, base1)
  raw = base + sigma * gen.standard_normal((users, candidates))
  p_lo = np.quantile(raw, q_lo, axis=0)
  p_hi = np.quantile(raw, q_hi, axis=0)
  return PolarizedData(np.clip(raw, p_lo, p_hi), p_hi - p_lo, groups)


def gen_polarized(users: int = 5000, candidates: int = DEFAULT_CANDIDATES,
                  sigma: float = 0.5, seed: RngLike = 0) -> List[SelectionProblem]:
  return gen_polarized_data(users, candidates, sigma, seed).problems()


def build_scenario(spec: ScenarioSpec, seed: RngLike):
  """Materializes a ScenarioSpec as a SelectionProblem or a TrialSet."""
  p = dict(spec.params)
  if spec.kind == "bimodal":
    if "number" in p:
      return bimodal_scenario(int(p["number"]), spec.candidates,
                              float(p.get("frac_high", 0.5)))
    return gen_bimodal(spec.candidates, float(p.get("frac_high", 0.5)),
                       float(p.get("q_hi", 1.0)), float(p.get("q_lo", -1.0)),
                       p.get("d_hi", 1.8), p.get("d_lo", 1.0))
  if spec.kind == "s4_lognormal_means":
    return gen_trialset_s4(seed, spec.candidates, spec.trials)
  if spec.kind == "s5_linear":
    return gen_trialset_s5(seed, spec.candidates, spec.trials)
  if spec.kind == "s6_uniform":
    return gen_trialset_s6(seed, spec.candidates, spec.trials)
  if spec.kind == "increasing_corr":
    return gen_trialset_increasing_corr(float(p.get("t", 0.0)), seed,
                                        spec.candidates, spec.trials)
  data = gen_polarized_data(int(p.get("users", 5000)), spec.candidates,
                            float(p.get("sigma", 0.5)), seed)
  return TrialSet(data.scores, data.scores, data.sensitivities, 0.05, 0.95)
