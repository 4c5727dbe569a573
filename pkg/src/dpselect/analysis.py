"""Two-candidate closed forms, the HG comparison metric and DP-ratio checks."""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from dpselect.core import (Mechanism, MechanismSpec, RngLike,
                           SelectionProblem, as_generator, make_problem)
from dpselect.mechanisms import select_many


def closed_form_rnm_error(q1: float, q2: float, delta: float,
                          epsilon: float) -> float:
  """P[RNM picks the lower of two candidates] = ½ exp(-ε (q2-q1) / 2Δ)."""
  if not q1 < q2:
    raise ValueError("expects q1 < q2")
  if not (delta > 0 and epsilon > 0):
    raise ValueError("delta and epsilon must be positive")
  return 0.5 * math.exp(-epsilon * (q2 - q1) / (2.0 * delta))


def closed_form_rnmh_error(q1: float, q2: float, d1: float, d2: float,
                           epsilon: float) -> float:
  """P[RNMH picks the lower candidate] = exp(-ε (q2-q1) / 2Δ1) / (1 + Δ2/Δ1).

  d1 = 0 gives 0 (the lower candidate is never noised upwards).
  """
  if not q1 < q2:
    raise ValueError("expects q1 < q2")
  if not (d1 >= 0 and d2 > 0 and epsilon > 0):
    raise ValueError("need d1 >= 0, d2 > 0 and epsilon > 0")
  if d1 == 0:
    return 0.0
  return math.exp(-epsilon * (q2 - q1) / (2.0 * d1)) / (1.0 + d2 / d1)


def miss_rate(spec: MechanismSpec, problem: SelectionProblem, trials: int,
              rng: RngLike) -> float:
  picks = select_many(spec, problem.scores, problem.sensitivities, rng,
                      size=trials)
  return float(np.mean(picks != problem.optimal_index))


def hg(mech_a: MechanismSpec, mech_b: MechanismSpec,
       problem: SelectionProblem, trials: int, rng: RngLike) -> float:
  """P[A misses the optimum] - P[B misses it]; positive when B is better.

  Both mechanisms draw from one generator in sequence, so their samples are
  independent.
  """
  if trials < 1:
    raise ValueError("trials must be positive")
  gen = as_generator(rng)
  return miss_rate(mech_a, problem, trials, gen) - miss_rate(
      mech_b, problem, trials, gen)


# ---------------------------------------------------------------------------
# Empirical privacy-loss ratio


def wilson_interval(successes: int, trials: int, z: float = 1.959964):
  if trials <= 0:
    raise ValueError("trials must be positive")
  p = successes / trials
  denom = 1.0 + z * z / trials
  centre = (p + z * z / (2 * trials)) / denom
  half = z * math.sqrt(p * (1 - p) / trials + z * z /
                       (4 * trials * trials)) / denom
  return max(0.0, centre - half), min(1.0, centre + half)


@dataclasses.dataclass(frozen=True)
class DpRatioReport:
  empirical_ratio: float
  analytic_ratio: Optional[float]
  trials: int
  ci_low: float
  ci_high: float
  count_d1: int
  count_d2: int
  reliable: bool

  def contains(self, value: float) -> bool:
    return self.ci_low <= value <= self.ci_high


def verify_dp_ratio(mechanism: MechanismSpec, problem_d1: SelectionProblem,
                    problem_d2: SelectionProblem, target_index: int,
                    trials: int, rng: RngLike,
                    analytic_ratio: Optional[float] = None,
                    z: float = 1.959964) -> DpRatioReport:
  """Estimates P[M(D1)=target] / P[M(D2)=target] by Monte Carlo.

  The interval combines the two Wilson intervals by interval arithmetic.
  Each Wilson interval is at 95% by default, so the combined interval is
  conservative. `reliable` is False when either event count is below 100.
  A zero denominator count yields an infinite ratio and upper limit.
  """
  if problem_d1.k != problem_d2.k:
    raise ValueError("adjacent problems must have the same candidates")
  if not 0 <= target_index < problem_d1.k:
    raise ValueError("target index out of range")
  gen = as_generator(rng)
  c1 = int(np.sum(select_many(mechanism, problem_d1.scores,
                              problem_d1.sensitivities, gen, trials)
                  == target_index))
  c2 = int(np.sum(select_many(mechanism, problem_d2.scores,
                              problem_d2.sensitivities, gen, trials)
                  == target_index))
  lo1, hi1 = wilson_interval(c1, trials, z)
  lo2, hi2 = wilson_interval(c2, trials, z)
  if c2 == 0:
    ratio = math.inf if c1 > 0 else math.nan
    ci_low = lo1 / hi2 if hi2 > 0 else math.inf
    ci_high = math.inf
  else:
    ratio = c1 / c2
    ci_low = lo1 / hi2
    ci_high = hi1 / lo2 if lo2 > 0 else math.inf
  return DpRatioReport(ratio, analytic_ratio, trials, ci_low, ci_high, c1, c2,
                       min(c1, c2) >= 100)


@dataclasses.dataclass(frozen=True)
class Counterexample:
  """A pair of adjacent problems on which a mechanism leaks.

  `prob_d1` and `prob_d2` are the analytic probabilities of outputting
  `target_index`; `analytic_ratio` is prob_d1 / prob_d2.
  """

  mechanism: MechanismSpec
  d1: SelectionProblem
  d2: SelectionProblem
  target_index: int
  prob_d1: float
  prob_d2: float

  @property
  def analytic_ratio(self) -> float:
    if self.prob_d2 == 0:
      return math.inf
    return self.prob_d1 / self.prob_d2

  def verify(self, trials: int, rng: RngLike) -> DpRatioReport:
    return verify_dp_ratio(self.mechanism, self.d1, self.d2,
                           self.target_index, trials, rng,
                           self.analytic_ratio)


def laplace_rnmh_counterexample(k: int, epsilon: float) -> Counterexample:
  """Noisy max with per-candidate Laplace noise leaks (k-1)ε.

  Candidate 0 has sensitivity 0 and score 0 on both datasets; the others
  have sensitivity 1 and score 0 on D1, 1 on D2.
  """
  if k < 2:
    raise ValueError("needs at least two candidates")
  sens = [0.0] + [1.0] * (k - 1)
  d1 = make_problem([0.0] * k, sens)
  d2 = make_problem([0.0] + [1.0] * (k - 1), sens)
  spec = MechanismSpec(Mechanism.RNM_LAPLACE, epsilon, heterogeneous=True)
  return Counterexample(spec, d1, d2, 0, 0.5**(k - 1),
                        (0.5 * math.exp(-epsilon))**(k - 1))


def exponential_rnmh_counterexample(epsilon: float) -> Counterexample:
  """Exponential-noise RNMH cannot output the zero-sensitivity candidate on D.

  D1 is the dataset with scores (0, -1/2), D2 the one with (0, 1/2); the
  target is candidate 0 with sensitivity 0.
  """
  sens = [0.0, 1.0]
  d1 = make_problem([0.0, -0.5], sens)
  d2 = make_problem([0.0, 0.5], sens)
  spec = MechanismSpec(Mechanism.RNMH, epsilon)
  return Counterexample(spec, d1, d2, 0, 1.0 - math.exp(-epsilon / 4.0), 0.0)


def _geometric_pgf(gamma: float, x: float) -> float:
  """E[x^K] for K geometric on {1, 2, ...} with success probability gamma."""
  return gamma * x / (1.0 - (1.0 - gamma) * x)


def rs_exponential_counterexample(k: int, gamma: float,
                                  epsilon: float) -> Counterexample:
  """Random stopping with exponential noise of mean 6Δ_a/ε.

  Candidate 0 has sensitivity 0 and score 1 on both datasets; the others
  score 1 on D1 and 0 on D2 with sensitivity 1. On D1 candidate 0 wins only
  if it is the sole candidate drawn. On D2 it wins when it is drawn at least
  once and every other draw has noise below 1; with p = 1 - e^{-ε/6} that is
  E[((1 + (k-1)p)/k)^K] - E[((k-1)p/k)^K].
  """
  if k < 2:
    raise ValueError("needs at least two candidates")
  sens = [0.0] + [1.0] * (k - 1)
  d1 = make_problem([1.0] * k, sens)
  d2 = make_problem([1.0] + [0.0] * (k - 1), sens)
  spec = MechanismSpec(Mechanism.RS_GAMMA, epsilon, gamma=gamma,
                       noise="exponential")
  p = 1.0 - math.exp(-epsilon / 6.0)
  prob_d1 = _geometric_pgf(gamma, 1.0 / k)
  prob_d2 = (_geometric_pgf(gamma, (1.0 + (k - 1) * p) / k) -
             _geometric_pgf(gamma, (k - 1) * p / k))
  # D2 is the dataset that favours the target here, so report D2 / D1.
  return Counterexample(spec, d2, d1, 0, prob_d2, prob_d1)


# ---------------------------------------------------------------------------
# Maximum of independent Laplace variables


def laplace_max_cdf(scales: Sequence[float], x: float) -> float:
  """P[max_a z_a <= x] for independent z_a ~ Laplace(0, b_a)."""
  b = np.asarray(scales, dtype=float)
  if b.size == 0 or np.any(b <= 0):
    raise ValueError("scales must be positive")
  if x > 0:
    return float(np.prod(1.0 - 0.5 * np.exp(-x / b)))
  return float(np.prod(0.5 * np.exp(x / b)))


def binomial_sigma(p: float, trials: int) -> float:
  return math.sqrt(p * (1.0 - p) / trials)


def chi_square_uniform_pvalue(counts) -> float:
  counts = np.asarray(counts)
  return float(stats.chisquare(counts).pvalue)
