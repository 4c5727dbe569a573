"""Private selection mechanisms.

Every mechanism has a single-shot entry point returning a SelectionOutcome
with diagnostics, and a vectorized path through `select_many` used for
Monte Carlo evaluation. argmax ties go to the lowest index.

Noise conventions (exponential noise is given by its mean):
  rnm          Exp, mean 2Δ/ε with Δ the global sensitivity
  rnmh         Exp, mean 2Δ_a/ε (not differentially private)
  rnm_laplace  Lap, scale Δ/ε, or Δ_a/ε when heterogeneous
  rs_gamma     Lap, scale cΔ_a/ε; c=3 for geometric stopping and c=2+η for
               the truncated negative binomial
  gem / mgem   Exp, mean 2/ε on the transformed scores
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from dpselect import heuristics
from dpselect.core import (DEFAULT_SENSITIVITY_FLOOR, Mechanism,
                           MechanismSpec, RngLike, SelectionOutcome,
                           SelectionProblem, as_generator)
from dpselect.noise import (StoppingRule, exponential_icdf,
                            exponential_max_icdf, laplace_icdf,
                            laplace_max_icdf, open_uniform,
                            stopping_count_from_uniform)

DEFAULT_MAX_ITERATIONS = 10**7
_CHUNK_CELLS = 2_000_000


class IterationLimitExceeded(RuntimeError):
  pass


def _check_epsilon(epsilon):
  if not epsilon > 0:
    raise ValueError("epsilon must be positive")


def _rows(scores, size):
  scores = np.asarray(scores, dtype=float)
  if scores.ndim == 1:
    n = 1 if size is None else int(size)
    return np.broadcast_to(scores, (n, scores.size)), True
  if size is not None and size != scores.shape[0]:
    raise ValueError("size must match the number of score rows")
  return scores, False


# ---------------------------------------------------------------------------
# Report noisy max family


def _noisy_max(rows, noise):
  noised = rows + noise
  return np.argmax(noised, axis=1), noised


def _rnm_rows(rows, sens, epsilon, gen):
  delta = float(np.max(sens))
  if delta == 0:
    idx = np.argmax(rows, axis=1)
    return idx, np.array(rows)
  u = open_uniform(gen, rows.shape)
  return _noisy_max(rows, exponential_icdf(u, 2.0 * delta / epsilon))


def _rnmh_rows(rows, sens, epsilon, gen):
  u = open_uniform(gen, rows.shape)
  return _noisy_max(rows, exponential_icdf(u, 2.0 * sens / epsilon))


def _rnm_laplace_rows(rows, sens, epsilon, gen, heterogeneous):
  scale = sens / epsilon if heterogeneous else np.max(sens) / epsilon
  u = open_uniform(gen, rows.shape)
  return _noisy_max(rows, laplace_icdf(u, scale))


def rnm(problem: SelectionProblem, epsilon: float,
        rng: RngLike) -> SelectionOutcome:
  """Report noisy max with exponential noise at the global sensitivity."""
  _check_epsilon(epsilon)
  idx, noised = _rnm_rows(problem.scores[None, :], problem.sensitivities,
                          epsilon, as_generator(rng))
  return SelectionOutcome(int(idx[0]), noised_scores=noised[0])


def rnmh(problem: SelectionProblem, epsilon: float,
         rng: RngLike) -> SelectionOutcome:
  """Noisy max with per-candidate exponential noise.

  This is a reference baseline only; it is not differentially private.
  """
  _check_epsilon(epsilon)
  idx, noised = _rnmh_rows(problem.scores[None, :], problem.sensitivities,
                           epsilon, as_generator(rng))
  return SelectionOutcome(int(idx[0]), noised_scores=noised[0])


def rnm_laplace(problem: SelectionProblem, epsilon: float, rng: RngLike,
                heterogeneous: bool = False) -> SelectionOutcome:
  _check_epsilon(epsilon)
  idx, noised = _rnm_laplace_rows(problem.scores[None, :],
                                  problem.sensitivities, epsilon,
                                  as_generator(rng), heterogeneous)
  return SelectionOutcome(int(idx[0]), noised_scores=noised[0])


# ---------------------------------------------------------------------------
# k-ary randomized response


def krr_probabilities(k: int, epsilon: float):
  """(P[optimal], P[each other candidate]) for k-ary randomized response."""
  if k == 1:
    return 1.0, 0.0
  p_opt = 1.0 / (1.0 + (k - 1) * math.exp(-epsilon))
  return p_opt, (1.0 - p_opt) / (k - 1)


def _krr_rows(rows, epsilon, gen):
  n, k = rows.shape
  best = np.argmax(rows, axis=1)
  if k == 1:
    return best
  p_opt, _ = krr_probabilities(k, epsilon)
  keep = gen.random(n) < p_opt
  other = gen.integers(0, k - 1, size=n)
  other = other + (other >= best)
  return np.where(keep, best, other)


def krr(problem: SelectionProblem, epsilon: float,
        rng: RngLike) -> SelectionOutcome:
  if not epsilon >= 0:
    raise ValueError("epsilon must be nonnegative")
  idx = _krr_rows(problem.scores[None, :], epsilon, as_generator(rng))
  return SelectionOutcome(int(idx[0]))


# ---------------------------------------------------------------------------
# Random stopping


def stopping_rule_for(spec: MechanismSpec) -> StoppingRule:
  if spec.kind is Mechanism.RS_GAMMA:
    return StoppingRule("geometric", spec.gamma)
  return StoppingRule("truncated_negative_binomial", spec.gamma, spec.eta)


def noise_multiplier(rule: StoppingRule) -> float:
  """Per-draw noise multiplier c for random stopping.

  Geometric stopping of an ε-DP base mechanism is 3ε-DP, the truncated
  negative binomial is (2+η)ε-DP; each draw therefore spends ε/c.
  """
  return 3.0 if rule.kind == "geometric" else 2.0 + rule.eta


def _rs_rows(rows, sens, epsilon, rule, gen, noise="laplace",
             max_iterations=DEFAULT_MAX_ITERATIONS):
  """Vectorized random stopping.

  Only the best noised score per candidate matters, so instead of replaying
  the K individual draws this samples how often each candidate is drawn
  (multinomial given K) and then the maximum of that many noise draws by
  inverse CDF. The output distribution is identical to the draw-by-draw
  loop in `rs_gamma`.
  """
  n, k = rows.shape
  counts_k = stopping_count_from_uniform(rule, open_uniform(gen, n))
  if counts_k.max(initial=0) > max_iterations:
    raise IterationLimitExceeded(
        f"random stopping drew {counts_k.max()} > {max_iterations}")
  if k == 1:
    return np.zeros(n, dtype=np.int64), counts_k
  if k == 2:
    first = gen.binomial(counts_k, 0.5)
    counts = np.stack([first, counts_k - first], axis=1)
  else:
    counts = gen.multinomial(counts_k, np.full(k, 1.0 / k))
  c = noise_multiplier(rule)
  u = open_uniform(gen, rows.shape)
  drawn = counts > 0
  safe_counts = np.where(drawn, counts, 1)
  if noise == "laplace":
    best_noise = laplace_max_icdf(u, c * sens / epsilon, safe_counts)
  else:
    best_noise = exponential_max_icdf(u, 2.0 * c * sens / epsilon, safe_counts)
  noised = np.where(drawn, rows + best_noise, -np.inf)
  return np.argmax(noised, axis=1), counts_k


def rs_gamma(problem: SelectionProblem, epsilon: float,
             stopping: StoppingRule, rng: RngLike, noise: str = "laplace",
             max_iterations: int = DEFAULT_MAX_ITERATIONS) -> SelectionOutcome:
  """Report noisy max with random stopping and per-candidate noise.

  Draws the stopping count K first, then K (candidate, noise) pairs with
  candidates uniform with replacement, and returns the candidate holding the
  highest noised score seen. Noise is redrawn on every visit.

  Args:
    problem: the selection instance.
    epsilon: overall privacy parameter.
    stopping: distribution of K.
    rng: random source.
    noise: "laplace" (private) or "exponential" (a non-private variant kept
      for the counterexample check; mean 2cΔ_a/ε).
    max_iterations: guard on K.

  Returns:
    SelectionOutcome with `iterations` = K and `noised_scores` holding the
    best noised score per candidate (-inf for candidates never drawn).
  """
  _check_epsilon(epsilon)
  gen = as_generator(rng)
  n_draws = int(stopping_count_from_uniform(stopping, open_uniform(gen)))
  if n_draws > max_iterations:
    raise IterationLimitExceeded(
        f"random stopping drew {n_draws} > {max_iterations}")
  k = problem.k
  cand = gen.integers(0, k, size=n_draws)
  c = noise_multiplier(stopping)
  u = open_uniform(gen, n_draws)
  if noise == "laplace":
    z = laplace_icdf(u, c * problem.sensitivities[cand] / epsilon)
  elif noise == "exponential":
    z = exponential_icdf(u, 2.0 * c * problem.sensitivities[cand] / epsilon)
  else:
    raise ValueError(f"unknown noise {noise!r}")
  best = np.full(k, -np.inf)
  np.maximum.at(best, cand, problem.scores[cand] + z)
  return SelectionOutcome(int(np.argmax(best)), noised_scores=best,
                          iterations=n_draws)


# ---------------------------------------------------------------------------
# Generalized exponential mechanism


@dataclasses.dataclass(frozen=True)
class GemTransform:
  t: float
  transformed_scores: np.ndarray


def gem_shift(k: int, epsilon: float, beta: float) -> float:
  """t = 2 log(k / beta) / epsilon."""
  _check_epsilon(epsilon)
  if not 0 < beta < 1:
    raise ValueError("beta must lie in (0, 1)")
  return 2.0 * math.log(k / beta) / epsilon


def _gem_rows(rows, sens, t, floor=DEFAULT_SENSITIVITY_FLOOR):
  """Pairwise-normalized GEM scores for every row of `rows`.

  q'(a) = min_{a'} ((q_a - tΔ_a) - (q_a' - tΔ_a')) / (Δ_a + Δ_a').
  The maximizer of q_a - tΔ_a gets exactly 0.
  """
  d = np.maximum(sens, floor)
  den = d[:, None] + d[None, :]
  shifted = rows - t * d
  n, k = rows.shape
  out = np.empty((n, k))
  step = max(1, _CHUNK_CELLS // (k * k))
  for start in range(0, n, step):
    s = shifted[start:start + step]
    diff = s[:, :, None] - s[:, None, :]
    out[start:start + step] = np.min(diff / den, axis=2)
  return out


def gem_transform(problem: SelectionProblem, t: float,
                  floor: float = DEFAULT_SENSITIVITY_FLOOR) -> GemTransform:
  q_prime = _gem_rows(problem.scores[None, :], problem.sensitivities, t,
                      floor)[0]
  return GemTransform(t, q_prime)


def _transformed_rows(rows, sens, t, broadcast, floor):
  if broadcast:
    once = _gem_rows(rows[:1], sens, t, floor)
    return np.broadcast_to(once[0], rows.shape)
  return _gem_rows(rows, sens, t, floor)


def _gem_select_rows(transformed, epsilon, gen):
  u = open_uniform(gen, transformed.shape)
  return _noisy_max(transformed, exponential_icdf(u, 2.0 / epsilon))


def _gem_family(problem, epsilon, beta, rng, sign, floor):
  t = sign * gem_shift(problem.k, epsilon, beta)
  tr = gem_transform(problem, t, floor)
  idx, noised = _gem_select_rows(tr.transformed_scores[None, :], epsilon,
                                 as_generator(rng))
  return SelectionOutcome(int(idx[0]), noised_scores=noised[0],
                          transformed_scores=tr.transformed_scores)


def gem(problem: SelectionProblem, epsilon: float, beta: float,
        rng: RngLike,
        floor: float = DEFAULT_SENSITIVITY_FLOOR) -> SelectionOutcome:
  """GEM: penalize high-sensitivity candidates, then RNM at sensitivity 1."""
  return _gem_family(problem, epsilon, beta, rng, +1.0, floor)


def mgem(problem: SelectionProblem, epsilon: float, beta: float,
         rng: RngLike,
         floor: float = DEFAULT_SENSITIVITY_FLOOR) -> SelectionOutcome:
  """Modified GEM: the same transform with the shift negated."""
  return _gem_family(problem, epsilon, beta, rng, -1.0, floor)


def combined_split(epsilon: float, corr_fraction: float):
  """(ε_c, ε_g): budget for the correlation bit and for the selection."""
  if not 0 < corr_fraction < 1:
    raise ValueError("corr_fraction must lie in (0, 1)")
  eps_c = corr_fraction * epsilon
  return eps_c, epsilon - eps_c


def combined_gem(problem: SelectionProblem, epsilon: float,
                 corr_fraction: float, beta: float, rng: RngLike,
                 floor: float = DEFAULT_SENSITIVITY_FLOOR) -> SelectionOutcome:
  """Randomized-response test of the correlation sign, then GEM or mGEM.

  The bit 1{spearman(q, Δ) >= 0} is released through binary randomized
  response with ε_c; a released 1 runs mGEM with ε_g, a 0 runs GEM.
  """
  _check_epsilon(epsilon)
  eps_c, eps_g = combined_split(epsilon, corr_fraction)
  gen = as_generator(rng)
  bit = int(heuristics.spearman(problem.scores, problem.sensitivities) >= 0)
  released = heuristics.two_rr(bit, eps_c, gen)
  if released == 1:
    out = _gem_family(problem, eps_g, beta, gen, -1.0, floor)
    branch = "mgem"
  else:
    out = _gem_family(problem, eps_g, beta, gen, +1.0, floor)
    branch = "gem"
  return dataclasses.replace(out, branch=branch)


# ---------------------------------------------------------------------------
# Dispatch


def _spearman_signs(rows, sens, broadcast):
  if rows.shape[1] < 2:
    return np.ones(rows.shape[0], dtype=bool)
  if broadcast:
    r = heuristics.spearman(rows[0], sens)
    return np.full(rows.shape[0], r >= 0)
  return heuristics.spearman_rows(rows, sens) >= 0


def _select_rows(spec, rows, sens, gen, broadcast, floor, max_iterations):
  kind = spec.kind
  eps = spec.epsilon
  n, k = rows.shape
  if kind is Mechanism.RANDOM:
    return gen.integers(0, k, size=n)
  if kind is Mechanism.KRR:
    return _krr_rows(rows, eps, gen)
  if kind is Mechanism.RNM_EXP:
    return _rnm_rows(rows, sens, eps, gen)[0]
  if kind is Mechanism.RNMH:
    return _rnmh_rows(rows, sens, eps, gen)[0]
  if kind is Mechanism.RNM_LAPLACE:
    return _rnm_laplace_rows(rows, sens, eps, gen, spec.heterogeneous)[0]
  if kind in (Mechanism.RS_GAMMA, Mechanism.RS_GAMMA_IMPROVED):
    return _rs_rows(rows, sens, eps, stopping_rule_for(spec), gen,
                    spec.noise, max_iterations)[0]
  if kind in (Mechanism.GEM, Mechanism.MGEM):
    sign = 1.0 if kind is Mechanism.GEM else -1.0
    t = sign * gem_shift(k, eps, spec.beta)
    transformed = _transformed_rows(rows, sens, t, broadcast, floor)
    return _gem_select_rows(transformed, eps, gen)[0]
  if kind is Mechanism.COMBINED_GEM:
    eps_c, eps_g = combined_split(eps, spec.corr_fraction)
    truth = gen.random(n) < heuristics.truth_probability(eps_c)
    released = _spearman_signs(rows, sens, broadcast) == truth
    t = gem_shift(k, eps_g, spec.beta)
    out = np.empty(n, dtype=np.int64)
    for use_mgem, sign in ((True, -1.0), (False, 1.0)):
      mask = released == use_mgem
      if not mask.any():
        continue
      sub = rows[mask]
      transformed = _transformed_rows(sub, sens, sign * t, broadcast, floor)
      out[mask] = _gem_select_rows(transformed, eps_g, gen)[0]
    return out
  raise ValueError(f"unsupported mechanism {kind}")


def select_many(spec: MechanismSpec, scores, sensitivities, rng: RngLike,
                size: Optional[int] = None,
                floor: float = DEFAULT_SENSITIVITY_FLOOR,
                max_iterations: int = DEFAULT_MAX_ITERATIONS) -> np.ndarray:
  """Runs a mechanism many times and returns the chosen indices.

  Args:
    spec: mechanism and hyper-parameters.
    scores: either one score vector (k,), repeated `size` times, or a
      matrix (n, k) with one selection per row.
    sensitivities: candidate-wise sensitivities (k,), shared by all rows.
    rng: random source; large batches are processed in chunks drawn from
      the same generator.
    size: number of repetitions when `scores` is a single vector.
    floor: lower bound applied to sensitivities in the GEM denominators.
    max_iterations: guard on the random stopping count.

  Returns:
    Integer array of chosen indices, one per selection.
  """
  gen = as_generator(rng)
  sens = np.asarray(sensitivities, dtype=float)
  rows, broadcast = _rows(scores, size)
  n, k = rows.shape
  if sens.shape != (k,):
    raise ValueError("sensitivities must have one entry per candidate")
  if np.any(sens < 0):
    raise ValueError("sensitivities must be nonnegative")
  step = max(1, _CHUNK_CELLS // k)
  parts = [
      _select_rows(spec, rows[i:i + step], sens, gen, broadcast, floor,
                   max_iterations) for i in range(0, n, step)
  ]
  return np.concatenate(parts).astype(np.int64)


def select(spec: MechanismSpec, problem: SelectionProblem, rng: RngLike,
           floor: float = DEFAULT_SENSITIVITY_FLOOR) -> SelectionOutcome:
  """Single-shot dispatch on a MechanismSpec."""
  kind = spec.kind
  eps = spec.epsilon
  if kind is Mechanism.RANDOM:
    gen = as_generator(rng)
    return SelectionOutcome(int(gen.integers(problem.k)))
  if kind is Mechanism.KRR:
    return krr(problem, eps, rng)
  if kind is Mechanism.RNM_EXP:
    return rnm(problem, eps, rng)
  if kind is Mechanism.RNMH:
    return rnmh(problem, eps, rng)
  if kind is Mechanism.RNM_LAPLACE:
    return rnm_laplace(problem, eps, rng, spec.heterogeneous)
  if kind in (Mechanism.RS_GAMMA, Mechanism.RS_GAMMA_IMPROVED):
    return rs_gamma(problem, eps, stopping_rule_for(spec), rng, spec.noise)
  if kind is Mechanism.GEM:
    return gem(problem, eps, spec.beta, rng, floor)
  if kind is Mechanism.MGEM:
    return mgem(problem, eps, spec.beta, rng, floor)
  if kind is Mechanism.COMBINED_GEM:
    return combined_gem(problem, eps, spec.corr_fraction, spec.beta, rng,
                        floor)
  raise ValueError(f"unsupported mechanism {kind}")
