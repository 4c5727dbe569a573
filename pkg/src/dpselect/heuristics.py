"""Correlation heuristics, binary randomized response and utility-bound flags.

The sign of the score/sensitivity correlation predicts which of GEM and mGEM
does better; the flags below compare GEM's utility bound against RNM's and
against uniform selection. Logs are natural logs.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import stats

from dpselect.core import RngLike, SelectionProblem, as_generator


@dataclasses.dataclass(frozen=True)
class CorrelationReport:
  pearson: float
  spearman: float
  weighted: float
  bucket_count: int


@dataclasses.dataclass(frozen=True)
class UtilityBoundFlags:
  gem_worse_than_rnm: bool
  gem_worse_than_random: bool


def _check_pair(q, d):
  q = np.asarray(q, dtype=float)
  d = np.asarray(d, dtype=float)
  if q.shape != d.shape or q.ndim != 1:
    raise ValueError("expected two vectors of equal length")
  if q.size < 2:
    raise ValueError("correlation needs at least two points")
  return q, d


def _weighted_pearson(x, y, w) -> float:
  mx = np.sum(w * x) / np.sum(w)
  my = np.sum(w * y) / np.sum(w)
  dx = x - mx
  dy = y - my
  sxx = np.sum(w * dx * dx)
  syy = np.sum(w * dy * dy)
  if sxx <= 0 or syy <= 0:
    return 0.0
  r = np.sum(w * dx * dy) / math.sqrt(sxx * syy)
  return float(np.clip(r, -1.0, 1.0))


def pearson(q, d) -> float:
  """Pearson correlation; 0 when either vector is constant."""
  q, d = _check_pair(q, d)
  return _weighted_pearson(q, d, np.ones_like(q))


def spearman(q, d) -> float:
  """Spearman rank correlation with average ranks for ties.

  A constant input has no rank order and yields 0.
  """
  q, d = _check_pair(q, d)
  return pearson(stats.rankdata(q), stats.rankdata(d))


def spearman_rows(scores: np.ndarray, sensitivities: np.ndarray) -> np.ndarray:
  """Row-wise Spearman of each score row against one sensitivity vector."""
  scores = np.atleast_2d(scores)
  rq = stats.rankdata(scores, axis=1)
  rd = stats.rankdata(sensitivities)
  rq = rq - rq.mean(axis=1, keepdims=True)
  rd = rd - rd.mean()
  sxx = np.einsum("ij,ij->i", rq, rq)
  syy = float(rd @ rd)
  num = rq @ rd
  out = np.zeros(scores.shape[0])
  ok = (sxx > 0) & (syy > 0)
  out[ok] = num[ok] / np.sqrt(sxx[ok] * syy)
  return np.clip(out, -1.0, 1.0)


def bucket_weights(q, d, buckets: int = 5) -> np.ndarray:
  """Per-candidate weights Δ_a / max Δ within the candidate's score bucket.

  The score range is cut into `buckets` equal-width intervals, half-open
  except the last which is closed. A bucket whose sensitivities are all
  zero gives its members weight 1.
  """
  q, d = _check_pair(q, d)
  if buckets < 1:
    raise ValueError("need at least one bucket")
  lo, hi = float(q.min()), float(q.max())
  if hi > lo:
    edges = lo + (hi - lo) * np.arange(1, buckets) / buckets
    idx = np.searchsorted(edges, q, side="right")
  else:
    idx = np.zeros(q.size, dtype=int)
  weights = np.ones_like(d)
  for b in np.unique(idx):
    members = idx == b
    top = d[members].max()
    if top > 0:
      weights[members] = d[members] / top
  return weights


def weighted_correlation(q, d, buckets: int = 5) -> float:
  """Bucket-weighted Pearson correlation of scores and sensitivities.

  Candidates whose sensitivity is small relative to the largest sensitivity
  among similarly scored candidates are down-weighted, since the maximum of
  the noised scores in a bucket is driven by its noisiest members.
  """
  q, d = _check_pair(q, d)
  return _weighted_pearson(q, d, bucket_weights(q, d, buckets))


def correlation_report(q, d, buckets: int = 5) -> CorrelationReport:
  return CorrelationReport(pearson(q, d), spearman(q, d),
                           weighted_correlation(q, d, buckets), buckets)


def truth_probability(epsilon: float) -> float:
  """e^eps / (e^eps + 1), evaluated without overflow."""
  return 1.0 / (1.0 + math.exp(-epsilon))


def two_rr(bit: int, epsilon: float, rng: RngLike) -> int:
  """Binary randomized response: keeps `bit` w.p. e^eps/(e^eps+1)."""
  if bit not in (0, 1):
    raise ValueError("bit must be 0 or 1")
  if not epsilon >= 0:
    raise ValueError("epsilon must be nonnegative")
  gen = as_generator(rng)
  keep = gen.random() < truth_probability(epsilon)
  return bit if keep else 1 - bit


def gem_error_scale(k: int, epsilon: float, beta: float) -> float:
  """4 log(k / beta) / epsilon, the factor in GEM's utility bound."""
  return 4.0 * math.log(k / beta) / epsilon


def utility_bound_flags(problem: SelectionProblem, epsilon: float,
                        beta: float = 0.05) -> UtilityBoundFlags:
  if not epsilon > 0:
    raise ValueError("epsilon must be positive")
  if not 0 < beta < 1:
    raise ValueError("beta must lie in (0, 1)")
  d_star = float(problem.sensitivities[problem.optimal_index])
  q = problem.scores
  spread = float(q.max() - q.min())
  return UtilityBoundFlags(
      gem_worse_than_rnm=d_star > problem.global_sensitivity / 2.0,
      gem_worse_than_random=d_star > spread / gem_error_scale(
          problem.k, epsilon, beta),
  )
