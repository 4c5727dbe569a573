"""Seeded samplers for the noise and stopping distributions.

Samplers work by inverse-CDF transforms of uniform draws, one uniform per
sample, so a position in the stream maps to exactly one sample.

Exponential noise is parameterized by its mean everywhere in this package.
Report-noisy-max with privacy parameter epsilon and sensitivity d uses
mean = 2 * d / epsilon.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from dpselect.core import RngLike, as_generator

_TWO53 = float(2**53)


def open_uniform(gen: np.random.Generator, size=None):
  """Uniform draws on the open interval (0, 1)."""
  return (gen.integers(0, 2**53, size=size) + 0.5) / _TWO53


def exponential_icdf(u, mean):
  return -np.asarray(mean) * np.log1p(-np.asarray(u))


def laplace_icdf(u, scale):
  """Inverse Laplace CDF; scale 0 maps every u to 0."""
  u = np.asarray(u, dtype=float)
  scale = np.asarray(scale, dtype=float)
  lower = scale * np.log(2.0 * np.minimum(u, 0.5))
  upper = -scale * np.log(2.0 * (1.0 - np.maximum(u, 0.5)))
  return np.where(u < 0.5, lower, upper)


def laplace_max_icdf(u, scale, count):
  """Inverse CDF of the maximum of `count` iid Laplace(scale) draws.

  The maximum has CDF F**count, so it is F^{-1}(u**(1/count)). Computed
  with expm1/log so that large counts do not lose the upper tail.
  """
  u = np.asarray(u, dtype=float)
  count = np.asarray(count, dtype=float)
  log_p = np.log(u) / count
  p = np.exp(log_p)
  one_minus_p = -np.expm1(log_p)
  scale = np.asarray(scale, dtype=float)
  lower = scale * np.log(2.0 * np.minimum(p, 0.5))
  upper = -scale * np.log(2.0 * np.where(p >= 0.5, one_minus_p, 0.5))
  return np.where(p < 0.5, lower, upper)


def exponential_max_icdf(u, mean, count):
  """Inverse CDF of the maximum of `count` iid exponentials."""
  log_p = np.log(np.asarray(u, dtype=float)) / np.asarray(count, dtype=float)
  return -np.asarray(mean) * np.log(-np.expm1(log_p))


def sample_exponential(mean: float, rng: RngLike, size=None):
  if not mean > 0:
    raise ValueError("exponential mean must be positive")
  gen = as_generator(rng)
  return exponential_icdf(open_uniform(gen, size), mean)


def sample_laplace(scale: float, rng: RngLike, size=None):
  if not scale > 0:
    raise ValueError("Laplace scale must be positive")
  gen = as_generator(rng)
  return laplace_icdf(open_uniform(gen, size), scale)


@dataclasses.dataclass(frozen=True)
class StoppingRule:
  """Distribution of the number of draws made by random stopping.

  `geometric` has P[K=k] = gamma (1-gamma)^(k-1). The truncated negative
  binomial family takes an extra shape `eta`; eta=0 is the logarithmic
  distribution and eta=1 coincides with the geometric.
  """

  kind: str = "geometric"
  gamma: float = 0.05
  eta: float = 0.0

  def __post_init__(self):
    if self.kind not in ("geometric", "truncated_negative_binomial"):
      raise ValueError(f"unknown stopping rule {self.kind!r}")
    upper_ok = self.gamma <= 1.0 if self.kind == "geometric" else (
        self.gamma < 1.0)
    if not (self.gamma > 0.0 and upper_ok):
      raise ValueError("gamma must lie in (0, 1)")
    if not self.eta > -1.0:
      raise ValueError("eta must exceed -1")

  def mean(self) -> float:
    g = self.gamma
    if self.kind == "geometric":
      return 1.0 / g
    if self.eta == 0:
      return (1.0 / g - 1.0) / math.log(1.0 / g)
    return self.eta * (1.0 - g) / (g * (1.0 - g**self.eta))

  def pmf(self, k):
    """Point masses P[K=k] for integer k >= 1 (vectorized)."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    g = self.gamma
    if self.kind == "geometric":
      return g * (1.0 - g)**(k - 1.0)
    if self.eta == 0:
      return (1.0 - g)**k / (k * math.log(1.0 / g))
    kmax = int(k.max())
    table = _tnb_pmf_table(g, self.eta, kmax)
    return table[k.astype(int) - 1]


def _tnb_pmf_table(gamma: float, eta: float, kmax: int) -> np.ndarray:
  """P[K=1..kmax] for the truncated negative binomial with eta != 0.

  P[K=k] = (1-gamma)^k / (gamma^-eta - 1) * prod_{l<k} (l+eta)/(l+1).
  For eta in (-1, 0) the l=0 factor and the normalizer are both negative,
  so eta / (gamma^-eta - 1) is folded into one positive constant.
  """
  ks = np.arange(1, kmax + 1, dtype=float)
  head = eta / (gamma**(-eta) - 1.0)
  # log of prod_{l=1}^{k-1} (l+eta)/(l+1)
  factors = np.log((ks[:-1] + eta) / (ks[:-1] + 1.0))
  log_prod = np.concatenate(([0.0], np.cumsum(factors)))
  return head * np.exp(ks * math.log1p(-gamma) + log_prod)


class _InverseCdfTable:
  """Lazily grown CDF table for a distribution on {1, 2, ...}."""

  def __init__(self, rule: StoppingRule):
    self.rule = rule
    self.cdf = np.zeros(0)
    self._grow_to(1.0 - 1e-12)

  def _grow_to(self, target: float):
    n = max(64, 2 * self.cdf.size)
    while True:
      cdf = np.cumsum(self.rule.pmf(np.arange(1, n + 1)))
      if cdf[-1] >= target or n > 10**8:
        break
      n *= 2
    self.cdf = cdf

  def lookup(self, u):
    u = np.asarray(u, dtype=float)
    if u.size and u.max() > self.cdf[-1]:
      self._grow_to(min(float(u.max()), 1.0 - 1e-15))
    idx = np.searchsorted(self.cdf, u, side="left")
    return np.minimum(idx, self.cdf.size - 1) + 1


_TABLES: dict = {}


def _table_for(rule: StoppingRule) -> _InverseCdfTable:
  table = _TABLES.get(rule)
  if table is None:
    table = _TABLES[rule] = _InverseCdfTable(rule)
  return table


def stopping_count_from_uniform(rule: StoppingRule, u):
  if rule.kind == "geometric":
    if rule.gamma >= 1.0:
      return np.ones(np.shape(u), dtype=np.int64)
    k = np.ceil(np.log1p(-np.asarray(u)) / math.log1p(-rule.gamma))
    return np.maximum(k, 1).astype(np.int64)
  return _table_for(rule).lookup(u).astype(np.int64)


def sample_stopping_count(rule: StoppingRule, rng: RngLike,
                          size: Optional[int] = None):
  """Draws the number of iterations K >= 1 made before stopping."""
  gen = as_generator(rng)
  k = stopping_count_from_uniform(rule, open_uniform(gen, size))
  return int(k) if size is None else k
