"""Two-armed bandit with a distribution shift, private and non-private.

Private policies estimate each arm's mean reward with a continual counter,
estimate each arm's 10%/90% reward quantiles with the exponential mechanism
on disjoint windows of observations, and choose the next arm with a private
selection mechanism fed (mean, quantile width) per arm.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import stats

from dpselect.core import (Mechanism, MechanismSpec, RngLike, as_generator)
from dpselect.mechanisms import select_many
from dpselect.noise import laplace_icdf, open_uniform

UCB = "ucb"


def ucb_score(sum_rewards: float, count: int, horizon: float,
              alpha: float = math.sqrt(2)) -> float:
  """Empirical mean plus alpha * sqrt(ln T / count)."""
  if count < 1:
    raise ValueError("an arm must be played once before it has a UCB score")
  return sum_rewards / count + alpha * math.sqrt(math.log(horizon) / count)


class PrivateCounter:
  """Continual counting with unknown horizon (hybrid mechanism).

  Items are grouped into epochs of doubling length: epoch j holds items
  2^j .. 2^(j+1)-1. Half the budget releases each finished epoch's total
  with Laplace noise; the other half runs a binary-tree counter inside the
  current epoch, splitting its share evenly over the j+1 tree levels. Every
  item lands in one epoch total and one node per level, so the stream of
  released prefix sums is epsilon-DP for values in [0, 1].
  """

  _NOISE_BLOCK = 256

  def __init__(self, epsilon: float, rng: RngLike):
    if not epsilon > 0:
      raise ValueError("epsilon must be positive")
    self.epsilon = float(epsilon)
    self._gen = as_generator(rng)
    self._noise = np.empty(0)
    self._noise_pos = 0
    self.count = 0
    self._true_sum = 0.0
    self._epoch_totals = 0.0        # noisy totals of finished epochs
    self._epoch = 0
    self._prefix = [0.0]            # exact prefix sums inside the epoch
    self._nodes: dict = {}

  def _laplace(self, scale: float) -> float:
    """Laplace(scale) from a buffered block of standard Laplace draws."""
    if scale == 0:
      return 0.0
    if self._noise_pos == self._noise.size:
      self._noise = laplace_icdf(open_uniform(self._gen, self._NOISE_BLOCK),
                                 1.0)
      self._noise_pos = 0
    z = self._noise[self._noise_pos]
    self._noise_pos += 1
    return float(z) * scale

  def add(self, value: float) -> None:
    value = float(value)
    self.count += 1
    self._true_sum += value
    prefix = self._prefix
    prefix.append(prefix[-1] + value)
    end = len(prefix) - 1
    # The node of size 2^l ending here closes iff 2^l divides `end`.
    level_scale = (self._epoch + 1) / (self.epsilon / 2.0)
    level = 0
    while level <= self._epoch and end % (1 << level) == 0:
      size = 1 << level
      self._nodes[(level, end // size - 1)] = (
          prefix[end] - prefix[end - size] + self._laplace(level_scale))
      level += 1
    if end == 1 << self._epoch:
      self._epoch_totals += prefix[end] + self._laplace(2.0 / self.epsilon)
      self._epoch += 1
      self._prefix = [0.0]
      self._nodes = {}

  def query(self) -> float:
    """Noisy running sum of everything added so far."""
    total = self._epoch_totals
    remaining = len(self._prefix) - 1
    offset = 0
    for level in range(self._epoch, -1, -1):
      size = 1 << level
      if remaining & size:
        total += self._nodes[(level, offset // size)]
        offset += size
    return total

  @property
  def true_sum(self) -> float:
    return self._true_sum


def private_counter_add(counter: PrivateCounter, value: float) -> None:
  counter.add(value)


def private_counter_query(counter: PrivateCounter) -> float:
  return counter.query()


def quantile_interval_log_weights(sorted_window: np.ndarray, q: float,
                                  epsilon: float, lower: float,
                                  upper: float) -> np.ndarray:
  """Log-weights of the exponential mechanism over inter-point intervals.

  Interval i lies between the i-th and (i+1)-th point of
  [lower, x_(1), ..., x_(n), upper]; it has utility -|i - q n| with
  sensitivity 1 and is weighted by its length.
  """
  n = sorted_window.size
  pts = np.concatenate(([lower], sorted_window, [upper]))
  lengths = np.diff(pts)
  utility = -np.abs(np.arange(n + 1) - q * n)
  with np.errstate(divide="ignore"):
    return np.log(lengths) + epsilon * utility / 2.0


def dp_quantile(window, q: float, epsilon: float, rng: RngLike,
                lower: float = 0.0, upper: float = 1.0) -> float:
  """Differentially private q-quantile of values clipped to [lower, upper]."""
  x = np.sort(np.clip(np.asarray(window, dtype=float), lower, upper))
  if x.size == 0:
    raise ValueError("window must be nonempty")
  if not 0 < q < 1:
    raise ValueError("q must lie in (0, 1)")
  gen = as_generator(rng)
  logw = quantile_interval_log_weights(x, q, epsilon, lower, upper)
  if not np.isfinite(logw.max()):
    return float(lower)
  # Gumbel-max trick: one uniform per interval.
  gumbel = -np.log(-np.log(open_uniform(gen, logw.size)))
  i = int(np.argmax(logw + gumbel))
  pts = np.concatenate(([lower], x, [upper]))
  return float(pts[i] + (pts[i + 1] - pts[i]) * open_uniform(gen))


@dataclasses.dataclass(frozen=True)
class BanditConfig:
  horizon: int = 5000
  t_shift: int = 3000
  means_before: Tuple[float, float] = (0.2, 0.8)
  sds_before: Tuple[float, float] = (0.1, 0.3)
  reward_clip: Tuple[float, float] = (0.0, 1.0)
  window: int = 200
  eps_mean: float = 1.0
  eps_select: float = 1.0
  eps_quantile: float = 1.0
  krr_eps: float = 4.0
  ucb_alpha: float = math.sqrt(2)
  quantile_levels: Tuple[float, float] = (0.1, 0.9)
  initial_sensitivity: float = 1.0

  def __post_init__(self):
    if self.horizon < 1:
      raise ValueError("horizon must be positive")
    if not 0 < self.t_shift < self.horizon:
      raise ValueError("t_shift must lie strictly inside the horizon")
    if min(self.sds_before) <= 0:
      raise ValueError("reward standard deviations must be positive")
    if self.window < 1:
      raise ValueError("window must be positive")
    if min(self.eps_mean, self.eps_select, self.eps_quantile,
           self.krr_eps) <= 0:
      raise ValueError("privacy parameters must be positive")

  @property
  def means_after(self):
    return tuple(reversed(self.means_before))

  @property
  def sds_after(self):
    return tuple(reversed(self.sds_before))

  def arm_params(self, step: int):
    """(means, sds) in force at 0-based `step`; the swap applies from t_shift."""
    if step < self.t_shift:
      return self.means_before, self.sds_before
    return self.means_after, self.sds_after


def true_reward_quantiles(config: BanditConfig, step: int) -> np.ndarray:
  """(2 arms, 2 levels) quantiles of the clipped reward at `step`."""
  means, sds = config.arm_params(step)
  z = stats.norm.ppf(config.quantile_levels)
  lo, hi = config.reward_clip
  return np.clip(np.asarray(means)[:, None] + np.outer(sds, z), lo, hi)


@dataclasses.dataclass
class BanditTrajectory:
  actions: np.ndarray          # (T,)
  rewards: np.ndarray          # (T,)
  est_means: np.ndarray        # (T, 2) estimate after each step
  est_quantiles: np.ndarray    # (T, 2 arms, 2 levels); nan before first round
  cumulative_reward: np.ndarray
  quantile_rounds: List[Tuple[int, int, int]]  # (arm, first obs, last obs)
  policy: str = ""

  def to_csv(self, path_or_file) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(
        path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else (
        path_or_file)
    try:
      writer = csv.writer(fh, lineterminator="\n")
      writer.writerow(["step", "action", "reward", "est_mean_0", "est_mean_1",
                       "p10_0", "p90_0", "p10_1", "p90_1",
                       "cumulative_reward"])
      for t in range(self.actions.size):
        eq = self.est_quantiles[t]
        writer.writerow([t, int(self.actions[t]), repr(float(self.rewards[t])),
                         repr(float(self.est_means[t, 0])),
                         repr(float(self.est_means[t, 1])),
                         repr(float(eq[0, 0])), repr(float(eq[0, 1])),
                         repr(float(eq[1, 0])), repr(float(eq[1, 1])),
                         repr(float(self.cumulative_reward[t]))])
    finally:
      if own:
        fh.close()


PolicyLike = Union[str, MechanismSpec]


def _policy_spec(policy: PolicyLike, config: BanditConfig) -> Optional[MechanismSpec]:
  if isinstance(policy, str):
    if policy == UCB:
      return None
    policy = MechanismSpec(policy)
  if policy.kind in (Mechanism.RNMH, Mechanism.COMBINED_GEM):
    raise ValueError(f"{policy.kind.value} is not a supported bandit policy")
  eps = config.krr_eps if policy.kind is Mechanism.KRR else config.eps_select
  return policy.with_epsilon(eps)


def run_bandit(config: BanditConfig, policy: PolicyLike,
               seed: RngLike) -> BanditTrajectory:
  """Simulates one trajectory.

  Each arm is played once up front. Afterwards UCB picks the arm with the
  largest optimistic score on exact means, and private policies run their
  mechanism on (private mean, quantile-width sensitivity) per arm; RNM's
  global sensitivity is the larger width and kRR ignores widths.
  """
  spec = _policy_spec(policy, config)
  gen = as_generator(seed)
  T = config.horizon
  lo, hi = config.reward_clip
  q_lo, q_hi = config.quantile_levels
  counters = [PrivateCounter(config.eps_mean, gen) for _ in range(2)]
  counts = np.zeros(2, dtype=np.int64)
  sums = np.zeros(2)
  est = np.zeros(2)
  sens = np.full(2, config.initial_sensitivity)
  quant = np.full((2, 2), np.nan)
  pending: List[List[float]] = [[], []]
  rounds: List[Tuple[int, int, int]] = []

  actions = np.empty(T, dtype=np.int64)
  rewards = np.empty(T)
  est_means = np.empty((T, 2))
  est_quant = np.empty((T, 2, 2))
  noise = gen.standard_normal(T)

  for t in range(T):
    if t < 2:
      a = t
    elif spec is None:
      bonus = config.ucb_alpha * np.sqrt(math.log(T) / counts)
      a = int(np.argmax(sums / counts + bonus))
    else:
      a = int(select_many(spec, est, sens, gen, size=1)[0])
    means, sds = config.arm_params(t)
    r = min(max(means[a] + sds[a] * noise[t], lo), hi)
    counts[a] += 1
    sums[a] += r
    if spec is None:
      est[a] = sums[a] / counts[a]
    else:
      counters[a].add(r)
      est[a] = counters[a].query() / counts[a]
      pending[a].append(r)
      if len(pending[a]) == config.window:
        half = config.eps_quantile / 2.0
        p_lo = dp_quantile(pending[a], q_lo, half, gen, lo, hi)
        p_hi = dp_quantile(pending[a], q_hi, half, gen, lo, hi)
        quant[a] = (p_lo, p_hi)
        sens[a] = abs(p_hi - p_lo)
        last = int(counts[a]) - 1
        rounds.append((a, last - config.window + 1, last))
        pending[a] = []
    actions[t] = a
    rewards[t] = r
    est_means[t] = est
    est_quant[t] = quant

  label = UCB if spec is None else spec.label
  return BanditTrajectory(actions, rewards, est_means, est_quant,
                          np.cumsum(rewards), rounds, label)
