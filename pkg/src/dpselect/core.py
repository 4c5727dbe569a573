"""Shared domain types and the seeded randomness contract."""

from __future__ import annotations

import dataclasses
import enum
import zlib
from typing import Optional, Sequence, Union

import numpy as np

DEFAULT_SENSITIVITY_FLOOR = 1e-6


class Mechanism(str, enum.Enum):
  RANDOM = "random"
  KRR = "krr"
  RNM_EXP = "rnm_exp"
  RNM_LAPLACE = "rnm_laplace"
  RNMH = "rnmh"
  RS_GAMMA = "rs_gamma"
  RS_GAMMA_IMPROVED = "rs_gamma_improved"
  GEM = "gem"
  MGEM = "mgem"
  COMBINED_GEM = "combined_gem"


@dataclasses.dataclass(frozen=True)
class SelectionProblem:
  """Candidate scores and candidate-wise sensitivities for one selection.

  Use `make_problem` to build one; it validates inputs and computes
  `optimal_index` (lowest index among maximal scores).
  """

  scores: np.ndarray
  sensitivities: np.ndarray
  optimal_index: int

  @property
  def k(self) -> int:
    return len(self.scores)

  @property
  def global_sensitivity(self) -> float:
    return float(self.sensitivities.max())

  @property
  def optimal_score(self) -> float:
    return float(self.scores[self.optimal_index])


def _frozen_array(values) -> np.ndarray:
  arr = np.array(values, dtype=float)
  arr.setflags(write=False)
  return arr


def make_problem(scores: Sequence[float],
                 sensitivities: Sequence[float]) -> SelectionProblem:
  """Validates inputs and builds an immutable SelectionProblem.

  Raises:
    ValueError: on empty input, length mismatch, negative or non-finite
      sensitivities, or non-finite scores.
  """
  q = _frozen_array(scores)
  d = _frozen_array(sensitivities)
  if q.ndim != 1 or d.ndim != 1:
    raise ValueError("scores and sensitivities must be one-dimensional")
  if q.size == 0:
    raise ValueError("a selection problem needs at least one candidate")
  if q.size != d.size:
    raise ValueError(
        f"length mismatch: {q.size} scores vs {d.size} sensitivities")
  if not np.all(np.isfinite(q)):
    raise ValueError("scores must be finite")
  if not np.all(np.isfinite(d)):
    raise ValueError("sensitivities must be finite")
  if np.any(d < 0):
    raise ValueError("sensitivities must be nonnegative")
  # np.argmax returns the first maximum, which is the tie rule we want.
  return SelectionProblem(q, d, int(np.argmax(q)))


@dataclasses.dataclass(frozen=True)
class PrivacyBudget:
  epsilon: float
  delta: float = 0.0

  def __post_init__(self):
    if not self.epsilon > 0:
      raise ValueError("epsilon must be positive")
    if not 0.0 <= self.delta <= 1.0:
      raise ValueError("delta must lie in [0, 1]")


@dataclasses.dataclass(frozen=True)
class MechanismSpec:
  """A selection mechanism plus its hyper-parameters.

  Defaults follow the synthetic experiments: gamma=0.05 for the random
  stopping variants, beta=0.05 for GEM/mGEM, and 60% of the budget spent on
  the correlation bit in combined GEM.
  """

  kind: Mechanism
  epsilon: float = 1.0
  beta: float = 0.05
  gamma: float = 0.05
  eta: float = 0.0
  corr_fraction: float = 0.6
  heterogeneous: bool = False   # rnm_laplace: per-candidate noise scale
  noise: str = "laplace"        # rs_gamma: "laplace" or "exponential"

  def __post_init__(self):
    object.__setattr__(self, "kind", Mechanism(self.kind))
    if self.kind is Mechanism.KRR:
      if not self.epsilon >= 0:
        raise ValueError("kRR needs epsilon >= 0")
    elif self.kind is not Mechanism.RANDOM and not self.epsilon > 0:
      raise ValueError("epsilon must be positive")
    if not 0.0 < self.beta < 1.0:
      raise ValueError("beta must lie in (0, 1)")
    if not 0.0 < self.gamma <= 1.0:
      raise ValueError("gamma must lie in (0, 1]")
    if not self.eta > -1.0:
      raise ValueError("eta must exceed -1")
    if not 0.0 < self.corr_fraction < 1.0:
      raise ValueError("corr_fraction must lie in (0, 1)")
    if self.noise not in ("laplace", "exponential"):
      raise ValueError(f"unknown noise {self.noise!r}")

  def with_epsilon(self, epsilon: float) -> "MechanismSpec":
    return dataclasses.replace(self, epsilon=epsilon)

  @property
  def label(self) -> str:
    return self.kind.value


@dataclasses.dataclass(frozen=True)
class SelectionOutcome:
  chosen_index: int
  noised_scores: Optional[np.ndarray] = None
  transformed_scores: Optional[np.ndarray] = None
  branch: Optional[str] = None
  iterations: Optional[int] = None


@dataclasses.dataclass(frozen=True)
class RngStream:
  """Names an independent random stream under a master seed.

  Every call to `generator()` returns a fresh generator positioned at the
  start of the stream, so replaying an operation with the same stream gives
  bit-identical draws.
  """

  master_seed: int
  stream_id: int = 0

  def generator(self) -> np.random.Generator:
    seq = np.random.SeedSequence(
        entropy=self.master_seed & (2**64 - 1),
        spawn_key=(self.stream_id & (2**64 - 1),))
    return np.random.Generator(np.random.PCG64(seq))

  def child(self, *names) -> "RngStream":
    """Derives a stream id from this one and a tuple of names/integers."""
    token = repr((self.stream_id,) + tuple(names)).encode()
    derived = (zlib.crc32(token) << 32) | zlib.adler32(token)
    return RngStream(self.master_seed, derived)


RngLike = Union[RngStream, np.random.Generator, int, None]


def as_generator(rng: RngLike) -> np.random.Generator:
  if isinstance(rng, np.random.Generator):
    return rng
  if isinstance(rng, RngStream):
    return rng.generator()
  return np.random.default_rng(rng)


def random_select(problem: SelectionProblem, rng: RngLike) -> SelectionOutcome:
  """Returns a candidate drawn uniformly at random."""
  gen = as_generator(rng)
  return SelectionOutcome(int(gen.integers(problem.k)))
