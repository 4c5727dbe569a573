import math

import numpy as np
import pytest

from dpselect.analysis import (Counterexample, closed_form_rnm_error,
                               closed_form_rnmh_error,
                               exponential_rnmh_counterexample, hg,
                               laplace_max_cdf, laplace_rnmh_counterexample,
                               rs_exponential_counterexample, verify_dp_ratio,
                               wilson_interval)
from dpselect.core import Mechanism, MechanismSpec, make_problem
from dpselect.mechanisms import select_many
from dpselect.noise import sample_laplace

from conftest import binom_sigma


def test_rnm_closed_form_values():
  assert closed_form_rnm_error(0, 1, 1, 2) == pytest.approx(0.18394, abs=1e-5)
  assert closed_form_rnm_error(0, 1e-12, 1, 1) == pytest.approx(0.5)
  assert closed_form_rnm_error(0, 1, 1, 1e4) < 1e-100
  with pytest.raises(ValueError):
    closed_form_rnm_error(1, 0, 1, 1)


def test_rnmh_closed_form_values():
  assert closed_form_rnmh_error(0, 1, 1, 2, 2) == pytest.approx(0.12263,
                                                                abs=1e-5)
  for d in (0.3, 1.0, 2.5):
    assert closed_form_rnmh_error(0, 1, d, d, 1.0) == pytest.approx(
        closed_form_rnm_error(0, 1, d, 1.0))
  assert closed_form_rnmh_error(0, 1, 1e-9, 1, 1) < 1e-12
  assert closed_form_rnmh_error(0, 1, 0, 1, 1) == 0.0


def test_closed_forms_match_monte_carlo(gen):
  n = 10**6
  for _ in range(20):
    gap = gen.uniform(0.1, 2)
    d1, d2 = gen.uniform(0.2, 3, size=2)
    eps = gen.uniform(0.1, 3)
    p = make_problem([0.0, gap], [d1, d2])
    for kind, expected in (
        ("rnm_exp", closed_form_rnm_error(0, gap, max(d1, d2), eps)),
        ("rnmh", closed_form_rnmh_error(0, gap, d1, d2, eps))):
      picks = select_many(MechanismSpec(kind, eps), p.scores, p.sensitivities,
                          gen, size=n)
      assert abs(np.mean(picks == 0) - expected) < 4 * binom_sigma(expected, n)


def test_hg_same_mechanism_is_zero(gen):
  p = make_problem([0, 1, 0.5], [1, 2, 0.5])
  for kind in ("rnm_exp", "gem", "rs_gamma", "krr"):
    spec = MechanismSpec(kind, 0.5)
    assert abs(hg(spec, spec, p, 10**5, gen)) < 0.01


def test_hg_rnm_vs_rnmh(gen):
  p = make_problem([0, 1], [1, 2])
  value = hg(MechanismSpec("rnm_exp", 2.0), MechanismSpec("rnmh", 2.0), p,
             10**6, gen)
  assert abs(value - (0.5 * math.exp(-0.5) - math.exp(-1) / 3)) < 0.005


def test_hg_rnm_vs_rnmh_sign_grid(gen):
  grid = np.linspace(0.1, 3, 6)
  for d1 in grid:
    for d2 in grid:
      if d1 == d2:
        continue
      p = make_problem([0, 1], [d1, d2])
      v = hg(MechanismSpec("rnm_exp", 1.0), MechanismSpec("rnmh", 1.0), p,
             20000, gen)
      if d1 < d2:
        assert v > 0
      # Above the diagonal RNMH noises the low candidate more; HG turns
      # negative once the two rates separate.
      elif d1 > 1.5 * d2:
        assert v < 0


def test_wilson_interval_contains_estimate():
  lo, hi = wilson_interval(30, 100)
  assert lo < 0.3 < hi
  assert wilson_interval(0, 100)[0] == 0.0
  with pytest.raises(ValueError):
    wilson_interval(0, 0)


def test_laplace_counterexample_ratio(gen):
  ce = laplace_rnmh_counterexample(3, 1.0)
  assert ce.analytic_ratio == pytest.approx(math.exp(2))
  assert ce.prob_d1 == 0.25
  rep = ce.verify(10**6, gen)
  assert rep.contains(math.exp(2))
  assert rep.ci_low <= rep.empirical_ratio <= rep.ci_high
  assert rep.reliable


def test_exponential_counterexample(gen):
  ce = exponential_rnmh_counterexample(1.0)
  assert ce.analytic_ratio == math.inf
  rep = ce.verify(10**5, gen)
  assert rep.count_d2 == 0
  assert rep.empirical_ratio == math.inf and rep.ci_high == math.inf
  assert abs(rep.count_d1 / 10**5 - (1 - math.exp(-0.25))) < 0.006


def test_rs_exponential_counterexample_values():
  ce = rs_exponential_counterexample(2, 0.5, 1.0)
  # On the all-ones dataset the zero-sensitivity candidate wins only alone.
  assert ce.prob_d2 == pytest.approx(1 / 3)
  assert ce.mechanism.noise == "exponential"


def test_rs_exponential_counterexample_monte_carlo(gen):
  ce = rs_exponential_counterexample(3, 0.5, 1.0)
  n = 4 * 10**5
  rep = ce.verify(n, gen)
  for count, p in ((rep.count_d1, ce.prob_d1), (rep.count_d2, ce.prob_d2)):
    assert abs(count / n - p) < 4 * binom_sigma(p, n)
  assert rep.contains(ce.analytic_ratio)


def test_rs_exponential_ratio_grows_but_stays_bounded():
  # Exact probabilities give a ratio that increases with k towards a finite
  # limit; the Monte Carlo test above pins the closed form for k=3.
  ratios = [rs_exponential_counterexample(k, 0.05, 1.0).analytic_ratio
            for k in (2, 10, 100, 1000, 10**5)]
  assert all(b > a for a, b in zip(ratios, ratios[1:]))
  assert ratios[-1] - ratios[-2] < 1e-2
  assert ratios[-1] < math.exp(1.0)


def test_rs_exponential_large_k_monte_carlo(gen):
  ce = rs_exponential_counterexample(50, 0.05, 1.0)
  n = 3 * 10**5
  rep = ce.verify(n, gen)
  assert abs(rep.count_d1 / n - ce.prob_d1) < 4 * binom_sigma(ce.prob_d1, n)
  assert abs(rep.count_d2 / n - ce.prob_d2) < 4 * binom_sigma(ce.prob_d2, n)


def test_krr_stays_within_dp_bound(gen):
  eps = 1.0
  d1 = make_problem([1, 0, 0], [1, 1, 1])
  d2 = make_problem([0, 1, 0], [1, 1, 1])
  rep = verify_dp_ratio(MechanismSpec("krr", eps), d1, d2, 0, 10**6, gen)
  assert rep.ci_low <= math.exp(eps)
  assert rep.contains(math.exp(eps))


def test_verify_dp_ratio_validation(gen):
  a = make_problem([0, 1], [1, 1])
  b = make_problem([0, 1, 2], [1, 1, 1])
  with pytest.raises(ValueError):
    verify_dp_ratio(MechanismSpec("rnm_exp"), a, b, 0, 10, gen)
  with pytest.raises(ValueError):
    verify_dp_ratio(MechanismSpec("rnm_exp"), a, a, 5, 10, gen)


def test_counterexample_zero_denominator():
  p = make_problem([0, 1], [1, 1])
  ce = Counterexample(MechanismSpec("rnm_exp"), p, p, 0, 0.1, 0.0)
  assert ce.analytic_ratio == math.inf


def test_laplace_max_cdf_special_values():
  for a in (1, 5, 20):
    assert laplace_max_cdf([1.3] * a, 0.0) == 2.0**-a
  for x in (-2.0, 0.5, 3.0):
    single = 0.5 * math.exp(x) if x <= 0 else 1 - 0.5 * math.exp(-x)
    assert laplace_max_cdf([1.0], x) == pytest.approx(single, abs=1e-15)
  with pytest.raises(ValueError):
    laplace_max_cdf([1.0, 0.0], 1.0)


def test_laplace_max_cdf_grid_monotone():
  scales = [0.5, 1.0, 4.0]
  xs = np.linspace(-60, 60, 601)
  vals = [laplace_max_cdf(scales, x) for x in xs]
  assert all(b >= a for a, b in zip(vals, vals[1:]))
  assert vals[0] < 1e-6 and vals[-1] > 1 - 1e-6


def test_laplace_max_cdf_monte_carlo(gen):
  scales = np.array([0.5] * 9 + [10.0])
  z = np.column_stack([sample_laplace(b, gen, 10**6) for b in scales])
  emp = np.mean(z.max(axis=1) <= 5.0)
  assert abs(emp - laplace_max_cdf(scales, 5.0)) < 0.005
