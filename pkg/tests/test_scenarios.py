import math

import numpy as np
import pytest

from dpselect.core import MechanismSpec
from dpselect.harness import evaluate_mse
from dpselect.heuristics import spearman
from dpselect.scenarios import (ScenarioSpec, TrialSet, bimodal_scenario,
                                build_scenario, estimate_sensitivities,
                                gen_bimodal, gen_polarized, gen_polarized_data,
                                gen_trialset_increasing_corr, gen_trialset_s4,
                                gen_trialset_s5, gen_trialset_s6,
                                polarized_base_scores, s4_sigmas,
                                truncated_normal)


def interp_quantile(values, p):
  """Linear interpolation between order statistics, written out by hand."""
  xs = sorted(values)
  h = (len(xs) - 1) * p
  lo = math.floor(h)
  hi = min(lo + 1, len(xs) - 1)
  return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def test_scenario_one_layout():
  p = bimodal_scenario(1)
  assert p.k == 100
  np.testing.assert_array_equal(p.scores[:50], 1.0)
  np.testing.assert_array_equal(p.scores[50:], -1.0)
  np.testing.assert_array_equal(p.sensitivities[:50], 1.8)
  np.testing.assert_array_equal(p.sensitivities[50:], 1.0)


def test_scenario_two_swaps_sensitivities():
  p = bimodal_scenario(2)
  np.testing.assert_array_equal(p.sensitivities[:50], 1.0)
  np.testing.assert_array_equal(p.sensitivities[50:], 1.8)


def test_bimodal_correlation_signs():
  assert spearman(*_qd(bimodal_scenario(1))) > 0.99
  assert spearman(*_qd(bimodal_scenario(2))) < -0.99
  assert abs(spearman(*_qd(bimodal_scenario(3)))) < 1e-12


def _qd(p):
  return p.scores, p.sensitivities


def test_bimodal_rounding_and_all_high():
  p = gen_bimodal(5, 0.5, 1, 0, 2, 1)
  assert list(p.scores) == [1, 1, 1, 0, 0]
  p = gen_bimodal(10, 1.0, 1, -1, 1.8, 1)
  assert np.all(p.scores == 1)
  mse = evaluate_mse(p, MechanismSpec("rnm_exp"), 0.1, 100, 0)
  assert mse == 0.0
  with pytest.raises(ValueError):
    gen_bimodal(10, 1.5, 1, 0, 1, 1)
  with pytest.raises(ValueError):
    bimodal_scenario(4)


def test_truncated_normal_support(gen):
  x = truncated_normal(gen, 0.5, 1.0, 0.01, 0.7, 5000)
  assert x.size == 5000
  assert x.min() >= 0.01 and x.max() <= 0.7


def test_s4_properties():
  ts = gen_trialset_s4(3)
  sig = s4_sigmas(3)
  assert np.all((sig >= 0.01) & (sig <= 0.7))
  assert np.all(np.diff(sig) >= 0)
  col = ts.raw_scores[:, 99]
  tol = 3 * sig[99] / math.sqrt(ts.trials)
  assert abs(col.mean() - math.log(100)) < tol + 1e-12
  assert ts.k == 100 and ts.trials == 1000


def test_s5_properties():
  assert math.isclose(2.3 - 0.02 * 100, 0.3)
  ts = gen_trialset_s5(4)
  sd50 = 2.3 - 0.02 * 50
  assert abs(ts.raw_scores[:, 49].mean() - 5.0) < 4 * sd50 / math.sqrt(1000)
  slopes = []
  for seed in range(5):
    d = gen_trialset_s5(seed).sensitivities
    slopes.append(np.polyfit(np.arange(100), d, 1)[0])
  assert max(slopes) < 0


def test_s6_properties():
  rhos = []
  for seed in range(20):
    ts = gen_trialset_s6(seed)
    rhos.append(spearman(ts.raw_scores.mean(axis=0), ts.sensitivities))
  assert abs(np.mean(rhos)) < 0.1
  # Means are in [0, 1]: the per-column sample mean stays close to that range.
  ts = gen_trialset_s6(0)
  m = ts.raw_scores.mean(axis=0)
  assert m.min() > -0.1 and m.max() < 1.1


def test_increasing_corr_minimum_is_zero():
  ts = gen_trialset_increasing_corr(5.0, 1, trials=200)
  np.testing.assert_array_equal(ts.raw_scores.min(axis=1), 0.0)
  assert ts.sensitivities.min() == 0.0


@pytest.mark.parametrize("t, lo, hi", [(5.0, 0.5, 1.0), (0.0, -0.1, 0.1),
                                       (-5.0, -1.0, -0.5)])
def test_increasing_corr_trend(t, lo, hi):
  rhos = [spearman(ts.mean_scores(), ts.sensitivities)
          for ts in (gen_trialset_increasing_corr(t, s) for s in range(10))]
  assert lo < np.mean(rhos) < hi


def test_polarized_bases():
  g0, g1 = polarized_base_scores()
  assert g0[0] == -8.0 and g0[99] == pytest.approx(-0.08)
  assert g1[0] == 8.0 and g1[99] == pytest.approx(0.08)


def test_polarized_zero_noise_optima():
  data = gen_polarized_data(users=10, sigma=0.0, seed=0)
  probs = data.problems()
  assert all(p.optimal_index == 99 for p, g in zip(probs, data.groups) if g == 0)
  assert all(p.optimal_index == 0 for p, g in zip(probs, data.groups) if g == 1)


def test_polarized_weak_noise_widens_bands():
  strong = gen_polarized_data(users=1000, sigma=0.5, seed=1)
  weak = gen_polarized_data(users=1000, sigma=3.0, seed=1)
  g0 = strong.groups == 0
  sd_strong = strong.scores[g0].std(axis=0).mean()
  sd_weak = weak.scores[g0].std(axis=0).mean()
  assert sd_weak > sd_strong
  assert np.all(weak.sensitivities >= strong.sensitivities - 1e-9) or (
      weak.sensitivities.mean() > strong.sensitivities.mean())


def test_polarized_rejects_odd_users():
  with pytest.raises(ValueError):
    gen_polarized(users=5)
  assert len(gen_polarized(users=20, sigma=0.5, seed=2)) == 20


def test_estimate_sensitivities_constant_column():
  raw = np.column_stack([np.full(50, 3.0), np.arange(50.0)])
  ts = estimate_sensitivities(raw)
  assert ts.sensitivities[0] == 0
  np.testing.assert_array_equal(ts.clipped_scores[:, 0], 3.0)


def test_estimate_sensitivities_against_quantile_oracle():
  col = np.arange(1000.0)
  ts = estimate_sensitivities(col[:, None])
  expected = interp_quantile(list(col), 0.9) - interp_quantile(list(col), 0.1)
  assert ts.sensitivities[0] == pytest.approx(expected, abs=1e-9)
  assert ts.sensitivities[0] == pytest.approx(0.8 * 999)


def test_estimate_sensitivities_full_range_no_clipping(gen):
  raw = gen.normal(size=(100, 4))
  ts = estimate_sensitivities(raw, 0.0, 1.0)
  np.testing.assert_array_equal(ts.clipped_scores, raw)
  np.testing.assert_allclose(ts.sensitivities, raw.max(0) - raw.min(0))


def test_estimate_sensitivities_clipping_is_exhaustive(gen):
  ts = estimate_sensitivities(gen.standard_t(3, size=(300, 20)))
  assert np.all(ts.clipped_scores >= ts.p_lo)
  assert np.all(ts.clipped_scores <= ts.p_hi)
  np.testing.assert_allclose(ts.sensitivities, ts.p_hi - ts.p_lo)


def test_estimate_sensitivities_validation():
  with pytest.raises(ValueError):
    estimate_sensitivities(np.zeros((1, 3)))
  with pytest.raises(ValueError):
    estimate_sensitivities(np.zeros((5, 3)), 0.9, 0.1)


@pytest.mark.parametrize("kind, params", [
    ("bimodal", {"number": 2}), ("s4_lognormal_means", {}), ("s5_linear", {}),
    ("s6_uniform", {}), ("increasing_corr", {"t": 0.8}),
    ("polarized", {"users": 40})])
def test_generators_are_reproducible(kind, params):
  spec = ScenarioSpec(kind, params, trials=50)
  a = build_scenario(spec, 9)
  b = build_scenario(spec, 9)
  if isinstance(a, TrialSet):
    np.testing.assert_array_equal(a.raw_scores, b.raw_scores)
    np.testing.assert_array_equal(a.sensitivities, b.sensitivities)
  else:
    np.testing.assert_array_equal(a.scores, b.scores)


def test_scenario_spec_validation():
  with pytest.raises(ValueError):
    ScenarioSpec("unknown")
  with pytest.raises(ValueError):
    ScenarioSpec("bimodal", candidates=1)
