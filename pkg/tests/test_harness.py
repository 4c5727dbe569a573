import dataclasses
import io
import logging
import math

import numpy as np
import pytest

from dpselect.core import MechanismSpec, RngStream, make_problem
from dpselect.harness import (ConfigError, ExperimentConfig, SweepRow,
                              evaluate_mse, evaluate_mse_ci, ingest_scores,
                              item_sensitivities, log_score_ratio,
                              parse_score_matrix, read_rows_csv,
                              read_score_matrix, rows_to_csv, rows_to_json,
                              run_sweep, squared_gaps)
from dpselect.mechanisms import select_many
from dpselect.scenarios import ScenarioSpec, bimodal_scenario, gen_trialset_s5


def matrix(text):
  return parse_score_matrix(io.StringIO(text))


def test_mse_zero_for_huge_epsilon():
  p = make_problem([0, 1, 0.5], [1, 1, 1])
  assert evaluate_mse(p, MechanismSpec("rnm_exp"), 1e6, 1000, 0) == 0.0


def test_mse_random_scenario_one(gen):
  est = evaluate_mse_ci(bimodal_scenario(1), MechanismSpec("random"), None,
                        20000, gen)
  se = (est.ci_high - est.mse) / 1.959964
  assert abs(est.mse - 2.0) < 4 * se


def test_mse_small_epsilon_ordering_scenario_one(gen):
  p = bimodal_scenario(1)
  m = {k: evaluate_mse_ci(p, MechanismSpec(k), 0.05, 4000, gen)
       for k in ("gem", "random", "mgem")}
  assert m["gem"].ci_low > m["random"].ci_high
  assert m["random"].ci_low > m["mgem"].ci_high


def test_mse_single_trial_equals_squared_gap():
  ts = gen_trialset_s5(0, trials=20)
  spec = MechanismSpec("gem", 0.5)
  mse = evaluate_mse(ts, spec, None, 1, RngStream(3))
  pick = select_many(spec, ts.clipped_scores[:1], ts.sensitivities,
                     RngStream(3))[0]
  row = ts.clipped_scores[0]
  assert mse == (row.max() - row[pick])**2


def test_trialset_uses_per_trial_optimum():
  ts = gen_trialset_s5(1, trials=50)
  gaps = squared_gaps(ts, MechanismSpec("rnm_exp"), 1e6, 50, 0)
  np.testing.assert_array_equal(gaps, 0.0)
  # Cycling: more trials than rows reuses rows in order.
  assert squared_gaps(ts, MechanismSpec("random"), None, 120, 0).size == 120


def test_squared_gaps_rejects_zero_trials():
  with pytest.raises(ValueError):
    squared_gaps(bimodal_scenario(1), MechanismSpec("random"), None, 0, 0)


def test_log_score_ratio_same_mechanism():
  p = make_problem([1.0, 2.0, 3.0], [1, 1, 1])
  spec = MechanismSpec("rnm_exp", 1e6)
  assert log_score_ratio(spec, spec, p, 50, 0) == 0.0
  spec = MechanismSpec("rnm_exp", 1.0)
  assert abs(log_score_ratio(spec, spec, p, 5000, 0)) < 0.05


def test_log_score_ratio_positive_correlation_favours_mgem(gen):
  q = np.linspace(1, 2, 50)
  p = make_problem(q, np.linspace(0.1, 1, 50))
  r = log_score_ratio(MechanismSpec("mgem", 0.5), MechanismSpec("gem", 0.5), p,
                      50, gen)
  assert r > 0


def test_log_score_ratio_refuses_nonpositive_scores():
  p = make_problem([-1.0, -2.0], [1, 1])
  with pytest.raises(ValueError, match="shift"):
    log_score_ratio(MechanismSpec("random"), MechanismSpec("random"), p, 10, 0)


def test_ingest_constant_item_gets_floor():
  m = matrix("user_id,item_id,score\nu1,a,2\nu2,a,2\nu1,b,1\nu2,b,3\n")
  sens = item_sensitivities(m)
  assert sens[0] == 1e-6
  users = ingest_scores(m)
  assert [u.user_id for u in users] == ["u1", "u2"]
  assert users[0].problem.sensitivities[0] == 1e-6


def test_ingest_two_by_two_percentiles():
  m = matrix("user_id,item_id,score\nu1,a,1\nu2,a,3\nu1,b,0\nu2,b,10\n")

  def pct(lo, hi, p):
    return lo + p * (hi - lo)

  sens = item_sensitivities(m)
  assert sens[0] == pytest.approx(pct(1, 3, 0.99) - pct(1, 3, 0.01))
  assert sens[1] == pytest.approx(pct(0, 10, 0.99) - pct(0, 10, 0.01))


def test_ingest_keeps_top_k_without_padding(gen):
  lines = ["user_id,item_id,score"]
  for j in range(300):
    lines.append(f"u1,i{j},{gen.normal()}")
  for j in range(700):
    lines.append(f"u2,i{j},{gen.normal()}")
  users = ingest_scores(matrix("\n".join(lines)))
  assert users[0].problem.k == 300
  assert users[1].problem.k == 500
  kept = users[1].problem.scores
  assert np.all(np.diff(kept) <= 0)


def test_ingest_user_order_does_not_change_sensitivities(gen):
  rows = [(f"u{u}", f"i{i}", float(gen.normal())) for u in range(6)
          for i in range(4)]
  text = "user_id,item_id,score\n" + "\n".join(f"{a},{b},{c!r}"
                                               for a, b, c in rows)
  shuffled = [rows[i] for i in gen.permutation(len(rows))]
  text2 = "user_id,item_id,score\n" + "\n".join(f"{a},{b},{c!r}"
                                                for a, b, c in shuffled)
  a = {u.user_id: dict(zip(u.item_ids, u.problem.sensitivities))
       for u in ingest_scores(matrix(text))}
  b = {u.user_id: dict(zip(u.item_ids, u.problem.sensitivities))
       for u in ingest_scores(matrix(text2))}
  assert a == b


@pytest.mark.parametrize("text", [
    "user,item,score\nu,a,1\n",
    "user_id,item_id,score\nu,a\n",
    "user_id,item_id,score\nu,a,abc\n",
    "user_id,item_id,score\nu,a,inf\n",
    "",
])
def test_ingest_rejects_malformed(text):
  with pytest.raises(ValueError):
    matrix(text)


def test_read_score_matrix_from_file(tmp_path):
  path = tmp_path / "m.csv"
  path.write_text("user_id,item_id,score\nu1,a,1.5\n\nu2,a,2\n")
  m = read_score_matrix(path)
  assert m.user_ids == ["u1", "u2"] and list(m.scores) == [1.5, 2.0]


def _config(**kw):
  base = dict(scenario=ScenarioSpec("bimodal", {"number": 1}),
              mechanisms=[MechanismSpec("rnm_exp")], epsilons=[0.5],
              trials=200, seed=4)
  base.update(kw)
  return ExperimentConfig(**base)


def test_sweep_single_cell():
  rows = run_sweep(_config())
  assert len(rows) == 1
  assert rows[0].mechanism == "rnm_exp" and rows[0].epsilon == 0.5
  assert rows[0].ci_low <= rows[0].mse <= rows[0].ci_high


def test_sweep_rerun_is_byte_identical():
  cfg = _config(mechanisms=[MechanismSpec("gem"), MechanismSpec("rs_gamma")],
                epsilons=[0.1, 1.0])
  assert rows_to_csv(run_sweep(cfg)) == rows_to_csv(run_sweep(cfg))


def test_sweep_cells_are_independent_of_order():
  a = run_sweep(_config(mechanisms=[MechanismSpec("gem"),
                                    MechanismSpec("mgem")]))
  b = run_sweep(_config(mechanisms=[MechanismSpec("mgem"),
                                    MechanismSpec("gem")]))
  assert {r.mechanism: r.mse for r in a} == {r.mechanism: r.mse for r in b}


def test_sweep_on_trialset_and_ingest(tmp_path):
  rows = run_sweep(_config(scenario=ScenarioSpec("s6_uniform", trials=100)))
  assert rows[0].scenario == "s6_uniform"
  path = tmp_path / "m.csv"
  path.write_text("user_id,item_id,score\nu1,a,1\nu1,b,2\nu2,a,0\nu2,b,5\n")
  rows = run_sweep(_config(scenario=None, ingest_path=str(path)))
  assert rows[0].scenario == "ingest:m.csv"
  assert rows[0].trials == 200


def test_csv_round_trip():
  rows = run_sweep(_config(mechanisms=[MechanismSpec("gem"),
                                       MechanismSpec("random")],
                           epsilons=[0.01, 0.3, 16.0]))
  assert read_rows_csv(rows_to_csv(rows)) == rows
  again = SweepRow("x,y", "gem", 1 / 3, 5, math.pi, 0.1, 7.0, 2**63 - 1)
  assert read_rows_csv(rows_to_csv([again])) == [again]


def test_rows_to_json():
  import json
  rows = run_sweep(_config())
  data = json.loads(rows_to_json(rows))
  assert data[0] == dataclasses.asdict(rows[0])


@pytest.mark.parametrize("kw", [
    dict(mechanisms=[]), dict(epsilons=[]), dict(epsilons=[0.0]),
    dict(trials=0), dict(scenario=None),
    dict(ingest_path="x.csv"),
])
def test_config_validation(kw):
  with pytest.raises(ConfigError):
    _config(**kw)


def test_ingest_skips_users_without_scores(caplog):
  from dpselect.harness import ScoreMatrix
  m = ScoreMatrix(["u1", "ghost"], ["a", "b"], np.array([0, 0]),
                  np.array([0, 1]), np.array([1.0, 2.0]))
  with caplog.at_level(logging.WARNING):
    users = ingest_scores(m)
  assert [u.user_id for u in users] == ["u1"]
  assert "ghost" in caplog.text


def test_csv_rejects_nul_in_labels():
  row = SweepRow("a\0b", "gem", 1.0, 1, 0.0, 0.0, 0.0, 1)
  with pytest.raises(ValueError, match="NUL"):
    rows_to_csv([row])
