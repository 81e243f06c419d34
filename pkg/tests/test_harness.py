from __future__ import annotations

import json
import shutil
from dataclasses import replace

import numpy as np
import pytest

from dpflcert import cli, harness
from dpflcert.certify import cost_bounds
from dpflcert.errors import ConfigurationError, UsageError
from dpflcert.fedsim import FederationConfig

FED = FederationConfig(n_users=10, user_rate=0.5, rounds=2, lr=1.0, batch_fraction=0.5, clip=2.0,
                       noise=2.0, delta=1e-3)
DATA = harness.DataSpec(n_train=120, n_test=40, dim=5, separation=4.0)


def small_plan(**kw) -> harness.ExperimentPlan:
    base = dict(federation=FED, data=DATA, sigmas=(2.0,), kinds=("LF",), ks=(0, 1), repetitions=6,
                cost_repetitions=6, k_list=(0, 1, 2), taus=(1.0, 2.0))
    base.update(kw)
    return harness.ExperimentPlan(**base)


@pytest.fixture
def spec():
    return harness._specs(small_plan(), 2.0, 4)


def test_child_seed_is_stable_and_distinct():
    assert harness.child_seed(0, 0) == harness.child_seed(0, 0)
    seeds = {harness.child_seed(b, i) for b in range(5) for i in range(200)}
    assert len(seeds) == 1000
    assert all(0 <= s < 2**64 for s in seeds)


def test_config_hash_ignores_key_order():
    assert harness.config_hash({"a": 1, "b": [1, 2]}) == harness.config_hash({"b": [1, 2], "a": 1})
    assert harness.config_hash({"a": 1}) != harness.config_hash({"a": 2})
    assert len(harness.config_hash({})) == 16


def test_fmt_round_trips_floats():
    for x in (0.1, 1 / 3, 1e-300, 6.02e23):
        assert float(harness.fmt(x)) == x
    assert harness.fmt(True) == "1" and harness.fmt(False) == "0"


def test_spec_hash_excludes_ensemble_size(spec):
    assert replace(spec, repetitions=100).hash == spec.hash
    assert replace(spec, base_seed=1).hash != spec.hash


def test_single_run_estimate_is_that_run(tmp_path, spec):
    ens = harness.run_ensemble(tmp_path, replace(spec, repetitions=1))
    table = harness.certify_prediction(ens, [0], psi=1.0)
    rows = np.arange(ens.confidences.shape[1])
    assert np.array_equal([r[5] for r in table.rows], ens.confidences[0][rows, table.predictions])


def test_resume_trains_nothing(tmp_path, spec):
    first = harness.run_ensemble(tmp_path, spec)
    assert first.trained == 4
    again = harness.run_ensemble(tmp_path, spec)
    assert again.trained == 0
    assert np.array_equal(first.confidences, again.confidences)
    bigger = harness.run_ensemble(tmp_path, replace(spec, repetitions=6))
    assert bigger.trained == 2
    assert np.array_equal(bigger.confidences[:4], first.confidences)


def test_corrupt_run_is_quarantined_and_retrained(tmp_path, spec):
    first = harness.run_ensemble(tmp_path, spec)
    run = first.directory / "runs" / "2"
    (run / "eval.npz").write_bytes(b"garbage")
    shutil.rmtree(first.directory / "runs" / "3")
    (first.directory / "runs" / "3").mkdir()
    again = harness.run_ensemble(tmp_path, spec)
    assert again.trained == 2
    assert np.array_equal(first.confidences, again.confidences)
    assert sorted(p.name for p in (first.directory / "quarantine").iterdir()) == ["2.0", "3.0"]


def test_parallel_runs_match_serial(tmp_path, spec):
    serial = harness.run_ensemble(tmp_path / "a", spec, workers=1)
    parallel = harness.run_ensemble(tmp_path / "b", spec, workers=2)
    assert np.array_equal(serial.confidences, parallel.confidences)


def test_workers_env(monkeypatch):
    monkeypatch.setenv(harness.WORKERS_ENV, "3")
    assert harness.workers_from_env() == 3
    monkeypatch.setenv(harness.WORKERS_ENV, "many")
    with pytest.raises(ConfigurationError):
        harness.workers_from_env()


def test_base_seed_changes_the_ensemble(tmp_path, spec):
    a = harness.run_ensemble(tmp_path, spec)
    b = harness.run_ensemble(tmp_path, replace(spec, base_seed=9))
    assert not np.array_equal(a.confidences, b.confidences)


def test_load_ensemble_refuses_missing_runs(tmp_path, spec):
    with pytest.raises(UsageError):
        harness.load_ensemble(tmp_path, spec)


def test_calibration_never_raises_certified_accuracy(tmp_path, spec):
    ens = harness.run_ensemble(tmp_path, spec)
    loose = harness.certify_prediction(ens, range(6), psi=1.0)
    tight = harness.certify_prediction(ens, range(6), psi=0.01)
    for (_, a), (_, b) in zip(tight.accuracy_rows, loose.accuracy_rows):
        assert a <= b


def test_certified_accuracy_nonincreasing_in_k(tmp_path, spec):
    ens = harness.run_ensemble(tmp_path, spec)
    accs = [a for _, a in harness.certify_prediction(ens, range(10), psi=1.0).accuracy_rows]
    assert accs == sorted(accs, reverse=True)


def test_empty_k_list_gives_header_only(tmp_path, spec):
    ens = harness.run_ensemble(tmp_path, spec)
    table = harness.certify_prediction(ens, [], psi=0.5)
    _, acc = harness.write_prediction_table(table, tmp_path / "t", "p")
    assert acc.read_text().strip() == "epsilon,delta,psi,k,certified_accuracy"


def test_certify_prediction_needs_an_ensemble():
    with pytest.raises(UsageError):
        harness.certify_prediction(None, [0], 0.01)


def test_prediction_csv_flags_follow_strict_rule(tmp_path, spec):
    ens = harness.run_ensemble(tmp_path, spec)
    table = harness.certify_prediction(ens, [0, 1, 2], psi=1.0)
    samples, _ = harness.write_prediction_table(table, tmp_path / "t", "p")
    for row in harness.read_csv(samples):
        K = float(row["K"])
        for k in (0, 1, 2):
            assert row[f"cert_k{k}"] == ("1" if k < K else "0")


def test_cost_cell_at_zero_attackers(tmp_path):
    plan = small_plan()
    clean = harness.run_ensemble(tmp_path, harness._specs(plan, 2.0, plan.cost_repetitions))
    pred = harness.certify_prediction(clean, plan.k_list, plan.psi)
    rows = harness.certify_cost(tmp_path, clean, harness.cells_for(plan), plan, pred)
    header = harness.cost_header(plan.taus)
    recs = [dict(zip(header, r)) for r in rows]
    zero = next(r for r in recs if r["k"] == 0)
    assert zero["empirical_j"] == zero["lower"] == zero["upper"] == zero["j_clean"]
    assert zero["prediction_violations"] == 0
    assert all(r["min_k_tau1"] == 0.0 for r in recs)
    one = next(r for r in recs if r["k"] == 1)
    b = cost_bounds(one["j_clean"], one["epsilon"], one["delta"], 1, plan.c_bar)
    assert (one["lower"], one["upper"]) == (b.lower, b.upper)
    assert one["lower_holds"] == (one["empirical_j"] >= one["lower"])


def test_certify_cost_needs_a_clean_ensemble(tmp_path):
    with pytest.raises(UsageError):
        harness.certify_cost(tmp_path, None, [], small_plan())


def test_plan_round_trips_through_dict():
    plan = small_plan(gammas=(1.0, 50.0))
    assert harness.ExperimentPlan.from_dict(json.loads(json.dumps(plan.to_dict()))) == plan
    with pytest.raises(ConfigurationError):
        harness.ExperimentPlan.from_dict({"federation": {"n_users": 5}, "bogus": 1})
    with pytest.raises(ConfigurationError):
        small_plan(ks=(0, 11))


def test_sweep_and_report(tmp_path):
    plan = small_plan(sigmas=(1.0, 4.0), cost_sigmas=(4.0,))
    result = harness.sweep(tmp_path, plan)
    names = sorted(p.name for p in result.files)
    assert "cost_sigma4.csv" in names and "cost_sigma1.csv" not in names
    assert "pred_sigma1_accuracy.csv" in names and "tradeoff.csv" in names
    assert [r[0] for r in result.tradeoff] == [1.0, 4.0]
    assert result.tradeoff[0][1] > result.tradeoff[1][1]
    out = harness.report(tmp_path)
    pngs = sorted(p.name for p in out if p.suffix == ".png")
    assert pngs == ["attack_cost.png", "certified_accuracy.png", "tradeoff.png"]
    assert all(p.stat().st_size > 0 for p in out)
    assert (tmp_path / "figures" / "tradeoff.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_without_tables(tmp_path):
    with pytest.raises(UsageError):
        harness.report(tmp_path)


def test_plan_file_yaml(tmp_path):
    path = tmp_path / "plan.yaml"
    path.write_text("federation:\n  n_users: 7\n  rounds: 2\nsigmas: [1.5, 3]\nrepetitions: 3\n")
    raw = harness.load_plan_file(path)
    plan = harness.ExperimentPlan.from_dict(raw)
    assert plan.federation.n_users == 7 and plan.sigmas == (1.5, 3)


# --------------------------------------------------------------------------
# command line

COMMON = ["--users", "10", "--user-rate", "0.5", "--rounds", "2", "--lr", "1", "--batch-fraction", "0.5",
          "--clip", "2", "--delta", "1e-3", "--n-train", "120", "--n-test", "40"]


def test_cli_accountant_json(capsys):
    assert cli.main(["accountant", "--users", "200", "--user-rate", "0.1", "--rounds", "3", "--noise", "3",
                     "--delta", "0.0029", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["epsilon"] == pytest.approx(0.2808, abs=1e-4)


def test_cli_data_and_train(tmp_path, capsys):
    out = str(tmp_path)
    assert cli.main(["data", "--out", out, *COMMON]) == 0
    with np.load(tmp_path / "data" / "train.npz") as z:
        assert z["features"].shape == (120, 5)
    part = json.loads((tmp_path / "data" / "partition.json").read_text())
    assert sum(len(u) for u in part["users"]) == 120
    assert cli.main(["train", "--out", out, "--noise", "1", *COMMON, "--attack", "LF", "--k", "2"]) == 0
    record = json.loads((tmp_path / "train" / "record.json").read_text())
    assert 0 <= record["test_accuracy"] <= 1
    assert "epsilon" in capsys.readouterr().out


def test_cli_certify_and_sweep(tmp_path, capsys):
    out = str(tmp_path)
    args = [*COMMON, "--noise", "2", "--repetitions", "3", "--k-list", "0,1"]
    assert cli.main(["certify-pred", "--out", out, "--no-train", *args]) == 2
    assert "missing" in capsys.readouterr().err
    assert cli.main(["ensemble", "--out", out, *args]) == 0
    assert cli.main(["certify-pred", "--out", out, "--no-train", *args]) == 0
    assert "certified accuracy" in capsys.readouterr().out
    assert cli.main(["certify-cost", "--out", out, *args, "--cost-repetitions", "3", "--kinds", "BKD",
                     "--ks", "0,1"]) == 0
    assert cli.main(["sweep", "--out", out, *COMMON, "--sigmas", "1,4", "--repetitions", "3",
                     "--cost-repetitions", "3", "--ks", "0,1", "--kinds", "LF", "--report"]) == 0
    assert (tmp_path / "figures" / "attack_cost.png").exists()
    assert cli.main(["report", "--out", out]) == 0


def test_cli_bad_config_exits_with_usage_code(tmp_path, capsys):
    assert cli.main(["accountant", "--users", "10", "--user-rate", "0", "--noise", "1"]) == 2
    assert "error" in capsys.readouterr().err
