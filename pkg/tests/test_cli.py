import csv
import hashlib
import json
from dataclasses import replace

import pytest

from mmsched import cli, experiments
from mmsched.core import InvalidConfig
from mmsched.engine import Deadlock
from mmsched.experiments import ExperimentPlan, builtin_plans, probe_seed, run_experiment
from mmsched.workload import WorkloadSpec

SHORT = WorkloadSpec(duration=40.0)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_plan_validation():
    with pytest.raises(InvalidConfig):
        ExperimentPlan("x", ())
    with pytest.raises(InvalidConfig):
        ExperimentPlan("x", ("tcm",), seeds=())
    with pytest.raises(InvalidConfig):
        ExperimentPlan("x", ("lifo",))
    with pytest.raises(InvalidConfig):
        ExperimentPlan("x", ("tcm",), sweep="rate", sweep_values=(1.0, 3.0, 2.0))
    with pytest.raises(InvalidConfig):
        ExperimentPlan("x", ("tcm",), sweep="rate", sweep_values=(1.0, 1.0))
    with pytest.raises(InvalidConfig):
        ExperimentPlan("x", ("tcm",), sweep="chunk", sweep_values=(1, 2))
    with pytest.raises(InvalidConfig):
        ExperimentPlan("x", ("tcm",), sweep="mix", sweep_values=("MH", "XX"))
    with pytest.raises(InvalidConfig):
        ExperimentPlan.from_dict({"name": "x", "policies": ["tcm"], "bogus": 1})
    # decreasing sweeps are fine
    ExperimentPlan("x", ("tcm",), sweep="kv_capacity", sweep_values=(4096, 2048))


def test_builtin_plans():
    plans = builtin_plans()
    assert set(plans) == {
        "fig7-policy-comparison",
        "fig9-preemptions",
        "fig11-rate-sweep",
        "fig12-mix",
        "fig13-memory",
        "fig14-slo-sweep",
        "ablation-fig8",
    }
    mem = plans["fig13-memory"]
    assert mem.sweep == "kv_capacity"
    assert mem.sweep_values == (131072, 65536, 32768)
    assert plans["fig14-slo-sweep"].sweep_values == (2.5, 5.0, 10.0)
    assert plans["ablation-fig8"].policies == ("fcfs", "static-naive", "static-smart", "naive-aging", "tcm")
    for p in plans.values():
        assert p.workload.rate == 2.0
        assert ExperimentPlan.from_dict(p.to_dict()) == p


def test_memory_plan_clamps_traces_to_tightest_capacity():
    mem = builtin_plans()["fig13-memory"]
    assert mem.workload_for(131072, 0).kv_capacity == 32768
    assert mem.config_for("fcfs", 65536, 0).kv_capacity == 65536


def test_input_hash_tracks_inputs():
    p = ExperimentPlan("x", ("tcm",), workload=SHORT)
    assert p.input_hash() == ExperimentPlan("x", ("tcm",), workload=SHORT).input_hash()
    assert p.input_hash() == replace(p, out="/elsewhere").input_hash()
    assert p.input_hash() != replace(p, slo_scale=2.5).input_hash()
    assert p.input_hash() != replace(p, workload=replace(SHORT, rate=3.0)).input_hash()


def test_policy_comparison_outputs(tmp_path):
    plan = ExperimentPlan("cmp", ("fcfs", "edf", "tcm"), seeds=(0, 1, 2), workload=SHORT)
    res = run_experiment(plan, out=tmp_path)
    d = tmp_path / "cmp"
    runs = sorted(p.name for p in (d / "runs").iterdir())
    assert len(runs) == 9
    assert runs[0] == "edf__none-none__seed0.jsonl"
    rows = read_csv(d / "summary.csv")
    assert len(rows) == 12
    assert [(r["policy"], r["group"]) for r in rows[:4]] == [("fcfs", g) for g in "MCTO"]
    assert {"mean_ttft", "p90_ttft", "mean_norm_latency", "violation_rate", "preemptions"} <= set(rows[0])
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["input_sha256"] == plan.input_hash()
    for name, digest in manifest["outputs"].items():
        assert hashlib.sha256((d / name).read_bytes()).hexdigest() == digest
    assert len(res.summaries) == 9
    assert not (tmp_path / ".cmp.partial").exists()


def test_rate_sweep_shape(tmp_path):
    plan = ExperimentPlan("sweep", ("tcm",), seeds=(0,), workload=SHORT, sweep="rate", sweep_values=(1, 2, 3, 4))
    run_experiment(plan, out=tmp_path)
    rows = read_csv(tmp_path / "sweep" / "summary.csv")
    assert [r["value"] for r in rows if r["group"] == "O"] == ["1", "2", "3", "4"]
    assert all(r["axis"] == "rate" for r in rows)


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_rerun_is_bit_identical_and_parallel_matches(tmp_path):
    plan = ExperimentPlan("det", ("fcfs", "tcm"), seeds=(0, 1), workload=SHORT)
    run_experiment(plan, out=tmp_path / "a")
    run_experiment(plan, out=tmp_path / "b")
    run_experiment(plan, out=tmp_path / "c", workers=2)
    a = _tree(tmp_path / "a" / "det")
    assert a == _tree(tmp_path / "b" / "det") == _tree(tmp_path / "c" / "det")


def test_failed_plan_leaves_nothing(tmp_path, monkeypatch):
    plan = ExperimentPlan("boom", ("fcfs", "tcm"), seeds=(0,), workload=SHORT)
    calls = []

    def flaky(records, path):
        calls.append(path)
        if len(calls) == 2:
            raise OSError("disk full")
        path.write_text("")

    monkeypatch.setattr(experiments, "dump_records", flaky)
    with pytest.raises(OSError):
        run_experiment(plan, out=tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_run_failure_names_the_cell(tmp_path, monkeypatch):
    plan = ExperimentPlan("bad", ("fcfs", "tcm"), seeds=(0, 1), workload=SHORT)
    real = experiments.simulate

    def broken(trace, profile, config, *a, **kw):
        if config.policy == "tcm" and config.seed == 1:
            raise Deadlock("stuck")
        return real(trace, profile, config, *a, **kw)

    monkeypatch.setattr(experiments, "simulate", broken)
    with pytest.raises(experiments.RunFailed, match="policy=tcm seed=1: stuck"):
        run_experiment(plan, out=tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_probe_seed_is_fixed_function_of_rate():
    assert probe_seed(0, 2.0) == probe_seed(0, 2.0)
    assert probe_seed(0, 2.0) != probe_seed(0, 2.05)
    assert probe_seed(1, 2.0) != probe_seed(0, 2.0)


def test_cli_experiment_list(capsys):
    assert cli.main(["experiment", "--list"]) == 0
    assert "fig13-memory" in capsys.readouterr().out


def test_cli_simulate_generate_report(tmp_path, capsys):
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--policy", "tcm", "--duration", "30", "--seed", "4", "--events", "--out", str(out)]) == 0
    assert (out / "records.jsonl").exists() and (out / "events.jsonl").exists()
    printed = capsys.readouterr().out
    assert printed == (out / "summary.csv").read_text()
    assert cli.main(["report", str(out / "records.jsonl")]) == 0
    assert capsys.readouterr().out == printed

    trace = tmp_path / "trace.jsonl"
    assert cli.main(["generate", "--duration", "30", "--seed", "4", "--mix", "ML", "--out", str(trace)]) == 0
    assert trace.exists()
    out2 = tmp_path / "sim2"
    assert cli.main(["simulate", "--policy", "fcfs", "--trace", str(trace), "--out", str(out2)]) == 0


def test_cli_calibrate_and_env_default(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MMSCHED_OUT", str(tmp_path))
    assert cli.main(["calibrate"]) == 0
    data = json.loads((tmp_path / "calibration.json").read_text())
    assert set(data) == {"synthetic-7b"}


def test_cli_experiment_with_config_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "plan.json"
    cfg.write_text(json.dumps({"name": "mine", "policies": ["fcfs"], "seeds": [0], "workload": {"duration": 20.0}}))
    assert cli.main(["experiment", "--config", str(cfg), "--policy", "fcfs,tcm", "--slo-scale", "10",
                     "--out", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o" / "mine" / "manifest.json").read_text())
    assert manifest["plan"]["policies"] == ["fcfs", "tcm"]
    assert manifest["plan"]["slo_scale"] == 10.0


def test_cli_goodput(capsys):
    code = cli.main(["goodput", "--policy", "tcm", "--duration", "20", "--seed", "0", "--group", "M",
                     "--threshold", "0.5", "--high", "6", "--resolution", "0.5"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["group"] == "M" and 0.25 <= out["goodput"] <= 6


def test_cli_errors_are_structured(tmp_path, capsys):
    assert cli.main(["experiment", str(tmp_path / "missing.json")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["verb"] == "experiment" and err["error"]
    assert cli.main(["simulate", "--policy", "fcfs,tcm"]) == 1
    assert "exactly one policy" in json.loads(capsys.readouterr().err)["message"]
    with pytest.raises(SystemExit):
        cli.main(["simulate", "--policy", "lifo"])
