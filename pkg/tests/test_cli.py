import json

import pytest

from hnlpu import cli

FAST_VERIFY = {"prompt": [1], "tokens": 4, "hn_trials": 20, "adversarial_partitions": 100}


def write(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def run(capsys, *argv):
    code = cli.main(list(argv))
    return code, capsys.readouterr()


def test_verify_default_passes(tmp_path, capsys):
    code, out = run(capsys, "verify", "--out", str(tmp_path), "--format", "json")
    rep = json.loads(out.out)
    assert code == 0 and rep["passed"]
    assert set(rep["verdicts"]) == {"equivalence_tokens", "equivalence_activations",
                                    "bitserial_exact", "slice_budget"}
    assert (tmp_path / "verify_report.json").exists()


def test_verify_corrupted_shard_fails(tmp_path, capsys):
    doc = {"verify": FAST_VERIFY | {"corrupt": {"layer": 0, "chip": 5, "tensor": "wv", "index": [1, 0]}},
           "output": {"dir": str(tmp_path)}}
    code, out = run(capsys, "verify", "--scenario", write(tmp_path, doc), "--format", "json")
    assert code == 1
    assert json.loads(out.out)["verdicts"]["equivalence_activations"] is False


def test_seed_sweep_identical_structure(tmp_path, capsys):
    path = write(tmp_path, {"verify": FAST_VERIFY, "output": {"dir": str(tmp_path)}})
    shapes = set()
    for seed in range(32):
        code, out = run(capsys, "verify", "--scenario", path, "--seed", str(seed), "--format", "json")
        assert code == 0, seed
        shapes.add(tuple(sorted(json.loads(out.out)["verdicts"])))
    assert len(shapes) == 1


def test_reports_byte_identical(tmp_path, capsys):
    outs = []
    for fmt in ("json", "csv"):
        a = run(capsys, "simulate", "--scenario", "toy", "--out", str(tmp_path), "--format", fmt)[1].out
        b = run(capsys, "simulate", "--scenario", "toy", "--out", str(tmp_path), "--format", fmt)[1].out
        assert a == b
        outs.append(a)
    t1 = run(capsys, "cost", "--out", str(tmp_path))[1].out.splitlines()
    t2 = run(capsys, "cost", "--out", str(tmp_path))[1].out.splitlines()
    assert t1[0].startswith("# hnlpu cost") and t1[1:] == t2[1:]


def test_config_hash_depends_on_resolved_scenario(tmp_path):
    a = cli.load_scenario_file("toy", seed=0)
    b = cli.load_scenario_file("toy", seed=0)
    c = cli.load_scenario_file("toy", seed=1)
    assert a.config_hash == b.config_hash != c.config_hash


@pytest.mark.parametrize("doc,needle", [
    ({"modle": {}}, "unknown key"),
    ({"model": {"hiden": 16}}, "model"),
    ({"pipeline": {"stage_latency": 0}}, "pipeline"),
    ({"pipeline": {"workload": {"sequences": 1, "burst": 2}}}, "pipeline.workload"),
    ({"cost": {"photomask_mode": "cheap"}}, "photomask_mode"),
    ({"cost": {"scenario": {"name": "x", "relative_throughput": 1, "it_power_mw": 1, "pue": 0.5}}},
     "cost.scenario"),
    ({"verify": {"corrupt": {"row": 1}}}, "verify.corrupt"),
    ({"seeds": [-1]}, "seeds"),
])
def test_schema_errors_exit_2(tmp_path, capsys, doc, needle):
    code, out = run(capsys, "verify", "--scenario", write(tmp_path, doc))
    assert code == 2
    assert needle in out.err


def test_json_syntax_error_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "model": {,\n}')
    code, out = run(capsys, "simulate", "--scenario", str(p))
    assert code == 2 and "line 2" in out.err


def test_missing_scenario(capsys):
    assert run(capsys, "simulate", "--scenario", "/no/such/file.json")[0] == 2


def test_simulate_headline_and_files(tmp_path, capsys):
    code, out = run(capsys, "simulate", "--scenario", "full", "--out", str(tmp_path), "--format", "json")
    m = json.loads(out.out)["metrics"]
    assert code == 0
    assert m["closed_form_throughput"] == pytest.approx(250_000)
    assert m["sim_throughput"] == pytest.approx(249_960, rel=2e-4)
    assert m["occupancy1_latency_s"] == pytest.approx(864e-6)
    for f in ("collective_traces.csv", "pipeline_report.json", "occupancy.csv"):
        assert (tmp_path / f).exists()


def test_simulate_empty_workload(tmp_path, capsys):
    doc = {"pipeline": {"workload": {"sequences": 0}}, "output": {"dir": str(tmp_path)}}
    code, out = run(capsys, "simulate", "--scenario", write(tmp_path, doc), "--format", "json")
    assert code == 0 and json.loads(out.out)["metrics"]["sim_throughput"] == 0.0


def test_cost_shipped_scenario(tmp_path, capsys):
    code, out = run(capsys, "cost", "--out", str(tmp_path), "--format", "json")
    rep = json.loads(out.out)
    rows = {r[1]: r[2:] for r in rep["rows"]}
    assert code == 0
    assert rows["Throughput / TCO (Static)"][0] == pytest.approx(12.65, rel=5e-3)
    assert rows["Throughput / TCO (Dynamic)"][0] == pytest.approx(8.57, rel=5e-3)
    assert rows["fully_heterogeneous ($M)"][0] == pytest.approx(480, rel=0.01)


def test_cost_ratios_need_baseline(tmp_path, capsys):
    doc = {"cost": {"scenario_file": str(cli.locate("hnlpu_cost"))}, "output": {"dir": str(tmp_path)}}
    path = write(tmp_path, doc)
    code, out = run(capsys, "cost", "--scenario", path)
    assert code == 0 and "Throughput / CapEx" not in out.out
    code, out = run(capsys, "cost", "--scenario", path, "--ratios")
    assert code == 2 and "baseline" in out.err
    code, out = run(capsys, "cost", "--scenario", path, "--baseline", str(cli.locate("h100_cost")))
    assert code == 0 and "Throughput / CapEx" in out.out


def test_cost_capex_only(tmp_path, capsys):
    sc = {"name": "one", "relative_throughput": 1, "it_power_mw": 0, "chip_nre": 7.5,
          "grid_kg_per_kwh": 0.38, "embodied_kg_per_mm2": 0.07}
    doc = {"cost": {"scenario": sc}, "output": {"dir": str(tmp_path)}}
    code, out = run(capsys, "cost", "--scenario", write(tmp_path, doc), "--format", "json")
    m = json.loads(out.out)["metrics"]
    assert code == 0 and m["one.static_tco"] == m["one.dynamic_tco"] == 7.5


def test_compare_command(tmp_path, capsys):
    code, out = run(capsys, "compare", "--out", str(tmp_path), "--format", "csv")
    assert code == 0
    assert "metric,CE.area,14.3" in out.out and "metric,ME.area,0.95" in out.out
