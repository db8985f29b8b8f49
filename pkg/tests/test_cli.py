import csv
import io
import json

import pytest

from sira.graph import load_graph
from sira.main import Pipeline, PipelineConfig, main, parse_sweep
from sira.zoo import fc_lowered_graph


def _read(path):
    return json.loads(path.read_text())


def test_zoo_export(tmp_path):
    out = tmp_path / "layer.json"
    ranges = tmp_path / "ranges.json"
    assert main(["zoo", "fc_lowered", "-o", str(out), "--ranges-out", str(ranges)]) == 0
    assert load_graph(out) == fc_lowered_graph()
    assert set(_read(ranges)) == {"X"}


def test_pipeline_with_thresholds(tmp_path, models_dir, capsys):
    out_dir = tmp_path / "out"
    code = main([
        "pipeline", str(models_dir / "fc_lowered.json"),
        "--ranges", str(models_dir / "fc_ranges.json"),
        "--out-dir", str(out_dir), "--thresholds", "--samples", "200",
    ])
    assert code == 0
    assert "wrote optimized graph" in capsys.readouterr().out
    for name in ("streamline.json", "accmin.json", "cost.json", "thresholds.json", "optimized.json",
                 "ranges.json", "verify.json"):
        assert (out_dir / name).is_file(), name

    (layer,) = _read(out_dir / "accmin.json")["layers"]
    assert (layer["P_S"], layer["P_D"]) == (8, 10)
    assert len(_read(out_dir / "thresholds.json")["tails"]) == 1
    assert len(_read(out_dir / "cost.json")["tails"]) == 1
    ops = [n.op for n in load_graph(out_dir / "optimized.json").nodes]
    assert "MultiThreshold" in ops
    verify = _read(out_dir / "verify.json")
    assert verify["ok"] and verify["samples"] == 200
    assert verify["max_rel_deviation"] < 1e-9


def test_pipeline_rejects_thresholds_without_streamlining(tmp_path, models_dir):
    code = main([
        "pipeline", str(models_dir / "fc_lowered.json"), "--ranges", str(models_dir / "fc_ranges.json"),
        "--out-dir", str(tmp_path / "out"), "--thresholds", "--no-streamline",
    ])
    assert code == 1


def test_cost_sweep_csv(capsys):
    assert main(["cost", "--sweep", "no=2..12", "--channels", "256", "--pe", "4"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 11
    assert [r["n_o"] for r in rows if r["crossover"] == "True"] == ["7"]
    assert rows[0]["winner"] == "thresholding" and rows[-1]["winner"] == "composite"


def test_cost_default_report(tmp_path):
    out = tmp_path / "cost.json"
    assert main(["cost", "-o", str(out)]) == 0
    doc = _read(out)
    assert doc["choice"] in ("thresholding", "composite")
    assert set(doc) >= {"threshold", "composite", "model_mre"}


def test_cost_fits_parameter_format(tmp_path):
    out = tmp_path / "cost.json"
    assert main(["cost", "--params", "0.1", "0.5", "--max-rel-err", "1e-3", "--pot", "-o", str(out)]) == 0
    doc = _read(out)
    assert doc["config"]["n_p"] == 12
    assert (doc["format"]["I"], doc["format"]["F"], doc["format"]["W"]) == (1, 11, 12)
    assert doc["pot"] == [False, True]
    assert "not modeled" in doc["pot_note"]


def test_cost_flag_errors():
    assert main(["cost", "--pot"]) == 1
    assert main(["cost", "--params", "0.1", "--max-rel-err", "0"]) == 1


def test_cost_sweep_uses_fitted_width(capsys):
    assert main(["cost", "--params", "0.1", "--sweep", "no=2..3"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["n_p"] for r in rows] == ["12", "12"]


def test_parse_sweep():
    assert parse_sweep("ni=8..10") == ("n_i", [8, 9, 10])
    assert parse_sweep("PE=1..2") == ("PE", [1, 2])


def test_missing_graph_file(tmp_path):
    assert main(["analyze", str(tmp_path / "missing.json")]) == 1


def test_analyze_without_ranges(models_dir):
    assert main(["analyze", str(models_dir / "fc_lowered.json")]) == 1


def test_analyze_report(tmp_path, models_dir):
    out = tmp_path / "ranges.json"
    assert main(["analyze", str(models_dir / "fc_bn.json"), "--ranges", str(models_dir / "fc_ranges.json"),
                 "-o", str(out)]) == 0
    doc = _read(out)
    assert doc["qy"]["int_range"]["hi"] == [[15.0, 6.0, 13.0]]


def test_verify_command(tmp_path, models_dir):
    out = tmp_path / "verify.json"
    code = main(["verify", str(models_dir / "fc_lowered.json"), "--ranges", str(models_dir / "fc_ranges.json"),
                 "--samples", "300", "--report", str(out)])
    assert code == 0
    assert _read(out)["ok"]


def test_run_command(tmp_path, models_dir, capsys):
    inputs = tmp_path / "inputs.json"
    inputs.write_text(json.dumps({"X": [[5.0, -3.0]]}))
    assert main(["run", str(models_dir / "fc_streamlined.json"), "--inputs", str(inputs)]) == 0
    qy = json.loads(capsys.readouterr().out)["qy"]
    assert qy[0] == pytest.approx([0.0, 0.6, 0.0])


def test_streamline_command(tmp_path, models_dir):
    out = tmp_path / "streamlined.json"
    report = tmp_path / "report.json"
    code = main(["streamline", str(models_dir / "fc_lowered.json"), "--ranges", str(models_dir / "fc_ranges.json"),
                 "-o", str(out), "--report", str(report)])
    assert code == 0
    assert load_graph(out).nodes == load_graph(models_dir / "fc_streamlined.json").nodes
    assert [a["target"] for a in _read(report)["aggregated"]] == ["bn_n"]


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["optimize"])


def test_pipeline_object_keeps_stdout_clean(tmp_path, models_dir, capsys):
    config = PipelineConfig(models_dir / "fc_lowered.json", models_dir / "fc_ranges.json", tmp_path / "out",
                            samples=100)
    assert Pipeline(config).run() == 0
    assert capsys.readouterr().out == ""
    assert (tmp_path / "out" / "verify.json").is_file()
