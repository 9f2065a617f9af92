import csv
import json

import numpy as np
import pytest
import yaml

from loadcast import cli, grid_sim

SMALL = {
    "first_stage": {"n_t1": 6, "n_in": 1, "n_j": 1, "gsa_samples": 200},
    "second_stage": {"n_t2": 4, "n_starts": 1, "maxiter": 60, "nigp_iterations": 1},
}


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--days", "130", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def forecast(sim_dir, cfg, out, *extra):
    return cli.main(["forecast", "--data", str(sim_dir), "--config", str(cfg), "--customers", "2",
                     "--days", "100", "--out", str(out), *extra])


class TestSimulate:
    def test_full_year_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert cli.main(["simulate", "--system", "8bus", "--days", "365", "--seed", "42", "--out", str(d)]) == 0
        assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()
        ds = grid_sim.HourlyDataset.from_csv(a / "dataset.csv")
        assert ds.loads.shape == (8760, 8)
        assert json.loads((a / "manifest.json").read_text())["config"]["seed"] == 42

    def test_missing_system_file(self, tmp_path, capsys):
        code = cli.main(["simulate", "--system", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_short_horizon(self, tmp_path, capsys):
        assert cli.main(["simulate", "--days", "10", "--out", str(tmp_path / "o")]) == 2
        assert "n_t1" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"days": 130, "colour": "blue"}))
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_system_file_and_pv_off(self, tmp_path):
        grid_sim.fourteen_bus_mesh().save(tmp_path / "sys.json")
        out = tmp_path / "o"
        assert cli.main(["simulate", "--system", str(tmp_path / "sys.json"), "--days", "120",
                         "--pv", "off", "--out", str(out)]) == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["pv_adjusted"] is False and man["config"]["system"]["n_buses"] == 14


class TestForecast:
    @pytest.fixture(scope="class")
    @staticmethod
    def both_dir(sim_dir, small_config, tmp_path_factory):
        out = tmp_path_factory.mktemp("both")
        assert forecast(sim_dir, small_config, out, "--method", "both", "--gsa", "off") == 0
        return out

    def test_outputs(self, both_dir):
        for m in ("nngp-nigp", "baseline-gp"):
            rows = read_rows(both_dir / f"forecast_{m}.csv")
            assert len(rows) == 24 and list(rows[0]) == ["customer", "day", "hour", "actual", "point", "lower", "upper"]
            assert read_rows(both_dir / f"summary_{m}.csv")[0]["day"] == "100"
        man = json.loads((both_dir / "manifest.json").read_text())
        assert man["use_gsa"] is False
        assert man["second_stage_configs"]["2"]["selected_features"] is None
        assert {"first_stage", "second_stage[nngp-nigp]"} <= set(man["timings"]["mean_per_day"])

    def test_method_flag_and_repeatability(self, sim_dir, small_config, tmp_path, both_dir):
        out = tmp_path / "one"
        assert forecast(sim_dir, small_config, out, "--method", "baseline-gp", "--gsa", "off") == 0
        assert not (out / "forecast_nngp-nigp.csv").exists()
        assert (out / "forecast_baseline-gp.csv").read_bytes() == (both_dir / "forecast_baseline-gp.csv").read_bytes()

    def test_gsa_on_selects_features(self, sim_dir, small_config, tmp_path):
        out = tmp_path / "gsa"
        assert forecast(sim_dir, small_config, out, "--method", "baseline-gp", "--gsa", "on") == 0
        man = json.loads((out / "manifest.json").read_text())
        assert len(man["second_stage_configs"]["2"]["selected_features"]) == 1
        assert all(len(v) == 1 for v in man["first_stage_configs"]["2"]["neighbor_indices"].values())

    def test_missing_data(self, tmp_path, small_config):
        assert forecast(tmp_path, small_config, tmp_path / "o") == 2

    def test_bad_nested_key(self, sim_dir, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text(yaml.safe_dump({"second_stage": {"n_t3": 4}}))
        assert forecast(sim_dir, cfg, tmp_path / "o") == 2

    def test_invalid_level(self, sim_dir, small_config, tmp_path):
        assert forecast(sim_dir, small_config, tmp_path / "o", "--level", "1.5") == 2


class TestGSA:
    def test_stage2(self, sim_dir, small_config, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["gsa", "--data", str(sim_dir), "--config", str(small_config), "--stage", "2",
                             "--customers", "2", "--days", "100", "--samples", "300", "--out", str(out)]) == 0
            outs.append((out / "sensitivity.csv").read_bytes())
        rows = read_rows(tmp_path / "a" / "sensitivity.csv")
        assert len(rows) == 7 and list(rows[0]) == ["feature", "total_index", "std_error"]
        assert outs[0] == outs[1]

    def test_stage1(self, sim_dir, small_config, tmp_path):
        assert cli.main(["gsa", "--data", str(sim_dir), "--config", str(small_config), "--stage", "1",
                         "--customers", "2", "--component", "1", "--days", "100", "--samples", "200",
                         "--out", str(tmp_path)]) == 0
        assert len(read_rows(tmp_path / "sensitivity.csv")) == 168
        h = read_rows(tmp_path / "h_values.csv")
        assert len(h) == 7 and list(h[0]) == ["block", "H_value"]

    def test_stage1_needs_component(self, sim_dir, tmp_path):
        assert cli.main(["gsa", "--data", str(sim_dir), "--stage", "1", "--customers", "2",
                         "--days", "100", "--out", str(tmp_path)]) == 2


class TestEvaluate:
    def _perfect(self, root):
        run = root / "run"
        run.mkdir(parents=True)
        actual = np.linspace(1, 2, 24)
        with open(run / "forecast_nngp-nigp.csv", "w") as fh:
            fh.write("customer,day,hour,actual,point,lower,upper\n")
            for d in (150, 151):
                for h, a in enumerate(actual.tolist()):
                    fh.write(f"2,{d},{h},{a!r},{a!r},{a - 0.1!r},{a + 0.1!r}\n")
        man = {"command": "forecast", "use_gsa": True, "config": {"methods": ["nngp-nigp"]},
               "timings": {"per_day": [{"first_stage": 1.0, "second_stage[nngp-nigp]": 2.0}]}}
        (run / "manifest.json").write_text(json.dumps(man))
        return root

    def test_perfect_forecasts(self, tmp_path):
        root = self._perfect(tmp_path / "in")
        assert cli.main(["evaluate", "--input", str(root), "--out", str(tmp_path / "ev")]) == 0
        days = read_rows(tmp_path / "ev" / "day_metrics.csv")
        assert len(days) == 2 and all(float(r["mape"]) == 0 and float(r["cp"]) == 1 for r in days)
        box = read_rows(tmp_path / "ev" / "boxplot_quartiles.csv")
        assert {(r["method"], r["metric"]) for r in box} == {("nngp-nigp", "mape"), ("nngp-nigp", "cp")}
        timing = read_rows(tmp_path / "ev" / "timing_table.csv")
        assert list(timing[0]) == ["method", "without_gsa", "with_gsa"]
        assert timing[0]["with_gsa"] == "3.000" and timing[0]["without_gsa"] == ""

    def test_malformed_csv(self, tmp_path):
        (tmp_path / "in").mkdir()
        (tmp_path / "in" / "forecast_x.csv").write_text("customer,day,hour,actual,point,lower,upper\n2,1,0,a,1,0,2\n")
        assert cli.main(["evaluate", "--input", str(tmp_path / "in"), "--out", str(tmp_path / "ev")]) == 2

    def test_empty_input(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert cli.main(["evaluate", "--input", str(tmp_path / "empty"), "--out", str(tmp_path / "ev")]) == 4

    def test_end_to_end(self, sim_dir, small_config, tmp_path):
        assert forecast(sim_dir, small_config, tmp_path / "runs" / "off", "--method", "baseline-gp",
                        "--gsa", "off") == 0
        assert cli.main(["evaluate", "--input", str(tmp_path / "runs"), "--out", str(tmp_path / "ev")]) == 0
        assert read_rows(tmp_path / "ev" / "timing_table.csv")[0]["without_gsa"] != ""


def test_console_entry_point_help(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    assert "forecast" in capsys.readouterr().out
