import json
from pathlib import Path

import pytest

from conftest import fast_scenario
from respsteer.cli import RunRequest, execute, parse_args


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(fast_scenario().to_json())
    return path


class TestParseArgs:
    def test_run_with_scenario_and_seed(self):
        req = parse_args(["run", "--scenario", "s.json", "--seed", "7"])
        assert req.subcommand == "run"
        assert req.scenario == Path("s.json")
        assert req.seed == 7

    def test_sweep_with_repeat(self):
        req = parse_args(["sweep", "--scenario", "s.json", "--repeat", "20"])
        assert req.subcommand == "sweep"
        assert req.repeat == 20

    def test_noise_level_list(self):
        req = parse_args(
            ["sweep", "--scenario", "s.json", "--noise-sigma-mm", "0,0.2,1.0"]
        )
        assert req.noise_levels == (0.0, 0.2, 1.0)

    def test_run_without_scenario_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            parse_args(["run"])
        assert exc.value.code != 0

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            parse_args(["run", "--scenario", "s.json", "--frobnicate"])
        assert exc.value.code != 0

    def test_operator_override_choices(self):
        req = parse_args(["run", "--scenario", "s.json", "--operator", "hesitant"])
        assert req.operator == "hesitant"
        with pytest.raises(SystemExit):
            parse_args(["run", "--scenario", "s.json", "--operator", "wizard"])

    def test_serve_port(self):
        req = parse_args(["serve", "--scenario", "s.json", "--port", "9000"])
        assert req.subcommand == "serve"
        assert req.port == 9000


class TestExecute:
    def test_run_writes_artifacts(self, scenario_file, tmp_path):
        out = tmp_path / "out"
        code = execute(
            RunRequest(subcommand="run", scenario=scenario_file, out=out)
        )
        assert code == 0
        assert (out / "report.json").exists()
        assert (out / "summary.txt").exists()
        assert (out / "traces" / "insertion_01" / "pose.csv").exists()
        assert (out / "traces" / "insertion_01" / "force.csv").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["insertions"][0]["euclidean_mm"] > 0.0

    def test_missing_scenario_file(self, tmp_path):
        code = execute(
            RunRequest(subcommand="run", scenario=tmp_path / "nope.json", out=tmp_path)
        )
        assert code != 0

    def test_invalid_scenario_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"model": {"order": 99}}')
        code = execute(RunRequest(subcommand="run", scenario=bad, out=tmp_path))
        assert code == 2

    def test_seed_override_changes_report(self, scenario_file, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        execute(RunRequest(subcommand="run", scenario=scenario_file, out=out_a, seed=1))
        execute(RunRequest(subcommand="run", scenario=scenario_file, out=out_b, seed=2))
        a = json.loads((out_a / "report.json").read_text())
        b = json.loads((out_b / "report.json").read_text())
        assert a["scenario"]["seed"] != b["scenario"]["seed"]

    def test_replay_verifies_identity(self, scenario_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert execute(RunRequest(subcommand="run", scenario=scenario_file, out=out)) == 0
        code = execute(RunRequest(subcommand="replay", report=out / "report.json"))
        assert code == 0
        assert "identical" in capsys.readouterr().out

    def test_replay_detects_tampering(self, scenario_file, tmp_path):
        out = tmp_path / "out"
        execute(RunRequest(subcommand="run", scenario=scenario_file, out=out))
        report_path = out / "report.json"
        data = json.loads(report_path.read_text())
        data["max_abs_force_n"] = 99.0
        report_path.write_text(json.dumps(data, indent=2, sort_keys=True))
        assert execute(RunRequest(subcommand="replay", report=report_path)) == 1

    def test_sweep_writes_noise_mae_csv(self, scenario_file, tmp_path):
        out = tmp_path / "sweep"
        code = execute(
            RunRequest(
                subcommand="sweep",
                scenario=scenario_file,
                out=out,
                repeat=2,
                noise_levels=(0.0, 0.5),
            )
        )
        assert code == 0
        csv_text = (out / "sweep.csv").read_text().splitlines()
        assert csv_text[0].startswith("noise_sigma_mm")
        assert len(csv_text) == 3  # header + one row per noise level
        agg = json.loads((out / "sweep.json").read_text())
        assert [row["noise_sigma_mm"] for row in agg] == [0.0, 0.5]
        assert all(row["mean_test_mae_mm"]["regular.si"] is not None for row in agg)
