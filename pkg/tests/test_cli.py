import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from p2m.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main

SUBCOMMANDS = ["fetch-data", "gen-scenarios", "solve", "build-oracle",
               "train", "operate", "evaluate", "co-optimize", "bench"]


class TestParser:
    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_help_exits_zero(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--seed" in out and "--out" in out

    def test_unknown_command_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate", "--out", "x"])
        assert exc.value.code == EXIT_USAGE
        err = capsys.readouterr().err
        assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"

    def test_missing_required_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["solve"])  # --out missing
        assert exc.value.code == EXIT_USAGE

    def test_every_subcommand_registered(self):
        parser = build_parser()
        actions = [a for a in parser._actions
                   if isinstance(a, type(parser._subparsers._group_actions[0]))]
        assert set(SUBCOMMANDS) <= set(actions[0].choices)


class TestDataErrors:
    def test_missing_oracle_dir_exits_data(self, tmp_path, capsys):
        code = main(["train", "--oracle", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "out"), "--epochs", "1"])
        assert code == EXIT_DATA
        err = capsys.readouterr().err
        assert json.loads(err.strip().splitlines()[-1])["error"] == "data"

    def test_agent_cooptimize_without_model_exits_data(self, tmp_path):
        code = main(["co-optimize", "--mode", "agent",
                     "--out", str(tmp_path / "out"), "--horizon", "48"])
        assert code == EXIT_DATA


class TestSolveToy:
    def test_bundled_fixture_solutions(self, tmp_path):
        out = tmp_path / "solve"
        assert main(["solve", "--toy", "--out", str(out),
                     "--region", "skive"]) == EXIT_OK
        summary = np.genfromtxt(out / "solutions_summary.csv", delimiter=",",
                                names=True, dtype=None, encoding="utf-8")
        summary = np.atleast_1d(summary)
        assert len(summary) == 3
        assert all(row["status"] == "optimal" for row in summary)
        assert all(row["net_carbon"] <= 1e-6 for row in summary)
        assert (out / "solution_0000.csv").exists()
        manifest = json.loads((out / "manifest_solve.json").read_text())
        assert manifest["command"] == "solve"
        assert "wall_time_s" in manifest


class TestEvaluateToy:
    def test_lp_replay_gap_column_zero(self, tmp_path):
        out = tmp_path / "eval"
        assert main(["evaluate", "--toy", "--policy", "lp-replay",
                     "--out", str(out), "--region", "skive"]) == EXIT_OK
        rows = np.genfromtxt(out / "report.csv", delimiter=",", names=True,
                             dtype=None, encoding="utf-8")
        rows = np.atleast_1d(rows)
        assert np.allclose(rows["gap"], 0.0, atol=1e-9)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["feasibility_rate"] == 1.0


class TestGenScenarios:
    def test_deterministic_rerun(self, tmp_path):
        args = ["gen-scenarios", "--n", "3", "--horizon", "96",
                "--seed", "7", "--region", "desk"]
        assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        for i in range(3):
            name = f"scenario_{i:04d}.csv"
            assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name,
                               shallow=False)

    def test_manifest_written(self, tmp_path):
        main(["gen-scenarios", "--n", "1", "--horizon", "48",
              "--out", str(tmp_path)])
        manifest = json.loads((tmp_path / "manifest_gen_scenarios.json").read_text())
        assert manifest["seed"] == 0
        assert manifest["n"] == 1


class TestPipeline:
    def test_oracle_train_operate_chain(self, tmp_path):
        scen_dir = tmp_path / "scenarios"
        oracle_dir = tmp_path / "oracle"
        model_dir = tmp_path / "model"
        assert main(["gen-scenarios", "--n", "8", "--horizon", "96",
                     "--seed", "3", "--out", str(scen_dir),
                     "--region", "skive"]) == EXIT_OK
        assert main(["build-oracle", "--n", "5", "--horizon", "96",
                     "--scenarios", str(scen_dir), "--seed", "3",
                     "--out", str(oracle_dir), "--region", "skive"]) == EXIT_OK
        designs = (oracle_dir / "designs.csv").read_text().splitlines()
        assert len(designs) == 6  # header + 5 instances
        assert main(["train", "--oracle", str(oracle_dir), "--epochs", "2",
                     "--warmup-steps", "50", "--out", str(model_dir),
                     "--seed", "3", "--region", "skive"]) == EXIT_OK
        assert (model_dir / "model.npz").exists()

        design_file = tmp_path / "design.json"
        design_file.write_text(json.dumps(
            {"m_meoh": 800.0, "alpha_pem": 0.25, "c_bess": 25.0,
             "c_cht": 400.0}))
        out = tmp_path / "operate"
        assert main(["operate", "--model", str(model_dir / "model.npz"),
                     "--design", str(design_file),
                     "--scenario", str(scen_dir / "scenario_0000.csv"),
                     "--out", str(out), "--n-samples", "4",
                     "--region", "skive"]) == EXIT_OK
        assert (out / "trajectory.csv").exists()

        co_dir = tmp_path / "coopt"
        assert main(["co-optimize", "--mode", "lp", "--iterations", "1",
                     "--batch", "2", "--m", "2", "--horizon", "96",
                     "--scenarios", str(scen_dir), "--seed", "3",
                     "--out", str(co_dir), "--region", "skive"]) == EXIT_OK
        assert (co_dir / "evaluations.csv").exists()
        assert (co_dir / "pareto.json").exists()
