import csv
import json
from pathlib import Path

import numpy as np
import pytest

from gridmm import cli, selfcheck
from gridmm.selfcheck import CheckResult

TINY_OVERRIDES = [
    "--set", "model.hidden=16", "--set", "model.feature_dim=6",
    "--set", "model.view_dim=6", "--set", "model.relevance_dim=16",
    "--set", "model.heads=2", "--set", "model.language_layers=1",
    "--set", "model.panorama_layers=1", "--set", "model.stage_two_layers=1",
    "--set", "model.map_scale=8", "--set", "simulator.views=6",
    "--set", "simulator.grid_rows=2", "--set", "simulator.grid_cols=2",
    "--set", "simulator.node_count=14", "--set", "training.epochs=1",
    "--set", "training.episodes_per_epoch=2", "--set", "training.batch_episodes=2",
    "--set", "training.eval_episodes=2", "--set", "training.eval_every=1",
    "--set", "training.min_path_hops=2",
]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    rc = cli.main(
        ["gen-env", "--out", str(out), "--count", "2", "--heldout", "1",
         "--episodes", "4", "--seed", "3", *TINY_OVERRIDES]
    )
    assert rc == 0
    return out


class TestGenEnv:
    def test_writes_requested_counts(self, data_dir):
        assert len(list((data_dir / "train").glob("env_*.json"))) == 2
        assert len(list((data_dir / "heldout").glob("env_*.json"))) == 1
        assert (data_dir / "vocab.json").exists()
        assert (data_dir / "config.json").exists()

    def test_episode_file_schema(self, data_dir):
        lines = (data_dir / "heldout_episodes.jsonl").read_text().splitlines()
        assert len(lines) == 4
        for line in lines:
            obj = json.loads(line)
            assert obj["schema"] == "gridmm-episode/1"
            assert isinstance(obj["tokens"], list)

    def test_seed_determinism(self, data_dir, tmp_path):
        other = tmp_path / "data2"
        rc = cli.main(
            ["gen-env", "--out", str(other), "--count", "2", "--heldout", "1",
             "--episodes", "4", "--seed", "3", *TINY_OVERRIDES]
        )
        assert rc == 0
        a = (data_dir / "train" / "env_000.json").read_text()
        b = (other / "train" / "env_000.json").read_text()
        assert a == b

    def test_unknown_override_is_usage_error(self, tmp_path):
        rc = cli.main(
            ["gen-env", "--out", str(tmp_path / "x"), "--set", "model.bogus=1"]
        )
        assert rc == 2


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    rc = cli.main(
        ["train", "--out", str(out), "--envs", str(data_dir),
         "--config", str(data_dir / "config.json"), "--seed", "3"]
    )
    assert rc == 0
    return out


class TestTrainEvalCycle:
    def test_outputs_exist(self, run_dir):
        assert (run_dir / "checkpoint.json").exists()
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "training.png").exists()

    def test_metrics_rows_match_epochs(self, run_dir):
        rows = list(csv.DictReader(open(run_dir / "metrics.csv")))
        assert len(rows) == 1

    def test_eval_writes_table(self, data_dir, run_dir, tmp_path):
        out = tmp_path / "eval"
        rc = cli.main(
            ["eval", "--out", str(out), "--envs", str(data_dir),
             "--config", str(data_dir / "config.json"),
             "--checkpoint", str(run_dir / "checkpoint.json"),
             "--episodes", "3", "--seed", "3", "--write-traces"]
        )
        assert rc == 0
        rows = list(csv.DictReader(open(out / "eval_metrics.csv")))
        assert len(rows) == 1
        assert float(rows[0]["sr"]) >= 0.0
        assert len(list((out / "traces").glob("episode_*.jsonl"))) == 3

    def test_eval_rerun_identical(self, data_dir, run_dir, tmp_path):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = cli.main(
                ["eval", "--out", str(out), "--envs", str(data_dir),
                 "--config", str(data_dir / "config.json"),
                 "--checkpoint", str(run_dir / "checkpoint.json"),
                 "--episodes", "3", "--seed", "3"]
            )
            assert rc == 0
            outputs.append((out / "eval_metrics.csv").read_text())
        assert outputs[0] == outputs[1]

    def test_map_scale_choices_enforced(self, data_dir, run_dir, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(
                ["eval", "--out", str(tmp_path / "x"), "--envs", str(data_dir),
                 "--checkpoint", str(run_dir / "checkpoint.json"), "--map-scale", "12"]
            )
        assert exc.value.code == 2
        capsys.readouterr()

    def test_dump_map_outputs(self, data_dir, run_dir, tmp_path):
        eval_out = tmp_path / "eval"
        cli.main(
            ["eval", "--out", str(eval_out), "--envs", str(data_dir),
             "--config", str(data_dir / "config.json"),
             "--checkpoint", str(run_dir / "checkpoint.json"),
             "--episodes", "1", "--seed", "3", "--write-traces"]
        )
        trace = next((eval_out / "traces").glob("episode_*.jsonl"))
        out = tmp_path / "dump"
        rc = cli.main(
            ["dump-map", "--out", str(out), "--trace", str(trace),
             "--envs", str(data_dir), "--config", str(data_dir / "config.json")]
        )
        assert rc == 0
        rows = list(csv.DictReader(open(out / "map_stats.csv")))
        assert list(rows[0]) == ["step", "side_length_m", "max_cell_population"]
        assert (out / "map_stats.png").exists()
        snapshots = list(out.glob("map_step_*.json"))
        assert len(snapshots) == 1
        snap = json.loads(snapshots[0].read_text())
        assert snap["schema"] == "gridmm-map-snapshot/1"
        total = sum(len(cell) for row in snap["cells"] for cell in row)
        assert total == len(rows) * 24  # 6 views x 2 x 2 elements per step

    def test_dump_map_step_out_of_range(self, data_dir, run_dir, tmp_path, capsys):
        eval_out = tmp_path / "eval"
        cli.main(
            ["eval", "--out", str(eval_out), "--envs", str(data_dir),
             "--config", str(data_dir / "config.json"),
             "--checkpoint", str(run_dir / "checkpoint.json"),
             "--episodes", "1", "--seed", "3", "--write-traces"]
        )
        trace = next((eval_out / "traces").glob("episode_*.jsonl"))
        rc = cli.main(
            ["dump-map", "--out", str(tmp_path / "dump"), "--trace", str(trace),
             "--envs", str(data_dir), "--config", str(data_dir / "config.json"),
             "--step", "99"]
        )
        assert rc == 1
        assert "out of range" in capsys.readouterr().err

    def test_dump_map_recompute_matches_trace_stats(self, data_dir, run_dir, tmp_path):
        eval_out = tmp_path / "eval"
        cli.main(
            ["eval", "--out", str(eval_out), "--envs", str(data_dir),
             "--config", str(data_dir / "config.json"),
             "--checkpoint", str(run_dir / "checkpoint.json"),
             "--episodes", "1", "--seed", "3", "--write-traces"]
        )
        trace_path = next((eval_out / "traces").glob("episode_*.jsonl"))
        out = tmp_path / "dump"
        cli.main(
            ["dump-map", "--out", str(out), "--trace", str(trace_path),
             "--envs", str(data_dir), "--config", str(data_dir / "config.json")]
        )
        from gridmm.simulator import read_trace

        parsed = read_trace(trace_path)
        rows = list(csv.DictReader(open(out / "map_stats.csv")))
        for row, step in zip(rows, parsed["steps"]):
            assert float(row["side_length_m"]) == pytest.approx(step["side_length"], abs=1e-9)
            assert int(row["max_cell_population"]) == step["max_cell_population"]


class TestFlops:
    def test_sweep_outputs(self, tmp_path):
        out = tmp_path / "flops"
        rc = cli.main(["flops", "--out", str(out), "--trajectory-length", "5"])
        assert rc == 0
        rows = list(csv.DictReader(open(out / "flops_trajectory.csv")))
        assert len(rows) == 5
        for row in rows:
            assert float(row["cached_gflops"]) <= float(row["uncached_gflops"])
        assert (out / "flops_trajectory.png").exists()
        assert (out / "flops_instruction.png").exists()

    def test_single_point(self, tmp_path):
        out = tmp_path / "one"
        rc = cli.main(["flops", "--out", str(out), "--trajectory-length", "1",
                       "--instruction-lengths", "32"])
        assert rc == 0
        rows = list(csv.DictReader(open(out / "flops_trajectory.csv")))
        assert len(rows) == 1
        assert float(rows[0]["cached_gflops"]) == float(rows[0]["uncached_gflops"])


class TestSelfcheck:
    def test_clean_build_exits_zero(self, tmp_path, capsys):
        rc = cli.main(["selfcheck", "--out", str(tmp_path), "--seed", "1"])
        assert rc == 0
        assert "selfcheck passed" in capsys.readouterr().out

    def test_deterministic_report(self, tmp_path, capsys):
        cli.main(["selfcheck", "--out", str(tmp_path), "--seed", "5"])
        a = capsys.readouterr().out
        cli.main(["selfcheck", "--out", str(tmp_path), "--seed", "5"])
        b = capsys.readouterr().out
        assert a == b

    def test_injected_fault_names_invariant(self, tmp_path, capsys, monkeypatch):
        def broken(seed=0, cases=1000):
            return CheckResult("geometry-round-trip", False, "injected fault")

        monkeypatch.setattr(selfcheck, "check_geometry_round_trip", broken)
        rc = cli.main(["selfcheck", "--out", str(tmp_path)])
        captured = capsys.readouterr()
        assert rc == 1
        assert "geometry-round-trip" in captured.err

    def test_fault_in_geometry_function_detected(self, tmp_path, capsys, monkeypatch):
        from gridmm import geometry

        original = geometry.to_relative

        def corrupted(p, pose):
            r = original(p, pose)
            return type(r)(r.x_rel + 1e-6, r.y_rel)

        monkeypatch.setattr(geometry, "to_relative", corrupted)
        rc = cli.main(["selfcheck", "--out", str(tmp_path)])
        captured = capsys.readouterr()
        assert rc == 1
        assert "geometry-round-trip" in captured.err


def test_seed_falls_back_to_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("GRIDMM_SEED", "77")
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert cli.main(["gen-env", "--out", str(out1), "--count", "1", "--heldout", "1",
                     "--episodes", "1", *TINY_OVERRIDES]) == 0
    monkeypatch.delenv("GRIDMM_SEED")
    assert cli.main(["gen-env", "--out", str(out2), "--count", "1", "--heldout", "1",
                     "--episodes", "1", "--seed", "77", *TINY_OVERRIDES]) == 0
    assert (out1 / "train" / "env_000.json").read_text() == (
        out2 / "train" / "env_000.json"
    ).read_text()
