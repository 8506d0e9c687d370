"""End-to-end tests for the command-line interface."""

import json
from pathlib import Path

import numpy as np
import pytest

from rmab_dfl.cli import (
    EXIT_INPUT,
    EXIT_OK,
    OUTPUT_ROOT_ENV,
    main,
    run_verification,
)


@pytest.fixture()
def tiny_dataset(tmp_path):
    """A small dataset on disk, shared across CLI invocations."""
    out = tmp_path / "data"
    code = main(
        [
            "generate",
            "--out",
            str(out),
            "--cohorts",
            "6",
            "--arms",
            "4",
            "--budget",
            "1.0",
            "--seed",
            "0",
        ]
    )
    assert code == EXIT_OK
    return out / "dataset.json"


class TestGenerate:
    def test_writes_dataset(self, tiny_dataset):
        assert tiny_dataset.exists()
        payload = json.loads(tiny_dataset.read_text())
        assert payload["manifest"]["cohorts"] == 6

    def test_overwrite_protection(self, tiny_dataset):
        code = main(
            ["generate", "--out", str(tiny_dataset.parent), "--cohorts", "6", "--arms", "4",
             "--budget", "1.0"]
        )
        assert code == EXIT_INPUT
        code = main(
            ["generate", "--out", str(tiny_dataset.parent), "--cohorts", "6", "--arms", "4",
             "--budget", "1.0", "--overwrite"]
        )
        assert code == EXIT_OK

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "envroot"))
        code = main(["generate", "--cohorts", "3", "--arms", "2", "--budget", "1.0",
                     "--states", "2"])
        assert code == EXIT_OK
        assert (tmp_path / "envroot" / "dataset.json").exists()


class TestTrainEvalExport:
    def test_full_pipeline(self, tiny_dataset, tmp_path):
        run = tmp_path / "run"
        code = main(
            [
                "train",
                "--dataset",
                str(tiny_dataset),
                "--out",
                str(run),
                "--loss",
                "mse",
                "--lr",
                "1e-2",
                "1e-3",
                "--epochs",
                "3",
                "--seed",
                "0",
            ]
        )
        assert code == EXIT_OK
        assert (run / "model.npz").exists()
        assert (run / "result.json").exists()
        log_lines = (run / "log.jsonl").read_text().splitlines()
        assert all("epoch" in json.loads(line) for line in log_lines)

        code = main(
            [
                "eval",
                "--dataset",
                str(tiny_dataset),
                "--model",
                str(run / "model.npz"),
                "--out",
                str(run),
                "--trajectories",
                "20",
            ]
        )
        assert code == EXIT_OK
        dq = json.loads((run / "dq.json").read_text())
        assert "normalized_decomposed_dq" in dq
        assert dq["split"] == "test"

        code = main(["export", "--kind", "dq_table", "--results", str(run), "--out", str(run)])
        assert code == EXIT_OK
        table = (run / "dq_table.csv").read_text().splitlines()
        assert table[1].startswith("loss,")

        code = main(["export", "--kind", "dq_vs_epoch", "--results", str(run), "--out", str(run)])
        assert code == EXIT_OK
        assert (run / "dq_vs_epoch.csv").exists()

        code = main(
            [
                "export",
                "--kind",
                "wi_scatter",
                "--dataset",
                str(tiny_dataset),
                "--model",
                str(run / "model.npz"),
                "--out",
                str(run),
            ]
        )
        assert code == EXIT_OK
        scatter = (run / "wi_scatter.csv").read_text().splitlines()
        assert scatter[1] == "arm,true_wi,predicted_wi,selected"

    def test_parallel_jobs_match_serial(self, tiny_dataset, tmp_path):
        argv = [
            "train", "--dataset", str(tiny_dataset), "--loss", "mse",
            "--lr", "1e-2", "1e-3", "--epochs", "2", "--seed", "0",
        ]
        assert main(argv + ["--out", str(tmp_path / "serial"), "--jobs", "1"]) == EXIT_OK
        assert main(argv + ["--out", str(tmp_path / "parallel"), "--jobs", "2"]) == EXIT_OK
        a = np.load(tmp_path / "serial" / "model.npz")["theta"]
        b = np.load(tmp_path / "parallel" / "model.npz")["theta"]
        assert np.array_equal(a, b)

    def test_missing_dataset_is_input_error(self, tmp_path):
        code = main(["train", "--dataset", str(tmp_path / "nope.json"), "--loss", "mse"])
        assert code == EXIT_INPUT

    def test_missing_model_is_input_error(self, tiny_dataset, tmp_path):
        code = main(
            ["eval", "--dataset", str(tiny_dataset), "--model", str(tmp_path / "nope.npz")]
        )
        assert code == EXIT_INPUT


class TestBench:
    def test_writes_timing_tables(self, tiny_dataset, tmp_path):
        out = tmp_path / "bench"
        code = main(
            [
                "bench",
                "--dataset",
                str(tiny_dataset),
                "--out",
                str(out),
                "--losses",
                "mse",
                "fast-dec-dfl",
                "--repeats",
                "5",
            ]
        )
        assert code == EXIT_OK
        table = (out / "time_table.csv").read_text().splitlines()
        assert table[0].startswith("# manifest_hash=")
        assert table[1] == "loss,seconds_per_epoch_mean,seconds_per_epoch_sem"
        assert len(table) == 4
        scaling = (out / "layer_scaling.csv").read_text().splitlines()
        assert scaling[1] == "num_arms,forward_seconds,backward_seconds"


class TestVerify:
    def test_all_claims_pass(self, tmp_path):
        out = tmp_path / "verify"
        code = main(["verify", "--seed", "0", "--out", str(out)])
        assert code == EXIT_OK
        payload = json.loads((out / "verify.json").read_text())
        assert len(payload["claims"]) == 6
        assert all(claim["passed"] for claim in payload["claims"])

    def test_reports_have_details(self):
        reports = run_verification(seed=1)
        names = {r["claim"] for r in reports}
        assert names == {
            "budget-overshoot",
            "spurious-minimum",
            "truthful-optimality",
            "mixture-equivalence",
            "dual-solver",
            "residual-monotonicity",
        }
