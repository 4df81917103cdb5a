"""Tests for the command line interface."""

import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from asymcal.cli import cli
from asymcal.tensor_io import write_tensor

SMALL_TOY = ["--toy", "mlp", "--width", "16", "--blocks", "2", "--samples", "4"]


def _error_payload(output):
    """The JSON object printed on the error channel."""
    for line in output.splitlines():
        line = line.strip()
        if line.startswith("{"):
            return json.loads(line)
    raise AssertionError(f"No JSON error line in output:\n{output}")


def _split_runner():
    """Runner that keeps stderr apart from stdout."""
    try:
        return CliRunner(mix_stderr=False)
    except TypeError:
        return CliRunner()


def _stderr_records(result):
    lines = [line for line in result.stderr.splitlines() if line.strip()]
    return [json.loads(line) for line in lines]


class TestQuantizeCommand:
    """Test cases for the quantize command."""

    def setup_method(self):
        """Set up test fixtures."""
        self.runner = CliRunner()

    def test_writes_run_directory(self, tmp_path):
        """Test the files written by a quantization run."""
        out = tmp_path / "run"
        result = self.runner.invoke(cli, ["quantize", *SMALL_TOY, "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert "Summary:" in result.output
        for name in ("model.json", "params.json", "report.json", "report.csv", "manifest.json"):
            assert (out / name).exists()
        assert len(list((out / "weights").glob("*.gtaq"))) == 4

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "quantize"
        assert manifest["seed"] == 0
        assert "numpy" in manifest["versions"]
        assert manifest["git"]

        params = json.loads((out / "params.json").read_text())
        assert set(params) == {"block0", "block1"}
        assert params["block0"]["up_proj"]["bits"] == 4

    def test_lossless_run(self, tmp_path):
        """Test that 16-bit RTN reports zero output error."""
        out = tmp_path / "run"
        result = self.runner.invoke(cli, ["quantize", *SMALL_TOY, "--mode", "rtn", "--bits", "16", "--out", str(out)])
        assert result.exit_code == 0, result.output
        summary = json.loads((out / "report.json").read_text())["summary"]
        assert summary["final_mae"] == 0.0

    def test_quantized_model_reloads(self, tmp_path):
        """Test that the written model can be quantized again."""
        first = tmp_path / "first"
        assert self.runner.invoke(cli, ["quantize", *SMALL_TOY, "--out", str(first)]).exit_code == 0
        result = self.runner.invoke(
            cli, ["quantize", "--model", str(first), "--samples", "4", "--mode", "rtn", "--out", str(tmp_path / "second")]
        )
        assert result.exit_code == 0, result.output

    def test_missing_model(self, tmp_path):
        """Test that running without a model is a validation error."""
        result = self.runner.invoke(cli, ["quantize", "--out", str(tmp_path / "run")])
        assert result.exit_code == 2
        payload = _error_payload(result.output)
        assert payload["error"] == "ConfigError"
        assert payload["exit_code"] == 2

    def test_unsupported_bits(self, tmp_path):
        """Test that 5-bit weights are rejected before any compute."""
        out = tmp_path / "run"
        result = self.runner.invoke(cli, ["quantize", *SMALL_TOY, "--bits", "5", "--out", str(out)])
        assert result.exit_code == 2
        assert _error_payload(result.output)["error"] == "ConfigError"
        assert not out.exists()

    def test_toy_width_out_of_range(self, tmp_path):
        """Test that toy shape limits surface as validation errors."""
        result = self.runner.invoke(cli, ["quantize", "--toy", "mlp", "--width", "8", "--out", str(tmp_path / "r")])
        assert result.exit_code == 2

    def test_config_file_with_flag_override(self, tmp_path):
        """Test that flags take precedence over the config file."""
        cfg = tmp_path / "run.cfg"
        out = tmp_path / "run"
        cfg.write_text(f"toy = mlp\nwidth = 16\nblocks = 2\nsamples = 4\nbits = 3\nout = {out}\n")
        result = self.runner.invoke(cli, ["quantize", "--config", str(cfg), "--bits", "8"])
        assert result.exit_code == 0, result.output
        config = json.loads((out / "report.json").read_text())["config"]
        assert config["bits"] == 8

    def test_gptaq_not_worse_than_gptq(self, tmp_path):
        """Test paired runs on one seed: GPTAQ total asym loss is at most GPTQ's."""
        totals = {}
        for mode in ("gptq", "gptaq"):
            out = tmp_path / mode
            result = self.runner.invoke(cli, ["quantize", "--toy", "mlp", "--mode", mode, "--out", str(out)])
            assert result.exit_code == 0, result.output
            totals[mode] = json.loads((out / "report.json").read_text())["summary"]["total_asym_loss"]
        assert totals["gptaq"] <= totals["gptq"]

    def test_act_order_groups_in_params(self, tmp_path):
        """Test that params.json maps every column to its group and keeps the permutation."""
        out = tmp_path / "run"
        result = self.runner.invoke(
            cli, ["quantize", *SMALL_TOY, "--act-order", "--group-size", "8", "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        layer = json.loads((out / "params.json").read_text())["block0"]["up_proj"]
        assert len(layer["g_idx"]) == 16
        assert sorted(layer["perm"]) == list(range(16))
        assert [layer["g_idx"][c] for c in layer["perm"]] == [0] * 8 + [1] * 8

    def test_preset(self, tmp_path):
        """Test that a preset feeds the effective configuration."""
        out = tmp_path / "run"
        result = self.runner.invoke(cli, ["quantize", *SMALL_TOY, "--preset", "vision", "--out", str(out)])
        assert result.exit_code == 0, result.output
        config = json.loads((out / "report.json").read_text())["config"]
        assert config["damp_ratio"] == 0.1
        assert config["clip_search"] == "mse"
        assert config["act_cfg"]["enabled"] is True


class TestAblateCommand:
    """Test cases for the ablate command."""

    @pytest.fixture(scope="class")
    def default_ablation(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("ablation")
        result = CliRunner().invoke(cli, ["ablate", "--toy", "mlp", "--out", str(out)])
        assert result.exit_code == 0, result.output
        return pd.read_csv(out / "ablation.csv")

    def test_rtn_has_highest_loss(self, default_ablation):
        """Test that RTN has the largest asymmetric loss of the four modes."""
        for order, rows in default_ablation.groupby("aq_order"):
            losses = rows.set_index("mode")["total_asym_loss"]
            assert losses.idxmax() == "rtn", order
            assert losses["gptaq"] <= losses["gptq"] < losses["rtn"]

    def test_orders_give_identical_rows(self, default_ablation):
        """Test that both orders produce the same row when activations stay full precision."""
        assert "elapsed_s" not in default_ablation.columns
        for mode, rows in default_ablation.groupby("mode"):
            values = rows.drop(columns=["aq_order"]).drop_duplicates()
            assert len(values) == 1, mode

    def test_all_modes_and_orders(self, tmp_path):
        """Test one row per mode and activation-quantization order."""
        out = tmp_path / "abl"
        result = CliRunner().invoke(cli, ["ablate", *SMALL_TOY, "--out", str(out)])
        assert result.exit_code == 0, result.output
        df = pd.read_csv(out / "ablation.csv")
        assert len(df) == 8
        assert set(df["mode"]) == {"rtn", "gptq", "gptaq2", "gptaq"}

        # Activations are not quantized, so both orders must agree.
        for mode, rows in df.groupby("mode"):
            assert rows["total_asym_loss"].nunique() == 1, mode
        assert len(json.loads((out / "ablation.json").read_text())) == 8


class TestBenchCommand:
    """Test cases for the bench command."""

    def setup_method(self):
        """Set up test fixtures."""
        self.runner = CliRunner()

    def test_p_benchmark(self, tmp_path):
        """Test the P benchmark CSV."""
        out = tmp_path / "bench"
        result = self.runner.invoke(cli, ["bench", "--sizes", "4,8", "--reps", "5", "--k", "16", "--out", str(out)])
        assert result.exit_code == 0, result.output
        df = pd.read_csv(out / "bench_p.csv")
        assert len(df) == 4
        assert set(df["variant"]) == {"P_reference", "P_fused"}
        assert (out / "manifest.json").exists()

    def test_layer_benchmark(self, tmp_path):
        """Test that the layer benchmark reports the GPTAQ overhead."""
        out = tmp_path / "bench"
        result = self.runner.invoke(
            cli, ["bench", "--what", "layer", "--sizes", "8", "--reps", "5", "--k", "32", "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        df = pd.read_csv(out / "bench_layer.csv")
        assert "overhead_ratio" in df.columns
        assert list(df["variant"]) == ["GPTQ_layer", "GPTAQ_layer"]

    @pytest.mark.parametrize("sizes", ["0", "4,x", ""])
    def test_invalid_sizes(self, sizes, tmp_path):
        """Test that bad size lists exit with a validation error."""
        result = self.runner.invoke(cli, ["bench", "--sizes", sizes, "--out", str(tmp_path / "b")])
        assert result.exit_code == 2
        assert _error_payload(result.output)["error"] == "ConfigError"

    def test_size_cap(self, tmp_path):
        """Test that oversized reference runs are refused."""
        result = self.runner.invoke(cli, ["bench", "--sizes", "4096", "--out", str(tmp_path / "b")])
        assert result.exit_code == 2
        assert _error_payload(result.output)["error"] == "CapabilityError"

    def test_too_few_reps(self, tmp_path):
        """Test that fewer than five repetitions are rejected."""
        result = self.runner.invoke(cli, ["bench", "--sizes", "4", "--reps", "2", "--out", str(tmp_path / "b")])
        assert result.exit_code == 2


class TestExamplesCommand:
    """Test cases for the examples command."""

    def test_examples(self):
        """Test that the usage examples are printed."""
        result = CliRunner().invoke(cli, ["examples"])
        assert result.exit_code == 0
        assert "asymcal quantize" in result.output
        assert "ASYMCAL_THREADS" in result.output

    def test_version(self):
        """Test the version option."""
        result = CliRunner().invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert "1.0.0" in result.output


class TestErrorChannel:
    """Test cases for the stderr error channel and exit statuses."""

    def setup_method(self):
        """Set up test fixtures."""
        self.runner = _split_runner()

    def test_validation_error_is_only_json(self, tmp_path):
        """Test that a rejected configuration writes exactly one JSON line."""
        result = self.runner.invoke(cli, ["quantize", *SMALL_TOY, "--bits", "5", "--out", str(tmp_path / "r")])
        assert result.exit_code == 2
        records = _stderr_records(result)
        assert len(records) == 1
        assert records[0]["error"] == "ConfigError"

    def test_mismatched_calibration_exits_one(self, tmp_path):
        """Test that a shape failure during compute exits with status 1."""
        calib = tmp_path / "calib.gtaq"
        write_tensor(calib, np.ones((8, 64)))
        result = self.runner.invoke(
            cli, ["quantize", *SMALL_TOY, "--calib", str(calib), "--out", str(tmp_path / "r")]
        )
        assert result.exit_code == 1
        records = _stderr_records(result)
        assert [r["error"] for r in records] == ["ShapeError"]
        assert records[0]["exit_code"] == 1

    def test_degenerate_calibration_exits_one(self, tmp_path):
        """Test that all-zero activations fail as a compute error with block context."""
        calib = tmp_path / "zeros.gtaq"
        write_tensor(calib, np.zeros((16, 64)))
        result = self.runner.invoke(
            cli, ["quantize", *SMALL_TOY, "--calib", str(calib), "--out", str(tmp_path / "r")]
        )
        assert result.exit_code == 1
        records = _stderr_records(result)
        assert len(records) == 1
        assert records[0]["error"] == "CalibrationError"
        assert records[0]["block"] == 0
