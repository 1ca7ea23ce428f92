import json
import os
import re

import pytest
from click.testing import CliRunner
from PIL import Image

import cli as cli_module
from cli import cli
from errors import TrainingDiverged
from train import History


def _runner():
    try:
        return CliRunner(mix_stderr=False)
    except TypeError:
        return CliRunner()


def invoke(*args):
    return _runner().invoke(cli, [str(a) for a in args], catch_exceptions=False)


def assert_one_line_error(result, code, kind):
    assert result.exit_code == code, result.stdout + result.stderr
    lines = result.stderr.strip().split("\n")
    assert len(lines) == 1
    assert lines[0].startswith(f"plaincnn: error: {kind}: ")


@pytest.fixture
def trained(tmp_path, mnist_config):
    out = tmp_path / "run"
    result = invoke("train", "--config", mnist_config, "--out", out, "--quiet")
    assert result.exit_code == 0, result.stderr
    return out


# =============================================================================
# train / eval
# =============================================================================

class TestTrain:
    def test_smoke(self, tmp_path, mnist_config):
        out = tmp_path / "one"
        result = invoke("train", "--config", mnist_config, "--override", "train.max_epochs=1", "--out", out, "--quiet")
        assert result.exit_code == 0
        assert result.stderr == ""
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc,seconds"
        assert len(lines) == 2
        assert (out / "best.ckpt").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["stopped_epoch"] == 1
        assert summary["param_count"] > 0
        assert 0.0 <= summary["test_acc"] <= 1.0

    def test_byte_identical_reruns(self, tmp_path, mnist_config):
        for name in ("a", "b"):
            assert invoke("train", "--config", mnist_config, "--out", tmp_path / name, "--quiet").exit_code == 0
        for filename in ("metrics.csv", "best.ckpt"):
            assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()

    def test_seed_changes_the_run(self, tmp_path, mnist_config):
        invoke("train", "--config", mnist_config, "--out", tmp_path / "a", "--quiet")
        invoke("train", "--config", mnist_config, "--out", tmp_path / "b", "--seed", 99, "--quiet")
        assert (tmp_path / "a" / "best.ckpt").read_bytes() != (tmp_path / "b" / "best.ckpt").read_bytes()

    def test_progress_on_stdout(self, tmp_path, mnist_config):
        result = invoke("train", "--config", mnist_config, "--out", tmp_path / "v")
        assert "Epoch 1/2" in result.stdout
        assert result.stderr == ""

    def test_spatial_paradigm_override(self, tmp_path, mnist_config):
        out = tmp_path / "b"
        result = invoke(
            "train", "--config", mnist_config, "--out", out, "--quiet",
            "--override", "model.paradigm=spatial_at_pools", "--override", "model.spatial_rate=0.125",
        )
        assert result.exit_code == 0
        model = json.loads((out / "summary.json").read_text())["config"]["model"]
        assert (model["paradigm"], model["spatial_rate"]) == ("spatial_at_pools", 0.125)

    def test_missing_labels_file(self, tmp_path, mnist_config, mnist_files):
        os.remove(mnist_files["train_labels"])
        result = invoke("train", "--config", mnist_config, "--out", tmp_path / "x")
        assert_one_line_error(result, 3, "data")
        assert "train-labels-idx1-ubyte" in result.stderr

    def test_unknown_config_key(self, tmp_path, mnist_config):
        result = invoke("train", "--config", mnist_config, "--override", "train.momentum=0.9")
        assert_one_line_error(result, 2, "config")

    def test_missing_config_file(self, tmp_path):
        result = invoke("train", "--config", tmp_path / "nope.json")
        assert_one_line_error(result, 2, "config")

    def test_numeric_failure(self, tmp_path, mnist_config, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingDiverged("non-finite loss at epoch 1, batch 0", history=History(), epoch=1, batch=0)

        monkeypatch.setattr(cli_module, "train", diverge)
        out = tmp_path / "nan"
        result = invoke("train", "--config", mnist_config, "--out", out, "--quiet")
        assert_one_line_error(result, 4, "numeric")
        assert (out / "metrics.csv").read_text() == "epoch,train_loss,train_acc,val_loss,val_acc,seconds\n"


class TestEval:
    def test_val_split_matches_summary(self, trained, mnist_config):
        result = invoke("eval", "--checkpoint", trained / "best.ckpt", "--config", mnist_config, "--split", "val")
        assert result.exit_code == 0
        payload = json.loads(result.stdout)
        summary = json.loads((trained / "summary.json").read_text())
        assert payload["accuracy"] == summary["best_val_acc"]
        assert payload["n"] == 10

    def test_single_line_and_repeatable(self, trained, mnist_config):
        a = invoke("eval", "--checkpoint", trained / "best.ckpt", "--config", mnist_config)
        b = invoke("eval", "--checkpoint", trained / "best.ckpt", "--config", mnist_config)
        assert a.stdout == b.stdout
        assert a.stdout.count("\n") == 1
        assert json.loads(a.stdout)["split"] == "test"

    def test_test_split_matches_summary(self, trained, mnist_config):
        payload = json.loads(invoke("eval", "--checkpoint", trained / "best.ckpt", "--config", mnist_config).stdout)
        assert payload["accuracy"] == json.loads((trained / "summary.json").read_text())["test_acc"]

    def test_shape_mismatch(self, trained, cifar10_config):
        result = invoke("eval", "--checkpoint", trained / "best.ckpt", "--config", cifar10_config)
        assert_one_line_error(result, 3, "data")

    def test_corrupt_checkpoint(self, tmp_path, mnist_config):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE")
        result = invoke("eval", "--checkpoint", bad, "--config", mnist_config)
        assert_one_line_error(result, 3, "data")

    def test_undecodable_architecture_text(self, tmp_path, trained, mnist_config):
        raw = bytearray((trained / "best.ckpt").read_bytes())
        raw[12] = 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(raw))
        result = invoke("eval", "--checkpoint", bad, "--config", mnist_config)
        assert_one_line_error(result, 3, "data")
        assert "architecture text" in result.stderr


# =============================================================================
# preview-augment
# =============================================================================

def _index(out):
    return (out / "index.txt").read_text().splitlines()


def _rotations(lines):
    return [float(re.search(r"rotation=(\S+)", line).group(1)) for line in lines]


class TestPreview:
    def test_mnist_rotates(self, tmp_path, mnist_config):
        out = tmp_path / "prev"
        result = invoke("preview-augment", "--config", mnist_config, "-n", 5, "--out", out)
        assert result.exit_code == 0
        lines = _index(out)
        assert len(lines) == 5
        assert all(r != 0.0 for r in _rotations(lines))
        with Image.open(out / "sample_0000.pgm") as img:
            assert img.mode == "L"
            assert img.size == (28, 28)

    def test_cifar10_never_rotates(self, tmp_path, cifar10_config):
        out = tmp_path / "prev"
        assert invoke("preview-augment", "--config", cifar10_config, "-n", 6, "--out", out).exit_code == 0
        lines = _index(out)
        assert len(lines) == 6
        assert all(r == 0.0 for r in _rotations(lines))
        with Image.open(out / "sample_0000.ppm") as img:
            assert img.mode == "RGB"
            assert img.size == (32, 32)

    def test_zero_samples(self, tmp_path, mnist_config):
        out = tmp_path / "prev"
        assert invoke("preview-augment", "--config", mnist_config, "-n", 0, "--out", out).exit_code == 0
        assert (out / "index.txt").read_text() == ""

    def test_deterministic(self, tmp_path, mnist_config):
        for name in ("a", "b"):
            invoke("preview-augment", "--config", mnist_config, "-n", 3, "--out", tmp_path / name, "--seed", 5)
        for filename in ("index.txt", "sample_0000.pgm", "sample_0002.pgm"):
            assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()

    def test_unwritable_out_dir(self, tmp_path, mnist_config):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        result = invoke("preview-augment", "--config", mnist_config, "-n", 1, "--out", blocker)
        assert_one_line_error(result, 3, "data")


# =============================================================================
# params / gradcheck / plot
# =============================================================================

def _total(stdout):
    return int(re.search(r"Total parameters: ([\d,]+)", stdout).group(1).replace(",", ""))


class TestParams:
    def test_mnist(self):
        result = invoke("params", "mnist")
        assert result.exit_code == 0
        assert _total(result.stdout) > 1_400_000

    def test_cifar10_reports_delta(self):
        result = invoke("params", "cifar10")
        assert result.exit_code == 0
        match = re.search(r"Published figure: 4,252,298 \(delta ([+-][\d,]+)\)", result.stdout)
        assert match
        assert int(match.group(1).replace(",", "")) == _total(result.stdout) - 4_252_298

    def test_stl10_reports_lower_bound(self):
        result = invoke("params", "stl10")
        assert result.exit_code == 0
        match = re.search(r"Published figure: >5,000,000 \(delta ([+-][\d,]+)\)", result.stdout)
        assert match
        assert int(match.group(1).replace(",", "")) == _total(result.stdout) - 5_000_000

    def test_override(self):
        small = _total(invoke("params", "mnist", "--override", "model.fc_width=128").stdout)
        assert small < _total(invoke("params", "mnist").stdout)

    def test_unknown_preset(self):
        assert_one_line_error(invoke("params", "imagenet"), 2, "config")


class TestGradcheck:
    def test_conv(self):
        result = invoke("gradcheck", "conv")
        assert result.exit_code == 0
        assert "conv" in result.stdout
        assert result.stderr == ""

    def test_perturbed_backward_fails(self):
        result = invoke("gradcheck", "relu", "--perturb", "relu")
        assert_one_line_error(result, 1, "gradcheck")
        assert "relu" in result.stderr

    def test_unknown_scope(self):
        assert_one_line_error(invoke("gradcheck", "lstm"), 2, "config")


class TestPlot:
    def test_png(self, trained, tmp_path):
        out = tmp_path / "curves.png"
        result = invoke("plot", trained / "metrics.csv", "--out", out, "--baseline", 0.5)
        assert result.exit_code == 0
        assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_bad_header(self, tmp_path):
        csv = tmp_path / "m.csv"
        csv.write_text("a,b\n1,2\n")
        assert_one_line_error(invoke("plot", csv, "--out", tmp_path / "x.png"), 3, "data")


# =============================================================================
# Official data (set PLAINCNN_MNIST_DIR to run)
# =============================================================================

@pytest.mark.slow
def test_mnist_five_epoch_smoke(tmp_path):
    d = os.environ.get("PLAINCNN_MNIST_DIR")
    if not d or not os.path.isdir(d):
        pytest.skip("PLAINCNN_MNIST_DIR not set")

    def pick(stem):
        for name in (stem, stem + ".gz"):
            if os.path.exists(os.path.join(d, name)):
                return os.path.join(d, name)
        pytest.skip(f"{stem} not in {d}")

    config = tmp_path / "mnist.json"
    config.write_text(json.dumps({"dataset": {
        "name": "mnist",
        "train_images": pick("train-images-idx3-ubyte"),
        "train_labels": pick("train-labels-idx1-ubyte"),
        "test_images": pick("t10k-images-idx3-ubyte"),
        "test_labels": pick("t10k-labels-idx1-ubyte"),
    }}))
    out = tmp_path / "run"
    result = invoke("train", "--config", config, "--out", out, "--quiet", "--override", "train.max_epochs=5")
    assert result.exit_code == 0, result.stderr
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["model"]["regular_rate"] == 0.8
    assert summary["config"]["model"]["fc_width"] == 2048
    assert summary["test_acc"] >= 0.98
