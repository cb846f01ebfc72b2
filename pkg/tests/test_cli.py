import json

import numpy as np
import pytest

from tokenshield.cli import main
from tokenshield.dataset import save_image, write_dataset
from tokenshield.defense import DefenseConfig, config_to_json
from tokenshield.model import save_model

from conftest import smooth_images


@pytest.fixture(scope="module")
def workspace(tiny_model, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model_path = root / "model.strv"
    save_model(model_path, tiny_model)
    rng = np.random.default_rng(0)
    data_dir = root / "data"
    images = smooth_images(rng, 8, 32)
    write_dataset(data_dir, images, list(range(8)))
    image_path = root / "one.strv"
    save_image(image_path, images[0])
    config_path = root / "config.json"
    config_path.write_text(config_to_json(DefenseConfig(k=2, seed=7)))
    return root, model_path, data_dir, image_path, config_path


def run(argv):
    return main([str(a) for a in argv])


class TestCalibrateCommand:
    def test_writes_profile(self, workspace, capsys):
        root, model, data, _, _ = workspace
        out = root / "profile.strv"
        code = run(["calibrate", "--model", model, "--data", data, "--alpha", "0.05",
                    "--temperature", "1.0", "--layer", "0", "--out", out])
        assert code == 0
        assert out.is_file()
        info = json.loads(capsys.readouterr().out)
        assert 0.0 <= info["tau"] <= 0.8326
        assert info["reference_images"] == 4
        assert info["threshold_images"] == 4

    def test_missing_model_is_io_error(self, workspace):
        root, _, data, _, _ = workspace
        code = run(["calibrate", "--model", root / "nope.strv", "--data", data,
                    "--out", root / "p.strv"])
        assert code == 3


@pytest.fixture(scope="module")
def profile_path(workspace):
    root, model, data, _, _ = workspace
    out = root / "profile_main.strv"
    assert run(["calibrate", "--model", model, "--data", data, "--out", out]) == 0
    return out


class TestAttackCommand:
    def test_writes_patch(self, workspace, capsys):
        root, model, data, _, _ = workspace
        out = root / "patch.strv"
        code = run(["attack", "--model", model, "--data", data, "--patch-size", "8",
                    "--steps", "2", "--seed", "5", "--eot-samples", "2", "--out", out])
        assert code == 0
        assert out.is_file()
        info = json.loads(capsys.readouterr().out)
        assert info["objective"] >= info["initial_objective"]

    def test_adaptive_needs_profile(self, workspace):
        root, model, data, _, _ = workspace
        code = run(["attack", "--model", model, "--data", data, "--steps", "1",
                    "--adaptive", "--out", root / "p2.strv"])
        assert code == 2


class TestDefendCommand:
    def test_prints_prediction_json(self, workspace, profile_path, capsys):
        root, model, _, image, config = workspace
        code = run(["defend", "--model", model, "--profile", profile_path,
                    "--config", config, "--image", image])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert 0 <= doc["top1"] < 10
        assert len(doc["top5"]) == 5
        assert len(doc["scores"]) == 16
        assert len(doc["flagged"]) >= 2
        assert abs(sum(doc["probabilities"]) - 1.0) < 1e-9

    def test_bad_config_is_validation_error(self, workspace, profile_path, tmp_path):
        root, model, _, image, _ = workspace
        bad = tmp_path / "bad.json"
        bad.write_text('{"K": "many"}')
        code = run(["defend", "--model", model, "--profile", profile_path,
                    "--config", bad, "--image", image])
        assert code == 2


class TestEvaluateAndReport:
    def test_full_pipeline(self, workspace, profile_path, capsys):
        root, model, data, _, config = workspace
        patch = root / "patch_eval.strv"
        assert run(["attack", "--model", model, "--data", data, "--steps", "2",
                    "--eot-samples", "2", "--seed", "1", "--out", patch]) == 0
        metrics = root / "metrics.csv"
        report = root / "report.json"
        code = run(["evaluate", "--model", model, "--profile", profile_path,
                    "--config", config, "--data", data, "--patch", patch,
                    "--out", metrics, "--report", report])
        assert code == 0
        text = metrics.read_text()
        assert text.startswith("condition,top1,top5,flag_rate,mean_coverage,n_images\n")
        assert len(text.strip().split("\n")) == 5
        assert json.loads(report.read_text())["conditions"]

        plot = root / "plot.csv"
        assert run(["report", "--metrics", metrics, "--out", plot]) == 0
        assert plot.read_text().startswith("condition,metric,value\n")

    def test_checksum_guard_refuses_foreign_profile(self, workspace, tmp_path, tiny_model):
        root, model, data, _, config = workspace
        from tokenshield.model import random_weights
        from conftest import TINY_CONFIG

        other_path = tmp_path / "other.strv"
        save_model(other_path, random_weights(TINY_CONFIG, seed=321))
        other_profile = tmp_path / "op.strv"
        assert run(["calibrate", "--model", other_path, "--data", data, "--out", other_profile]) == 0
        code = run(["evaluate", "--model", model, "--profile", other_profile,
                    "--config", config, "--data", data, "--out", tmp_path / "m.csv"])
        assert code == 2
