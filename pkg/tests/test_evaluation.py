import numpy as np
import pytest

from tokenshield.attack import PatchSpec
from tokenshield.dataset import load_image, read_index, save_image, write_dataset
from tokenshield.defense import DefenseConfig
from tokenshield.detector import calibrate_reference, calibrate_threshold
from tokenshield.errors import DataError
from tokenshield.evaluation import (
    evaluate,
    metrics_csv_text,
    plot_data_csv_text,
    write_metrics_csv,
    write_report_json,
)

from conftest import smooth_images


@pytest.fixture(scope="module")
def world(tiny_model, tmp_path_factory):
    rng = np.random.default_rng(0)
    ref = smooth_images(rng, 6, 32)
    held = smooth_images(rng, 8, 32)
    profile = calibrate_threshold(calibrate_reference(ref, tiny_model), held, tiny_model)
    data_dir = tmp_path_factory.mktemp("data")
    images = smooth_images(rng, 10, 32)
    labels = list(np.arange(10) % tiny_model.config.num_classes)
    write_dataset(data_dir, images, labels)
    patch = PatchSpec(np.ones((3, 8, 8), dtype=np.float32))
    return tiny_model, profile, data_dir, patch


class TestDatasetFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        images = smooth_images(rng, 3, 32)
        write_dataset(tmp_path, images, [4, 5, 6])
        entries = read_index(tmp_path)
        assert [e.label for e in entries] == [4, 5, 6]
        for e, img in zip(entries, images):
            np.testing.assert_array_equal(load_image(tmp_path / e.file), img)

    def test_missing_index_rejected(self, tmp_path):
        with pytest.raises(DataError):
            read_index(tmp_path)

    def test_bad_header_rejected(self, tmp_path):
        (tmp_path / "index.csv").write_text("path,cls\nx.strv,0\n")
        with pytest.raises(DataError):
            read_index(tmp_path)


class TestEvaluate:
    def test_conditions_and_ranges(self, world):
        model, profile, data_dir, patch = world
        config = DefenseConfig(k=2, seed=11)
        metrics = evaluate(data_dir, model, profile, config, patch=patch)
        assert set(metrics.conditions) == {"clean", "clean_defended", "attacked", "attacked_defended"}
        for s in metrics.conditions.values():
            assert 0.0 <= s.top1 <= 100.0
            assert 0.0 <= s.top5 <= 100.0
            assert 0.0 <= s.flag_rate <= 1.0
            assert 0.0 <= s.mean_coverage <= 1.0
            assert s.n_images == 10
        assert metrics.conditions["attacked_defended"].mean_coverage > 0.0
        assert len(metrics.per_image) == 10

    def test_disabled_defense_without_patch_matches_clean(self, world):
        model, profile, data_dir, _ = world
        config = DefenseConfig(enabled=False, seed=11)
        metrics = evaluate(data_dir, model, profile, config)
        assert set(metrics.conditions) == {"clean", "clean_defended"}
        assert metrics.conditions["clean_defended"].top1 == metrics.conditions["clean"].top1
        assert metrics.conditions["clean_defended"].top5 == metrics.conditions["clean"].top5
        for rec in metrics.per_image:
            assert rec["clean_defended"] == rec["clean"]

    def test_csv_byte_identical_across_runs_and_workers(self, world):
        model, profile, data_dir, patch = world
        config = DefenseConfig(k=2, seed=42)
        texts = [
            metrics_csv_text(evaluate(data_dir, model, profile, config, patch=patch, workers=w))
            for w in (1, 1, 3, 4)
        ]
        assert len(set(texts)) == 1

    def test_clean_flag_rate_near_alpha(self, world):
        model, profile, data_dir, _ = world
        config = DefenseConfig(k=0, seed=1)
        metrics = evaluate(data_dir, model, profile, config)
        # 160 clean tokens drawn from the calibration generator
        assert metrics.conditions["clean"].flag_rate <= profile.alpha + 0.15

    def test_corrupt_entry_skipped_but_run_continues(self, world, tmp_path):
        model, profile, _, _ = world
        rng = np.random.default_rng(2)
        images = smooth_images(rng, 3, 32)
        write_dataset(tmp_path, images, [0, 1, 2])
        (tmp_path / "img_00001.strv").write_bytes(b"garbage")
        metrics = evaluate(tmp_path, model, profile, DefenseConfig(seed=0))
        assert metrics.skipped == ["img_00001.strv"]
        assert metrics.conditions["clean"].n_images == 2

    def test_empty_dataset_raises_before_output(self, world, tmp_path):
        model, profile, _, _ = world
        (tmp_path / "index.csv").write_text("file,label\n")
        with pytest.raises(DataError):
            evaluate(tmp_path, model, profile, DefenseConfig(seed=0))

    def test_all_entries_unreadable_raises(self, world, tmp_path):
        model, profile, _, _ = world
        (tmp_path / "index.csv").write_text("file,label\nmissing.strv,0\n")
        with pytest.raises(DataError):
            evaluate(tmp_path, model, profile, DefenseConfig(seed=0))


class TestOutputs:
    def test_csv_layout(self, world):
        model, profile, data_dir, patch = world
        metrics = evaluate(data_dir, model, profile, DefenseConfig(k=2, seed=3), patch=patch)
        text = metrics_csv_text(metrics)
        lines = text.strip().split("\n")
        assert lines[0] == "condition,top1,top5,flag_rate,mean_coverage,n_images"
        assert len(lines) == 5
        assert lines[1].startswith("clean,")
        assert lines[4].startswith("attacked_defended,")

    def test_report_json_written(self, world, tmp_path):
        model, profile, data_dir, patch = world
        config = DefenseConfig(k=2, seed=3)
        metrics = evaluate(data_dir, model, profile, config, patch=patch)
        out = tmp_path / "report.json"
        write_report_json(out, metrics, config)
        import json

        doc = json.loads(out.read_text())
        assert set(doc["conditions"]) == set(metrics.conditions)
        assert len(doc["per_image"]) == 10
        assert doc["seed"] == 3

    def test_plot_long_format(self, world, tmp_path):
        model, profile, data_dir, patch = world
        metrics = evaluate(data_dir, model, profile, DefenseConfig(k=2, seed=3), patch=patch)
        csv_path = tmp_path / "metrics.csv"
        write_metrics_csv(csv_path, metrics)
        long_text = plot_data_csv_text(csv_path.read_text())
        lines = long_text.strip().split("\n")
        assert lines[0] == "condition,metric,value"
        assert len(lines) == 1 + 4 * 5
        assert any(line.startswith("attacked,top1,") for line in lines)
