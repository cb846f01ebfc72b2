import numpy as np
import pytest

from tokenshield.attack import (
    AttackConfig,
    PatchSpec,
    Placement,
    load_patch,
    optimize_patch,
    optimize_patch_adaptive,
    place_patch,
    render_patch,
    sample_placement,
    save_patch,
    tokens_overlapping,
)
from tokenshield.detector import calibrate_reference, calibrate_threshold
from tokenshield.divergence import SQRT_LN2
from tokenshield.errors import ConstraintError, PlacementError, ValidationError
from tokenshield.rng import Stream

from conftest import TINY_CONFIG, smooth_images

CHI2_99_DF624 = 709.1117924708946  # 99th percentile, chi-square with 624 dof


def gray(k):
    return PatchSpec(np.full((3, k, k), 0.5, dtype=np.float32))


def random_patch(rng, k):
    return PatchSpec(rng.uniform(0, 1, size=(3, k, k)).astype(np.float32))


class TestPlacePatch:
    def test_empty_placement_list_is_identity(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, size=(3, 32, 32)).astype(np.float32)
        out = place_patch(img, gray(8), [])
        assert np.array_equal(out, img)

    def test_full_image_replacement(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, size=(3, 32, 32)).astype(np.float32)
        patch = random_patch(rng, 32)
        out = place_patch(img, patch, [Placement(0, 0, 32)])
        assert np.array_equal(out, patch.pixels)

    def test_exact_pixel_diff_count(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0.1, 0.9, size=(3, 32, 32)).astype(np.float32)
        patch = PatchSpec(np.ones((3, 8, 8), dtype=np.float32))  # differs from every pixel
        out = place_patch(img, patch, [Placement(4, 4, 8)])
        assert int(np.sum(out != img)) == 64 * 3

    def test_pixels_outside_masks_untouched(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, size=(3, 16, 16)).astype(np.float32)
        placements = [Placement(1, 2, 4), Placement(9, 9, 4)]
        out = place_patch(img, random_patch(rng, 4), placements)
        mask = np.zeros((16, 16), dtype=bool)
        for pl in placements:
            mask[pl.row : pl.row + pl.size, pl.col : pl.col + pl.size] = True
        assert np.array_equal(out[:, ~mask], img[:, ~mask])

    def test_out_of_bounds_rejected(self):
        img = np.zeros((3, 16, 16), dtype=np.float32)
        with pytest.raises(PlacementError):
            place_patch(img, gray(8), [Placement(12, 0, 8)])

    def test_overlap_rejected(self):
        img = np.zeros((3, 32, 32), dtype=np.float32)
        with pytest.raises(PlacementError):
            place_patch(img, gray(8), [Placement(0, 0, 8), Placement(4, 4, 8)])

    def test_rotation_is_applied(self):
        px = np.zeros((3, 2, 2), dtype=np.float32)
        px[:, 0, 0] = 1.0
        img = np.zeros((3, 4, 4), dtype=np.float32)
        out = place_patch(img, PatchSpec(px), [Placement(0, 0, 2, rotation=90)])
        # rot90 moves the hot corner from (0,0) to (1,0)
        assert out[0, 1, 0] == 1.0

    def test_nearest_resize_doubling(self):
        px = np.arange(12, dtype=np.float32).reshape(3, 2, 2) / 12.0
        block = render_patch(PatchSpec(px), Placement(0, 0, 4))
        assert block.shape == (3, 4, 4)
        np.testing.assert_array_equal(block[:, ::2, ::2], px)
        np.testing.assert_array_equal(block[:, 1::2, 1::2], px)

    def test_bad_patch_values_rejected(self):
        with pytest.raises(ValidationError):
            PatchSpec(np.full((3, 4, 4), 1.5, dtype=np.float32)).validate()


class TestSamplePlacement:
    def test_patch_equal_to_image_is_forced_to_origin(self):
        pls = sample_placement(Stream(0), image_size=32, patch_size=32)
        assert len(pls) == 1
        assert (pls[0].row, pls[0].col, pls[0].size) == (0, 0, 32)

    def test_two_small_patches_always_disjoint(self):
        s = Stream(1)
        for _ in range(1000):
            a, b = sample_placement(s, image_size=64, patch_size=8, count=2)
            assert not a.overlaps(b)

    def test_translation_uniform_by_chi_square(self):
        s = Stream(2)
        counts = np.zeros((25, 25))
        for _ in range(10**4):
            (pl,) = sample_placement(s, image_size=32, patch_size=8)
            counts[pl.row, pl.col] += 1
        expected = 10**4 / 625
        stat = float(((counts - expected) ** 2 / expected).sum())
        assert stat <= CHI2_99_DF624

    def test_rotations_cover_all_four(self):
        s = Stream(3)
        rots = {sample_placement(s, 32, 8)[0].rotation for _ in range(200)}
        assert rots == {0, 90, 180, 270}

    def test_impossible_layout_raises(self):
        with pytest.raises(PlacementError):
            sample_placement(Stream(4), image_size=16, patch_size=16, count=2, max_retries=50)

    def test_oversized_patch_raises(self):
        with pytest.raises(PlacementError):
            sample_placement(Stream(5), image_size=16, patch_size=32)


class TestTokensOverlapping:
    def test_matches_pixel_membership_oracle(self):
        rng = np.random.default_rng(4)
        cfg = TINY_CONFIG  # 32px image, 8px cells, 4x4 grid
        s = Stream(6)
        for _ in range(200):
            k = int(rng.integers(3, 17))
            pls = sample_placement(s, 32, k)
            got = tokens_overlapping(pls, cfg)
            mask = np.zeros((32, 32), dtype=bool)
            for pl in pls:
                mask[pl.row : pl.row + pl.size, pl.col : pl.col + pl.size] = True
            expected = sorted(
                gr * 4 + gc
                for gr in range(4)
                for gc in range(4)
                if mask[gr * 8 : (gr + 1) * 8, gc * 8 : (gc + 1) * 8].any()
            )
            assert got == expected

    def test_cell_aligned_patch_covers_exactly_four(self):
        cfg = TINY_CONFIG
        got = tokens_overlapping([Placement(8, 16, 16)], cfg)
        assert got == [6, 7, 10, 11]


def quick_cfg(steps, **kw):
    defaults = dict(steps=steps, step_size=0.1, eot_samples=2, perturbation_scale=0.1)
    defaults.update(kw)
    return AttackConfig(**defaults)


@pytest.fixture(scope="module")
def attack_setup(tiny_model):
    rng = np.random.default_rng(5)
    images = smooth_images(rng, 4, 32)
    labels = [0, 1, 2, 3]
    return tiny_model, images, labels


class TestOptimizePatch:
    def test_zero_steps_returns_gray_start(self, attack_setup):
        model, images, labels = attack_setup
        result = optimize_patch(model, images, labels, quick_cfg(0), seed=1, patch_size=8)
        assert np.array_equal(result.patch.pixels, np.full((3, 8, 8), 0.5, dtype=np.float32))
        assert result.objective == result.initial_objective

    def test_monitored_objective_never_below_start(self, attack_setup):
        model, images, labels = attack_setup
        result = optimize_patch(model, images, labels, quick_cfg(6), seed=2, patch_size=8)
        assert result.objective >= result.initial_objective

    def test_bit_deterministic_for_fixed_seed(self, attack_setup):
        model, images, labels = attack_setup
        a = optimize_patch(model, images, labels, quick_cfg(4), seed=3, patch_size=8)
        b = optimize_patch(model, images, labels, quick_cfg(4), seed=3, patch_size=8)
        assert np.array_equal(a.patch.pixels, b.patch.pixels)
        assert a.objective == b.objective

    def test_pixels_stay_in_unit_interval(self, attack_setup):
        model, images, labels = attack_setup
        result = optimize_patch(
            model, images, labels, quick_cfg(8, step_size=0.4), seed=4, patch_size=8
        )
        assert result.patch.pixels.min() >= 0.0
        assert result.patch.pixels.max() <= 1.0

    def test_targeted_mode_runs(self, attack_setup):
        model, images, labels = attack_setup
        result = optimize_patch(
            model, images, labels, quick_cfg(3, target_label=2), seed=5, patch_size=8
        )
        assert result.patch.pixels.shape == (3, 8, 8)

    def test_empty_image_list_rejected(self, attack_setup):
        model, _, _ = attack_setup
        with pytest.raises(ValidationError):
            optimize_patch(model, [], [], quick_cfg(1), seed=0, patch_size=8)


@pytest.fixture(scope="module")
def calibrated(attack_setup):
    model, images, labels = attack_setup
    rng = np.random.default_rng(6)
    ref = smooth_images(rng, 6, 32)
    held = smooth_images(rng, 10, 32)
    profile = calibrate_threshold(calibrate_reference(ref, model), held, model)
    return model, images, labels, profile


class TestAdaptiveAttack:
    def test_vacuous_cap_matches_unconstrained_bitwise(self, calibrated):
        model, images, labels, profile = calibrated
        plain = optimize_patch(model, images, labels, quick_cfg(4), seed=7, patch_size=8)
        capped = optimize_patch_adaptive(
            model, images, labels, quick_cfg(4, jsd_cap=SQRT_LN2), profile, seed=7, patch_size=8
        )
        assert np.array_equal(plain.patch.pixels, capped.patch.pixels)
        assert plain.objective == capped.objective

    def test_zero_cap_is_infeasible(self, calibrated):
        model, images, labels, profile = calibrated
        with pytest.raises(ConstraintError):
            optimize_patch_adaptive(
                model, images, labels, quick_cfg(2, jsd_cap=0.0), profile, seed=8, patch_size=8
            )

    def test_cap_from_profile_when_unset(self, calibrated):
        model, images, labels, profile = calibrated
        result = optimize_patch_adaptive(
            model, images, labels, quick_cfg(2), profile, seed=9, patch_size=8
        )
        assert result.patch.pixels.shape == (3, 8, 8)


class TestPatchPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        patch = PatchSpec(rng.uniform(0, 1, size=(3, 8, 8)).astype(np.float32), count=2)
        path = tmp_path / "patch.strv"
        save_patch(path, patch, {"target_label": None, "steps": 10, "seed": 3, "jsd_cap": None})
        loaded, meta = load_patch(path)
        np.testing.assert_array_equal(loaded.pixels, patch.pixels)
        assert loaded.count == 2
        assert meta["steps"] == 10
