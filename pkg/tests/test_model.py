import time

import numpy as np
import pytest

from tokenshield import strv
from tokenshield.errors import NumericError, ValidationError
from tokenshield.model import (
    ModelConfig,
    ModelWeights,
    advance_tokens,
    config_to_metadata,
    expected_shapes,
    forward_from_tokens,
    load_model,
    manifest_reference_gap,
    predict,
    prediction_from_logits,
    random_weights,
    reference_input,
    save_model,
    tokenize,
)

from conftest import TINY_CONFIG


def make_image(rng, size):
    return rng.uniform(0.0, 1.0, size=(3, size, size)).astype(np.float32)


def zeroed_block_model(config, seed=3):
    """Random model with every block weight and bias zeroed, so the encoder
    is the identity on tokens."""
    base = random_weights(config, seed=seed)
    tensors = {k: v.copy() for k, v in base.tensors.items()}
    for name in tensors:
        if name.startswith("blocks.") and "ln" not in name:
            tensors[name] = np.zeros_like(tensors[name])
    return ModelWeights(config, tensors)


class TestConfig:
    def test_divisibility_enforced(self):
        with pytest.raises(ValidationError):
            ModelConfig(32, 8, 65, 4, 2, 64, 10).validate()
        with pytest.raises(ValidationError):
            ModelConfig(33, 8, 64, 4, 2, 64, 10).validate()

    def test_gelu_flag_checked(self):
        with pytest.raises(ValidationError):
            ModelConfig(32, 8, 64, 4, 2, 64, 10, gelu="relu").validate()


class TestContainerRoundTrip:
    def test_minimal_config_round_trips_exactly(self, tmp_path):
        config = ModelConfig(8, 8, 2, 1, 1, 2, 1)
        model = random_weights(config, seed=1)
        path = tmp_path / "m.strv"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.config == config
        for name in model.tensors:
            np.testing.assert_array_equal(loaded.t(name), model.t(name))

    def test_checksums_verified(self, tmp_path):
        model = random_weights(TINY_CONFIG, seed=2)
        checks = {name: strv.tensor_crc32(arr) for name, arr in model.tensors.items()}
        path = tmp_path / "m.strv"
        save_model(path, ModelWeights(TINY_CONFIG, dict(model.tensors), {"checksums": checks}))
        loaded = load_model(path)
        assert loaded.manifest["checksums"] == {k: v for k, v in checks.items()}

    def test_checksum_mismatch_names_tensor(self, tmp_path):
        model = random_weights(TINY_CONFIG, seed=2)
        checks = {"cls_token": strv.tensor_crc32(model.t("cls_token")) ^ 1}
        path = tmp_path / "m.strv"
        save_model(path, ModelWeights(TINY_CONFIG, dict(model.tensors), {"checksums": checks}))
        with pytest.raises(ValidationError, match="cls_token"):
            load_model(path)

    def test_missing_tensor_listed(self, tmp_path):
        model = random_weights(TINY_CONFIG, seed=2)
        tensors = dict(model.tensors)
        tensors.pop("head.bias")
        path = tmp_path / "m.strv"
        strv.write(path, tensors, {"config": config_to_metadata(TINY_CONFIG)})
        with pytest.raises(ValidationError, match="head.bias"):
            load_model(path)

    def test_shape_mismatch_names_tensor(self, tmp_path):
        model = random_weights(TINY_CONFIG, seed=2)
        tensors = dict(model.tensors)
        tensors["pos_embed"] = np.zeros((3, 3), np.float32)
        path = tmp_path / "m.strv"
        strv.write(path, tensors, {"config": config_to_metadata(TINY_CONFIG)})
        with pytest.raises(ValidationError, match="pos_embed"):
            load_model(path)

    def test_fingerprint_stable_and_sensitive(self):
        a = random_weights(TINY_CONFIG, seed=2)
        b = random_weights(TINY_CONFIG, seed=2)
        c = random_weights(TINY_CONFIG, seed=3)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()


class TestTokenize:
    def test_zero_image_gives_bias_plus_position(self, tiny_model):
        seq = tokenize(np.zeros((3, 32, 32), np.float32), tiny_model)
        expected = tiny_model.t("patch_embed.bias") + tiny_model.t("pos_embed")[1:]
        np.testing.assert_allclose(seq.tokens, expected, atol=1e-7)
        np.testing.assert_allclose(
            seq.cls, tiny_model.t("cls_token") + tiny_model.t("pos_embed")[0], atol=1e-7
        )

    def test_shape_contract(self, tiny_model):
        rng = np.random.default_rng(0)
        seq = tokenize(make_image(rng, 32), tiny_model)
        assert seq.tokens.shape == (16, 64)
        assert seq.cls.shape == (64,)
        assert seq.layer_index == 0

    def test_matches_naive_per_patch_oracle(self, tiny_model):
        rng = np.random.default_rng(1)
        img = make_image(rng, 32)
        seq = tokenize(img, tiny_model)
        w = tiny_model.t("patch_embed.weight").astype(np.float64)
        b = tiny_model.t("patch_embed.bias").astype(np.float64)
        pos = tiny_model.t("pos_embed").astype(np.float64)
        p = 8
        for t in range(16):
            gr, gc = divmod(t, 4)
            flat = []
            for c in range(3):
                for pr in range(p):
                    for pc in range(p):
                        flat.append(float(img[c, gr * p + pr, gc * p + pc]))
            expected = w @ np.array(flat) + b + pos[t + 1]
            np.testing.assert_allclose(seq.tokens[t], expected, atol=1e-5)

    def test_convex_combination_linearity(self, tiny_model):
        rng = np.random.default_rng(2)
        x1, x2 = make_image(rng, 32), make_image(rng, 32)
        a = 0.3
        mixed = tokenize(a * x1 + (1 - a) * x2, tiny_model).tokens
        combo = a * tokenize(x1, tiny_model).tokens + (1 - a) * tokenize(x2, tiny_model).tokens
        np.testing.assert_allclose(mixed, combo, atol=1e-6)

    def test_dimension_mismatch_rejected(self, tiny_model):
        with pytest.raises(ValidationError):
            tokenize(np.zeros((3, 16, 16), np.float32), tiny_model)

    def test_out_of_range_pixels_rejected(self, tiny_model):
        bad = np.full((3, 32, 32), 1.5, np.float32)
        with pytest.raises(ValidationError):
            tokenize(bad, tiny_model)


class TestForward:
    def test_zeroed_blocks_ignore_the_image(self):
        model = zeroed_block_model(TINY_CONFIG)
        rng = np.random.default_rng(3)
        logits1 = forward_from_tokens(tokenize(make_image(rng, 32), model), model)
        logits2 = forward_from_tokens(tokenize(make_image(rng, 32), model), model)
        np.testing.assert_array_equal(logits1, logits2)
        # and the value is head(finalLN(cls + cls position)) directly
        from tokenshield.model import _layernorm

        cls = (model.t("cls_token") + model.t("pos_embed")[0])[np.newaxis, :]
        normed = _layernorm(cls, model.t("final_ln.weight"), model.t("final_ln.bias"), 1e-6)
        expected = (normed @ model.t("head.weight").T + model.t("head.bias"))[0]
        np.testing.assert_allclose(logits1, expected, atol=1e-6)

    def test_attention_rows_on_simplex_every_block_and_head(self, tiny_model):
        rng = np.random.default_rng(4)
        seq = tokenize(make_image(rng, 32), tiny_model)
        _, attn = forward_from_tokens(seq, tiny_model, collect_attention=True)
        assert len(attn) == 4
        for a in attn:
            assert a.shape == (4, 17, 17)
            assert a.min() >= 0
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    def test_token_permutation_keeps_attention_rows_normalized(self, tiny_model):
        rng = np.random.default_rng(5)
        seq = tokenize(make_image(rng, 32), tiny_model)
        tokens = seq.tokens.copy()
        tokens[[2, 9]] = tokens[[9, 2]]
        from tokenshield.model import TokenSequence

        permuted = TokenSequence(tokens=tokens, cls=seq.cls, layer_index=0)
        _, attn = forward_from_tokens(permuted, tiny_model, collect_attention=True)
        for a in attn:
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    def test_bit_identical_across_calls(self, tiny_model):
        rng = np.random.default_rng(6)
        img = make_image(rng, 32)
        a = forward_from_tokens(tokenize(img, tiny_model), tiny_model)
        b = forward_from_tokens(tokenize(img, tiny_model), tiny_model)
        assert np.array_equal(a, b)

    def test_overflow_names_block(self):
        base = random_weights(TINY_CONFIG, seed=9)
        tensors = {k: v.copy() for k, v in base.tensors.items()}
        tensors["blocks.1.mlp.fc1.weight"] = np.full_like(tensors["blocks.1.mlp.fc1.weight"], 1e30)
        tensors["blocks.1.mlp.fc2.weight"] = np.full_like(tensors["blocks.1.mlp.fc2.weight"], 1e30)
        model = ModelWeights(TINY_CONFIG, tensors)
        rng = np.random.default_rng(7)
        with pytest.raises(NumericError, match="block 1"):
            forward_from_tokens(tokenize(make_image(rng, 32), model), model)

    def test_runtime_scales_linearly_in_depth(self):
        cfg4 = ModelConfig(64, 8, 64, 4, 4, 256, 10)
        cfg8 = ModelConfig(64, 8, 64, 4, 8, 256, 10)
        m4, m8 = random_weights(cfg4, seed=1), random_weights(cfg8, seed=1)
        rng = np.random.default_rng(8)
        img = make_image(rng, 64)
        seq4, seq8 = tokenize(img, m4), tokenize(img, m8)
        forward_from_tokens(seq4, m4), forward_from_tokens(seq8, m8)  # warm up

        def best_of(f, n=7):
            times = []
            for _ in range(n):
                t0 = time.perf_counter()
                for _ in range(5):
                    f()
                times.append(time.perf_counter() - t0)
            return min(times)

        t4 = best_of(lambda: forward_from_tokens(seq4, m4))
        t8 = best_of(lambda: forward_from_tokens(seq8, m8))
        assert 1.6 <= t8 / t4 <= 2.6


class TestAdvance:
    def test_advance_then_forward_matches_direct(self, tiny_model):
        rng = np.random.default_rng(9)
        seq = tokenize(make_image(rng, 32), tiny_model)
        direct = forward_from_tokens(seq, tiny_model)
        mid = advance_tokens(seq, tiny_model, 2)
        assert mid.layer_index == 2
        via = forward_from_tokens(mid, tiny_model)
        np.testing.assert_array_equal(direct, via)

    def test_cannot_rewind(self, tiny_model):
        rng = np.random.default_rng(10)
        seq = advance_tokens(tokenize(make_image(rng, 32), tiny_model), tiny_model, 2)
        with pytest.raises(ValidationError):
            advance_tokens(seq, tiny_model, 1)


class TestPredict:
    def test_unique_max(self):
        pred = prediction_from_logits(np.array([0.1, 0.4, 0.2, 3.0]), 4)
        assert pred.top1 == 3

    def test_tie_breaks_to_lowest_index(self):
        pred = prediction_from_logits(np.array([1.0, 5.0, 5.0, 0.0]), 4)
        assert pred.top1 == 1
        assert pred.top5[:2] == (1, 2)

    def test_top5_capped_at_num_classes(self):
        pred = prediction_from_logits(np.array([0.3, 0.1, 0.2]), 3)
        assert len(pred.top5) == 3
        assert pred.top5 == (0, 2, 1)

    def test_probabilities_normalized(self, tiny_model):
        rng = np.random.default_rng(11)
        pred = predict(make_image(rng, 32), tiny_model)
        assert abs(pred.probabilities.sum() - 1.0) < 1e-12
        assert len(pred.top5) == 5


class TestReferenceInput:
    def test_deterministic_and_in_range(self):
        a = reference_input(TINY_CONFIG, 77)
        b = reference_input(TINY_CONFIG, 77)
        c = reference_input(TINY_CONFIG, 78)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.shape == (3, 32, 32)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_manifest_gap_zero_for_self_recorded_logits(self, tmp_path, tiny_model):
        img = reference_input(TINY_CONFIG, 5)
        logits = forward_from_tokens(tokenize(img, tiny_model), tiny_model)
        manifest = {"reference": {"input_seed": 5, "logits": [float(v) for v in logits]}}
        model = ModelWeights(TINY_CONFIG, dict(tiny_model.tensors), manifest)
        assert manifest_reference_gap(model) < 1e-6
