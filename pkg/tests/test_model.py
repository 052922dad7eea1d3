import math

import numpy as np
import pytest

from crisp.data import generate_dataset
from crisp.errors import DegenerateError, DimensionError, FormatError
from crisp.model import (
    CrispModel,
    ModelConfig,
    TAU_INIT,
    decode,
    encode_image,
    encode_mask,
    init_model,
    load_model,
    project,
    save_model,
    segment,
    similarity_matrix,
)


def small_config(**overrides):
    base = dict(height=16, width=16, num_classes=3, d_x=8, d_y=8, d_h=4,
                hidden=12, init_seed=0)
    base.update(overrides)
    return ModelConfig(**base)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig(32, 32, 3)
        assert (cfg.d_x, cfg.d_y, cfg.d_h, cfg.hidden) == (32, 32, 16, 128)

    def test_d_h_exceeding_latents_rejected(self):
        with pytest.raises(DimensionError):
            ModelConfig(16, 16, 2, d_x=8, d_y=8, d_h=9)

    def test_tiny_dims_rejected(self):
        with pytest.raises(DimensionError):
            ModelConfig(16, 16, 2, d_x=1)
        with pytest.raises(DimensionError):
            ModelConfig(16, 16, 1)


class TestInit:
    def test_weight_bounds_follow_fan_in(self):
        cfg = small_config()
        model = init_model(cfg)
        assert np.abs(model.img_w1).max() <= 1 / math.sqrt(16 * 16)
        assert np.abs(model.msk_w1).max() <= 1 / math.sqrt(3 * 16 * 16)
        assert np.abs(model.proj_x).max() <= 1 / math.sqrt(8)
        assert np.abs(model.dec_w2).max() <= 1 / math.sqrt(12)

    def test_biases_zero_and_tau_init(self):
        model = init_model(small_config())
        for name in ("img_b1", "img_b2", "msk_b1", "msk_b2",
                     "dec_b1", "dec_b2", "seg_b"):
            assert np.all(getattr(model, name) == 0.0)
        assert model.tau[0] == pytest.approx(TAU_INIT)
        assert model.temperature == pytest.approx(1 / 0.07)

    def test_deterministic_per_seed(self):
        a = init_model(small_config(init_seed=3))
        b = init_model(small_config(init_seed=3))
        c = init_model(small_config(init_seed=4))
        for name, pa in a.param_items():
            np.testing.assert_array_equal(pa, getattr(b, name))
        assert not np.array_equal(a.img_w1, c.img_w1)

    def test_param_declaration_order(self):
        model = init_model(small_config())
        names = [n for n, _ in model.param_items()]
        assert names == list(CrispModel.PARAM_NAMES)
        assert names[-1] == "tau"


class TestEncoders:
    def test_output_lengths(self):
        cfg = small_config()
        model = init_model(cfg)
        ds = generate_dataset(1, 16, 16, 3, seed=0)
        z_x = encode_image(model, ds.samples[0].image)
        z_y = encode_mask(model, ds.samples[0].mask)
        assert z_x.shape == (8,)
        assert z_y.shape == (8,)

    def test_shape_mismatch_rejected(self):
        model = init_model(small_config())
        with pytest.raises(DimensionError):
            encode_image(model, np.zeros((16, 17)))
        with pytest.raises(DimensionError):
            encode_mask(model, np.zeros((2, 16, 16)))

    def test_matches_manual_two_layer_forward(self):
        model = init_model(small_config())
        rng = np.random.default_rng(7)
        image = rng.uniform(size=(16, 16))
        x = image.ravel()
        hidden = np.tanh(model.img_w1 @ x + model.img_b1)
        expected = model.img_w2 @ hidden + model.img_b2
        np.testing.assert_allclose(encode_image(model, image), expected,
                                   rtol=1e-12)


class TestProject:
    def test_unit_norm(self):
        model = init_model(small_config())
        rng = np.random.default_rng(1)
        for _ in range(5):
            h = project(model, rng.standard_normal(8), "image")
            assert np.linalg.norm(h) == pytest.approx(1.0, abs=1e-12)

    def test_positive_scale_invariance(self):
        model = init_model(small_config())
        z = np.arange(1.0, 9.0)
        for side in ("image", "mask"):
            h1 = project(model, z, side)
            h2 = project(model, 37.5 * z, side)
            np.testing.assert_allclose(h1, h2, atol=1e-12)

    def test_zero_latent_with_zero_weights_degenerate(self):
        model = init_model(small_config())
        model.proj_x[...] = 0.0
        with pytest.raises(DegenerateError):
            project(model, np.ones(8), "image")

    def test_wrong_length_rejected(self):
        model = init_model(small_config())
        with pytest.raises(DimensionError):
            project(model, np.ones(5), "image")


class TestSimilarityMatrix:
    def test_matches_pairwise_dot_oracle(self):
        rng = np.random.default_rng(2)
        h_x = rng.standard_normal((2, 4))
        h_x /= np.linalg.norm(h_x, axis=1, keepdims=True)
        h_y = rng.standard_normal((2, 4))
        h_y /= np.linalg.norm(h_y, axis=1, keepdims=True)
        tau = 0.3
        s = similarity_matrix(h_x, h_y, tau)
        for i in range(2):
            for j in range(2):
                expected = sum(h_x[i, k] * h_y[j, k] for k in range(4))
                assert s[i, j] == pytest.approx(math.exp(tau) * expected)

    def test_identical_embeddings_diag_is_temperature(self):
        h = np.eye(3)
        s = similarity_matrix(h, h, 0.0)
        np.testing.assert_allclose(np.diag(s), np.ones(3))
        assert s[0, 1] == 0.0

    def test_temperature_scaling_is_linear(self):
        rng = np.random.default_rng(3)
        h = rng.standard_normal((3, 4))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        s1 = similarity_matrix(h, h, 0.0)
        s2 = similarity_matrix(h, h, math.log(5.0))
        np.testing.assert_allclose(s2, 5.0 * s1, rtol=1e-12)

    def test_temperature_clamped_at_100(self):
        h = np.eye(2)
        s = similarity_matrix(h, h, 50.0)  # exp(50) >> 100
        assert s[0, 0] == 100.0

    def test_batch_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            similarity_matrix(np.eye(3), np.eye(2, 3), 0.0)


class TestDecode:
    def test_channels_sum_to_one(self):
        model = init_model(small_config())
        probs = decode(model, np.linspace(-1, 1, 8))
        assert probs.shape == (3, 16, 16)
        np.testing.assert_allclose(probs.sum(axis=0), np.ones((16, 16)),
                                   atol=1e-9)

    def test_zero_parameters_give_uniform(self):
        model = init_model(small_config())
        for name in ("dec_w1", "dec_b1", "dec_w2", "dec_b2"):
            getattr(model, name)[...] = 0.0
        probs = decode(model, np.ones(8))
        np.testing.assert_allclose(probs, np.full((3, 16, 16), 1 / 3),
                                   atol=1e-12)

    def test_wrong_latent_length(self):
        model = init_model(small_config())
        with pytest.raises(DimensionError):
            decode(model, np.zeros(9))


class TestSegment:
    def test_valid_probability_map(self):
        model = init_model(small_config())
        ds = generate_dataset(1, 16, 16, 3, seed=1)
        probs = segment(model, ds.samples[0].image)
        assert probs.shape == (3, 16, 16)
        np.testing.assert_allclose(probs.sum(axis=0), np.ones((16, 16)),
                                   atol=1e-9)
        assert (probs >= 0).all()

    def test_deterministic(self):
        model = init_model(small_config())
        ds = generate_dataset(1, 16, 16, 3, seed=1)
        a = segment(model, ds.samples[0].image)
        b = segment(model, ds.samples[0].image)
        np.testing.assert_array_equal(a, b)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = init_model(small_config(init_seed=9))
        model.tau[0] = 1.234
        path = tmp_path / "m.crspmd"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.config == model.config
        for name, p in model.param_items():
            np.testing.assert_array_equal(p, getattr(loaded, name))

    def test_save_deterministic(self, tmp_path):
        model = init_model(small_config())
        p1, p2 = tmp_path / "a", tmp_path / "b"
        save_model(model, p1)
        save_model(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        model = init_model(small_config())
        path = tmp_path / "m.crspmd"
        save_model(model, path)
        blob = bytearray(path.read_bytes())
        blob[3] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_model(path)

    def test_size_mismatch_rejected(self, tmp_path):
        model = init_model(small_config())
        path = tmp_path / "m.crspmd"
        save_model(model, path)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(FormatError):
            load_model(path)

    def test_truncation_rejected(self, tmp_path):
        model = init_model(small_config())
        path = tmp_path / "m.crspmd"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(FormatError):
            load_model(path)
