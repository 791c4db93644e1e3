"""Unit tests for layers, the network and its invariances."""

import numpy as np
import pytest

from src.cli.selftest import (
    TOY_SENSOR, YAW_ROAD_RADIUS, check_yaw_invariance, random_image, synthetic_scans, toy_config, toy_model,
)
from src.core.datasets import generate_world
from src.core.config import DESCRIPTOR_DIM, ModelConfig, plan_leg
from src.core.exceptions import ConfigError, DataError, ShapeError
from src.core.layers import AttentionConfig, Linear, MultiHeadSelfAttention
from src.core.model import gem_pool, param_count
from src.core.models import SensorModel
from src.core.nn import Tensor, concat
from src.core.rangeproj import column_shift, project, yaw_rotate


@pytest.fixture
def rng():
    return np.random.default_rng(5)


@pytest.fixture
def model():
    return toy_model(seed=1)


@pytest.fixture
def sequence(rng, model):
    return [random_image(rng) for _ in range(model.seq_len)]


class TestLegPlanning:
    """Tests for OverlapNetLeg layouts."""

    @pytest.mark.parametrize("height,kernels", [(32, [5, 3, 3, 2]), (16, [5, 3, 2]), (8, [3, 3])])
    def test_plan_reaches_height_one(self, height, kernels):
        planned, strides = plan_leg(height)
        assert planned == kernels
        assert set(strides) == {2}

    def test_explicit_layout_must_reach_one(self):
        cfg = ModelConfig(leg_kernel_heights=(3,), leg_strides=(1,))
        with pytest.raises(ConfigError) as exc_info:
            cfg.leg_layout(8)
        assert "expected 1" in str(exc_info.value)

    def test_default_channels(self):
        layout = ModelConfig(c=64).leg_layout(32)
        assert [(c_in, c_out) for c_in, c_out, _, _ in layout] == [(1, 16), (16, 32), (32, 64), (64, 64)]


class TestParamCount:
    """Tests for the exact parameter count."""

    def test_tiny_config_closed_form(self):
        """Test the hand-counted total of the smallest network.

        Leg 17, single-scan transformer 16, multi-scan transformer 44,
        NetVLAD 5, MLP 768 and GeM 1.
        """
        cfg = ModelConfig(c=1, heads_sst=1, heads_mst=1, ffn_mult=1, vlad_clusters=1, leg_channels=(1, 1, 1))
        assert param_count(cfg, SensorModel(width=8, height=32)) == 851

    def test_width_does_not_matter(self):
        cfg = toy_config()
        assert param_count(cfg, SensorModel(width=12, height=8)) == param_count(cfg, SensorModel(width=40, height=8))

    def test_gem_has_one_parameter(self, model):
        assert [name for name, _ in model.named_parameters() if name.startswith('gem.')] == ['gem.raw_p']


class TestLayers:
    """Tests for parameterised layers."""

    def test_linear_handles_vectors(self, rng):
        layer = Linear(3, 2, rng)
        x = rng.standard_normal(3)
        np.testing.assert_allclose(layer(Tensor(x)).data, layer.weight.data @ x + layer.bias.data, rtol=1e-6)

    def test_heads_must_divide_dim(self, rng):
        with pytest.raises(ConfigError) as exc_info:
            MultiHeadSelfAttention(AttentionConfig(6, 4), rng)
        assert "do not divide" in str(exc_info.value)

    def test_attention_is_permutation_equivariant(self, rng):
        """Test that permuting columns permutes the attention output."""
        attention = MultiHeadSelfAttention(AttentionConfig(4, 2), rng)
        x = rng.standard_normal((4, 6)).astype(np.float32)
        perm = rng.permutation(6)
        out = attention(Tensor(x)).data
        np.testing.assert_allclose(attention(Tensor(x[:, perm])).data, out[:, perm], atol=1e-5)

    def test_state_dict_missing_key(self, model):
        state = model.state_dict()
        state.pop('gem.raw_p')
        with pytest.raises(DataError) as exc_info:
            model.load_state_dict(state)
        assert "gem.raw_p" in str(exc_info.value)

    def test_state_dict_wrong_shape(self, model):
        state = model.state_dict()
        state['gem.raw_p'] = np.zeros(2)
        with pytest.raises(ShapeError) as exc_info:
            model.load_state_dict(state)
        assert "gem.raw_p" in str(exc_info.value)


class TestGeM:
    """Tests for generalised-mean pooling."""

    def test_p_one_is_normalised_mean(self, rng):
        rows = rng.uniform(0.1, 1.0, size=(5, 8))
        expected = rows.mean(axis=0) / np.linalg.norm(rows.mean(axis=0))
        np.testing.assert_allclose(gem_pool(Tensor(rows), 1.0).data, expected, rtol=1e-6)

    def test_large_p_approaches_max(self, rng):
        rows = rng.uniform(0.1, 1.0, size=(5, 8))
        expected = rows.max(axis=0) / np.linalg.norm(rows.max(axis=0))
        np.testing.assert_allclose(gem_pool(Tensor(rows), 200.0).data, expected, atol=1e-2)

    def test_permutation_invariant(self, rng):
        rows = rng.uniform(0.0, 1.0, size=(18, 32)).astype(np.float32)
        reference = gem_pool(rows, 3.0).data
        for _ in range(20):
            np.testing.assert_allclose(gem_pool(rows[rng.permutation(18)], 3.0).data, reference, atol=1e-6)

    def test_empty_set_raises(self):
        with pytest.raises(DataError) as exc_info:
            gem_pool(np.zeros((0, 4)))
        assert "empty" in str(exc_info.value)

    def test_p_below_one_raises(self, rng):
        with pytest.raises(ConfigError) as exc_info:
            gem_pool(rng.uniform(size=(3, 4)), 0.5)
        assert "at least 1" in str(exc_info.value)

    def test_learned_p_starts_at_init(self, model):
        assert model.gem.p_value == pytest.approx(3.0, rel=1e-5)


class TestSeqOT:
    """Tests for the full network."""

    def test_descriptor_is_unit_length(self, model, sequence):
        descriptor = model.describe(sequence)
        assert descriptor.shape == (DESCRIPTOR_DIM,)
        assert descriptor.dtype == np.float32
        assert np.linalg.norm(descriptor) == pytest.approx(1.0, abs=1e-5)

    def test_sub_descriptor_count(self, model, sequence):
        assert model.sub_descriptors(sequence).shape == (model.seq_len - 2, DESCRIPTOR_DIM)

    def test_short_sequence_raises(self, model, sequence):
        with pytest.raises(DataError) as exc_info:
            model.sub_descriptors(sequence[:2])
        assert "sequence too short" in str(exc_info.value)

    def test_image_shape_mismatch(self, model):
        with pytest.raises(ShapeError) as exc_info:
            model.image_tensor(np.ones((4, 4)))
        assert "does not match sensor" in str(exc_info.value)

    def test_window_shape_mismatch(self, model):
        with pytest.raises(ShapeError):
            model.msm(Tensor(np.zeros((8, 12))), Tensor(np.zeros((8, 12))), Tensor(np.zeros((8, 6))))

    def test_same_seed_same_weights(self):
        a, b = toy_model(seed=4), toy_model(seed=4)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)


class TestYawInvariance:
    """Tests for invariance to column shifts of the input scans."""

    @pytest.mark.parametrize("sst,mst", [
        ('transformer', 'transformer'),
        ('conv', 'transformer'),
        ('transformer', 'conv'),
        ('conv', 'conv'),
    ])
    def test_independent_shifts(self, rng, sst, mst):
        """Test that every scan may be rotated by its own multiple of 2pi/w."""
        model = toy_model(seed=2, sst=sst, mst=mst)
        for _ in range(5):
            images = [random_image(rng) for _ in range(model.seq_len)]
            rotated = [column_shift(img, int(rng.integers(0, TOY_SENSOR.width))) for img in images]
            np.testing.assert_allclose(model.describe(rotated), model.describe(images), atol=1e-4)

    def test_segment_equivariance(self, rng, model):
        """Test that shifting each window segment shifts that segment of the output."""
        w, d = TOY_SENSOR.width, 2 * model.cfg.c
        segments = [rng.standard_normal((d, w)).astype(np.float32) for _ in range(3)]
        shifts = [1, 5, 11]
        out = model.msm.transformer(concat([Tensor(s) for s in segments], axis=1)).data
        moved = model.msm.transformer(
            concat([Tensor(np.roll(s, -k, axis=1)) for s, k in zip(segments, shifts)], axis=1)).data
        for i, k in enumerate(shifts):
            np.testing.assert_allclose(moved[:, i * w:(i + 1) * w],
                                       np.roll(out[:, i * w:(i + 1) * w], -k, axis=1), atol=1e-5)

    def test_rotated_simulated_scans(self, rng, model):
        """Test that simulated clouds turned by whole azimuth steps keep their descriptor."""
        world = generate_world(4, extent=40.0, obstacle_count=60, road_radius=YAW_ROAD_RADIUS)
        step = TOY_SENSOR.azimuth_step
        for _ in range(3):
            clouds = synthetic_scans(rng, world, model.seq_len)
            images = [project(c, TOY_SENSOR) for c in clouds]
            shifts = [int(k) for k in rng.integers(1, TOY_SENSOR.width, size=len(clouds))]
            rotated = [project(yaw_rotate(c, k * step), TOY_SENSOR) for c, k in zip(clouds, shifts)]
            assert not all(a.equals(b) for a, b in zip(images, rotated))
            np.testing.assert_allclose(model.describe(rotated), model.describe(images), atol=1e-4)

    def test_selftest_check_passes(self):
        result = check_yaw_invariance(sequences=4)
        assert result.passed, result


class TestStreaming:
    """Tests for streaming inference."""

    def test_warm_up_returns_none(self, model, sequence):
        state = model.new_stream()
        outputs = []
        for k, image in enumerate(sequence[:3]):
            state, descriptor = model.stream_update(state, image, k)
            outputs.append(descriptor)
        assert outputs[0] is None and outputs[1] is None
        assert outputs[2] is not None

    def test_stream_matches_batch(self, rng, model):
        """Test that a long stream reproduces batch descriptors."""
        images = [random_image(rng) for _ in range(30)]
        m = model.seq_len
        state = model.new_stream()
        for k, image in enumerate(images):
            state, streamed = model.stream_update(state, image, k)
            if k >= m - 1:
                np.testing.assert_allclose(streamed, model.describe(images[k - m + 1:k + 1]), atol=1e-5)

    def test_cache_is_bounded(self, rng, model):
        state = model.new_stream()
        for k in range(12):
            state, _ = model.stream_update(state, random_image(rng), k)
        assert len(state.features) == model.seq_len - 1
        assert len(state.sub_descriptors) == model.seq_len - 3

    def test_ids_must_increase(self, model, sequence):
        state, _ = model.stream_update(model.new_stream(), sequence[0], 5)
        with pytest.raises(DataError) as exc_info:
            model.stream_update(state, sequence[1], 5)
        assert "does not follow" in str(exc_info.value)

    def test_frozen_names_exclude_gem(self, model):
        frozen = model.frozen_names()
        assert 'gem.raw_p' not in frozen
        assert len(frozen) == len(list(model.named_parameters())) - 1
