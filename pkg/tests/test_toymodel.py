"""Tests for toy model construction and calibration data."""

import numpy as np
import pytest
from pydantic import ValidationError

from asymcal.matrix import make_rng
from asymcal.pipeline import capture_input, forward_block
from asymcal.toymodel import ModelKind, ToySpec, build_model, gen_calib, spectral_weight


def _weights(model):
    return [layer.weight for block in model.blocks for layer in block.layers.values()]


class TestToySpec:
    """Test cases for ToySpec validation."""

    def test_defaults(self):
        """Test default shape settings."""
        spec = ToySpec()
        assert spec.kind == ModelKind.MLP
        assert spec.hidden == 64

    @pytest.mark.parametrize("field,value", [("width", 8), ("width", 256), ("blocks", 1), ("blocks", 7),
                                             ("decay", 0.0), ("hidden_mult", 5)])
    def test_bounds(self, field, value):
        """Test that out-of-range settings are rejected."""
        with pytest.raises(ValidationError):
            ToySpec(**{field: value})

    def test_unknown_field(self):
        """Test that unknown keys are rejected."""
        with pytest.raises(ValidationError):
            ToySpec(depth=3)


class TestBuildModel:
    """Test cases for build_model."""

    def test_deterministic(self):
        """Test that the same spec gives identical weights."""
        spec = ToySpec(kind="transformer", blocks=2, width=16, seed=3)
        for a, b in zip(_weights(build_model(spec)), _weights(build_model(spec))):
            assert np.array_equal(a, b)

    def test_seed_changes_weights(self):
        """Test that a different seed changes the weights."""
        a = build_model(ToySpec(seed=1, width=16))
        b = build_model(ToySpec(seed=2, width=16))
        assert not np.array_equal(_weights(a)[0], _weights(b)[0])

    def test_layer_layout(self):
        """Test block kinds, layer names and shapes."""
        model = build_model(ToySpec(kind="transformer", blocks=3, width=16, hidden_mult=3))
        assert len(model.blocks) == 3
        layers = model.blocks[0].layers
        assert list(layers) == ["q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj"]
        assert layers["up_proj"].weight.shape == (48, 16)
        assert layers["down_proj"].weight.shape == (16, 48)
        assert model.toy_spec["width"] == 16

    def test_isotropic_spectrum(self):
        """Test that decay = 1 gives equal singular values."""
        model = build_model(ToySpec(width=16, decay=1.0, hidden_mult=1))
        s = np.linalg.svd(model.blocks[0].layers["up_proj"].weight, compute_uv=False)
        assert np.allclose(s, 1.0, atol=1e-10)

    def test_spectral_weight_values(self):
        """Test singular values decay geometrically with unit mean square."""
        w = spectral_weight(make_rng(0), 12, 8, 0.5)
        s = np.linalg.svd(w, compute_uv=False)
        expected = 0.5 ** np.arange(8)
        expected = expected / np.sqrt(np.mean(expected ** 2))
        assert np.allclose(s, expected, rtol=1e-10)

    def test_decay_raises_hessian_condition(self):
        """Test that spectrum decay makes downstream Hessians ill-conditioned."""
        conds = {}
        for decay in (0.7, 1.0):
            spec = ToySpec(width=64, hidden_mult=1, decay=decay, seed=0)
            model = build_model(spec)
            calib = gen_calib(spec, samples=128)
            x = capture_input(model.blocks[0], calib, spec.tokens_per_sample, "down_proj")
            eig = np.linalg.eigvalsh(x @ x.T)
            conds[decay] = eig[-1] / eig[0]
        assert conds[0.7] > 10 * conds[1.0]

    @pytest.mark.parametrize("kind", ["mlp", "transformer"])
    def test_activations_in_range(self, kind):
        """Test finite layer inputs with norms inside [1e-6, 1e6]."""
        spec = ToySpec(kind=kind, blocks=4, width=32, seed=5)
        model = build_model(spec)
        x = gen_calib(spec, samples=16)
        norms = []
        for block in model.blocks:
            x = forward_block(block, x, spec.tokens_per_sample,
                              on_input=lambda name, inp: norms.append(np.linalg.norm(inp)))
            assert np.all(np.isfinite(x))
        assert all(1e-6 <= n <= 1e6 for n in norms)


class TestGenCalib:
    """Test cases for gen_calib."""

    def test_shape(self):
        """Test columns = samples x tokens."""
        spec = ToySpec(width=16)
        assert gen_calib(spec, samples=4, tokens=8).shape == (16, 32)
        assert gen_calib(spec).shape == (16, 128 * 16)

    def test_single_column(self):
        """Test samples = 1, tokens = 1."""
        assert gen_calib(ToySpec(width=16), samples=1, tokens=1).shape == (16, 1)

    def test_deterministic(self):
        """Test that a fixed spec gives the same matrix."""
        spec = ToySpec(width=16, seed=9)
        assert np.array_equal(gen_calib(spec, samples=2), gen_calib(spec, samples=2))

    def test_invalid_samples(self):
        """Test that zero samples is rejected."""
        with pytest.raises(ValueError):
            gen_calib(ToySpec(width=16), samples=0)
