import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from padistill import nets
from padistill.nets import FlatParams, make_spec


def test_tiny_mlp_layout():
    spec = make_spec("tiny-mlp", (1, 8, 8), 10)
    assert spec.n_params == 64 * 32 + 32 + 32 * 10 + 10 == 2410
    assert nets.layer_depth_map(spec) == [(0, (0, 2080)), (1, (2080, 2410))]


def test_convnet_layout_and_forward_shape():
    spec = make_spec("convnet-3", (1, 8, 8), 10)
    sizes = [layer.n_params for layer in spec.layers]
    assert sizes == [16 * 9 + 16, 16 * 16 * 9 + 16, 16 * 16 * 9 + 16, 16 * 10 + 10]
    theta = nets.init_params(spec, 0)
    x = np.random.default_rng(0).normal(size=(5, 1, 8, 8))
    feats = nets.forward_features(spec, theta, x)
    assert [f.shape for f in feats] == [(5, 16, 4, 4), (5, 16, 2, 2), (5, 16, 1, 1), (5, 10)]


def test_convnet_rejects_indivisible_input():
    with pytest.raises(ValueError, match="divisible"):
        make_spec("convnet-3", (1, 6, 6), 10)
    with pytest.raises(ValueError, match="unknown architecture"):
        make_spec("resnet", (1, 8, 8), 10)


def test_flat_order_weight_then_bias_shallow_first():
    spec = make_spec("tiny-mlp", (1, 2, 2), 3)
    layers = nets.unflatten(spec, np.arange(spec.n_params, dtype=float))
    (w0, b0), (w1, b1) = layers
    assert w0.shape == (4, 32) and w0[0, 1] == 1.0
    assert b0[0] == 4 * 32
    assert w1[0, 0] == 4 * 32 + 32


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(nets.ARCHITECTURES), st.integers(0, 10_000))
def test_flatten_unflatten_round_trip(arch, seed):
    spec = make_spec(arch, (1, 8, 8), 4)
    p = nets.init_params(spec, seed)
    assert nets.flatten(spec, nets.unflatten(spec, p)) == p
    assert FlatParams.from_bytes(p.to_bytes()) == p


def test_init_bounds_and_zero_bias():
    spec = make_spec("tiny-mlp", (1, 8, 8), 10)
    (w0, b0), (w1, b1) = nets.unflatten(spec, nets.init_params(spec, 3))
    assert np.all(np.abs(w0) <= 1 / 8) and np.all(np.abs(w1) <= 1 / np.sqrt(32))
    assert not b0.any() and not b1.any()


def test_spec_text_round_trip_and_hash_mismatch():
    spec = make_spec("convnet-2", (1, 8, 8), 10)
    assert nets.NetworkSpec.from_text(spec.to_text()) == spec
    other = make_spec("tiny-mlp", (1, 8, 8), 10)
    with pytest.raises(ValueError, match="spec"):
        nets.forward(other, nets.init_params(spec, 0), np.zeros((1, 1, 8, 8)))


def test_forward_matches_numpy_mlp():
    spec = make_spec("tiny-mlp", (1, 2, 3), 4)
    p = nets.init_params(spec, 1)
    (w0, b0), (w1, b1) = nets.unflatten(spec, p)
    x = np.random.default_rng(1).normal(size=(7, 1, 2, 3))
    want = np.maximum(x.reshape(7, -1) @ w0 + b0, 0) @ w1 + b1
    np.testing.assert_allclose(nets.forward(spec, p, x).data, want, rtol=1e-12)
    assert nets.predict_proba(spec, p, x).sum(axis=1) == pytest.approx(np.ones(7))
