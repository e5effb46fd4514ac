import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unlearnlab.nn_core import (
    LOSS_KINDS, Batch, ModelSpec, check_batch, cross_entropy, flatten, forward, grad, init_params,
    kl_divergence, load_checkpoint, log_softmax, loss, per_example_grads, predict, save_checkpoint,
    softmax, unflatten,
)

from conftest import random_net


def numeric_grad(spec, theta, batch, kind, reference, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (loss(spec, tp, batch, kind, reference) - loss(spec, tm, batch, kind, reference)) / (2 * h)
    return g


class TestModelSpec:
    def test_layout_and_count(self):
        spec = ModelSpec(5, (7, 3), 2)
        assert spec.dims == (5, 7, 3, 2)
        assert [n for n, _ in spec.layout] == ["W0", "b0", "W1", "b1", "W2", "b2"]
        assert spec.num_params == 5 * 7 + 7 + 7 * 3 + 3 + 3 * 2 + 2

    def test_round_trip_dict(self):
        spec = ModelSpec(4, (8,), 3, "tanh")
        assert ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    @pytest.mark.parametrize("kwargs", [
        dict(input_dim=0), dict(num_classes=1), dict(hidden_dims=(0,)), dict(activation="gelu"),
    ])
    def test_invalid(self, kwargs):
        base = dict(input_dim=3, hidden_dims=(), num_classes=2, activation="relu")
        base.update(kwargs)
        with pytest.raises(ValueError):
            ModelSpec(**base)


class TestParams:
    def test_flatten_unflatten_round_trip(self, tiny):
        spec, theta, _ = tiny
        parts = unflatten(spec, theta)
        assert [p.shape for p in parts] == [s for _, s in spec.layout]
        np.testing.assert_array_equal(flatten(parts), theta)

    def test_unflatten_wrong_length(self, tiny):
        spec, theta, _ = tiny
        with pytest.raises(ValueError):
            unflatten(spec, theta[:-1])

    def test_init_seeded(self):
        spec = ModelSpec(6, (5,), 3)
        np.testing.assert_array_equal(init_params(spec, 1), init_params(spec, 1))
        assert not np.array_equal(init_params(spec, 1), init_params(spec, 2))

    def test_init_biases_zero(self):
        spec = ModelSpec(6, (5,), 3)
        W0, b0, W1, b1 = unflatten(spec, init_params(spec, 0))
        assert not b0.any() and not b1.any()
        assert W0.std() > 0

    def test_check_batch(self, tiny):
        spec, _, _ = tiny
        with pytest.raises(ValueError):
            check_batch(spec, Batch(np.zeros((2, 4)), np.zeros(2, dtype=int)))
        with pytest.raises(ValueError):
            check_batch(spec, Batch(np.zeros((2, 3)), np.array([0, 3])))


class TestSoftmax:
    @given(arrays(np.float64, (3, 4), elements=st.floats(-700, 700)))
    def test_rows_sum_to_one(self, z):
        p = softmax(z)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
        assert np.all(np.isfinite(log_softmax(z)))

    @given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
    def test_shift_invariant(self, z, c):
        np.testing.assert_allclose(log_softmax(z + c), log_softmax(z), atol=1e-9)

    def test_cross_entropy_hand_value(self):
        logits = np.array([[0.0, np.log(3.0)]])
        assert cross_entropy(logits, np.array([1])) == pytest.approx(np.log(4 / 3))

    def test_kl_self_zero_and_positive(self, rng):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert kl_divergence(a, a) == 0.0
        p, q = softmax(a), softmax(b)
        assert kl_divergence(a, b) == pytest.approx(np.mean(np.sum(p * np.log(p / q), axis=1)))


class TestForward:
    def test_linear_model(self):
        spec = ModelSpec(2, (), 2)
        theta = np.array([1.0, 2.0, 3.0, 4.0, 0.5, -0.5])
        np.testing.assert_allclose(forward(spec, theta, np.array([[1.0, 1.0]])), [[4.5, 5.5]])

    def test_relu_hidden(self):
        spec = ModelSpec(1, (2,), 2)
        # W0 = [[1, -1]], b0 = 0, W1 = I, b1 = 0
        theta = np.array([1.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        np.testing.assert_allclose(forward(spec, theta, np.array([[2.0], [-3.0]])), [[2, 0], [0, 3]])

    def test_predict_ties_lowest_index(self):
        spec = ModelSpec(2, (), 3)
        theta = np.zeros(spec.num_params)
        np.testing.assert_array_equal(predict(spec, theta, np.ones((4, 2))), 0)


class TestGradients:
    @pytest.mark.parametrize("kind", LOSS_KINDS)
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(LOSS_KINDS.index(kind))
        for _ in range(4):
            spec, theta, batch = random_net(rng, activation="tanh")
            ref = theta + 0.3 * rng.normal(size=theta.shape)
            g = grad(spec, theta, batch, kind, reference=ref)
            np.testing.assert_allclose(g, numeric_grad(spec, theta, batch, kind, ref), rtol=1e-5, atol=1e-7)

    @pytest.mark.parametrize("kind", LOSS_KINDS)
    def test_per_example_mean_is_batch_grad(self, kind, rng):
        spec, theta, batch = random_net(rng)
        ref = theta + 0.1
        pe = per_example_grads(spec, theta, batch, kind, reference=ref)
        assert pe.shape == (len(batch), spec.num_params)
        np.testing.assert_allclose(pe.mean(axis=0), grad(spec, theta, batch, kind, reference=ref), atol=1e-14)

    def test_negative_kinds_flip_sign(self, tiny):
        spec, theta, batch = tiny
        ref = theta * 0.5
        np.testing.assert_array_equal(grad(spec, theta, batch, "negative_cross_entropy"),
                                      -grad(spec, theta, batch, "cross_entropy"))
        np.testing.assert_array_equal(grad(spec, theta, batch, "negative_kl_to_reference", ref),
                                      -grad(spec, theta, batch, "kl_to_reference", ref))

    def test_kl_gradient_zero_at_reference(self, tiny):
        spec, theta, batch = tiny
        np.testing.assert_allclose(grad(spec, theta, batch, "kl_to_reference", theta), 0.0, atol=1e-15)

    def test_l1_sign_with_zero(self):
        spec = ModelSpec(1, (), 2)
        theta = np.array([-2.0, 0.0, 3.0, 0.0])
        batch = Batch(np.ones((1, 1)), np.array([0]))
        np.testing.assert_array_equal(grad(spec, theta, batch, "l1_param_norm"), [-1, 0, 1, 0])
        assert loss(spec, theta, batch, "l1_param_norm") == 5.0

    def test_kl_needs_reference(self, tiny):
        spec, theta, batch = tiny
        with pytest.raises(ValueError):
            grad(spec, theta, batch, "kl_to_reference")

    def test_unknown_kind(self, tiny):
        spec, theta, batch = tiny
        with pytest.raises(ValueError):
            loss(spec, theta, batch, "hinge")


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path, tiny):
        spec, theta, _ = tiny
        theta = theta + np.pi * 1e-7
        save_checkpoint(tmp_path / "c.json", spec, theta)
        spec2, theta2 = load_checkpoint(tmp_path / "c.json")
        assert spec2 == spec
        np.testing.assert_array_equal(theta2, theta)

    def test_rejects_tampered_layout(self, tmp_path, tiny):
        spec, theta, _ = tiny
        save_checkpoint(tmp_path / "c.json", spec, theta)
        d = json.loads((tmp_path / "c.json").read_text())
        d["values"] = d["values"][:-1]
        (tmp_path / "c.json").write_text(json.dumps(d))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c.json")
