"""
Tests for doa_lab.nn: forward/backward, loss, dropout and Adam.
"""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
import pytest

from doa_lab.nn import (
    AdamState,
    Model,
    ModelSpec,
    ShapeError,
    StaleCacheError,
    adam_step,
    apply_adam,
    backward,
    bce_loss,
    conv2x1,
    dropout_mask,
    forward,
    sigmoid,
)


@pytest.fixture
def toy() -> Model:
    return Model.initialize(ModelSpec.toy(), seed=0, dtype=np.float64)


def _inputs(rng, spec: ModelSpec, batch=6) -> np.ndarray:
    return rng.uniform(-np.pi, np.pi, (batch, spec.mics, spec.bands))


# ---------------------------------------------------------------------------
# Tests: ModelSpec / initialisation
# ---------------------------------------------------------------------------

class TestModelSpec:
    def test_default_shapes(self):
        shapes = dict(ModelSpec().param_shapes())
        assert shapes["conv0.weight"] == (2, 1, 64)
        assert shapes["conv2.weight"] == (2, 64, 64)
        assert shapes["fc0.weight"] == (64 * 255, 512)
        assert shapes["out.weight"] == (512, 37)

    def test_conv_chain_reduces_to_one_row(self):
        assert ModelSpec().conv_rows == 1

    def test_too_many_conv_layers(self):
        with pytest.raises(ValueError):
            ModelSpec(mics=3, conv_layers=3)

    def test_dict_round_trip(self):
        spec = ModelSpec.toy()
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestInitialize:
    def test_pure_function_of_seed(self):
        a = Model.initialize(ModelSpec.toy(), seed=3)
        b = Model.initialize(ModelSpec.toy(), seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_biases_zero_weights_stored_float32(self):
        m = Model.initialize(ModelSpec.toy(), seed=3)
        assert all(v.dtype == np.float32 for v in m.params.values())
        assert not np.any(m.params["fc1.bias"])


# ---------------------------------------------------------------------------
# Tests: forward
# ---------------------------------------------------------------------------

class TestForward:
    def test_intermediate_shapes(self, rng):
        x = rng.standard_normal((2, 4, 255, 1))
        w = rng.standard_normal((2, 1, 64))
        h = conv2x1(x, w, np.zeros(64))
        assert h.shape == (2, 3, 255, 64)
        h = conv2x1(h, rng.standard_normal((2, 64, 64)), np.zeros(64))
        assert h.shape == (2, 2, 255, 64)

    def test_conv_matches_loop(self, rng):
        x = rng.standard_normal((1, 3, 2, 2))
        w = rng.standard_normal((2, 2, 3))
        b = rng.standard_normal(3)
        y = conv2x1(x, w, b)
        for m in range(2):
            for k in range(2):
                for f in range(3):
                    ref = b[f] + sum(x[0, m, k, c] * w[0, c, f] + x[0, m + 1, k, c] * w[1, c, f] for c in range(2))
                    assert y[0, m, k, f] == pytest.approx(ref)

    def test_zero_weights_give_half(self, rng, toy):
        zero = toy.zeros_like()
        probs, _ = forward(zero, _inputs(rng, toy.spec))
        np.testing.assert_array_equal(probs, 0.5)

    def test_infer_mode_deterministic(self, rng, toy):
        x = _inputs(rng, toy.spec)
        a, cache = forward(toy, x)
        b, _ = forward(toy, x)
        np.testing.assert_array_equal(a, b)
        assert cache is None

    def test_outputs_in_open_interval(self, rng, toy):
        probs, _ = forward(toy, _inputs(rng, toy.spec, batch=50))
        assert np.all(probs > 0) and np.all(probs < 1)

    def test_batch_decomposition(self, rng, toy):
        x = _inputs(rng, toy.spec, batch=10)
        whole, _ = forward(toy, x)
        parts = np.concatenate([forward(toy, x[:4])[0], forward(toy, x[4:])[0]])
        np.testing.assert_allclose(whole, parts, rtol=1e-12, atol=0)

    def test_shape_mismatch(self, rng, toy):
        with pytest.raises(ShapeError):
            forward(toy, rng.standard_normal((2, 4, 9)))

    def test_cache_records_relu_margin(self, rng, toy):
        x = _inputs(rng, toy.spec)
        zero = toy.zeros_like()
        _, cache = forward(zero, x, "train", rng, dropout=0.0)
        assert cache.relu_margin == 0.0
        for name, value in zero.params.items():
            if name.endswith(".bias"):
                value[...] = 2.5
        _, cache = forward(zero, x, "train", rng, dropout=0.0)
        assert cache.relu_margin == pytest.approx(2.5)

    def test_full_size_forward(self, rng):
        model = Model.initialize(ModelSpec(), seed=1)
        probs, _ = forward(model, rng.uniform(-np.pi, np.pi, (3, 4, 255)))
        assert probs.shape == (3, 37)


class TestSigmoid:
    def test_extremes_stay_finite(self):
        z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
        s = sigmoid(z)
        assert np.all(np.isfinite(s))
        assert s[2] == 0.5


class TestDropout:
    def test_preserves_expectation(self, rng):
        mask = dropout_mask((200000,), 0.5, rng)
        assert set(np.unique(mask)) <= {0.0, 2.0}
        assert mask.mean() == pytest.approx(1.0, rel=0.02)

    def test_zero_rate_is_identity(self, rng):
        assert dropout_mask((5,), 0.0, rng) is None

    def test_rate_out_of_range(self, rng):
        with pytest.raises(ValueError):
            dropout_mask((5,), 1.0, rng)

    def test_train_mode_uses_masks(self, rng, toy):
        x = _inputs(rng, toy.spec)
        a, _ = forward(toy, x, "train", np.random.default_rng(1))
        b, _ = forward(toy, x, "train", np.random.default_rng(2))
        assert not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Tests: loss
# ---------------------------------------------------------------------------

class TestBceLoss:
    def test_uniform_half(self, rng):
        y = (rng.random((8, 37)) < 0.5).astype(float)
        loss, _ = bce_loss(np.full((8, 37), 0.5), y)
        assert loss == pytest.approx(37 * math.log(2), abs=1e-9)

    def test_perfect_prediction(self, rng):
        y = (rng.random((4, 37)) < 0.1).astype(float)
        loss, _ = bce_loss(y.copy(), y)
        assert 0 <= loss < 1e-5

    def test_matches_scalar_loop(self, rng):
        p = rng.uniform(0.01, 0.99, (5, 7))
        y = (rng.random((5, 7)) < 0.5).astype(float)
        loss, _ = bce_loss(p, y)
        ref = 0.0
        for b in range(5):
            for i in range(7):
                ref -= y[b, i] * math.log(p[b, i]) + (1 - y[b, i]) * math.log(1 - p[b, i])
        assert loss == pytest.approx(ref / 5, abs=1e-12)

    def test_gradient_matches_difference(self, rng):
        p = rng.uniform(0.1, 0.9, (2, 3))
        y = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        _, grad = bce_loss(p, y)
        h = 1e-6
        q = p.copy()
        q[1, 2] += h
        numeric = (bce_loss(q, y)[0] - bce_loss(p, y)[0]) / h
        assert grad[1, 2] == pytest.approx(numeric, rel=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(np.full((2, 3), 0.5), np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# Tests: backward
# ---------------------------------------------------------------------------

class TestBackward:
    def test_gradient_shapes(self, rng, toy):
        probs, cache = forward(toy, _inputs(rng, toy.spec), "train", rng)
        grads = backward(toy, cache, np.ones_like(probs))
        assert list(grads) == [name for name, _ in toy.spec.param_shapes()]
        for name, g in grads.items():
            assert g.shape == toy.params[name].shape

    def test_zero_upstream_gives_zero(self, rng, toy):
        probs, cache = forward(toy, _inputs(rng, toy.spec), "train", rng)
        grads = backward(toy, cache, np.zeros_like(probs))
        assert all(not np.any(g) for g in grads.values())

    def test_reproducible_with_fixed_mask(self, rng, toy):
        x = _inputs(rng, toy.spec)
        y = (rng.random((6, 5)) < 0.4).astype(float)
        runs = []
        for _ in range(2):
            probs, cache = forward(toy, x, "train", np.random.default_rng(9))
            runs.append(backward(toy, cache, bce_loss(probs, y)[1]))
        for name in runs[0]:
            np.testing.assert_array_equal(runs[0][name], runs[1][name])

    def test_requires_train_cache(self, rng, toy):
        probs, cache = forward(toy, _inputs(rng, toy.spec))
        with pytest.raises(StaleCacheError):
            backward(toy, cache, probs)

    def test_stale_after_update(self, rng, toy):
        probs, cache = forward(toy, _inputs(rng, toy.spec), "train", rng)
        grads = backward(toy, cache, np.ones_like(probs))
        apply_adam(toy, grads, AdamState())
        with pytest.raises(StaleCacheError):
            backward(toy, cache, np.ones_like(probs))

    def test_matches_central_differences(self, rng):
        model = Model.initialize(ModelSpec.toy(), seed=4, dtype=np.float64)
        x = _inputs(rng, model.spec, batch=3)
        y = (rng.random((3, 5)) < 0.4).astype(float)

        def loss_at():
            probs, cache = forward(model, x, "train", np.random.default_rng(11))
            return bce_loss(probs, y), cache

        (_, dprobs), cache = loss_at()
        grads = backward(model, cache, dprobs)
        h = 1e-5
        for name in ("conv0.weight", "conv2.bias", "fc0.weight", "out.bias"):
            w = model.params[name]
            flat_index = np.unravel_index(np.argmax(np.abs(grads[name])), w.shape)
            orig = w[flat_index]
            w[flat_index] = orig + h
            plus = loss_at()[0][0]
            w[flat_index] = orig - h
            minus = loss_at()[0][0]
            w[flat_index] = orig
            assert grads[name][flat_index] == pytest.approx((plus - minus) / (2 * h), rel=1e-4)


# ---------------------------------------------------------------------------
# Tests: Adam
# ---------------------------------------------------------------------------

class TestAdam:
    def test_zero_gradient_fixpoint(self):
        params = OrderedDict(w=np.array([1.5, -2.0]))
        adam_step(params, {"w": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(params["w"], [1.5, -2.0])

    def test_first_step_magnitude(self):
        params = OrderedDict(w=np.array([0.0]))
        state = AdamState(lr=1e-3)
        adam_step(params, {"w": np.array([0.5])}, state)
        assert abs(params["w"][0]) == pytest.approx(1e-3, rel=0.01)
        assert state.t == 1

    def test_descends_quadratic(self):
        params = OrderedDict(w=np.array([1.0]))
        state = AdamState(lr=1e-2)
        values = [1.0]
        for _ in range(10):
            adam_step(params, {"w": 2 * params["w"]}, state)
            values.append(float(params["w"][0] ** 2))
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_keeps_storage_dtype(self):
        params = OrderedDict(w=np.ones(3, dtype=np.float32))
        adam_step(params, {"w": np.ones(3)}, AdamState())
        assert params["w"].dtype == np.float32

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(OrderedDict(w=np.ones(3)), {"w": np.ones(2)}, AdamState())

    def test_late_mismatch_leaves_state_untouched(self):
        params = OrderedDict(a=np.ones(3), b=np.ones(2))
        state = AdamState()
        with pytest.raises(ShapeError):
            adam_step(params, {"a": np.ones(3), "b": np.ones(5)}, state)
        np.testing.assert_array_equal(params["a"], 1.0)
        assert state.t == 0 and state.m == {} and state.v == {}

    def test_missing_gradient(self):
        params = OrderedDict(a=np.ones(3), b=np.ones(2))
        state = AdamState()
        with pytest.raises(ShapeError, match="no gradient"):
            adam_step(params, {"a": np.ones(3)}, state)
        assert state.t == 0
