import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdpose import net


def _quadratic(target):
    return lambda o: (float(np.sum((o - target) ** 2)), 2.0 * (o - target))


def _batch(n, d, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


def test_init_shapes_and_determinism():
    spec = net.MlpSpec(34, 17)
    a, b = net.init(spec, 3), net.init(spec, 3)
    assert a.params["stem.W"].shape == (34, 256)
    assert a.params["out.W"].shape == (256, 17)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["stem.W"], net.init(spec, 4).params["stem.W"])
    assert np.all(a.params["out.b"] == 0)


def test_init_variance():
    spec = net.MlpSpec(50, 1, hidden_dim=2000, num_residual_blocks=1)
    w = net.init(spec, 0).params["stem.W"]
    assert w.size == 10 ** 5
    assert abs(w.var() / (2.0 / 50) - 1.0) < 0.1


@pytest.mark.parametrize("kw", [dict(input_dim=0, output_dim=1), dict(input_dim=3, output_dim=1, dropout_rate=1.0),
                                dict(input_dim=3, output_dim=4, output_activation="softmax3"),
                                dict(input_dim=3, output_dim=3, output_activation="tanh")])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        net.MlpSpec(**kw)


def test_identity_single_layer():
    spec = net.MlpSpec(5, 5, num_residual_blocks=0)
    model = net.init(spec, 0)
    model.params["out.W"] = np.eye(5)
    x = _batch(4, 5)
    out, _ = net.forward(model, x, "eval")
    assert np.array_equal(out, x)


def test_softmax_groups_sum_to_one():
    model = net.init(net.MlpSpec(6, 12, hidden_dim=16, output_activation="softmax3"), 1)
    out, _ = net.forward(model, _batch(7, 6) * 50, "eval")
    groups = out.reshape(7, 4, 3)
    assert np.all(groups >= 0)
    assert np.max(np.abs(groups.sum(-1) - 1.0)) <= 1e-12


def test_eval_forward_is_pure():
    model = net.init(net.MlpSpec(6, 3, hidden_dim=16), 1)
    before = model.copy()
    x = _batch(5, 6)
    a, _ = net.forward(model, x, "eval")
    b, _ = net.forward(model, x, "eval")
    assert np.array_equal(a, b)
    assert all(np.array_equal(model.params[k], before.params[k]) for k in model.params)


def test_forward_errors():
    model = net.init(net.MlpSpec(6, 3, hidden_dim=8), 0)
    with pytest.raises(ValueError):
        net.forward(model, _batch(4, 5), "eval")
    with pytest.raises(ValueError):
        net.forward(model, _batch(1, 6), "train", np.random.default_rng(0))
    with pytest.raises(ValueError):
        net.forward(model, _batch(4, 6), "train", rng=None)


def test_zero_gradient_gives_zero_grads():
    model = net.init(net.MlpSpec(6, 3, hidden_dim=8), 0)
    out, cache = net.forward(model, _batch(4, 6), "train", np.random.default_rng(0))
    grads, dx = net.backward(model, cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads.values()) and np.all(dx == 0)


def test_stale_cache_rejected():
    model = net.init(net.MlpSpec(6, 3, hidden_dim=8), 0)
    out, cache = net.forward(model, _batch(4, 6), "train", np.random.default_rng(0))
    other = model.copy()
    with pytest.raises(net.CacheError):
        net.backward(other, cache, np.ones_like(out))


def test_linear_input_gradient_closed_form():
    spec = net.MlpSpec(4, 3, hidden_dim=5, num_residual_blocks=0)
    model = net.init(spec, 2)
    x = _batch(6, 4)
    out, cache = net.forward(model, x, "train")
    _, dx = net.backward(model, cache, np.ones_like(out))
    assert np.allclose(dx, np.tile(model.params["out.W"].sum(axis=1), (6, 1)), rtol=0, atol=1e-14)


def test_gradcheck_linear_quadratic_is_tight():
    model = net.init(net.MlpSpec(4, 3, num_residual_blocks=0), 2)
    x = _batch(6, 4)
    res = net.grad_check(model, x, _quadratic(_batch(6, 3, 1)), max_per_param=50)
    assert res.max_rel_error < 1e-7 and res.checked > 0


@pytest.mark.parametrize("norm", [True, False])
@pytest.mark.parametrize("act", ["linear", "softmax3"])
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_gradcheck_residual_models(norm, act, mode):
    spec = net.MlpSpec(7, 6, hidden_dim=12, num_residual_blocks=2, use_batch_stats_norm=norm,
                       output_activation=act)
    model = net.init(spec, 5)
    if mode == "eval" and norm:
        # non-trivial running statistics
        for k in model.running:
            model.running[k] = model.running[k] + np.random.default_rng(0).uniform(0.1, 0.5, model.running[k].shape)
    res = net.grad_check(model, _batch(9, 7), _quadratic(_batch(9, 6, 1)), fd_step=1e-5, mode=mode)
    assert res.max_rel_error < 1e-4, res.worst


def test_gradcheck_catches_corrupted_gradient():
    model = net.init(net.MlpSpec(5, 3, hidden_dim=8), 1)
    x = _batch(6, 5)
    loss = _quadratic(_batch(6, 3, 2))
    out, cache = net.forward(model, x, "train", dropout=False)
    grads, dx = net.backward(model, cache, loss(out)[1])
    grads["out.W"][0, 0] *= 2.0
    res = net.grad_check(model, x, loss, max_per_param=10 ** 6, analytic=(grads, dx))
    assert res.max_rel_error > 0.1
    assert res.worst.startswith("out.W")


def test_dropout_backward_uses_mask():
    model = net.init(net.MlpSpec(5, 2, hidden_dim=8, dropout_rate=0.5), 0)
    x = _batch(6, 5)
    rng_seed = 7
    out, cache = net.forward(model, x, "train", np.random.default_rng(rng_seed))
    grads, _ = net.backward(model, cache, 2 * out)
    eps = 1e-6
    w = model.params["out.b"]
    w[0] += eps
    hi = np.sum(net.forward(model, x, "train", np.random.default_rng(rng_seed))[0] ** 2)
    w[0] -= 2 * eps
    lo = np.sum(net.forward(model, x, "train", np.random.default_rng(rng_seed))[0] ** 2)
    w[0] += eps
    assert grads["out.b"][0] == pytest.approx((hi - lo) / (2 * eps), rel=1e-6)


def test_running_stats_update():
    model = net.init(net.MlpSpec(3, 1, hidden_dim=4, num_residual_blocks=1, dropout_rate=0.0), 0)
    x = _batch(10, 3)
    _, cache = net.forward(model, x, "train")
    net.update_running_stats(model, cache)
    h = x @ model.params["stem.W"]
    assert np.allclose(model.running["stem.mean"], 0.1 * h.mean(0))
    assert np.allclose(model.running["stem.var"], 0.9 + 0.1 * h.var(0, ddof=1))


def test_adam_zero_gradient_fixed_point():
    model = net.init(net.MlpSpec(3, 2, hidden_dim=4), 0)
    before = model.copy()
    state = net.OptimState.for_model(model)
    net.opt_step(model, {k: np.zeros_like(v) for k, v in model.params.items()}, state)
    assert all(np.array_equal(model.params[k], before.params[k]) for k in model.params)
    assert state.step == 1


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
def test_adam_constant_gradient_step_limit(g):
    model = net.MlpModel(net.MlpSpec(1, 1, num_residual_blocks=0), {"out.W": np.zeros((1, 1)), "out.b": np.zeros(1)})
    state = net.OptimState.for_model(model, learning_rate=1e-3)
    prev = 0.0
    for _ in range(200):
        net.opt_step(model, {"out.W": np.full((1, 1), g), "out.b": np.zeros(1)}, state)
        step = model.params["out.W"][0, 0] - prev
        prev = model.params["out.W"][0, 0]
    assert step == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)


def test_adam_rejects_non_finite():
    model = net.init(net.MlpSpec(3, 2, hidden_dim=4), 0)
    before = model.copy()
    state = net.OptimState.for_model(model)
    grads = {k: np.ones_like(v) for k, v in model.params.items()}
    grads["out.b"][0] = np.nan
    with pytest.raises(net.NonFiniteGradient):
        net.opt_step(model, grads, state)
    assert state.step == 0
    assert all(np.array_equal(model.params[k], before.params[k]) for k in model.params)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    same, norm = net.clip_grad_norm(grads, 10.0)
    assert same is grads and norm == 5.0
    clipped, norm = net.clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6, 0.0])
    np.testing.assert_allclose(clipped["b"], [[0.8]])
    np.testing.assert_array_equal(grads["a"], [3.0, 0.0])
    assert net.clip_grad_norm(grads, None)[0] is grads


def test_ema_update():
    a = net.init(net.MlpSpec(3, 2, hidden_dim=4), 0)
    b = net.init(net.MlpSpec(3, 2, hidden_dim=4), 1)
    expected = 0.9 * a.params["out.W"] + 0.1 * b.params["out.W"]
    net.ema_update(a, b, 0.9)
    assert np.allclose(a.params["out.W"], expected)


def test_training_is_bitwise_reproducible():
    def run():
        model = net.init(net.MlpSpec(4, 2, hidden_dim=8), 0)
        state = net.OptimState.for_model(model)
        rng = np.random.default_rng(1)
        x, y = _batch(16, 4), _batch(16, 2, 1)
        for _ in range(5):
            out, cache = net.forward(model, x, "train", rng)
            g, _ = net.backward(model, cache, 2 * (out - y))
            net.update_running_stats(model, cache)
            net.opt_step(model, g, state)
        return model
    a, b = run(), run()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
