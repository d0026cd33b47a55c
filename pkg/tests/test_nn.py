import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowalign.errors import ConfigError, NumericError, ShapeError
from flowalign.nn import (AdamState, MlpSpec, Tensor, adam_step, grad_scalar, load_params, minimum, mlp_apply,
                          mlp_forward, mlp_init, save_params)
from oracles import central_difference


def test_layout_counts():
    assert mlp_init(MlpSpec(1, (), 1), 0).size == 2
    assert mlp_init(MlpSpec(2, (4,), 1), 0).size == 2 * 4 + 4 + 4 * 1 + 1


def test_init_deterministic_and_scaled():
    spec = MlpSpec(3, (50,), 2)
    a, b = mlp_init(spec, 7), mlp_init(spec, 7)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, mlp_init(spec, 8))
    (w1, b1), _ = spec.slices()
    assert np.all(a[b1] == 0)
    assert abs(a[w1].std() - 1 / np.sqrt(3)) < 0.1


@pytest.mark.parametrize("dims", [(0, (), 1), (2, (0,), 1), (2, (), 0)])
def test_invalid_dims(dims):
    with pytest.raises(ConfigError):
        MlpSpec(*dims)


def test_invalid_activation():
    with pytest.raises(ConfigError):
        MlpSpec(1, (), 1, "sigmoid")


def test_forward_examples():
    spec = MlpSpec(1, (), 1)
    assert mlp_forward(np.array([2.0, 1.0]), spec, [3.0])[0] == 7.0
    assert mlp_forward(np.array([1.0, 0.0, 1.0, 0.0]), MlpSpec(1, (1,), 1), [0.0])[0] == 0.0
    spec = MlpSpec(3, (4, 4), 2)
    np.testing.assert_array_equal(mlp_forward(np.zeros(spec.n_params), spec, [1.0, -2.0, 3.0]), [0.0, 0.0])


def test_forward_shape_errors():
    spec = MlpSpec(2, (3,), 1)
    p = mlp_init(spec, 0)
    with pytest.raises(ShapeError):
        mlp_forward(p, spec, [1.0])
    with pytest.raises(ShapeError):
        mlp_forward(p[:-1], spec, [1.0, 2.0])


def test_forward_pure_and_batch_invariant(rng):
    spec = MlpSpec(5, (16, 16), 3)
    p = mlp_init(spec, 3)
    X = rng.standard_normal((40, 5))
    full = mlp_apply(p, spec, X)
    np.testing.assert_array_equal(full, mlp_apply(p, spec, X))
    for i in range(0, 40, 7):
        np.testing.assert_array_equal(mlp_forward(p, spec, X[i]), full[i])


def test_grad_of_half_square_norm(rng):
    p = rng.standard_normal(17)
    val, g = grad_scalar(p, lambda t: t.square().sum() * 0.5)
    np.testing.assert_allclose(g, p, rtol=0, atol=0)
    assert val == pytest.approx(0.5 * p @ p)


def test_constant_loss_has_zero_grad(rng):
    p = rng.standard_normal(5)
    val, g = grad_scalar(p, lambda t: 3.0)
    assert val == 3.0 and np.all(g == 0)


def test_non_finite_is_reported():
    with pytest.raises(NumericError, match="exp"):
        grad_scalar(np.array([1000.0]), lambda t: t.exp().sum())


def _losses(spec, X, Y, A):
    def mse(p):
        d = mlp_apply(p, spec, X) - Y
        return d.square().sum(axis=1).mean() if isinstance(d, Tensor) else float((d * d).sum(axis=1).mean())

    def clipped(p):
        out = mlp_apply(p, spec, X)
        r = (out[:, 0] if not isinstance(out, Tensor) else out[:, 0])
        if isinstance(r, Tensor):
            ratio = (r * 0.3).exp()
            return minimum(ratio * A, ratio.clip(0.8, 1.2) * A).mean()
        ratio = np.exp(r * 0.3)
        return float(np.minimum(ratio * A, np.clip(ratio, 0.8, 1.2) * A).mean())

    return {"mse": mse, "clipped": clipped}


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("act", ["tanh", "relu"])
@pytest.mark.parametrize("form", ["mse", "clipped"])
def test_gradient_matches_finite_differences(seed, act, form):
    rng = np.random.default_rng(seed)
    spec = MlpSpec(3, (8, 6), 2, act)
    p = mlp_init(spec, seed) + 0.1 * rng.standard_normal(spec.n_params)
    X, Y, A = rng.standard_normal((12, 3)), rng.standard_normal((12, 2)), rng.standard_normal(12)
    loss = _losses(spec, X, Y, A)[form]
    _, g = grad_scalar(p, loss)
    idx = rng.choice(spec.n_params, size=32, replace=False)
    fd = central_difference(loss, p, idx)
    rel = np.abs(g[idx] - fd) / np.maximum(np.maximum(np.abs(g[idx]), np.abs(fd)), 1e-7)
    assert rel.max() < 1e-4


def test_clip_and_min_subgradients():
    x = Tensor(np.array([0.5, 1.0, 1.2, 1.5]))
    c = x.clip(0.8, 1.2)
    c.sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0, 0.0])
    a, b = Tensor(np.array([1.0, 2.0])), Tensor(np.array([1.0, 1.0]))
    minimum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1.0, 0.0])
    np.testing.assert_array_equal(b.grad, [0.0, 1.0])


def test_adam_zero_grad_keeps_params():
    st_ = AdamState.zeros(3, lr=0.1)
    p = np.array([1.0, -2.0, 3.0])
    new, s2 = adam_step(p, np.zeros(3), st_)
    np.testing.assert_array_equal(new, p)
    np.testing.assert_array_equal(s2.first_moment, 0)
    np.testing.assert_array_equal(s2.second_moment, 0)
    assert s2.step_count == 1


def test_adam_first_step_is_lr_sign():
    g = np.array([0.3, -2.0, 1e-3])
    # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    new, _ = adam_step(np.zeros(3), g, AdamState.zeros(3, lr=0.01))
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new, expected, rtol=1e-12)
    np.testing.assert_allclose(np.abs(new), 0.01, rtol=1e-4)


def test_adam_deterministic_and_checks():
    s = AdamState.zeros(2, lr=0.1)
    a = adam_step(np.ones(2), np.array([1.0, 2.0]), s)
    b = adam_step(np.ones(2), np.array([1.0, 2.0]), s)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(NumericError):
        adam_step(np.ones(2), np.array([np.nan, 0.0]), s)
    with pytest.raises(ShapeError):
        adam_step(np.ones(3), np.ones(3), s)


@settings(max_examples=20, deadline=None)
@given(hidden=st.lists(st.integers(1, 6), max_size=3), act=st.sampled_from(["tanh", "relu"]),
       seed=st.integers(0, 1000))
def test_checkpoint_round_trip(tmp_path_factory, hidden, act, seed):
    spec = MlpSpec(3, tuple(hidden), 2, act)
    p = mlp_init(spec, seed) + np.random.default_rng(seed).standard_normal(spec.n_params)
    path = tmp_path_factory.mktemp("ck") / "p.bin"
    save_params(path, p, spec)
    q, spec2 = load_params(path)
    assert spec2 == spec
    np.testing.assert_array_equal(q, p)
    x = np.array([0.1, -0.4, 2.0])
    assert mlp_forward(q, spec2, x).tobytes() == mlp_forward(p, spec, x).tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "x.bin"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_params(bad)


def test_checkpoint_rejects_truncation(tmp_path):
    spec = MlpSpec(2, (3,), 1)
    path = tmp_path / "p.bin"
    save_params(path, mlp_init(spec, 0), spec)
    raw = path.read_bytes()
    for cut in (10, 24, len(raw) - 8):
        path.write_bytes(raw[:cut])
        with pytest.raises(ConfigError):
            load_params(path)
