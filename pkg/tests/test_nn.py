import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spde_deepsplit import nn
from spde_deepsplit._backend import BACKEND, get_kernels
from spde_deepsplit.rng import make_stream
from spde_deepsplit.selftest import check_input_gradient, check_param_gradient, fd_gradient

from conftest import plain_forward


def test_param_count():
    # (d + 50)-wide hidden layers, BN before every affine map
    d, h = 3, 53
    affine = (d * h + h) + (h * h + h) + (h + 1)
    bn = 2 * (d + h + h)
    assert nn.param_count(nn.NetworkShape(d)) == affine + bn
    assert nn.param_count(nn.NetworkShape(d, batch_norm=False)) == affine


def test_shape_errors():
    with pytest.raises(nn.ShapeError):
        nn.NetworkShape(0)
    with pytest.raises(nn.ShapeError):
        nn.NetworkShape(2, output_dim=2)
    shape = nn.NetworkShape(2)
    theta = nn.init_params(make_stream(0), shape)
    with pytest.raises(nn.ShapeError):
        nn.net_forward_train(theta, np.zeros((4, 3)), shape)
    with pytest.raises(nn.ShapeError):
        nn.net_forward_train(theta[:-1], np.zeros((4, 2)), shape)
    with pytest.raises(nn.ShapeError):
        nn.affine_apply(np.zeros(5), np.zeros(2), 2, 2)


def test_affine_and_batchnorm_maps():
    p = np.array([1.0, 2.0, 3.0, 4.0, 0.5, -0.5])
    assert np.allclose(nn.affine_apply(p, [1.0, 1.0], 2, 2), [3.5, 6.5])
    x = np.array([[1.0], [3.0]])
    y, m, v = nn.batchnorm_train(x, 2.0, 1.0, 0.0)
    assert m[0] == 2.0 and v[0] == 1.0
    assert np.allclose(y[:, 0], [-1.0, 3.0])


def test_init_params_statistics():
    shape = nn.NetworkShape(20, hidden_dim=400)
    lay = nn.layout_for(shape)
    for scheme in ("uniform", "normal"):
        th = nn.init_params(make_stream(1), shape, scheme)
        w = lay.weights(th, 1)
        assert abs(w.var() * 400 - 1.0) < 0.02
        assert np.all(lay.bias(th, 1) == 0)
        assert np.all(lay.bn_scale(th, 0) == 1) and np.all(lay.bn_shift(th, 0) == 0)
    with pytest.raises(ValueError):
        nn.init_params(make_stream(1), shape, "xavier")


def _random_net(seed, d, batch_norm=True, perturb=True):
    s = make_stream(seed, 3)
    shape = nn.NetworkShape(d, hidden_dim=d + 4, batch_norm=batch_norm)
    lay = nn.layout_for(shape)
    theta = nn.init_params(s, shape)
    if perturb:
        theta += 0.1 * s.normal(theta.size)
    return s, shape, lay, theta


@pytest.mark.parametrize("batch_norm", [True, False])
def test_train_forward_matches_plain_oracle(batch_norm):
    s, shape, lay, theta = _random_net(2, 3, batch_norm)
    X = s.normal((32, 3))
    out, cache = nn.net_forward_train(theta, X, shape)
    assert np.allclose(out, plain_forward(theta, lay, X), atol=1e-12)
    loss, grad, out2, *_ = nn.loss_and_grad(theta, X, np.zeros(32), shape)
    assert np.allclose(out2, out, atol=1e-12)
    assert abs(loss - np.mean(out ** 2)) < 1e-12


def test_infer_uses_running_stats():
    s, shape, lay, theta = _random_net(3, 2)
    state = nn.BatchNormState.initial(shape)
    state.running_mean[:] = s.normal(lay.n_stats)
    state.running_var[:] = 0.5 + s.uniform(lay.n_stats)
    X = s.normal((7, 2))
    means = [state.site(shape, i)[0] for i in range(lay.n_sites)]
    vars_ = [state.site(shape, i)[1] for i in range(lay.n_sites)]
    out, _ = nn.net_forward_infer_batch(theta, state, X, shape)
    assert np.allclose(out, plain_forward(theta, lay, X, means, vars_), atol=1e-12)
    # single-row evaluation does not depend on the other rows
    assert abs(nn.net_forward_infer(theta, state, X[3], shape) - out[3]) < 1e-13


@pytest.mark.parametrize("d,seed", [(d, s) for d in (1, 3, 5) for s in range(4)])
def test_param_gradient_fd(d, seed):
    assert check_param_gradient(d, seed, hidden_dim=d + 6) <= 1e-5


@pytest.mark.parametrize("d,seed", [(d, s) for d in (1, 3, 5) for s in range(4)])
def test_input_gradient_fd(d, seed):
    assert check_input_gradient(d, seed, hidden_dim=d + 6) <= 1e-5


def test_weighted_param_grad_fd():
    s, shape, lay, theta = _random_net(4, 2)
    X = s.normal((8, 2))
    w = s.normal(8)
    g = nn.net_param_grad(theta, X, w, shape)
    fd = fd_gradient(lambda t: float(w @ nn.net_forward_train(t, X, shape)[0]), theta)
    assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.abs(fd).max())


def test_batch_stats_returned():
    s, shape, lay, theta = _random_net(5, 2)
    X = s.normal((16, 2))
    _, cache = nn.net_forward_train(theta, X, shape)
    *_, bm, bv = nn.loss_and_grad(theta, X, np.zeros(16), shape)
    assert np.allclose(bm, cache.batch_mean) and np.allclose(bv, cache.batch_var)
    assert np.allclose(bm[:2], X.mean(axis=0)) and np.allclose(bv[:2], X.var(axis=0))


def test_batchnorm_update_state():
    shape = nn.NetworkShape(1, hidden_dim=2)
    st = nn.BatchNormState.initial(shape)
    n = nn.layout_for(shape).n_stats
    new = nn.batchnorm_update_state(st, np.ones(n), np.full(n, 3.0))
    assert np.allclose(new.running_mean, 0.01) and np.allclose(new.running_var, 1.02)
    assert new.update_count == 1 and st.update_count == 0


def test_nonfinite_detected():
    s, shape, lay, theta = _random_net(6, 2)
    state = nn.BatchNormState.initial(shape)
    theta[lay.w_off[1]] = np.nan
    with pytest.raises(nn.NumericError):
        nn.net_forward_infer(theta, state, np.ones(2), shape)


def test_dump_roundtrip(tmp_path):
    s, shape, lay, theta = _random_net(7, 3)
    state = nn.BatchNormState(s.normal(lay.n_stats), 1 + s.uniform(lay.n_stats), 0.99, 1e-3, 42)
    p = tmp_path / "net.bin"
    nn.dump_network(p, theta, state, shape)
    th2, st2, sh2 = nn.load_network(p)
    assert sh2 == shape and np.array_equal(th2, theta) and st2.update_count == 42
    assert np.array_equal(st2.running_var, state.running_var)
    raw = p.read_bytes()
    assert raw[:8] == b"SPDEDS01"
    assert len(raw) == 8 + 7 * 8 + 8 * (lay.n_params + 2 * lay.n_stats + 2)
    (tmp_path / "bad.bin").write_bytes(b"X" * 80)
    with pytest.raises(ValueError):
        nn.load_network(tmp_path / "bad.bin")


@pytest.mark.skipif(BACKEND != "cython", reason="compiled extension not built")
@pytest.mark.parametrize("d,bn", [(1, True), (4, True), (3, False)])
def test_backends_agree(d, bn):
    py, cy = get_kernels("python"), get_kernels("cython")
    s, shape, lay, theta = _random_net(8, d, bn)
    X, y = s.normal((64, d)), s.normal(64)
    a, b = py.loss_grad(theta, lay, X, y, 1e-3), cy.loss_grad(theta, lay, X, y, 1e-3)
    for u, v in zip(a, b):
        assert np.allclose(u, v, rtol=1e-12, atol=1e-12)
    rm, rv = s.normal(lay.n_stats), 1 + s.uniform(lay.n_stats)
    a = py.infer(theta, lay, rm, rv, X, 1e-3, True)
    b = cy.infer(theta, lay, rm, rv, X, 1e-3, True)
    assert np.allclose(a[0], b[0], atol=1e-12) and np.allclose(a[1], b[1], atol=1e-12)
    ma, va, mb, vb = (np.zeros(lay.n_stats) for _ in range(4))
    a = py.infer(theta, lay, ma, va, X, 1e-3, True, True)
    b = cy.infer(theta, lay, mb, vb, X, 1e-3, True, True)
    assert np.allclose(a[0], b[0], atol=1e-12) and np.allclose(a[1], b[1], atol=1e-12)
    assert np.allclose(ma, mb, atol=1e-12) and np.allclose(va, vb, atol=1e-12)


@pytest.mark.parametrize("d", [1, 3])
def test_batch_stats_evaluation(d):
    s, shape, lay, theta = _random_net(11, d, True)
    X = s.normal((64, d))
    out, cache = nn.net_forward_train(theta, X, shape)
    val, dX, mean, var = nn.net_forward_batch_stats(theta, X, shape, want_grad=True)
    assert np.allclose(val, out, atol=1e-13)
    assert np.allclose(mean, cache.batch_mean, atol=1e-14)
    assert np.allclose(var, cache.batch_var, atol=1e-14)
    # gradient with the statistics frozen is the running-stat gradient at those stats
    frozen = nn.BatchNormState(mean, var)
    j = 7
    fd = fd_gradient(lambda x: nn.net_forward_infer(theta, frozen, x, shape), X[j])
    assert np.allclose(dX[j], fd, rtol=1e-7, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 4), J=st.integers(2, 20), seed=st.integers(0, 10_000))
def test_batchnorm_output_invariant_to_input_shift(d, J, seed):
    # batch statistics remove any constant offset of the inputs
    s, shape, lay, theta = _random_net(seed, d)
    X = s.normal((J, d))
    a = nn.net_forward_train(theta, X, shape)[0]
    b = nn.net_forward_train(theta, X + 5.0, shape)[0]
    assert np.allclose(a, b, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(J=st.integers(2, 30), seed=st.integers(0, 10_000))
def test_gradient_sums_to_zero_for_first_bias(J, seed):
    # the first affine bias feeds a BN layer, so it cannot change the output
    s, shape, lay, theta = _random_net(seed, 2)
    X, y = s.normal((J, 2)), s.normal(J)
    g = nn.loss_and_grad(theta, X, y, shape)[1]
    assert np.all(np.abs(g[lay.b_off[0]:lay.b_off[0] + lay.sizes[1]]) < 1e-10)
