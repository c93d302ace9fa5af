import numpy as np
import pytest

from spde_deepsplit.paths import (NoiseRealization, PathError, TimeGrid, UniformBox, build_batch,
                                  make_grid, sample_noise, simulate_aux_path, simulate_aux_paths,
                                  zakai_signal_observation)
from spde_deepsplit.problems import BlackScholes, HeatAdditive, SpdeProblem, Zakai
from spde_deepsplit.rng import make_stream


def test_grid():
    g = make_grid(0.5, 25)
    assert np.allclose(g.t, np.linspace(0, 0.5, 26))
    assert np.allclose(g.tau, g.t)
    assert abs(g.dt(3) - 0.02) < 1e-15
    for T, N in ((0, 5), (1, 0), (1, 2.5)):
        with pytest.raises(ValueError):
            TimeGrid(T, N)


def test_heat_paths_start_and_increments():
    p = HeatAdditive(dim=3)
    g = make_grid(1.0, 5)
    s = make_stream(1)
    paths = simulate_aux_paths(p, g, np.ones(3), s, count=4000)
    assert paths.shape == (6, 4000, 3)
    assert np.all(paths[0] == 1.0)
    inc = np.diff(paths, axis=0)
    # variance 2 dt per coordinate
    assert abs(inc.var() / (2 * 0.2) - 1) < 0.03


def test_generic_loop_matches_closed_form_paths():
    # the base-class transition loop and the vectorized heat paths agree
    p = HeatAdditive(dim=2)
    tau = np.linspace(0, 1, 6)
    dB = make_stream(2).normal((5, 3, 2))
    xi = np.zeros((3, 2))
    assert np.allclose(SpdeProblem.simulate_paths(p, tau, xi, dB), p.simulate_paths(tau, xi, dB))
    b = BlackScholes(dim=3)
    xi = np.full((3, 3), 100.0)
    assert np.allclose(SpdeProblem.simulate_paths(b, tau, xi, dB[..., :1].repeat(3, -1)),
                       b.simulate_paths(tau, xi, dB[..., :1].repeat(3, -1)))


def test_black_scholes_paths_lognormal_mean():
    p = BlackScholes(dim=2)
    g = make_grid(0.5, 20)
    paths = simulate_aux_paths(p, g, np.full(2, 100.0), make_stream(3), count=100_000)
    expected = 100 * np.exp(p.mu * 0.5)
    assert np.allclose(paths[-1].mean(axis=0), expected, rtol=3e-3)


def test_single_path_and_explicit_increments():
    p = HeatAdditive(dim=1)
    g = make_grid(1.0, 4)
    assert simulate_aux_path(p, g, [0.5], make_stream(4)).shape == (5, 1)
    inc = np.ones((4, 2, 1))
    out = simulate_aux_paths(p, g, [0.0], make_stream(4), count=2, increments=inc)
    assert np.allclose(out[:, 0, 0], np.sqrt(2) * np.arange(5))


def test_uniform_box_start_points():
    p = HeatAdditive(dim=3)
    xi = UniformBox(-1, 1, 3)
    paths = simulate_aux_paths(p, make_grid(1, 5), xi, make_stream(5), count=1000, upto=0)
    assert paths.shape == (1, 1000, 3)
    assert paths.min() >= -1 and paths.max() <= 1 and paths.std() > 0.5


def test_start_point_shape_checked():
    with pytest.raises(ValueError):
        simulate_aux_paths(HeatAdditive(dim=2), make_grid(1, 5), np.zeros(3), make_stream(0), 2)


def test_nonfinite_paths_raise():
    p = BlackScholes(dim=1)
    with pytest.raises(PathError):
        simulate_aux_paths(p, make_grid(0.5, 2), [1.0], make_stream(0), 1,
                           increments=np.full((2, 1, 1), 1e6))


def test_build_batch_indices():
    p = HeatAdditive(dim=2)
    g = make_grid(1.0, 5)
    z = sample_noise(p, g, make_stream(6))
    for n in (1, 3, 5):
        b = build_batch(p, g, z, n, np.zeros(2), make_stream(7, n), batch_size=10)
        assert b.inputs_now.shape == (10, 2) and b.inputs_prev.shape == (10, 2)
        assert np.allclose(b.noise_increments, z.values[n] - z.values[n - 1])
        # inputs_now sits at reversed index N - n; step N starts at the point itself
        if n == 5:
            assert np.all(b.inputs_now == 0)
    with pytest.raises(ValueError):
        build_batch(p, g, z, 0, np.zeros(2), make_stream(7))


def test_brownian_noise():
    p = HeatAdditive(dim=1)
    g = make_grid(1.0, 5)
    ends = np.array([sample_noise(p, g, make_stream(8, k)).value_at(5)[0] for k in range(4000)])
    assert abs(ends.var() - 1.0) < 0.08
    z = sample_noise(p, g, make_stream(9))
    assert z.values.shape == (6, 1) and z.values[0, 0] == 0


def test_zakai_noise_shapes_and_observation():
    p = Zakai(dim=2)
    g = make_grid(0.5, 5)
    z = sample_noise(p, g, make_stream(10), substeps=4)
    assert z.fine_values.shape == (21, 2) and z.values.shape == (6, 2)
    assert z.signal.shape == (21, 2)
    # observation with zero observation noise integrates h(Y) by the left-point rule
    dt = 0.1
    dW = make_stream(11).normal((5, 2)) * np.sqrt(dt)
    Y, Z = zakai_signal_observation(p, np.zeros(2), dW, np.zeros((5, 2)), dt)
    assert np.allclose(Z[-1], p.beta * Y[:-1].sum(axis=0) * dt)
    # sigma adds the same scalar to every coordinate
    assert np.allclose(np.diff(Y - Y[:, :1], axis=0)[0], 0.0)


def test_noise_csv_roundtrip(tmp_path):
    p = Zakai(dim=2)
    g = make_grid(0.5, 5)
    z = sample_noise(p, g, make_stream(12), substeps=3)
    path = tmp_path / "z.csv"
    z.to_csv(path)
    back = NoiseRealization.from_csv(path)
    assert back.grid == g and back.substeps == 3
    assert np.array_equal(back.fine_values, z.fine_values)
    head = path.read_text().splitlines()
    assert head[0].startswith("# T=0.5 N=5") and head[1] == "t,z1,z2"


@pytest.mark.parametrize("cls,x0,f", [(HeatAdditive, 0.5, lambda v: v),
                                      (BlackScholes, 100.0, np.log)])
def test_batch_jump_matches_full_paths_in_law(cls, x0, f):
    p = cls(dim=2)
    g = make_grid(0.5, 10)
    z = sample_noise(p, g, make_stream(13))
    n = 4
    b = build_batch(p, g, z, n, np.full(2, x0), make_stream(14), batch_size=100_000)
    full = simulate_aux_paths(p, g, np.full(2, x0), make_stream(15), count=100_000, upto=g.N - n + 1)
    for got, ref in ((b.inputs_now, full[g.N - n]), (b.inputs_prev, full[g.N - n + 1])):
        assert np.allclose(got.mean(0), ref.mean(0), rtol=0.01, atol=0.01)
        assert np.allclose(got.std(0), ref.std(0), rtol=0.02)
    # the last step is independent of the position reached (in log space for GBM)
    step = f(b.inputs_prev) - f(b.inputs_now)
    assert abs(np.corrcoef(step[:, 0], f(b.inputs_now[:, 0]))[0, 1]) < 0.02
