import numpy as np
import pytest
from scipy.stats import norm

from spde_deepsplit.oracles import OracleError, bs_v, reference_bs, reference_zakai_1d
from spde_deepsplit.paths import NoiseRealization, make_grid, sample_noise
from spde_deepsplit.problems import BlackScholes, Zakai
from spde_deepsplit.rng import make_stream


def call_price(x, k, mu, sig, t, disc):
    # undiscounted call on a GBM with drift mu, times the payoff's discount factor
    d1 = (np.log(x / k) + (mu + 0.5 * sig ** 2) * t) / (sig * np.sqrt(t))
    d2 = d1 - sig * np.sqrt(t)
    return disc * (x * np.exp(mu * t) * norm.cdf(d1) - k * norm.cdf(d2))


# At the money v(t, x) - phi(x) grows like x * sigma * sqrt(t): about 0.00997 for
# d = 1 but 0.0154 for d = 3 at t = 1e-6, so the 1e-2 bound only holds in 1-d.
@pytest.mark.parametrize("d", [
    1,
    pytest.param(3, marks=pytest.mark.xfail(
        strict=True, reason="at-the-money gap x*sigma*sqrt(t) exceeds 1e-2 for d >= 3")),
])
def test_bs_v_near_zero_time(d):
    p = BlackScholes(dim=d)
    x = np.full(d, 100.0)
    phi = p.phi(x[None])[0]
    v, _ = bs_v(1e-6, x, p, make_stream(1), 200_000)
    assert abs(v - phi) <= 1e-2 * (1 + abs(phi))


def test_bs_v_at_zero_time():
    p = BlackScholes(dim=3)
    assert bs_v(0.0, np.full(3, 105.0), p)[0] == pytest.approx(5 * np.exp(-p.rate * p.T))


def test_bs_v_constant_payoff():
    p = BlackScholes(dim=2)
    v, se = bs_v(0.4, [90.0, 110.0], p, make_stream(2), 1000, phi=lambda y: np.full(len(y), 3.5))
    assert v == pytest.approx(3.5, abs=1e-12) and se < 1e-12


def test_bs_v_one_dimensional_closed_form():
    p = BlackScholes(dim=1)
    v, se = bs_v(0.5, [100.0], p, make_stream(3))
    exact = call_price(100.0, 100.0, p.mu[0], p.sigma[0], 0.5, np.exp(-p.rate * p.T))
    assert abs(v - exact) <= 3 * se
    assert se / v < 3e-3


def test_bs_v_against_plain_monte_carlo():
    p = BlackScholes(dim=1)
    v, se = bs_v(0.5, [100.0], p, make_stream(4))
    g = make_stream(99, 1).normal(1_000_000)
    mu, sig = p.mu[0], p.sigma[0]
    samples = p.phi((100.0 * np.exp((mu - 0.5 * sig ** 2) * 0.5 + sig * np.sqrt(0.5) * g))[:, None])
    plain, plain_se = samples.mean(), samples.std() / np.sqrt(samples.size)
    assert abs(v - plain) <= 3 * np.hypot(se, plain_se)


def test_reference_bs():
    p = BlackScholes(dim=2)
    x = np.full(2, 100.0)
    v, _ = bs_v(0.5, x, p, make_stream(5), 10_000)
    assert reference_bs(0.5, x, 0.25, p, make_stream(5), 10_000)[0] == pytest.approx(v, rel=1e-14)
    assert reference_bs(0.5, x, 0.0, p, make_stream(5), 10_000)[0] == pytest.approx(np.exp(-0.25) * v,
                                                                                   rel=1e-14)
    assert reference_bs(0.0, x + 1, 0.0, p)[0] == pytest.approx(np.exp(-p.rate * p.T))


def _noise(problem, seed, substeps=16, N=25):
    return sample_noise(problem, make_grid(problem.T, N), make_stream(seed), substeps)


def test_zakai_oracle_pure_diffusion():
    p = Zakai(dim=1, beta=0.0, gamma=0.0)
    val = reference_zakai_1d(p, _noise(p, 1), 0.0)
    exact = (2 * np.pi * (1 / p.alpha + p.T)) ** -0.5
    assert abs(val / exact - 1) < 1e-4


def kalman_reference(problem, noise, x):
    """Exact unnormalized density for mu = 0, d = 1, with the oracle's step order.

    Each fine step adds dt to the variance, then multiplies by the
    likelihood factor exp(beta x dz - beta^2 x^2 dt / 2), which keeps the
    density a scaled Gaussian.
    """
    b = problem.beta
    z = noise.fine_values[:, 0]
    dt = noise.grid.T / (noise.grid.N * noise.substeps)
    m, P, logc = 0.0, 1.0 / problem.alpha, 0.0
    for k in range(z.size - 1):
        P += dt
        dz = z[k + 1] - z[k]
        Pn = 1.0 / (1.0 / P + b * b * dt)
        mn = Pn * (m / P + b * dz)
        logc += 0.5 * (mn * mn / Pn - m * m / P) + 0.5 * np.log(Pn / P)
        m, P = mn, Pn
    return np.exp(logc) * norm.pdf(x, m, np.sqrt(P))


@pytest.mark.parametrize("seed", [2, 3])
def test_zakai_oracle_against_kalman(seed):
    p = Zakai(dim=1, beta=1.5, gamma=0.0)
    z = _noise(p, seed)
    for x in (0.0, 0.4):
        val = reference_zakai_1d(p, z, x)
        assert abs(val / kalman_reference(p, z, x) - 1) < 1e-3


def test_zakai_oracle_refinement():
    p = Zakai(dim=1)
    z = _noise(p, 4)
    a = reference_zakai_1d(p, z, 0.0)
    b = reference_zakai_1d(p, z, 0.0, n_space=4096, substeps=32)
    assert abs(b / a - 1) <= 5e-3


def test_zakai_oracle_magnitude():
    p = Zakai(dim=1)
    vals = [reference_zakai_1d(p, _noise(p, s), 0.0) for s in range(5)]
    assert all(0.3 <= v <= 0.7 for v in vals)


def test_zakai_oracle_errors():
    with pytest.raises(OracleError):
        reference_zakai_1d(Zakai(dim=2), _noise(Zakai(dim=2), 0))
    p = Zakai(dim=1)
    with pytest.raises(OracleError):
        reference_zakai_1d(p, _noise(p, 0), 0.0, half_width=0.5)


def test_zakai_oracle_accepts_loaded_noise(tmp_path):
    p = Zakai(dim=1)
    z = _noise(p, 5, substeps=4)
    z.to_csv(tmp_path / "z.csv")
    z2 = NoiseRealization.from_csv(tmp_path / "z.csv")
    assert reference_zakai_1d(p, z, 0.0) == reference_zakai_1d(p, z2, 0.0)
