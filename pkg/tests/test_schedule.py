import numpy as np
import pytest
from hypothesis import given, strategies as st

from molguide.errors import InvalidConfigError, InvalidInputError
from molguide.geom import MolecularGeometry
from molguide.schedule import NoiseSchedule, build_schedule, marginal_sample, posterior_mean


@pytest.fixture
def tiny():
    return build_schedule("linear", 2, {"beta_start": 0.1, "beta_end": 0.2})


def test_linear_alpha_bars(tiny):
    np.testing.assert_allclose(tiny.alpha_bars[1:], [0.9, 0.72], rtol=0, atol=1e-15)


def test_linear_posterior_beta(tiny):
    assert tiny.posterior_betas[2] == pytest.approx((1 - 0.9) / (1 - 0.72) * 0.2, abs=1e-15)
    assert tiny.posterior_betas[2] == pytest.approx(0.0714285714285, abs=1e-12)


def test_posterior_mean_scalar(tiny):
    # hand evaluation of both posterior coefficients with (1 - abar_{t-1}) on G_t
    expected = np.sqrt(0.9) * 0.2 / 0.28 + np.sqrt(0.8) * (1 - 0.9) / 0.28
    one = MolecularGeometry(np.ones((1, 3)), np.ones((1, 6)))
    out = posterior_mean(tiny, one, one, 2)
    assert np.abs(out.coords - expected).max() < 1e-10
    assert np.abs(out.feats - expected).max() < 1e-10
    assert expected == pytest.approx(0.99706921, abs=1e-8)


def test_posterior_mean_zero(tiny):
    z = MolecularGeometry(np.zeros((2, 3)), np.zeros((2, 6)))
    out = posterior_mean(tiny, z, z, 2)
    assert not out.coords.any() and not out.feats.any()


@given(st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3), st.integers(2, 1000))
def test_posterior_mean_homogeneous(c, t):
    s = build_schedule()
    g = MolecularGeometry(np.full((1, 3), c), np.full((1, 6), c))
    ratio = posterior_mean(s, g, g, t).coords / c
    ref = posterior_mean(s, MolecularGeometry(np.ones((1, 3)), np.ones((1, 6))),
                         MolecularGeometry(np.ones((1, 3)), np.ones((1, 6))), t).coords
    np.testing.assert_allclose(ratio, ref, rtol=1e-12)


def test_posterior_mean_range(tiny):
    z = MolecularGeometry(np.zeros((1, 3)), np.zeros((1, 6)))
    for t in (0, 1, 3):
        with pytest.raises(InvalidInputError):
            posterior_mean(tiny, z, z, t)


@pytest.mark.parametrize("kind", ["linear", "polynomial"])
def test_invariants_T1000(kind):
    s = build_schedule(kind, 1000)
    b, ab = s.betas[1:], s.alpha_bars[1:]
    assert np.all((b > 0) & (b < 1))
    assert np.all(np.diff(ab) < 0)
    assert 0 < ab[-1] < ab[0] < 1
    np.testing.assert_allclose(s.alphas, 1 - s.betas, rtol=0, atol=0)
    np.testing.assert_allclose(ab, np.cumprod(1 - b), rtol=1e-12)
    t = np.arange(2, 1001)
    recomputed = (1 - s.alpha_bars[t - 1]) / (1 - s.alpha_bars[t]) * s.betas[t]
    assert np.abs(s.posterior_betas[t] - recomputed).max() < 1e-12
    assert np.all(s.posterior_betas[t] <= s.betas[t])


def test_polynomial_defaults():
    s = build_schedule()
    assert (s.kind, s.T) == ("polynomial", 1000)
    assert s.alpha_bars[1000] == pytest.approx(1e-5, rel=1e-9)
    t = np.arange(1, 1001) / 1000
    np.testing.assert_allclose(s.alpha_bars[1:], (1 - 2e-5) * (1 - t**2) ** 2 + 1e-5, rtol=1e-13)


@pytest.mark.parametrize("kind,T,params", [
    ("linear", 1, None),
    ("linear", 10, {"beta_start": 0.2, "beta_end": 0.1}),
    ("linear", 10, {"beta_start": 0.0, "beta_end": 0.1}),
    ("polynomial", 10, {"exponent": 0.5}),
    ("polynomial", 10, {"s": 0.6}),
    ("cosine", 10, None),
])
def test_bad_config(kind, T, params):
    with pytest.raises(InvalidConfigError):
        build_schedule(kind, T, params)


def test_dict_round_trip():
    s = build_schedule("polynomial", 500, {"exponent": 3.0})
    back = NoiseSchedule.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.alpha_bars, s.alpha_bars)
    tampered = dict(s.to_dict(), alpha_bar_T=s.alpha_bars[-1] + 1e-9)
    with pytest.raises(InvalidConfigError):
        NoiseSchedule.from_dict(tampered)


def test_marginal_noise_zero():
    s = build_schedule()
    g = MolecularGeometry(np.array([[1.0, -1, 2], [-1, 1, -2]]), np.ones((2, 6)), centered=True)
    z = MolecularGeometry(np.zeros((2, 3)), np.zeros((2, 6)), centered=True)
    out = marginal_sample(s, g, 300, z)
    np.testing.assert_allclose(out.coords, np.sqrt(s.alpha_bars[300]) * g.coords, rtol=1e-15)
    assert out.centered


def test_marginal_shape_mismatch():
    s = build_schedule()
    with pytest.raises(InvalidInputError):
        marginal_sample(s, MolecularGeometry(np.zeros((2, 3)), np.zeros((2, 6))),
                        10, MolecularGeometry(np.zeros((3, 3)), np.zeros((3, 6))))


@pytest.mark.parametrize("t", [1, 100, 500, 999])
def test_marginal_monte_carlo(t):
    s = build_schedule()
    rng = np.random.default_rng(t)
    N = 10**6
    x0 = np.array([0.7, -1.3, 2.0])
    eps = rng.standard_normal((N, 3))
    xt = s.marginal(x0, t, eps)
    mean_tol = 4 * np.sqrt((1 - s.alpha_bars[t]) / N)
    assert np.abs(xt.mean(0) - np.sqrt(s.alpha_bars[t]) * x0).max() < mean_tol
    np.testing.assert_allclose(xt.var(0), 1 - s.alpha_bars[t], rtol=0.02)


@pytest.mark.parametrize("t", [2, 50, 700])
def test_two_step_composition(t):
    s = build_schedule()
    rng = np.random.default_rng(t)
    N = 10**6
    x0 = 1.5
    x_prev = s.marginal(np.full(N, x0), t - 1, rng.standard_normal(N))
    xt = np.sqrt(s.alphas[t]) * x_prev + np.sqrt(s.betas[t]) * rng.standard_normal(N)
    mean = np.sqrt(s.alpha_bars[t]) * x0
    assert abs(xt.mean() - mean) < 0.03 * max(abs(mean), np.sqrt(1 - s.alpha_bars[t]))
    assert xt.var() == pytest.approx(1 - s.alpha_bars[t], rel=0.02)
