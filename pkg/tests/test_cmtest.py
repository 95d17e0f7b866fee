import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_sample
from oracles import sandwich, t_stat
from robustcm.cmtest import (
    DegenerateScale,
    LambdaGrid,
    build_components,
    ics_from_sigma,
    ics_statistic,
    kappa,
    test_surface as surface_of,
)
from robustcm.estimator import FitConfig, fit
from robustcm.model import ModelSpec, ParameterSpace, Sample, Theta, g_matrix
from robustcm.montecarlo import DgpConfig, simulate_dgp
from robustcm.numerics import NearSingular


@pytest.fixture(scope="module")
def tiny_fit(tiny_sample):
    return fit(ModelSpec(k_x=1), tiny_sample, ParameterSpace.star_default(),
               FitConfig(n_starts=20))


class TestLambdaGrid:
    def test_endpoints_and_spacing(self):
        v = LambdaGrid(1, 5, 5).values
        np.testing.assert_allclose(v, [1, 2, 3, 4, 5])

    @pytest.mark.parametrize("kw", [dict(lo=5, hi=1), dict(points=1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LambdaGrid(**kw)

    def test_vectors_along_direction(self):
        V = LambdaGrid(1, 2, 2, direction=(1.0, 0.0)).vectors(2)
        np.testing.assert_array_equal(V, [[1, 0], [2, 0]])
        with pytest.raises(ValueError):
            LambdaGrid(direction=(1.0,)).vectors(2)


class TestComponents:
    def test_constant_residuals_factor(self, spec):
        # y chosen so that every residual equals sigma at the given theta
        x = np.array([0.3, -0.8, 1.1, 0.5, -1.4, 2.0])
        th = Theta([0.4], [0.2], [0.1])
        sig = 0.7
        y = 0.4 * x + 0.2 * g_matrix(spec, x[:, None], [0.1])[:, 0] + sig
        c = build_components(spec, Sample(y, x), th)
        np.testing.assert_allclose(c.V_hat, sig**2 * c.H_hat, rtol=1e-14)

    def test_four_observation_direct_sums(self, spec):
        y = [0.5, -0.3, 1.2, 0.1]
        x = [0.2, -1.0, 0.9, 0.4]
        th = Theta([0.3], [-0.5], [0.25])
        c = build_components(spec, Sample(y, x), th)
        H, V, S = sandwich(y, x, 0.3, -0.5, 0.25)
        np.testing.assert_allclose(c.H_hat, H, atol=1e-12)
        np.testing.assert_allclose(c.V_hat, V, atol=1e-12)
        np.testing.assert_allclose(c.Sigma_hat, S, rtol=1e-8)

    def test_exact_symmetry(self, spec, rng):
        s = random_sample(rng, 50)
        c = build_components(spec, s, Theta([0.5], [0.3], [0.0]))
        assert np.max(np.abs(c.H_hat - c.H_hat.T)) == 0
        assert np.max(np.abs(c.V_hat - c.V_hat.T)) == 0

    def test_tuple_order(self, spec, rng):
        s = random_sample(rng, 20)
        c = build_components(spec, s, Theta([0.5], [0.3], [0.0]))
        H, V, S, b, d = c
        assert H is c.H_hat and d is c.d_theta and b is c.b_theta
        assert b(np.array([1.0, 2.0])).shape == (2, 3)

    def test_singular_hessian(self, spec):
        # zero regressor leaves every gradient row zero
        with pytest.raises(NearSingular):
            build_components(spec, Sample(np.ones(6), np.zeros(6)), Theta([0.0], [0.1], [0.0]))

    def test_psd(self, spec):
        for seed in range(20):
            r = np.random.default_rng(seed)
            s = random_sample(r, 40)
            c = build_components(spec, s, Theta([r.uniform(-.5, .5)], [r.uniform(-.5, .5)], [r.uniform(-1, 1)]))
            assert np.linalg.eigvalsh(c.H_hat).min() >= -1e-10
            assert np.linalg.eigvalsh(c.V_hat).min() >= -1e-10


class TestSurface:
    def test_matches_direct_oracle(self, spec, tiny_sample, tiny_fit):
        th = tiny_fit.theta_hat
        grid = LambdaGrid(1, 5, 5)
        surf = surface_of(spec, tiny_sample, th, grid)
        y, x = list(tiny_sample.y), list(tiny_sample.X[:, 0])
        for i, lam in enumerate(grid.values):
            T, num, v2 = t_stat(y, x, th.zeta[0], th.beta[0], th.pi[0], lam)
            assert surf.T[i] == pytest.approx(T, rel=1e-10, abs=1e-12)
            assert surf.numerator[i] == pytest.approx(num, rel=1e-10, abs=1e-12)
            assert surf.v2[i] == pytest.approx(v2, rel=1e-10, abs=1e-14)

    def test_fast_and_matrix_paths_agree(self, spec, rng):
        for _ in range(10):
            s = random_sample(rng, 60)
            th = Theta([rng.uniform(-.5, .5)], [rng.uniform(-.5, .5)], [rng.uniform(-1, 1)])
            a = surface_of(spec, s, th, LambdaGrid(points=25), fast=True)
            b = surface_of(spec, s, th, LambdaGrid(points=25), fast=False)
            np.testing.assert_allclose(a.v2, b.v2, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(a.T, b.T, rtol=1e-12, atol=1e-14)

    def test_general_path_with_constant(self, rng):
        spec = ModelSpec(k_x=2, include_constant=True)
        x = rng.normal(size=80)
        X = np.column_stack([np.ones(80), x])
        s = Sample(0.2 + 0.5 * x + rng.normal(size=80), X)
        th = Theta([0.2, 0.5], [0.1, 0.1], [0.0])
        surf = surface_of(spec, s, th, LambdaGrid(points=7))
        assert np.all(surf.T >= 0) and surf.usable.all()

    def test_exact_fit_is_degenerate(self, spec, rng):
        # epsilon == 0 makes the numerator and every v^2 vanish
        x = rng.normal(size=30)
        th = Theta([0.6], [0.3], [0.0])
        s = Sample(0.6 * x + 0.3 * g_matrix(spec, x[:, None], [0.0])[:, 0], x)
        comp = build_components(spec, s, th)
        assert np.max(np.abs(comp.eps)) < 1e-15
        with pytest.raises(DegenerateScale):
            surface_of(spec, s, th, LambdaGrid())

    def test_nonnegative(self, spec, null_sample):
        surf = surface_of(spec, null_sample, Theta([0.6], [0.3], [0.0]), LambdaGrid(points=50))
        assert np.all(surf.T >= 0) and np.all(surf.v2 >= 0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    def test_scale_invariance(self, c, seed):
        spec = ModelSpec(k_x=1)
        r = np.random.default_rng(seed)
        s = random_sample(r, 50)
        th = Theta([r.uniform(-.5, .5)], [r.uniform(-.5, .5)], [r.uniform(-1, 1)])
        a = surface_of(spec, s, th, LambdaGrid(points=9))
        b = surface_of(spec, Sample(c * s.y, s.X), Theta(c * th.zeta, c * th.beta, th.pi), LambdaGrid(points=9))
        ok = a.usable & b.usable
        np.testing.assert_allclose(b.T[ok], a.T[ok], rtol=1e-10, atol=1e-12)

    def test_no_degenerate_lambda_on_null_data(self, spec, space):
        hits = 0
        for seed in range(50):
            s = simulate_dgp(DgpConfig(n=100, beta_mode="strong", seed=seed))
            th = fit(spec, s, space, FitConfig(n_starts=5)).theta_hat
            hits += int(surface_of(spec, s, th, LambdaGrid(points=50)).degenerate_mask.sum())
        assert hits == 0


class TestIcs:
    def test_kappa_value(self):
        assert kappa(100) == pytest.approx(math.log(math.log(100)), rel=1e-15)
        assert kappa(100) == pytest.approx(1.52718, abs=1e-5)
        assert kappa(100, a=2.0) == 2 * kappa(100)

    def test_kappa_needs_n_three(self):
        with pytest.raises(ValueError):
            kappa(2)

    def test_hand_case(self):
        d = ics_from_sigma([0.3], [[0.9]], 100)
        assert d.A_n == pytest.approx(math.sqrt(10), rel=1e-14)
        assert not d.weak_selected

    def test_zero_beta(self):
        d = ics_from_sigma([0.0], [[0.9]], 100)
        assert d.A_n == 0 and d.weak_selected

    def test_threshold_equality_selects_weak(self):
        n = 100
        beta = kappa(n) / math.sqrt(n)  # with Sigma = 1, A_n = kappa_n exactly up to roundoff
        d = ics_from_sigma([beta], [[1.0]], n)
        assert d.weak_selected == (d.A_n <= d.kappa_n)

    def test_monotone_in_beta(self):
        A = [ics_from_sigma([b], [[0.5]], 200).A_n for b in np.linspace(-1, 1, 41)]
        A = np.array(A)
        assert np.all(np.diff(A[20:]) >= 0) and np.all(np.diff(A[:21]) <= 0)

    def test_not_positive_definite(self):
        with pytest.raises(NearSingular):
            ics_from_sigma([0.1], [[0.0]], 100)

    def test_uses_beta_block(self, spec, null_sample, space):
        th = fit(spec, null_sample, space, FitConfig(n_starts=5)).theta_hat
        d = ics_statistic(spec, null_sample, th)
        expect = math.sqrt(null_sample.n * th.beta[0] ** 2 / d.Sigma_hat[0, 0])
        assert d.A_n == pytest.approx(expect, rel=1e-12)
        assert d.kappa_n == kappa(null_sample.n)
