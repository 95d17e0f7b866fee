import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import F_fn, boot_draw, dg_fn, g_fn, residuals
from robustcm import bootstrap as bs
from robustcm.bootstrap import (
    BootConfig,
    BootstrapDegenerate,
    HGrid,
    NuisancePoint,
    TauDegenerate,
    robust_pvalues,
    step1_components,
    step2_pi_star,
    step3_z_star,
    step4_T_star,
    strong_id_bootstrap,
)
from robustcm.cmtest import LambdaGrid, test_surface as surface_of
from robustcm.estimator import FitConfig, FitResult, fit
from robustcm.model import ModelSpec, ParameterSpace, Sample, Theta
from robustcm.numerics import RngStream, gaussian_draws

PI_GRID = np.linspace(-1.0, 1.0, 21)
LGRID = LambdaGrid(1, 5, 5)
HG = HGrid(pi0_values=(-0.5, 0.0, 0.5), b_values=(-0.3, 0.0, 0.3))


@pytest.fixture(scope="module")
def tiny(tiny_sample):
    spec = ModelSpec(k_x=1)
    res = fit(spec, tiny_sample, ParameterSpace.star_default(), FitConfig(n_starts=20))
    comp = step1_components(spec, tiny_sample, res.theta_hat, PI_GRID, LGRID, HG)
    return spec, tiny_sample, res, comp


@pytest.fixture(scope="module")
def medium(null_sample):
    spec = ModelSpec(k_x=1)
    res = fit(spec, null_sample, ParameterSpace.star_default(), FitConfig(n_starts=10))
    surf = surface_of(spec, null_sample, res.theta_hat, LambdaGrid(points=9))
    return spec, null_sample, res, surf


class TestGrids:
    def test_default_hgrid(self):
        h = HGrid()
        assert h.shape == (9, 9)
        assert h.pi0_values[0] == -2.0 and h.pi0_values[-1] == 2.0
        assert h.b_values == (-0.5, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.5)

    def test_points_row_major(self):
        pts = HG.points()
        assert len(pts) == 9
        assert (pts[1].pi0[0], pts[1].b[0]) == (-0.5, 0.0)
        assert (pts[3].pi0[0], pts[3].b[0]) == (0.0, -0.3)

    def test_broadcast_b(self):
        np.testing.assert_array_equal(HGrid(b_values=(0.2,)).b_matrix(2), [[0.2, 0.2]])

    def test_invalid(self):
        with pytest.raises(ValueError):
            HGrid(pi0_values=())
        with pytest.raises(ValueError):
            NuisancePoint([0.0], [np.inf])
        with pytest.raises(ValueError):
            BootConfig(M=0)


class TestStep1:
    def test_self_pairing(self, tiny):
        comp = tiny[3]
        for q, p0 in enumerate(comp.pi0_values):
            p = comp.pi_index(p0)
            np.testing.assert_allclose(comp.D[p, q], comp.D_self[p], atol=1e-15)

    def test_D_direct_sums(self, spec):
        y, x = [0.4, -0.2, 1.0, 0.3], [0.5, -1.5, 1.2, -0.1]
        s = Sample(y, x)
        comp = step1_components(spec, s, Theta([0.1], [0.2], [0.0]), [-0.4, 0.7], LambdaGrid(1, 2, 2),
                                HGrid(pi0_values=(0.3,), b_values=(0.1,)))
        for p, pi in enumerate((-0.4, 0.7)):
            expect = [-sum(g_fn(x[t], pi) * g_fn(x[t], 0.3) for t in range(4)) / 4,
                      -sum(x[t] * g_fn(x[t], 0.3) for t in range(4)) / 4]
            np.testing.assert_allclose(comp.D[p, 0, :, 0], expect, atol=1e-15)

    def test_projection_orthogonality(self, medium):
        spec, s, res, surf = medium
        comp = step1_components(spec, s, res.theta_hat, np.linspace(-2, 2, 201), surf.lambda_grid, HG)
        ok = comp.usable
        resid = np.einsum("pnl,pni->pli", comp.K[ok], comp.d_psi[ok]) / comp.n
        assert np.max(np.abs(resid)) < 1e-9

    def test_singular_points_excluded(self, spec):
        # every regressor is below -1, so g(x, pi) is numerically zero for pi near 2
        x = np.linspace(-3, -1.5, 20)
        y = 0.5 * x + np.random.default_rng(0).normal(size=20)
        comp = step1_components(spec, Sample(y, x), Theta([0.5], [0.0], [0.0]),
                                np.linspace(-2, 2, 41), LambdaGrid(1, 2, 2), HG)
        assert not comp.usable[-1] and comp.usable[0]

    def test_all_excluded(self, tiny):
        comp = replace(tiny[3], usable=np.zeros_like(tiny[3].usable))
        with pytest.raises(BootstrapDegenerate):
            step2_pi_star(comp, np.zeros(tiny[1].n), 1.0, NuisancePoint([0.0], [0.0]))


class TestStep2:
    def test_zero_criterion_tie_break(self, tiny):
        comp = tiny[3]
        pi, p = step2_pi_star(comp, np.zeros(comp.n), 0.7, NuisancePoint([0.0], [0.0]))
        assert p == 0 and pi == PI_GRID[0]

    def test_xi_nonpositive(self, tiny, rng):
        comp = tiny[3]
        z = rng.normal(size=comp.n)
        xi, _ = bs._xi(comp, bs._bootstrap_gradient(comp, z), 0.8, 1, np.array([0.3]))
        assert np.all(xi <= 0)

    def test_matches_scalar_oracle(self, tiny, rng):
        spec, s, res, comp = tiny
        sig = math.sqrt(res.sigma2_hat)
        y, x = list(s.y), list(s.X[:, 0])
        for _ in range(5):
            z = rng.normal(size=s.n)
            pi, _ = step2_pi_star(comp, z, sig, NuisancePoint([0.5], [0.3]))
            _, info = boot_draw(y, x, res.theta_hat.zeta[0], res.theta_hat.beta[0], sig, z, 0.5, 0.3, 1.0, PI_GRID)
            assert pi == info["pi_star"]


class TestStep3:
    def test_zero_draw(self, tiny):
        assert step3_z_star(tiny[3], np.zeros(tiny[3].n), 0.0, 3.0) == 0.0

    def test_unit_draw(self, tiny):
        spec, s, res, comp = tiny
        x = s.X[:, 0]
        pi, lam = 0.2, 2.0
        d = np.column_stack([[g_fn(v, pi) for v in x], x])
        F = np.array([F_fn(lam, v) for v in x])
        coef = np.linalg.solve(d.T @ d / s.n, d.T @ F / s.n)
        expect = np.sum(F - d @ coef) / math.sqrt(s.n)
        assert step3_z_star(comp, np.ones(s.n), pi, lam) == pytest.approx(expect, abs=1e-12)

    def test_zero_mean_over_draws(self, tiny):
        comp = tiny[3]
        base = RngStream(31, purpose="step3_check")
        vals = np.array([step3_z_star(comp, gaussian_draws(base.child(draw=j), comp.n), 0.0, 3.0)
                         for j in range(10_000)])
        assert abs(vals.mean()) < 3 * vals.std() / 100


class TestStep4:
    def test_matches_scalar_oracle(self, tiny, rng):
        spec, s, res, comp = tiny
        sig = math.sqrt(res.sigma2_hat)
        th = res.theta_hat
        y, x = list(s.y), list(s.X[:, 0])
        for pi0 in comp.pi0_values:
            for b in (-0.3, 0.3):
                for lam in (1.0, 4.0):
                    z = rng.normal(size=s.n)
                    T, info = step4_T_star(comp, z, sig, th.psi, NuisancePoint([pi0], [b]), lam, return_terms=True)
                    To, oi = boot_draw(y, x, th.zeta[0], th.beta[0], sig, z, pi0, b, lam, PI_GRID)
                    assert T == pytest.approx(To, rel=1e-10, abs=1e-12)
                    np.testing.assert_allclose(info["terms"], oi["terms"], rtol=1e-10, atol=1e-13)
                    assert info["v2"] == pytest.approx(oi["v2"], rel=1e-10)

    def test_zero_b_collapse(self, tiny, rng):
        spec, s, res, comp = tiny
        sig = math.sqrt(res.sigma2_hat)
        z = rng.normal(size=s.n)
        T, info = step4_T_star(comp, z, sig, res.theta_hat.psi, NuisancePoint([0.0], [0.0]), 2.0, return_terms=True)
        t1, t2, t3, t4 = info["terms"]
        assert (t2, t3, t4) == (0.0, 0.0, 0.0)
        zs = step3_z_star(comp, z, info["pi_star"], 2.0)
        assert T == pytest.approx((sig * zs) ** 2 / info["v2"], rel=1e-14)

    def test_four_terms_collapse_to_two(self, tiny, rng):
        # the four terms add up to sigma Z* + (1/n) sum K(pi*) g(pi0) b
        spec, s, res, comp = tiny
        sig = math.sqrt(res.sigma2_hat)
        for _ in range(10):
            z = rng.normal(size=s.n)
            h = NuisancePoint([0.5], [-0.3])
            _, info = step4_T_star(comp, z, sig, res.theta_hat.psi, h, 3.0, return_terms=True)
            p, l, q = comp.pi_index(info["pi_star"]), comp.lambda_index(3.0), comp.pi0_index(0.5)
            other = sig * step3_z_star(comp, z, info["pi_star"], 3.0) + comp.K[p, :, l] @ comp.g0[q, :, 0] / s.n * -0.3
            assert sum(info["terms"]) == pytest.approx(other, abs=1e-12)

    def test_nonnegative(self, tiny, rng):
        spec, s, res, comp = tiny
        for h in HG.points():
            assert step4_T_star(comp, rng.normal(size=s.n), 0.5, res.theta_hat.psi, h, 5.0) >= 0

    def test_lambda_relabeling(self, tiny, rng):
        # same lambda values inside a finer grid give the same draw
        spec, s, res, comp = tiny
        fine = step1_components(spec, s, res.theta_hat, PI_GRID, LambdaGrid(1, 5, 9), HG)
        for _ in range(5):
            z = rng.normal(size=s.n)
            h = NuisancePoint([-0.5], [0.3])
            for lam in (1.0, 3.0, 5.0):
                a = step4_T_star(comp, z, 0.6, res.theta_hat.psi, h, lam)
                b = step4_T_star(fine, z, 0.6, res.theta_hat.psi, h, lam)
                assert a == pytest.approx(b, rel=1e-13)

    def test_degenerate_tau(self, tiny, monkeypatch):
        spec, s, res, comp = tiny
        monkeypatch.setattr(bs, "TAU_TOL", 1e9)
        with pytest.raises(TauDegenerate):
            step4_T_star(comp, np.ones(s.n), 0.5, res.theta_hat.psi, NuisancePoint([0.0], [0.1]), 1.0)


class TestRobustPValues:
    CFG = BootConfig(M=40, seed=5, pi_star_grid=81, keep_draws=True)

    def test_vectorized_matches_step_functions(self, medium):
        spec, s, res, surf = medium
        out = robust_pvalues(spec, s, res, surf, HG, self.CFG)
        comp = step1_components(spec, s, res.theta_hat, np.linspace(-2, 2, 81), surf.lambda_grid, HG)
        sig = math.sqrt(res.sigma2_hat)
        base = RngStream(5, replication=0, purpose="robust_bootstrap")
        for j in (0, 17, 39):
            z = gaussian_draws(base.child(draw=j), s.n)
            for k, h in enumerate(HG.points()):
                for l, lam in enumerate(surf.lambda_grid.values):
                    T = step4_T_star(comp, z, sig, res.theta_hat.psi, h, lam)
                    assert out.T_star[j, l, k] == pytest.approx(T, rel=1e-10)

    def test_multiples_of_one_over_m(self, medium):
        out = robust_pvalues(*medium, HG, self.CFG)
        assert np.allclose(out.p_star * 40, np.round(out.p_star * 40), atol=0, rtol=0)
        assert out.p_star.shape == (9, 9)
        assert np.all((out.p_star >= 0) & (out.p_star <= 1))

    def test_strict_exceedance_count(self, medium):
        spec, s, res, surf = medium
        out = robust_pvalues(*medium, HG, self.CFG)
        count = np.sum(out.T_star > surf.T[None, :, None], axis=0)
        np.testing.assert_array_equal(out.p_star, count / 40)

    def test_deterministic(self, medium):
        a = robust_pvalues(*medium, HG, BootConfig(M=20, seed=1, pi_star_grid=41))
        b = robust_pvalues(*medium, HG, BootConfig(M=20, seed=1, pi_star_grid=41))
        np.testing.assert_array_equal(a.p_star, b.p_star)

    def test_chunking_does_not_matter(self, medium):
        a = robust_pvalues(*medium, HG, BootConfig(M=20, seed=1, pi_star_grid=41, chunk=3))
        b = robust_pvalues(*medium, HG, BootConfig(M=20, seed=1, pi_star_grid=41, chunk=32))
        np.testing.assert_array_equal(a.p_star, b.p_star)

    def test_one_vector_per_draw(self, medium):
        out = robust_pvalues(*medium, HG, BootConfig(M=25, seed=2, pi_star_grid=41))
        assert out.draws_consumed == 25 + out.tau_redraws
        assert out.tau_redraws == 0

    def test_single_draw_exceeding(self, medium):
        spec, s, res, surf = medium
        zero = replace(surf, T=np.zeros_like(surf.T))
        out = robust_pvalues(spec, s, res, zero, HGrid((0.0,), (0.3,)), BootConfig(M=1, pi_star_grid=41))
        assert np.all(out.p_star == 1.0)

    def test_redraw_limit(self, medium, monkeypatch):
        monkeypatch.setattr(bs, "TAU_TOL", 1e9)
        with pytest.raises(TauDegenerate):
            robust_pvalues(*medium, HG, BootConfig(M=2, pi_star_grid=21))

    def test_draw_summary_quantiles(self, medium):
        out = robust_pvalues(*medium, HG, self.CFG)
        assert out.draws_summary.shape == (5, 9, 9)
        assert np.all(np.diff(out.draws_summary, axis=0) >= 0)


def _strong_direct(y, x, zeta, beta, pi, lam, zrows):
    """Multiplier draws of the chi-square statistic from scalar sums."""
    n = len(y)
    w = 1.0 if beta >= 0 else -1.0
    e = residuals(y, x, zeta, beta, pi)
    d = [np.array([g_fn(x[t], pi), x[t], w * dg_fn(x[t], pi)]) for t in range(n)]
    Hinv = np.linalg.inv(sum(np.outer(v, v) for v in d) / n)
    F = [F_fn(lam, x[t]) for t in range(n)]
    b = sum(F[t] * d[t] for t in range(n)) / n
    K = [F[t] - b @ Hinv @ d[t] for t in range(n)]
    v2 = sum(e[t] ** 2 * K[t] ** 2 for t in range(n)) / n
    return [sum(z[t] * e[t] * K[t] for t in range(n)) ** 2 / n / v2 for z in zrows]


class TestStrongBootstrap:
    def test_zero_draw(self, medium):
        spec, s, res, surf = medium
        out = strong_id_bootstrap(spec, s, res, surf, Z=np.zeros((1, s.n)))
        assert np.all(out.T_star == 0) and out.p_sup == 0 and out.p_ave == 0

    def test_hand_draws_on_six_observations(self, spec):
        y = [0.4, -0.9, 1.3, 0.2, -0.5, 0.8]
        x = [0.1, 0.7, -1.2, 1.9, -0.4, 0.6]
        th = Theta([0.3], [0.4], [0.2])
        s = Sample(y, x)
        res = FitResult(th, 0.0, 1.0, True, 1, 0)
        grid = LambdaGrid(1, 5, 3)
        surf = surface_of(spec, s, th, grid)
        Z = np.array([[1.0, -1.0, 0.5, 2.0, -0.3, 0.1], [-0.2, 0.4, 1.5, -1.0, 0.9, -2.0]])
        out = strong_id_bootstrap(spec, s, res, surf, Z=Z)
        direct = np.array([_strong_direct(y, x, 0.3, 0.4, 0.2, lam, Z) for lam in grid.values]).T
        np.testing.assert_allclose(out.T_star, direct, rtol=1e-10)
        assert out.p_sup == np.mean(direct.max(axis=1) > surf.T.max())
        assert out.p_ave == np.mean(direct.mean(axis=1) > surf.T.mean())

    def test_pvalues_on_lattice(self, medium):
        out = strong_id_bootstrap(*medium, BootConfig(M=37, seed=4))
        for p in (out.p_sup, out.p_ave):
            assert round(p * 37) == p * 37 and 0 <= p <= 1

    def test_deterministic_and_seeded(self, medium):
        a = strong_id_bootstrap(*medium, BootConfig(M=30, seed=4))
        b = strong_id_bootstrap(*medium, BootConfig(M=30, seed=4))
        c = strong_id_bootstrap(*medium, BootConfig(M=30, seed=5))
        np.testing.assert_array_equal(a.T_star, b.T_star)
        assert not np.array_equal(a.T_star, c.T_star)
