"""Tests for the EP estimator: closed forms, update rules, full runs."""

import numpy as np
import pytest
from scipy.integrate import dblquad

from epmud.ep_core import (EpConfig, LikelihoodFactor, cavity, damp, global_update, init_state,
                           moment_match, run_ep, site_moments)
from epmud.gaussian import ScalarGaussian, cn_pdf, gaussian_product


def random_lf(rng, m, n, noise_var=1.0, scale=1.0):
    phi = scale * (rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))) / np.sqrt(2 * m)
    y = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    return LikelihoodFactor(phi, y, noise_var)


def direct_posterior(lf, site_mean, site_var):
    """Reference for the global update: plain dense inversion."""
    n = lf.phi.shape[1]
    prec = lf.gram / lf.noise_var + np.diag(1.0 / site_var)
    cov = np.linalg.inv(prec)
    mean = cov @ (lf.proj / lf.noise_var + site_mean / site_var)
    return mean, cov


class TestGlobalUpdate:
    def test_scalar_hand_value(self):
        # M=N=1, phi=1, v2=1, m2=0, sigma^2=1, y=2 -> V=0.5, m=1
        lf = LikelihoodFactor(np.array([[1.0 + 0j]]), np.array([2.0 + 0j]), 1.0)
        mean, cov = global_update(lf, np.zeros(1, complex), np.ones(1))
        assert cov[0, 0] == pytest.approx(0.5, rel=1e-12)
        assert mean[0] == pytest.approx(1.0, rel=1e-12)

    def test_matches_direct_inversion(self):
        rng = np.random.default_rng(0)
        for m, n in [(4, 8), (8, 4), (6, 6)]:
            lf = random_lf(rng, m, n)
            sm = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            sv = rng.uniform(0.1, 3.0, n)
            mean, cov = global_update(lf, sm, sv)
            mean_ref, cov_ref = direct_posterior(lf, sm, sv)
            np.testing.assert_allclose(cov, cov_ref, atol=1e-10)
            np.testing.assert_allclose(mean, mean_ref, atol=1e-10)

    def test_vanishing_likelihood_limit(self):
        rng = np.random.default_rng(1)
        lf = random_lf(rng, 4, 6, noise_var=1e12)
        sm = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        sv = rng.uniform(0.5, 2.0, 6)
        mean, cov = global_update(lf, sm, sv)
        np.testing.assert_allclose(mean, sm, atol=1e-6)
        np.testing.assert_allclose(np.diag(cov).real, sv, rtol=1e-6)

    def test_covariance_hermitian_psd(self):
        rng = np.random.default_rng(2)
        lf = random_lf(rng, 5, 9)
        sv = rng.uniform(0.2, 2.0, 9)
        _, cov = global_update(lf, np.zeros(9, complex), sv)
        np.testing.assert_allclose(cov, cov.conj().T, atol=1e-12)
        eig = np.linalg.eigvalsh(cov)
        assert eig.min() >= -1e-9 * np.trace(cov).real


class TestInitState:
    def test_site_variances_are_prior_products(self):
        rng = np.random.default_rng(3)
        lf = random_lf(rng, 2, 2)
        st = init_state(lf, np.array([0.1, 0.5]), np.array([2.0, 4.0]))
        np.testing.assert_allclose(st.site_var, [0.2, 2.0], rtol=1e-12)
        np.testing.assert_array_equal(st.site_mean, 0.0)

    def test_no_information_limit(self):
        rng = np.random.default_rng(4)
        phi = rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))
        lf = LikelihoodFactor(phi, rng.standard_normal(3) + 0j, 1e14)
        st = init_state(lf, np.full(5, 0.3), np.ones(5))
        np.testing.assert_allclose(st.global_mean, 0.0, atol=1e-7)

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        lf = random_lf(rng, 2, 4)
        with pytest.raises(ValueError):
            init_state(lf, np.full(3, 0.1), np.ones(4))


class TestCavity:
    def test_hand_value(self):
        out = cavity(ScalarGaussian(0.5, 0.5), ScalarGaussian(0.0, 1.0))
        assert out.variance == pytest.approx(1.0, rel=1e-12)
        assert out.mean == pytest.approx(1.0, rel=1e-12)

    def test_vacuous_site_returns_global(self):
        g = ScalarGaussian(0.7 - 0.2j, 0.8)
        out = cavity(g, ScalarGaussian(0.0, 1e14))
        assert out.mean == pytest.approx(g.mean, rel=1e-9)
        assert out.variance == pytest.approx(g.variance, rel=1e-9)

    def test_singular_precision_skips(self):
        assert cavity(ScalarGaussian(0.0, 1.0), ScalarGaussian(0.0, 1.0)) is None
        assert cavity(ScalarGaussian(0.0, 2.0), ScalarGaussian(0.0, 1.0)) is None


class TestSiteMoments:
    def test_frozen_reference_point(self):
        # p=0.1, alpha=1, cavity (1, 1); values frozen from 40-digit arithmetic
        mom = site_moments(ScalarGaussian(1.0, 1.0), 0.1, 1.0)
        assert mom.g0 == pytest.approx(0.11504293200677988, rel=1e-12)
        assert mom.g1 == pytest.approx(0.004826617631502695, rel=1e-12)
        assert mom.g2 == pytest.approx(0.007239926447254043, rel=1e-12)
        assert mom.mean == pytest.approx(0.04195492541183013, rel=1e-12)
        assert mom.variance == pytest.approx(0.06117217235143297, rel=1e-12)

    def test_pure_gaussian_prior_boundary(self):
        m, v, a = 0.6 + 0.3j, 0.7, 2.0
        mom = site_moments(ScalarGaussian(m, v), 1.0, a)
        assert mom.mean == pytest.approx(m * a / (a + v), rel=1e-12)
        assert mom.variance == pytest.approx(a * v / (a + v), rel=1e-12)

    def test_inactive_prior_limit(self):
        mom = site_moments(ScalarGaussian(1.0, 1.0), 0.0, 1.0)
        assert mom.mean == 0.0
        assert mom.variance == 0.0

    def test_matches_quadrature(self):
        # independent oracle: integrate the tilted distribution numerically
        p, a = 0.3, 1.5
        cav = ScalarGaussian(0.8 - 0.4j, 0.6)

        def tilted_slab(z):
            return p * cn_pdf(z, 0.0, a) * cn_pdf(z, cav.mean, cav.variance)

        def quad(f):
            val, _ = dblquad(lambda yy, xx: f(xx + 1j * yy), -8, 8,
                             lambda _: -8, lambda _: 8, epsabs=1e-13, epsrel=1e-11)
            return val

        spike_mass = (1 - p) * cn_pdf(0.0, cav.mean, cav.variance)
        g0 = spike_mass + quad(tilted_slab)
        g1_re = quad(lambda z: np.real(z) * tilted_slab(z))
        g1_im = quad(lambda z: np.imag(z) * tilted_slab(z))
        g2 = quad(lambda z: abs(z) ** 2 * tilted_slab(z))
        mom = site_moments(cav, p, a)
        assert mom.g0 == pytest.approx(g0, rel=1e-8)
        assert mom.g1 == pytest.approx(g1_re + 1j * g1_im, rel=1e-8)
        assert mom.g2 == pytest.approx(g2, rel=1e-8)

    def test_far_tail_cavity_is_finite(self):
        mom = site_moments(ScalarGaussian(60.0, 0.01), 0.2, 1.0)
        assert np.isfinite(mom.mean) and np.isfinite(mom.variance)
        assert mom.g0 == 0.0  # underflows in linear scale, ratios survive


class TestMomentMatch:
    def test_recovers_gaussian_prior_exactly(self):
        m, v, a = 0.5 + 0.1j, 1.3, 2.5
        cav = ScalarGaussian(m, v)
        mom = site_moments(cav, 1.0, a)
        site = moment_match(mom.mean, mom.variance, cav)
        assert site.mean == pytest.approx(0.0, abs=1e-12)
        assert site.variance == pytest.approx(a, rel=1e-12)

    def test_uninformative_update_skips(self):
        cav = ScalarGaussian(0.4, 0.9)
        assert moment_match(cav.mean, cav.variance, cav) is None

    def test_frozen_reference_point(self):
        cav = ScalarGaussian(1.0, 1.0)
        mom = site_moments(cav, 0.1, 1.0)
        site = moment_match(mom.mean, mom.variance, cav)
        assert site.variance == pytest.approx(0.0651580306312902, rel=1e-9)
        assert site.mean == pytest.approx(-0.020469404904342546, rel=1e-9)

    def test_moment_consistency(self):
        # rebuilt tilted marginal (cavity x new site) reproduces (E, V)
        rng = np.random.default_rng(6)
        checked = 0
        for _ in range(200):
            cav = ScalarGaussian(complex(rng.normal(), rng.normal()), float(rng.uniform(0.05, 3)))
            p = float(rng.uniform(0.05, 0.95))
            a = float(rng.uniform(0.2, 4.0))
            mom = site_moments(cav, p, a)
            site = moment_match(mom.mean, mom.variance, cav)
            if site is None:
                continue
            _, marg = gaussian_product(cav, site)
            assert abs(marg.mean - mom.mean) < 1e-8
            assert abs(marg.variance - mom.variance) < 1e-8
            checked += 1
        assert checked > 150

    def test_zero_variance_skips(self):
        assert moment_match(0.0, 0.0, ScalarGaussian(1.0, 1.0)) is None


class TestDamp:
    def test_endpoints(self):
        old, new = ScalarGaussian(0.0, 1.0), ScalarGaussian(2.0, 3.0)
        assert damp(old, new, 1.0) == new
        assert damp(old, new, 0.0) == old

    def test_midpoint(self):
        out = damp(ScalarGaussian(0.0, 1.0), ScalarGaussian(2.0, 3.0), 0.5)
        assert out.mean == pytest.approx(1.0)
        assert out.variance == pytest.approx(2.0)

    def test_floor_applies(self):
        out = damp(ScalarGaussian(0.0, 1e-12), ScalarGaussian(0.0, 1e-12), 0.5,
                   min_site_variance=1e-9)
        assert out.variance == 1e-9


def naive_sequential_reference(lf, p, alpha, cfg, n_iters):
    """Sequential EP with a full dense global refresh after every site.

    Slow but built purely from the public closed-form operations; used to
    validate the incremental implementation inside run_ep.
    """
    n = lf.phi.shape[1]
    state = init_state(lf, p, alpha)
    site_m = state.site_mean.copy()
    site_v = state.site_var.copy()
    mean, cov = state.global_mean, state.global_cov
    for _ in range(n_iters):
        for i in range(n):
            marg = ScalarGaussian(complex(mean[i]), float(np.real(cov[i, i])))
            site = ScalarGaussian(complex(site_m[i]), float(site_v[i]))
            cav = cavity(marg, site)
            if cav is None:
                continue
            mom = site_moments(cav, p[i], alpha[i])
            if mom is None:
                continue
            matched = moment_match(mom.mean, mom.variance, cav,
                                   min_site_variance=cfg.min_site_variance)
            if matched is None:
                continue
            new = damp(site, matched, cfg.damping, min_site_variance=cfg.min_site_variance)
            site_m[i], site_v[i] = new.mean, new.variance
            mean, cov = global_update(lf, site_m, site_v)
        mean, cov = global_update(lf, site_m, site_v)
    return mean, np.real(np.diag(cov))


class TestRunEp:
    def setup_instance(self, seed, m=6, n=12, p_a=0.2, snr=100.0):
        rng = np.random.default_rng(seed)
        alpha = np.ones(n)
        p = np.full(n, p_a)
        act = rng.random(n) < p_a
        g = np.where(act, np.sqrt(0.5) * (rng.standard_normal(n) + 1j * rng.standard_normal(n)), 0)
        phi = rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))
        phi /= np.linalg.norm(phi, axis=0, keepdims=True)
        phi *= np.sqrt(snr)
        noise_var = 1.0
        w = np.sqrt(0.5) * (rng.standard_normal(m) + 1j * rng.standard_normal(m))
        y = phi @ g + w
        return LikelihoodFactor(phi, y, noise_var), p, alpha, g

    def test_near_noiseless_identity_recovery(self):
        n = 4
        phi = np.eye(n, dtype=complex)
        g = np.zeros(n, complex)
        g[1] = 2.0 - 1.0j
        lf = LikelihoodFactor(phi, g.copy(), 1e-12)
        out = run_ep(lf, np.full(n, 0.1), np.ones(n), EpConfig(max_iters=2, tol=1e-30))
        np.testing.assert_allclose(out.g_hat, g, atol=1e-4)

    def test_pure_gaussian_prior_converges_first_iteration(self):
        lf, p, alpha, _ = self.setup_instance(0)
        out = run_ep(lf, np.full(12, 1.0 - 1e-12), alpha, EpConfig())
        assert out.trace.n_iterations == 1
        assert out.trace.converged
        mean_ref, cov_ref = direct_posterior(lf, np.zeros(12, complex), alpha)
        np.testing.assert_allclose(out.g_hat, mean_ref, atol=1e-6)

    def test_sequential_matches_naive_reference(self):
        lf, p, alpha, _ = self.setup_instance(1)
        cfg = EpConfig(max_iters=3, tol=1e-30, schedule="sequential")
        out = run_ep(lf, p, alpha, cfg)
        mean_ref, var_ref = naive_sequential_reference(lf, p, alpha, cfg, 3)
        np.testing.assert_allclose(out.g_hat, mean_ref, atol=1e-8)
        np.testing.assert_allclose(out.var_diag, var_ref, atol=1e-8)

    def test_whitening_covariance(self):
        # heterogeneous alpha run equals the manually whitened run mapped back
        lf, p, _, _ = self.setup_instance(2)
        rng = np.random.default_rng(99)
        alpha = rng.uniform(0.1, 4.0, 12)
        for schedule in ("sequential", "parallel"):
            cfg = EpConfig(max_iters=4, tol=1e-30, schedule=schedule)
            out = run_ep(lf, p, alpha, cfg)
            sa = np.sqrt(alpha)
            lf_w = LikelihoodFactor(lf.phi * sa[None, :], lf.y, lf.noise_var)
            out_w = run_ep(lf_w, p, np.ones(12), cfg)
            np.testing.assert_allclose(out.g_hat, out_w.g_hat * sa, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(out.var_diag, out_w.var_diag * alpha, rtol=1e-9, atol=1e-12)

    def test_deterministic(self):
        lf, p, alpha, _ = self.setup_instance(3)
        a = run_ep(lf, p, alpha, EpConfig())
        b = run_ep(lf, p, alpha, EpConfig())
        np.testing.assert_array_equal(a.g_hat, b.g_hat)
        np.testing.assert_array_equal(a.var_diag, b.var_diag)

    def test_trace_records_nmse_and_deltas(self):
        lf, p, alpha, g = self.setup_instance(4)
        out = run_ep(lf, p, alpha, EpConfig(max_iters=6, tol=1e-30), truth=g)
        assert out.trace.n_iterations == 6
        iters = [r.iteration for r in out.trace.records]
        assert iters == sorted(iters) and len(set(iters)) == 6
        if np.linalg.norm(g) > 0:
            assert np.all(np.isfinite(out.trace.nmse_values()))
        assert np.all(out.trace.mean_deltas() >= 0)

    def test_parallel_schedule_runs(self):
        lf, p, alpha, g = self.setup_instance(5)
        out = run_ep(lf, p, alpha, EpConfig(max_iters=10, schedule="parallel"), truth=g)
        assert out.g_hat.shape == (12,)
        assert np.all(np.isfinite(out.var_diag))

    def test_all_sites_skipped_sets_warning_flag(self):
        # an unreachably high site-variance floor rejects every update
        lf, p, alpha, _ = self.setup_instance(7)
        out = run_ep(lf, p, alpha, EpConfig(max_iters=5, min_site_variance=1e6))
        assert out.trace.all_sites_skipped
        assert out.trace.n_iterations == 1
        assert out.trace.records[0].skipped_sites == 12

    def test_rejects_nonpositive_alpha(self):
        lf, p, alpha, _ = self.setup_instance(8)
        alpha = alpha.copy()
        alpha[3] = 0.0
        with pytest.raises(ValueError):
            run_ep(lf, p, alpha, EpConfig())

    def test_site_variances_respect_floor(self):
        lf, p, alpha, _ = self.setup_instance(6, snr=1e6)
        cfg = EpConfig(max_iters=8, tol=1e-30, min_site_variance=1e-10)
        # floor is enforced on the whitened scale inside the run; verify the
        # run completes and produces finite output under an aggressive SNR
        out = run_ep(lf, p, alpha, cfg)
        assert np.all(np.isfinite(out.g_hat))
        assert np.all(out.var_diag > 0)


class TestEpConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            EpConfig(max_iters=0)
        with pytest.raises(ValueError):
            EpConfig(tol=0.0)
        with pytest.raises(ValueError):
            EpConfig(damping=1.5)
        with pytest.raises(ValueError):
            EpConfig(schedule="other")


class TestLikelihoodFactor:
    def test_caches_natural_parameters(self):
        rng = np.random.default_rng(7)
        phi = rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))
        y = rng.standard_normal(3) + 0j
        lf = LikelihoodFactor(phi, y, 2.0)
        np.testing.assert_allclose(lf.gram, phi.conj().T @ phi, atol=1e-14)
        np.testing.assert_allclose(lf.proj, phi.conj().T @ y, atol=1e-14)
        np.testing.assert_allclose(lf.gram, lf.gram.conj().T, atol=1e-12)

    def test_rejects_bad_noise(self):
        with pytest.raises(ValueError):
            LikelihoodFactor(np.eye(2, dtype=complex), np.zeros(2, complex), 0.0)
