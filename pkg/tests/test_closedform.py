import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from pinned_balls import closedform as cf
from pinned_balls.core import DomainError, RngStream

scipy_integrate = pytest.importorskip("scipy.integrate")

SQRT3PI_2 = math.sqrt(3 * math.pi) / 2   # 1.5349901...


def _gap_oracle(a, r, squared):
    """1D quadrature over theta of the pair gap, written out independently."""
    def f(t):
        q = a + r * math.sin(t + 2 * math.pi / 3)
        s = a + r * math.sin(t + 4 * math.pi / 3)
        if q <= s:
            return 0.0
        return q * q - s * s if squared else q - s
    # q > s exactly on (-pi/2, pi/2) (mod 2 pi)
    val, _ = scipy_integrate.quad(f, -math.pi / 2, math.pi / 2, epsabs=1e-14)
    return val / (2 * math.pi)


def _P_oracle(q1, q2, q3):
    """w integrated analytically, the plane by adaptive polar quadrature."""
    fw = math.sqrt(2 * math.pi) * math.exp(0.5 * q3 * q3)
    g = lambda rho, phi: rho * rho * math.exp(-0.5 * rho * rho - rho * (q1 * math.cos(phi) + q2 * math.sin(phi)))
    val, _ = scipy_integrate.dblquad(g, 0, 2 * math.pi, 0, 40, epsabs=1e-12, epsrel=1e-12)
    return fw * val


class TestGaps:
    def test_values(self):
        assert cf.expected_gap(0.0) == 0.0
        assert_allclose(cf.expected_gap(1.0), 0.5513288954217921, rtol=1e-15)
        assert_allclose(cf.expected_gap(1.0), _gap_oracle(0, 1, False), rtol=1e-12)
        assert cf.expected_sq_gap(0.0, 3.0) == 0.0
        assert_allclose(cf.expected_sq_gap(1.0, 1.0), 1.1026577908435842, rtol=1e-15)
        assert_allclose(cf.expected_sq_gap(1.3, 0.7), _gap_oracle(1.3, 0.7, True), rtol=1e-12)
        assert cf.expected_sq_gap(-2.0, 1.5) == -cf.expected_sq_gap(2.0, 1.5)

    @pytest.mark.parametrize("a", [0.0, 1.0])
    @pytest.mark.parametrize("r", [1.0, 2.0])
    def test_monte_carlo(self, a, r):
        mc = cf.circle_gap_mc(a, r, 10**6, RngStream(1, 2**32 + 50))
        assert abs(mc["gap"] - cf.expected_gap(r)) <= 4 * mc["gap_se"]
        assert abs(mc["sq_gap"] - cf.expected_sq_gap(a, r)) <= 4 * mc["sq_gap_se"]

    def test_domain(self):
        with pytest.raises(DomainError):
            cf.expected_gap(-1.0)


class TestI1I2:
    def test_standard(self):
        v, e = cf.I1(cf.GaussianTriple((0, 0, 0), (1, 1, 1)))
        assert_allclose(v, SQRT3PI_2, rtol=1e-13)
        mc, se = cf.I1(cf.GaussianTriple((0, 0, 0), (1, 1, 1)), "mc", samples=10**6, rng=RngStream(3))
        assert abs(mc - SQRT3PI_2) <= 4 * se

    def test_homogeneity(self):
        t = cf.GaussianTriple((0.2, -0.4, 0.9), (0.7, 1.1, 1.6))
        c = 2.5
        tc = cf.GaussianTriple(tuple(c * a for a in t.alpha), tuple(c * b for b in t.beta))
        assert_allclose(cf.I1(tc)[0], c * cf.I1(t)[0], rtol=1e-12)
        assert_allclose(cf.I2(tc)[0], c * c * cf.I2(t)[0], rtol=1e-12)

    def test_point_mass_limit(self):
        a = (0.1, -0.5, 0.7)
        lim = math.sqrt(sum(x * x for x in a) - a[0] * a[1] - a[1] * a[2] - a[0] * a[2])
        assert_allclose(cf.I1(cf.GaussianTriple(a, (1e-5,) * 3))[0], lim, rtol=1e-6)

    def test_I2_values(self):
        assert abs(cf.I2(cf.GaussianTriple((0, 0, 0), (0.5, 1.0, 2.0)))[0]) < 1e-14
        v = cf.I2(cf.GaussianTriple((1, 1, 1), (1, 1, 1)))[0]
        assert_allclose(v, 3 * SQRT3PI_2, rtol=1e-13)
        assert_allclose(v, 4.604970185759, rtol=1e-12)
        t = cf.GaussianTriple((0.3, -0.2, 0.8), (1.0, 0.6, 1.4))
        tm = cf.GaussianTriple(tuple(-a for a in t.alpha), t.beta)
        assert_allclose(cf.I2(tm)[0], -cf.I2(t)[0], rtol=1e-13)

    def test_mc_vs_quad_random(self):
        g = np.random.default_rng(20)
        rng = RngStream(4, 2**32 + 60)
        for i in range(20):
            t = cf.GaussianTriple(tuple(g.uniform(-1, 1, 3)), tuple(g.uniform(0.5, 2, 3)))
            for fn in (cf.I1, cf.I2):
                q, qe = fn(t)
                m, me = fn(t, "mc", samples=2 * 10**5, rng=rng.substream(i))
                assert abs(m - q) <= 4 * math.hypot(me, qe)
                assert qe < 1e-10

    def test_far_origin_branch(self):
        t = cf.GaussianTriple((-30.0, 0.0, 30.0), (0.5, 0.5, 0.5))
        v, e = cf.I1(t)
        m, se = cf.I1(t, "mc", samples=10**5, rng=RngStream(5))
        assert abs(v - m) <= 4 * se

    def test_gh_is_rough(self):
        # the tensor rule stalls at the conical kink; error estimate says so
        v, e = cf.I1(cf.GaussianTriple((0, 0, 0), (1, 1, 1)), "gh")
        assert abs(v - SQRT3PI_2) > 1e-4
        assert e > 1e-4

    def test_bad_method(self):
        with pytest.raises(DomainError):
            cf.I1(cf.GaussianTriple((0, 0, 0), (1, 1, 1)), "simpson")
        with pytest.raises(DomainError):
            cf.GaussianTriple((0, 0, 0), (1, 0, 1))


class TestEpsParametrize:
    def test_examples(self):
        assert cf.eps_parametrize((2.0, 2.0, 2.0), 0.1) == (2.0, 0.0, 0.0)
        avg, d, g = cf.eps_parametrize((0.9, 1.0, 1.1), 0.1)
        assert_allclose((avg, d, g), (1.0, 1.0, 0.0), atol=1e-12)

    @given(st.tuples(*[st.floats(-10, 10)] * 3), st.floats(1e-3, 1.0))
    @settings(max_examples=100)
    def test_roundtrip(self, v, eps):
        avg, d, g = cf.eps_parametrize(v, eps)
        back = cf._eps_triple(avg, d, g, eps)
        assert_allclose(back, v, atol=1e-10)

    def test_domain(self):
        with pytest.raises(DomainError):
            cf.eps_parametrize((1, 2, 3), 0.0)


class TestAsymptotics:
    def test_leading_terms(self):
        e = cf.EpsExpansion(0.0, 1.0, 0.0, 0.0, 0.3, -0.2, 0.05)
        assert_allclose(cf.I1_asym(e), SQRT3PI_2, rtol=1e-15)
        e = cf.EpsExpansion(0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.05)
        assert_allclose(cf.I1_asym(e), SQRT3PI_2 * 1.00125, rtol=1e-15)
        assert abs(cf.I1(e.triple())[0] - cf.I1_asym(e)) <= 0.05**3

    def test_I2_asym(self):
        e = cf.EpsExpansion(1.0, 1.0, 0.8, 0.0, 0.1, 0.2, 0.05)
        assert_allclose(cf.I2_asym(e), 3 * cf.I1_asym(e), rtol=1e-15)
        e = cf.EpsExpansion(0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.05)
        assert_allclose(cf.I2_asym(e), 0.05**2 * math.sqrt(3 * math.pi), rtol=1e-15)
        assert_allclose(cf.I2_asym(e), 0.0076749503, rtol=1e-8)
        assert abs(cf.I2(e.triple())[0] - cf.I2_asym(e)) <= 0.05**3

    def test_cross_coefficient_one_matches_quadrature(self):
        # the coefficient 2 alternative is off by eps^2 sqrt(3 pi) delta1 delta2
        e = cf.EpsExpansion(0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.02)
        q = cf.I2(e.triple())[0]
        err1 = abs(q - cf.I2_asym(e, cross_coefficient=1.0))
        err2 = abs(q - cf.I2_asym(e, cross_coefficient=2.0))
        assert err1 < 1e-6
        assert_allclose(err2, 0.02**2 * math.sqrt(3 * math.pi), rtol=1e-2)

    @pytest.mark.parametrize("profile", [(1.0, 0.0, 0.0, 0.0), (1.0, 1.0, 0.5, 0.3), (0.5, 0.5, -1.0, 1.0)])
    def test_error_is_fourth_order(self, profile):
        # permutation symmetry makes the expansions even in eps, so the
        # remainder is O(eps^4): doubling eps multiplies the error by ~16
        d1, d2, g1, g2 = profile
        errs = []
        for eps in (0.02, 0.04):
            ex = cf.EpsExpansion(0.7, 1.0, d1, d2, g1, g2, eps)
            errs.append([abs(cf.I1(ex.triple())[0] - cf.I1_asym(ex)),
                         abs(cf.I2(ex.triple())[0] - cf.I2_asym(ex))])
        ratio = np.array(errs[1]) / np.array(errs[0])
        assert np.all((ratio > 14) & (ratio < 18))


class TestP:
    def test_origin(self):
        assert cf.P_closed(0, 0, 0) == (2 * math.pi) ** 2 / 2
        assert_allclose(cf.P_closed(0, 0, 0), 19.739208802178716, rtol=1e-15)

    def test_rotation_invariance(self):
        assert_allclose(cf.P_closed(0.3, 0.4, 0.0), cf.P_closed(0.5, 0.0, 0.0), rtol=1e-15)
        assert_allclose(cf.P_closed(0.3, 0.4, 0.2), cf.P_closed(-0.4, 0.3, 0.2), rtol=1e-15)

    @pytest.mark.parametrize("q", [(0.3, 0.4, 0.5), (1.0, 0.0, 1.0), (0.0, 1.5, -0.5)])
    def test_independent_oracle(self, q):
        assert_allclose(cf.P_closed(*q), _P_oracle(*q), rtol=1e-9)
        assert_allclose(cf.P_quad(*q)[0], _P_oracle(*q), rtol=1e-9)

    def test_grid(self):
        for q in np.array(np.meshgrid(*[(0.0, 0.5, 1.0)] * 3)).reshape(3, -1).T:
            exact = cf.P_closed(*q)
            val, delta = cf.P_quad(*q)
            assert abs(val - exact) <= 1e-6 * exact
            assert delta <= 1e-6 * exact

    def test_overflow(self):
        with pytest.raises(OverflowError):
            cf.P_closed(0.0, 0.0, 40.0)

    def test_moments(self):
        C = (2 * math.pi) ** 2
        assert cf.gaussian_moment("w2") == C / 2
        assert cf.gaussian_moment("s2b2") == 15 * C / 16
        assert cf.gaussian_moment("s2") == 3 * C / 4
        for w in cf.MOMENT_NAMES:
            assert_allclose(cf.gaussian_moment_quad(w), cf.gaussian_moment(w), rtol=1e-6)
        with pytest.raises(DomainError):
            cf.gaussian_moment("w4")

    def test_moment_scipy_oracle(self):
        # s^2 moment: integrand rho * rho^2 cos^2 * rho (Jacobian); w and angle in closed form
        rad, _ = scipy_integrate.quad(lambda r: r**4 * math.exp(-0.5 * r * r), 0, np.inf)
        val = math.sqrt(2 * math.pi) * math.pi * rad
        assert_allclose(val, cf.gaussian_moment("s2"), rtol=1e-12)


class TestRhs:
    def test_drift(self):
        assert_allclose(cf.drift_rhs(0.0, 2.0, 101), 4e-4, rtol=1e-15)
        assert_allclose(cf.drift_rhs(1.0, 0.0, 101), -1 / (100 * math.sqrt(math.pi)), rtol=1e-15)
        assert_allclose(cf.drift_rhs(1.0, 0.0, 101), -0.0056418958, rtol=1e-8)
        assert cf.drift_rhs(0.0, 0.0, 101) == 0.0

    def test_energy(self):
        assert cf.energy_rhs(0.3, 0.2, 0, 0, 0, 51) == 0.0
        assert_allclose(cf.energy_rhs(1, 0, 0, 1, 0, 101), -2 / (100 * math.sqrt(math.pi)), rtol=1e-15)
        assert_allclose(cf.energy_rhs(1, 0, 0, 1, 0, 101), -0.0112837917, rtol=1e-8)
        assert cf.energy_rhs(0.4, 0.9, 1.3, 0.7, 0, 77) == cf.energy_rhs(0.7, 1.3, 0.9, 0.4, 0, 77)

    def test_profile_derivatives(self):
        p = cf.PolynomialProfile((0.0, 0.0, 1.0), (0.2, 0.1))
        assert p.mu(0.5) == 0.25 and p.mu(0.5, 2) == 2.0
        assert p.sigma(0.5, 1) == 0.1
        # (z^4 + (0.2 + 0.1 z)^2)'' = 12 z^2 + 0.02
        assert_allclose(p.energy_xx(0.5), 12 * 0.25 + 0.02, rtol=1e-14)


class TestVerifyTheorem:
    def test_constant_profiles(self):
        rep = cf.verify_theorem(cf.PolynomialProfile((0.4,), (0.3,)), 41, 20, 2 * 10**5, seed=1)
        assert rep.rhs_drift == 0.0 and rep.rhs_energy == 0.0
        assert abs(rep.empirical_drift) <= 4 * rep.drift_se + 1e-15
        assert abs(rep.empirical_energy_drift) <= 4 * rep.energy_se + 1e-15

    def test_se_scaling(self):
        prof = cf.PolynomialProfile((0.0, 0.0, 1.0), (0.2, 0.1))
        se = [cf.verify_theorem(prof, 51, 26, N, seed=2, control_variates=False).drift_se
              for N in (10**5, 2 * 10**5, 4 * 10**5)]
        assert_allclose(se[0] / se[1], math.sqrt(2), rtol=0.2)
        assert_allclose(se[0] / se[2], 2.0, rtol=0.2)

    def test_sort_terms_match_gap_formulas(self):
        prof = cf.PolynomialProfile((0.0, 0.0, 1.0), (0.2, 0.1))
        rep = cf.verify_theorem(prof, 51, 26, 2 * 10**5, seed=3)
        assert abs(rep.mu_hat_term - rep.mu_hat_analytic) <= 5 * rep.mu_hat_se
        assert abs(rep.energy_term - rep.energy_term_analytic) <= 5 * rep.energy_term_se

    @pytest.mark.slow
    def test_quadratic_mu_constant_sigma(self):
        prof = cf.PolynomialProfile((0.0, 0.0, 1.0), (0.2,))
        reps = [cf.verify_theorem(prof, n, (n + 1) // 2, 10**6, seed=4) for n in (51, 101, 201)]
        ns = np.array([r.n for r in reps], dtype=float)
        err = np.array([r.drift_error for r in reps])
        se = np.array([r.drift_se for r in reps])
        w = 1 / se**2
        C = np.sum(w * err * ns**-3) / np.sum(w * ns**-6)
        for r in reps:
            assert abs(r.drift_error) <= max(4 * r.drift_se, 1.5 * abs(C) * r.n**-3.0)

    def test_site_range(self):
        prof = cf.PolynomialProfile((0.0,), (0.1,))
        with pytest.raises(DomainError):
            cf.verify_theorem(prof, 51, 2, 1000)
        with pytest.raises(DomainError):
            cf.verify_theorem(prof, 51, 50, 1000)
