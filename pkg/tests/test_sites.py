import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import ndtr

from freeep.errors import InvalidParameter, NoBracket, ZeroMass
from freeep.sites import (CavityGaussian, likelihood_moments, monotone_link_inverse, prior_moments,
                          quadrature_oracle, tilted_gaussian_prior, tilted_probit, tilted_spike_slab)
from freeep.model import GaussianPrior, ProbitLikelihood, SpikeSlabPrior

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


def normal_pdf(x, m, v):
    return np.exp(-0.5 * (x - m) ** 2 / v) / np.sqrt(2 * np.pi * v)


def spike_slab_oracle(c, rho, slab_var):
    """Mixture moments with the delta handled analytically and the slab by quadrature."""
    slab = quadrature_oracle(c, lambda x: rho * normal_pdf(x, 0.0, slab_var))
    z_slab = math.exp(slab.log_partition)
    z_spike = (1 - rho) * normal_pdf(0.0, c.mean, c.var)
    z = z_slab + z_spike
    mean = z_slab * slab.mean / z
    second = z_slab * (slab.var + slab.mean**2) / z
    return mean, second - mean**2, math.log(z)


cavities = st.builds(CavityGaussian, st.floats(-5, 5), st.floats(0.01, 10))


class TestCavity:
    @pytest.mark.parametrize("var", [0.0, -1.0, np.inf, np.nan])
    def test_bad_variance(self, var):
        with pytest.raises(InvalidParameter):
            CavityGaussian(0.0, var)

    def test_from_natural(self):
        c = CavityGaussian.from_natural(2.0, 4.0)
        assert (c.mean, c.var) == (0.5, 0.25)


class TestGaussianPrior:
    def test_symmetric_product(self):
        t = tilted_gaussian_prior(CavityGaussian(0.0, 1.0), 0.0, 1.0)
        assert (t.mean, t.var) == (0.0, 0.5)

    def test_flat_prior_limit(self):
        t = tilted_gaussian_prior(CavityGaussian(0.7, 2.5), 0.0, 1e12)
        assert t.mean == pytest.approx(0.7, rel=1e-10)
        assert t.var == pytest.approx(2.5, rel=1e-10)

    def test_frozen_oracle_value(self):
        # product of N(1, 2) and N(0, 1): precision 3/2, mean (1/2) / (3/2)
        t = tilted_gaussian_prior(CavityGaussian(1.0, 2.0), 0.0, 1.0)
        assert t.mean == pytest.approx(1 / 3, abs=1e-14)
        assert t.var == pytest.approx(2 / 3, abs=1e-14)
        q = quadrature_oracle(CavityGaussian(1.0, 2.0), lambda x: normal_pdf(x, 0.0, 1.0))
        assert q.mean == pytest.approx(1 / 3, abs=1e-9)
        assert q.var == pytest.approx(2 / 3, abs=1e-9)

    def test_invalid_prior_var(self):
        with pytest.raises(InvalidParameter):
            tilted_gaussian_prior(CavityGaussian(0.0, 1.0), 0.0, 0.0)

    @given(cavities, st.floats(-3, 3), st.floats(0.05, 5))
    def test_matches_quadrature(self, c, pm, pv):
        t = tilted_gaussian_prior(c, pm, pv)
        q = quadrature_oracle(c, lambda x: normal_pdf(x, pm, pv))
        assert abs(t.mean - q.mean) < 1e-7 and abs(t.var - q.var) < 1e-7
        assert abs(t.log_partition - q.log_partition) < 1e-7
        assert t.var <= c.var


class TestSpikeSlab:
    def test_pure_slab(self):
        c = CavityGaussian(0.3, 1.7)
        a, b = tilted_spike_slab(c, 1.0, 1.0), tilted_gaussian_prior(c, 0.0, 1.0)
        assert a.mean == pytest.approx(b.mean, abs=1e-15)
        assert a.var == pytest.approx(b.var, abs=1e-15)

    @pytest.mark.parametrize("m", [-3.0, 0.0, 2.0])
    def test_pure_spike_limit(self, m):
        t = tilted_spike_slab(CavityGaussian(m, 1.0), 1e-12, 1.0)
        assert abs(t.mean) < 1e-9 and t.var < 1e-9

    def test_frozen_case(self):
        c = CavityGaussian(2.0, 1.0)
        t = tilted_spike_slab(c, 0.1, 1.0)
        mean, var, _ = spike_slab_oracle(c, 0.1, 1.0)
        assert t.mean == pytest.approx(mean, abs=1e-8)
        assert t.var == pytest.approx(var, abs=1e-8)
        # frozen from the oracle above
        assert t.mean == pytest.approx(0.17598381115835887, abs=1e-12)

    def test_extreme_cavity_mean_no_overflow(self):
        t = tilted_spike_slab(CavityGaussian(200.0, 0.01), 0.1, 1.0)
        assert t.mean == pytest.approx(200.0 / 1.01, rel=1e-12)

    @pytest.mark.parametrize("rho,sv", [(0.0, 1.0), (1.1, 1.0), (0.5, 0.0)])
    def test_invalid(self, rho, sv):
        with pytest.raises(InvalidParameter):
            tilted_spike_slab(CavityGaussian(0.0, 1.0), rho, sv)

    @given(cavities, st.floats(0.01, 1.0), st.floats(0.1, 4.0))
    def test_matches_oracle(self, c, rho, sv):
        t = tilted_spike_slab(c, rho, sv)
        mean, var, logz = spike_slab_oracle(c, rho, sv)
        assert abs(t.mean - mean) < 1e-7 and abs(t.var - var) < 1e-7
        assert abs(t.log_partition - logz) < 1e-7


class TestProbit:
    def test_standard_cavity(self):
        t = tilted_probit(CavityGaussian(0.0, 1.0), 1)
        # closed form: 1/sqrt(pi) when noise and cavity variances are both 1
        assert t.mean == pytest.approx(INV_SQRT_PI, abs=1e-14)
        assert t.mean == pytest.approx(0.5642, abs=1e-4)
        assert t.var < 1.0
        q = quadrature_oracle(CavityGaussian(0.0, 1.0), ndtr)
        assert q.mean == pytest.approx(t.mean, abs=1e-9)

    def test_label_flip(self):
        a = tilted_probit(CavityGaussian(0.0, 1.0), 1)
        b = tilted_probit(CavityGaussian(0.0, 1.0), -1)
        assert b.mean == pytest.approx(-a.mean, abs=1e-15)
        assert b.var == pytest.approx(a.var, abs=1e-15)

    def test_saturated(self):
        t = tilted_probit(CavityGaussian(10.0, 0.01), 1)
        assert t.mean == pytest.approx(10.0, abs=1e-12)
        assert t.var == pytest.approx(0.01, abs=1e-12)

    @pytest.mark.parametrize("m", [-8.0, -12.0, -30.0])
    def test_deep_tail_is_finite_and_accurate(self, m):
        c = CavityGaussian(m, 1.0)
        t = tilted_probit(c, 1)
        assert np.isfinite(t.mean) and np.isfinite(t.var) and t.var > 0
        if m > -20:
            q = quadrature_oracle(c, ndtr)
            assert t.mean == pytest.approx(q.mean, abs=1e-7)
            assert t.var == pytest.approx(q.var, abs=1e-7)

    def test_invalid_label(self):
        with pytest.raises(InvalidParameter):
            tilted_probit(CavityGaussian(0.0, 1.0), 0)

    @given(cavities, st.sampled_from([-1, 1]), st.floats(0.1, 3.0))
    def test_matches_quadrature(self, c, y, nv):
        t = tilted_probit(c, y, nv)
        q = quadrature_oracle(c, lambda x: ndtr(y * x / math.sqrt(nv)))
        assert abs(t.mean - q.mean) < 1e-7 and abs(t.var - q.var) < 1e-7
        assert abs(t.log_partition - q.log_partition) < 1e-7
        assert t.var <= c.var

    @given(st.floats(-6, 6), st.floats(0.01, 0.5), st.floats(0.01, 5), st.sampled_from([-1, 1]))
    def test_mean_monotone_in_cavity_mean(self, m, dm, v, y):
        a = tilted_probit(CavityGaussian(m, v), y)
        b = tilted_probit(CavityGaussian(m + dm, v), y)
        assert b.mean >= a.mean


class TestQuadratureOracle:
    def test_identity_site(self):
        q = quadrature_oracle(CavityGaussian(0.4, 2.0), np.ones_like)
        assert q.mean == pytest.approx(0.4, abs=1e-10)
        assert q.var == pytest.approx(2.0, abs=1e-8)

    def test_follows_mass_away_from_cavity(self):
        c = CavityGaussian(4.4375, 0.01)
        t = tilted_gaussian_prior(c, -3.0, 0.05)
        q = quadrature_oracle(c, lambda x: normal_pdf(x, -3.0, 0.05))
        assert abs(t.mean - q.mean) < 1e-9 and abs(t.log_partition - q.log_partition) < 1e-9

    def test_zero_mass(self):
        with pytest.raises(ZeroMass):
            quadrature_oracle(CavityGaussian(0.0, 1.0), np.zeros_like)

    def test_min_points(self):
        with pytest.raises(InvalidParameter):
            quadrature_oracle(CavityGaussian(0.0, 1.0), np.ones_like, n_points=10)


class TestLinkInverse:
    def test_origin_round_trip(self):
        target = float(tilted_probit(CavityGaussian(0.0, 1.0), 1).mean)
        assert monotone_link_inverse(target, 1.0, 1) == pytest.approx(0.0, abs=1e-9)

    def test_frozen_target(self):
        g = monotone_link_inverse(0.5642, 1.0, 1)
        assert abs(g) < 1e-3
        assert float(tilted_probit(CavityGaussian(g, 1.0), 1).mean) == pytest.approx(0.5642, abs=1e-10)

    @given(st.floats(-4, 4), st.floats(0.01, 2), st.floats(0.2, 5), st.sampled_from([-1, 1]))
    def test_monotone(self, t1, dt, lam, y):
        g1 = monotone_link_inverse(t1, lam, y)
        g2 = monotone_link_inverse(t1 + dt, lam, y)
        assert g1 < g2

    @given(st.floats(-30, 30), st.floats(0.2, 5), st.sampled_from([-1, 1]))
    def test_residual(self, gamma, lam, y):
        target = float(tilted_probit(CavityGaussian(gamma / lam, 1 / lam), y).mean)
        g = monotone_link_inverse(target, lam, y)
        assert float(tilted_probit(CavityGaussian(g / lam, 1 / lam), y).mean) == pytest.approx(target, abs=1e-10)

    def test_no_bracket(self):
        with pytest.raises(NoBracket):
            monotone_link_inverse(1e9, 1.0, 1)


class TestDispatch:
    def test_prior_and_likelihood(self):
        m, v = np.array([0.1, -0.3]), np.array([1.0, 0.5])
        a = prior_moments(SpikeSlabPrior(0.2), m, v)
        b = prior_moments(SpikeSlabPrior(0.2), m, v, checked=False)
        np.testing.assert_array_equal(a.mean, b.mean)
        c = likelihood_moments(ProbitLikelihood(), np.array([1, -1]), m, v)
        d = likelihood_moments(ProbitLikelihood(), np.array([1, -1]), m, v, checked=False)
        np.testing.assert_array_equal(c.var, d.var)
        e = prior_moments(GaussianPrior(0, 1), m, v)
        np.testing.assert_allclose(e.var, v / (1 + v))

    def test_unknown_prior(self):
        with pytest.raises(InvalidParameter):
            prior_moments(object(), 0.0, 1.0)
