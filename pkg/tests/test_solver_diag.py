import numpy as np
import pytest
from scipy.special import expit, log_ndtr

from conftest import ridge_mean
from freeep.errors import InvalidParameter, SingularMatrix
from freeep.io import synthetic_microarray
from freeep.model import GaussianLikelihood, GaussianPrior, GlmProblem, ProbitLikelihood, SpikeSlabPrior, init_state
from freeep.randmat import rng_for
from freeep.solver_diag import (SolverConfig, ep_sweep_diagonal, fixed_point_residuals, gaussian_projection,
                                solve_diagonal)


def _state_with(p, l1w, l1z, g1w=None, g1z=None):
    s = init_state(p, "diagonal")
    s.lambda1w, s.lambda1z = np.asarray(l1w, float), np.asarray(l1z, float)
    s.gamma1w = np.zeros(p.K) if g1w is None else g1w
    s.gamma1z = np.zeros(p.N) if g1z is None else g1z
    return s


class TestSolverConfig:
    @pytest.mark.parametrize("kw", [{"damping": 0.0}, {"damping": 1.5}, {"tol": 0.0}, {"max_iter": -1}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidParameter):
            SolverConfig(**kw)


class TestGaussianProjection:
    def test_identity_design(self):
        p = GlmProblem(np.eye(4), np.zeros(4))
        mu, sd, zm, zv = gaussian_projection(p, _state_with(p, np.ones(4), np.ones(4)))
        np.testing.assert_allclose(mu, 0.0)
        np.testing.assert_allclose(sd, 0.5)
        np.testing.assert_allclose(zv, 0.5)

    def test_zero_design(self):
        p = GlmProblem(np.zeros((3, 4)), np.zeros(3))
        l1w = np.array([1.0, 2.0, 4.0, 8.0])
        _, sd, _, zv = gaussian_projection(p, _state_with(p, l1w, np.ones(3)))
        np.testing.assert_allclose(sd, 1 / l1w)
        np.testing.assert_array_equal(zv, 0.0)

    def test_dense_inverse_oracle(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((8, 5))
        p = GlmProblem(X, np.zeros(8))
        l1w, l1z = rng.uniform(0.5, 2, 5), rng.uniform(0.5, 2, 8)
        g1w, g1z = rng.standard_normal(5), rng.standard_normal(8)
        mu, sd, zm, zv = gaussian_projection(p, _state_with(p, l1w, l1z, g1w, g1z))
        Sigma = np.linalg.inv(np.diag(l1w) + X.T @ np.diag(l1z) @ X)
        np.testing.assert_allclose(mu, Sigma @ (g1w + X.T @ g1z), atol=1e-10)
        np.testing.assert_allclose(sd, np.diag(Sigma), atol=1e-10)
        np.testing.assert_allclose(zm, X @ Sigma @ (g1w + X.T @ g1z), atol=1e-10)
        np.testing.assert_allclose(zv, np.diag(X @ Sigma @ X.T), atol=1e-10)

    def test_indefinite_raises(self):
        p = GlmProblem(np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(SingularMatrix):
            gaussian_projection(p, _state_with(p, np.array([1.0, -1.0]), np.ones(2)))


class TestGaussianModel:
    def test_ridge_exact_in_few_sweeps(self, gaussian_problem):
        p = gaussian_problem
        summ, s, trace = solve_diagonal(p, SolverConfig(damping=1.0, tol=1e-10))
        exact = ridge_mean(p.X, p.y, 2.0, 0.5)
        np.testing.assert_allclose(summ.mean_w, exact, atol=1e-8)
        assert summ.converged and summ.iterations <= 3

    def test_ridge_with_default_damping(self, gaussian_problem):
        p = gaussian_problem
        summ, _, _ = solve_diagonal(p, SolverConfig(tol=1e-12, max_iter=500))
        np.testing.assert_allclose(summ.mean_w, ridge_mean(p.X, p.y, 2.0, 0.5), atol=1e-8)

    def test_max_iter_zero(self, gaussian_problem):
        summ, s, trace = solve_diagonal(gaussian_problem, SolverConfig(max_iter=0))
        s0 = init_state(gaussian_problem, "diagonal")
        assert not summ.converged and trace == [] and summ.iterations == 0
        np.testing.assert_array_equal(summ.mean_w, s0.eta_w)

    def test_wrong_flavor(self, gaussian_problem):
        with pytest.raises(InvalidParameter):
            ep_sweep_diagonal(gaussian_problem, init_state(gaussian_problem, "scalar"))


@pytest.fixture(scope="module")
def solved():
    syn = synthetic_microarray(32, 64, rho=0.1, seed=7)
    p = GlmProblem(syn.X, syn.y, SpikeSlabPrior(0.1, 1.0), ProbitLikelihood(1.0))
    cfg = SolverConfig(tol=1e-10, max_iter=2000)
    return p, cfg, solve_diagonal(p, cfg)


class TestProbitFixedPoint:

    def test_converges(self, solved):
        _, _, (summ, _, trace) = solved
        assert summ.converged and trace[-1] < 1e-10

    def test_closure_residuals(self, solved):
        p, cfg, (summ, s, _) = solved
        r = fixed_point_residuals(p, s)
        # moments move by < tol per sweep; the closure holds to a small multiple of it
        assert r["mean"] < 1e-8 and r["var"] < 1e-8
        assert r["eta_z"] < 1e-8
        assert r["gamma2w"] < 1e-7
        assert np.max(np.abs(summ.mean_z - p.X @ summ.mean_w)) < 1e-8

    def test_damping_invariance(self, solved):
        p, cfg, (summ, _, _) = solved
        a, _, _ = solve_diagonal(p, SolverConfig(tol=1e-10, max_iter=4000, damping=0.3))
        b, _, _ = solve_diagonal(p, SolverConfig(tol=1e-10, max_iter=4000, damping=0.7))
        assert a.converged and b.converged
        assert np.max(np.abs(a.mean_w - b.mean_w)) < 100 * 1e-10
        assert np.max(np.abs(a.var_w - b.var_w)) < 100 * 1e-10

    def test_permutation_equivariance(self, solved):
        p, cfg, (summ, _, _) = solved
        perm = rng_for(1, "misc").permutation(p.N)
        q = GlmProblem(p.X[perm], p.y[perm], p.prior_spec, p.likelihood_spec)
        other, _, _ = solve_diagonal(q, cfg)
        np.testing.assert_allclose(other.mean_w, summ.mean_w, atol=1e-10)
        np.testing.assert_allclose(other.var_w, summ.var_w, atol=1e-10)
        np.testing.assert_allclose(other.mean_z, summ.mean_z[perm], atol=1e-10)


def importance_sampling_means(p, summ_state, n_samples, seed=123, chunk=10**5):
    """Self-normalised IS estimate of the posterior mean with an EP-derived mixture proposal.

    Returns ``(mean, standard_error, ess)``.
    """
    s = summ_state
    rho, slab = p.prior_spec.rho, p.prior_spec.slab_var
    m, v = s.gamma2w / s.lambda2w, 1 / s.lambda2w
    vs = 1 / (1 / v + 1 / slab)
    ms = vs * m / v
    log_slab = np.log(rho) - 0.5 * (np.log(2 * np.pi * (v + slab)) + m**2 / (v + slab))
    log_spike = np.log(1 - rho) - 0.5 * (np.log(2 * np.pi * v) + m**2 / v)
    pi_q = np.clip(expit(log_slab - log_spike), 0.02, 0.98)
    vq = 1.5 * vs
    rng = rng_for(seed, "misc")
    K = p.K
    sw = sw2 = 0.0
    swm, swm2 = np.zeros(K), np.zeros(K)
    ref = None
    for _ in range(n_samples // chunk):
        inc = rng.random((chunk, K)) < pi_q
        wz = ms + np.sqrt(vq) * rng.standard_normal((chunk, K))
        w = np.where(inc, wz, 0.0)
        lq = np.where(inc, np.log(pi_q) - 0.5 * (np.log(2 * np.pi * vq) + (wz - ms) ** 2 / vq),
                      np.log(1 - pi_q)).sum(1)
        lp = np.where(inc, np.log(rho) - 0.5 * (np.log(2 * np.pi * slab) + wz**2 / slab), np.log(1 - rho)).sum(1)
        ll = log_ndtr((w @ p.X.T) * p.y / np.sqrt(p.likelihood_spec.noise_var)).sum(1)
        lw = lp + ll - lq
        ref = lw.max() if ref is None else ref
        wt = np.exp(lw - ref)
        sw += wt.sum()
        sw2 += (wt**2).sum()
        swm += wt @ w
        swm2 += wt @ (w**2)
    mean = swm / sw
    ess = sw**2 / sw2
    se = np.sqrt((swm2 / sw - mean**2) / ess)
    return mean, se, ess


@pytest.mark.slow
class TestImportanceSamplingOracle:
    def test_ep_close_to_sampled_posterior_mean(self, solved):
        p, _, (summ, s, _) = solved
        mean, se, ess = importance_sampling_means(p, s, 10**6)
        assert ess > 1e5
        assert np.max(np.abs(mean - summ.mean_w)) < 5e-3

    @pytest.mark.xfail(strict=True, reason="EP bias (~1e-3) exceeds 3 Monte-Carlo SE (~3e-4) at 1e7 samples")
    def test_within_three_standard_errors_at_1e7(self, solved):
        p, _, (summ, s, _) = solved
        mean, se, _ = importance_sampling_means(p, s, 10**7)
        frac = np.mean(np.abs(mean - summ.mean_w) < 3 * se)
        print(f"fraction of coordinates within 3 SE: {frac:.3f}")
        assert frac >= 0.95


@pytest.mark.slow
def test_probit_512_converges_within_200_sweeps(probit_512):
    summ, _, trace = solve_diagonal(probit_512, SolverConfig())
    assert summ.converged and summ.iterations <= 200
