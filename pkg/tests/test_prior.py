import numpy as np
import pytest
import scipy.linalg

from geomcmc.prior import Grid, build_prior, neumann_laplacian


def dense_cov(prior):
    A = prior.A.toarray()
    Ainv = np.linalg.inv(A)
    return Ainv @ (prior.mass_diag * np.eye(prior.grid.d_m)) @ Ainv


def test_grid_invariants():
    g = Grid(5)
    assert g.h * (g.n + 1) == 1.0
    assert g.d_m == 25
    with pytest.raises(ValueError):
        Grid(3)


def test_zero_diffusion_limit():
    # gamma=0, delta=1: A = h^2 I and covariance action = h^-2 I
    g = Grid(4)
    prior = build_prior(g, 0.0, 1.0)
    assert np.allclose(prior.A.toarray(), g.h**2 * np.eye(16))
    v = np.arange(16.0)
    assert np.allclose(prior.apply_cov(v), v / g.h**2)


def test_invalid_coefficients():
    with pytest.raises(ValueError):
        build_prior(Grid(4), -0.1, 1.0)
    with pytest.raises(ValueError):
        build_prior(Grid(4), 0.1, 0.0)


def test_operator_symmetric_and_positive():
    prior = build_prior(Grid(8), 0.03, 3.33)
    A = prior.A
    assert (A != A.T).nnz == 0  # exactly symmetric as stored
    eigs = scipy.linalg.eigvalsh(A.toarray())
    assert np.all(eigs > 0)
    # smallest eigenvalue >= delta h^2 (Neumann Laplacian is PSD)
    assert eigs[0] >= 3.33 * prior.grid.h**2 - 1e-12


def test_neumann_laplacian_kernel():
    # constants are in the kernel of the pure Neumann closure
    L = neumann_laplacian(5)
    assert np.allclose(L @ np.ones(25), 0.0)


def test_cov_action_symmetric():
    prior = build_prior(Grid(6), 0.05, 2.0)
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(36), rng.standard_normal(36)
    lhs = a @ prior.apply_cov(b)
    rhs = b @ prior.apply_cov(a)
    assert abs(lhs - rhs) < 1e-10 * np.linalg.norm(a) * np.linalg.norm(b)


def test_sampling_determinism():
    prior = build_prior(Grid(6), 0.05, 2.0)
    m1 = prior.sample(np.random.default_rng(3))
    m2 = prior.sample(np.random.default_rng(3))
    assert np.array_equal(m1, m2)


def test_sample_moments_match_dense_covariance():
    prior = build_prior(Grid(8), 0.1, 4.0)
    d = prior.grid.d_m
    n_draws = 10_000
    rng = np.random.default_rng(5)
    Z = rng.standard_normal((n_draws, d))
    draws = prior.unwhiten(Z.T).T
    cov_ref = dense_cov(prior)
    emp = np.cov(draws.T, bias=False)
    # entrywise 5 sigma Monte Carlo bound for covariance estimates
    sig = np.sqrt((np.outer(np.diag(cov_ref), np.diag(cov_ref)) + cov_ref**2) / n_draws)
    assert np.all(np.abs(emp - cov_ref) <= 5.0 * sig)
    # zero mean within 4 sigma / sqrt(n)
    mean_tol = 4.0 * np.sqrt(np.diag(cov_ref) / n_draws)
    assert np.all(np.abs(draws.mean(axis=0)) <= mean_tol)


def test_sample_variance_chi2_band():
    import scipy.stats

    prior = build_prior(Grid(8), 0.1, 4.0)
    d = prior.grid.d_m
    n_draws = 4000
    rng = np.random.default_rng(11)
    draws = prior.unwhiten(rng.standard_normal((n_draws, d)).T).T
    var_ref = np.diag(dense_cov(prior))
    # Bonferroni-adjusted 99% chi^2 band over all entries
    alpha = 0.01 / d
    lo = scipy.stats.chi2.ppf(alpha / 2, n_draws - 1) / (n_draws - 1)
    hi = scipy.stats.chi2.ppf(1 - alpha / 2, n_draws - 1) / (n_draws - 1)
    ratio = draws.var(axis=0, ddof=1) / var_ref
    assert np.all((ratio >= lo) & (ratio <= hi))


def test_desk_scale_pointwise_variance_magnitude():
    # continuum target is variance 9; the desk grid reproduces the order only
    prior = build_prior(Grid(32), 0.03, 3.33)
    rng = np.random.default_rng(2)
    draws = prior.unwhiten(rng.standard_normal((400, prior.grid.d_m)).T).T
    var = draws.var(axis=0).mean()
    assert 0.1 < var < 30.0


def test_cm_inner_positive_definite():
    prior = build_prior(Grid(6), 0.05, 2.0)
    m = prior.sample(np.random.default_rng(1))
    assert prior.cm_inner(m, m) > 0
    assert prior.cm_inner(np.zeros(36), np.zeros(36)) == 0.0


def test_cm_inner_dense_oracle():
    prior = build_prior(Grid(6), 0.05, 2.0)
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal(36), rng.standard_normal(36)
    precision = np.linalg.inv(dense_cov(prior))
    ref = a @ precision @ b
    got = prior.cm_inner(a, b)
    assert abs(got - ref) <= 1e-8 * abs(ref)
    assert abs(got - prior.cm_inner(b, a)) <= 1e-12 * abs(ref)


def test_cm_inner_operator_identity():
    # a = C_pr (M b) as an operator action => <a, b>_{C^{-1}} = <b, b>_M
    prior = build_prior(Grid(6), 0.05, 2.0)
    b = np.random.default_rng(6).standard_normal(36)
    a = prior.apply_cov(prior.mass_diag * b)
    assert np.isclose(prior.cm_inner(a, b), prior.mass_diag * (b @ b), rtol=1e-10)


def test_cm_inner_dimension_mismatch():
    prior = build_prior(Grid(6), 0.05, 2.0)
    with pytest.raises(ValueError):
        prior.cm_inner(np.zeros(10), np.zeros(36))


def test_whiten_roundtrip():
    prior = build_prior(Grid(6), 0.05, 2.0)
    m = prior.sample(np.random.default_rng(8))
    assert np.allclose(prior.unwhiten(prior.whiten(m)), m, atol=1e-12)


class TestKLE:
    def test_cm_orthonormal_columns(self):
        prior = build_prior(Grid(8), 0.1, 4.0)
        basis = prior.kle_basis(10)
        gram = np.array([[prior.cm_inner(basis.decoder[:, i], basis.decoder[:, j])
                          for j in range(10)] for i in range(10)])
        assert np.max(np.abs(gram - np.eye(10))) < 1e-10

    def test_eigenvalues_match_pencil_oracle(self):
        prior = build_prior(Grid(8), 0.1, 4.0)
        lam, _ = prior.kle_spectrum()
        A = prior.A.toarray()
        M = prior.mass_diag * np.eye(prior.grid.d_m)
        pencil = scipy.linalg.eigh(A, M, eigvals_only=True)
        ref = np.sort(1.0 / pencil**2)[::-1]
        assert np.allclose(lam, ref, rtol=1e-10)
        assert np.all(np.diff(lam) <= 1e-14)

    def test_complete_basis_roundtrip(self):
        prior = build_prior(Grid(6), 0.05, 2.0)
        basis = prior.kle_basis(prior.grid.d_m)
        m = prior.sample(np.random.default_rng(9))
        assert np.allclose(basis.project(m), m, atol=1e-8 * np.linalg.norm(m))

    def test_rank_out_of_range(self):
        prior = build_prior(Grid(6), 0.05, 2.0)
        with pytest.raises(ValueError):
            prior.kle_basis(0)
        with pytest.raises(ValueError):
            prior.kle_basis(37)

    def test_tail_nonincreasing_in_rank(self):
        prior = build_prior(Grid(6), 0.05, 2.0)
        basis = prior.kle_basis(10)
        tails = [basis.truncation_tail(r) for r in range(0, len(basis.full_spectrum) + 1)]
        assert all(b <= a + 1e-15 for a, b in zip(tails, tails[1:]))
        assert tails[-1] == 0.0
