import numpy as np
import pytest

from geomcmc.geometry import (LaplacePack, map_estimate, ppg, ppgnh_eig,
                              surrogate_geometry, whitened_pack)
from geomcmc.models import LinearGaussianToy
from geomcmc.prior import Grid, build_prior
from geomcmc.subspace import estimate_dis
from geomcmc.surrogate import LinearReducedMap


def dense_cov(prior):
    Ainv = np.linalg.inv(prior.A.toarray())
    return Ainv @ (prior.mass_diag * np.eye(prior.grid.d_m)) @ Ainv


class TestPPG:
    def test_zero_at_data(self, toy_problem):
        toy = toy_problem["model"]
        m = toy_problem["prior"].sample(np.random.default_rng(0))
        y_save = toy.y
        try:
            toy.set_data(toy.pto(m), toy.v_n)
            assert np.allclose(ppg(toy, m), 0.0)
        finally:
            toy.set_data(y_save, toy.v_n)

    def test_toy_dense_oracle(self, toy_problem):
        toy, prior = toy_problem["model"], toy_problem["prior"]
        m = prior.sample(np.random.default_rng(1))
        ref = dense_cov(prior) @ toy.B.T @ ((toy.B @ m - toy.y) / toy.v_n)
        assert np.allclose(ppg(toy, m), ref, atol=1e-10 * np.linalg.norm(ref))

    def test_directional_finite_difference(self, dr16):
        model, prior = dr16["model"], dr16["prior"]
        rng = np.random.default_rng(2)
        m = prior.sample(rng)
        g = ppg(model, m)
        for _ in range(3):
            delta = prior.sample(rng)
            h = 1e-5
            fd = (model.misfit(m + h * delta) - model.misfit(m - h * delta)) / (2 * h)
            directional = prior.cm_inner(g, delta)
            assert abs(fd - directional) <= 1e-5 * max(abs(directional), 1e-10)

    def test_appendix_identity_ppg_is_preconditioned_gradient(self, toy_problem):
        # ppg equals C_pr applied (as an operator) to the mass-Riesz gradient
        toy, prior = toy_problem["model"], toy_problem["prior"]
        m = prior.sample(np.random.default_rng(3))
        grad_euclid = toy.B.T @ ((toy.B @ m - toy.y) / toy.v_n)
        grad_mass = grad_euclid / prior.mass_diag
        ref = prior.apply_cov(prior.mass_diag * grad_mass)
        assert np.allclose(ppg(toy, m), ref, atol=1e-8 * np.linalg.norm(ref))


class TestPpgnhEig:
    def test_toy_dense_oracle(self, toy_problem):
        toy, prior = toy_problem["model"], toy_problem["prior"]
        m = prior.sample(np.random.default_rng(4))
        d, decoder = ppgnh_eig(toy, m, k=8)
        S = toy.whitened_forward_matrix()
        ref = np.sort(np.linalg.eigvalsh(S.T @ S))[::-1][:8]
        assert np.allclose(d, ref, atol=1e-8 * max(ref))

    def test_rank_bound(self, toy_problem):
        toy, prior = toy_problem["model"], toy_problem["prior"]
        # rank-deficient observable map: zero out one row of B
        B = toy.B.copy()
        B[-1] = 0.0
        deficient = LinearGaussianToy(prior, B, toy.v_n, y=toy.y)
        d, _ = ppgnh_eig(deficient, prior.sample(np.random.default_rng(5)), k=8)
        assert d[-1] <= 1e-10
        with pytest.raises(ValueError):
            ppgnh_eig(toy, np.zeros(64), k=9)

    def test_eigenvectors_cm_orthonormal(self, dr16):
        model, prior = dr16["model"], dr16["prior"]
        m = prior.sample(np.random.default_rng(6))
        _, decoder = ppgnh_eig(model, m, k=6)
        gram = np.array([[prior.cm_inner(decoder[:, i], decoder[:, j])
                          for j in range(6)] for i in range(6)])
        assert np.max(np.abs(gram - np.eye(6))) < 1e-8


class TestMapEstimate:
    def test_toy_matches_closed_form(self, toy_sharp):
        toy, prior = toy_sharp["model"], toy_sharp["prior"]
        lap = map_estimate(toy, prior)
        mean_ref, _ = toy.posterior_whitened()
        assert lap.converged
        assert np.max(np.abs(lap.z_map - mean_ref)) < 1e-6

    def test_zero_data_gives_prior_mean(self, toy_problem):
        toy, prior = toy_problem["model"], toy_problem["prior"]
        y_save = toy.y
        try:
            toy.set_data(toy.pto(np.zeros(64)), toy.v_n)
            lap = map_estimate(toy, prior)
            assert np.max(np.abs(lap.m_map)) < 1e-8
        finally:
            toy.set_data(y_save, toy.v_n)

    def test_objective_strictly_decreases(self, dr16):
        lap = map_estimate(dr16["model"], dr16["prior"])
        trace = lap.objective_trace
        assert lap.converged
        assert all(b < a for a, b in zip(trace, trace[1:]))
        assert lap.gradient_norm <= 1e-6

    def test_laplace_cov_action_matches_dense_inverse(self, toy_problem):
        toy, prior = toy_problem["model"], toy_problem["prior"]
        lap = map_estimate(toy, prior)
        S = toy.whitened_forward_matrix()
        dense = np.linalg.inv(np.eye(64) + S.T @ S)
        v = np.random.default_rng(7).standard_normal(64)
        assert np.allclose(lap.cov_apply_whitened(v), dense @ v,
                           atol=1e-6 * np.linalg.norm(v))

    def test_sqrt_cov_consistency(self, toy_problem):
        toy, prior = toy_problem["model"], toy_problem["prior"]
        lap = map_estimate(toy, prior)
        v = np.random.default_rng(8).standard_normal(64)
        half = lap.sqrt_cov_apply_whitened(lap.sqrt_cov_apply_whitened(v))
        assert np.allclose(half, lap.cov_apply_whitened(v), atol=1e-10)

    def test_save_load_roundtrip(self, toy_problem, tmp_path):
        lap = map_estimate(toy_problem["model"], toy_problem["prior"])
        lap.save(tmp_path / "lap")
        loaded = LaplacePack.load(tmp_path / "lap")
        assert np.array_equal(loaded.z_map, lap.z_map)
        assert loaded.converged == lap.converged


class TestSurrogateGeometry:
    def test_exact_surrogate_matches_dense_reduced_geometry(self, toy_problem):
        toy, prior = toy_problem["model"], toy_problem["prior"]
        basis = estimate_dis(toy, prior, n_dis=2, r=8, rng=np.random.default_rng(9))
        exact = LinearReducedMap.from_toy(toy, basis)
        y_proj = toy.y / np.sqrt(toy.v_n)
        m_r = np.random.default_rng(10).standard_normal(8)
        pack = surrogate_geometry(exact, m_r, y_proj)
        J = exact.J0
        res = J @ m_r - y_proj
        assert np.isclose(pack.misfit, 0.5 * res @ res, rtol=1e-8)
        assert np.allclose(pack.g_r, J.T @ res, atol=1e-8 * np.linalg.norm(pack.g_r))
        H = J.T @ J
        recon = pack.rotation @ np.diag(pack.eigenvalues) @ pack.rotation.T
        assert np.max(np.abs(recon - H)) <= 1e-8 * np.linalg.norm(H)

    def test_perfect_prediction_zeroes_pack(self):
        lin = LinearReducedMap(np.eye(3), np.zeros(3))
        y_proj = np.array([0.5, -1.0, 2.0])
        pack = surrogate_geometry(lin, y_proj, y_proj)  # f(x) = x = y_proj
        assert pack.misfit == 0.0
        assert np.allclose(pack.g_r, 0.0)

    def test_eigendecomposition_contracts(self, toy_problem):
        toy, prior = toy_problem["model"], toy_problem["prior"]
        basis = estimate_dis(toy, prior, n_dis=2, r=8, rng=np.random.default_rng(11))
        exact = LinearReducedMap.from_toy(toy, basis)
        pack = surrogate_geometry(exact, np.zeros(8), toy.y / np.sqrt(toy.v_n))
        assert np.max(np.abs(pack.rotation.T @ pack.rotation - np.eye(8))) < 1e-10
        assert np.all(pack.eigenvalues >= -1e-10)
        assert np.all(np.diff(pack.eigenvalues) <= 1e-12)

    def test_dimension_mismatch(self):
        lin = LinearReducedMap(np.eye(3), np.zeros(3))
        with pytest.raises(ValueError):
            surrogate_geometry(lin, np.zeros(3), np.zeros(4))


def test_whitened_pack_consistency(dr16):
    model, prior = dr16["model"], dr16["prior"]
    state = model.solve_forward(prior.sample(np.random.default_rng(12)))
    W, d, g = whitened_pack(model, state)
    # gradient reproduces the whitened misfit gradient
    assert np.allclose(g, model.whitened_gradient(state), atol=1e-10)
    # W columns orthonormal, d nonincreasing
    assert np.max(np.abs(W.T @ W - np.eye(W.shape[1]))) < 1e-10
    assert np.all(np.diff(d) <= 1e-10)
