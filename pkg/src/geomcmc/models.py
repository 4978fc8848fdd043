"""Forward models mapping a parameter field to a vector of observables.

Two models share one interface:

* ``DiffusionReactionModel`` -- steady nonlinear diffusion-reaction PDE
  -div(exp(m) grad u) + u^3 = 0 on the unit square, u=0 bottom, u=1 top,
  zero-flux left/right, discretized with 5-point finite differences on the
  interior grid. The Dirichlet data is lifted (u = u0 + y) and the homogeneous
  system is solved for u0 by a damped Newton method. Directional (jvp) and
  adjoint (vjp) sensitivities reuse the factorization of dR/du cached at the
  solution; observables are bilinear point values at 25 frozen interior
  locations.
* ``LinearGaussianToy`` -- G(m) = B m with a closed-form Gaussian posterior,
  used as an exactness oracle for samplers and reduced-basis code.

Adjoint convention: ``vjp`` returns the precision-weighted representer
C_pr DG^T C_n^{-1} dy, so that for all directions

    <jvp(m, dm), dy>_{C_n^{-1}} = <dm, vjp(m, dy)>_{C_pr^{-1}}.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .prior import GaussianPrior, Grid

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Nonlinear solve failed; carries the last residual norm."""

    def __init__(self, message: str, residual_norm: float = np.nan):
        super().__init__(message)
        self.residual_norm = residual_norm


def bilinear_interpolate(full_field: np.ndarray, points: np.ndarray, h: float) -> np.ndarray:
    """Bilinear interpolation of a (n+2)x(n+2) nodal field at points in [0,1]^2."""
    n2 = full_field.shape[0]
    vals = np.empty(len(points))
    for j, (x, y) in enumerate(points):
        gx, gy = x / h, y / h
        i0 = min(int(np.floor(gx)), n2 - 2)
        j0 = min(int(np.floor(gy)), n2 - 2)
        tx, ty = gx - i0, gy - j0
        vals[j] = (
            (1 - tx) * (1 - ty) * full_field[j0, i0]
            + tx * (1 - ty) * full_field[j0, i0 + 1]
            + (1 - tx) * ty * full_field[j0 + 1, i0]
            + tx * ty * full_field[j0 + 1, i0 + 1]
        )
    return vals


class ForwardModel:
    """Shared data/misfit plumbing; concrete models implement the map and sensitivities."""

    d_y: int
    grid: Grid
    prior: GaussianPrior

    def __init__(self):
        self.y = None
        self.v_n = None
        self.n_solves = 0
        self.n_backsubs = 0

    def set_data(self, y: np.ndarray, v_n: float):
        if v_n <= 0:
            raise ValueError(f"noise variance must be positive, got {v_n}")
        self.y = np.asarray(y, dtype=float)
        self.v_n = float(v_n)

    def _require_data(self):
        if self.y is None:
            raise RuntimeError("no data attached; call set_data or synthesize_data first")

    def pto(self, m: np.ndarray) -> np.ndarray:
        """Parameter-to-observable map: solve then observe."""
        return self.observe(self.solve_forward(m))

    def misfit(self, m_or_state) -> float:
        """0.5 * ||y - G(m)||^2 weighted by the inverse noise covariance."""
        self._require_data()
        state = m_or_state if isinstance(m_or_state, ModelState) else self.solve_forward(m_or_state)
        res = self.y - self.observe(state)
        return 0.5 * float(res @ res) / self.v_n

    # sensitivities against whitened prior coordinates -----------------------

    def whitened_jacobian(self, state) -> np.ndarray:
        """S = C_n^{-1/2} DG A^{-1} M^{1/2}, the Jacobian in whitened coordinates."""
        self._require_data()
        rows = self.jacobian_rows(state)  # DG, d_y x d_m
        s = self.prior.solve_A(rows.T).T * self.prior.grid.h
        return s / np.sqrt(self.v_n)

    def whitened_gradient(self, state) -> np.ndarray:
        """Misfit gradient in whitened coordinates, h * A^{-1} DG^T C_n^{-1} (G - y)."""
        self._require_data()
        res = self.observe(state) - self.y
        raw = self.vjp_raw(state, res)
        return self.prior.solve_A(raw) * self.prior.grid.h

    # hooks -------------------------------------------------------------------

    def solve_forward(self, m: np.ndarray):
        raise NotImplementedError

    def observe(self, state) -> np.ndarray:
        raise NotImplementedError

    def jvp(self, state, dm: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp_raw(self, state, dy: np.ndarray) -> np.ndarray:
        """Euclidean representer DG^T C_n^{-1} dy (before prior preconditioning)."""
        raise NotImplementedError

    def vjp(self, state, dy: np.ndarray) -> np.ndarray:
        """Precision-weighted adjoint action C_pr DG^T C_n^{-1} dy."""
        return self.prior.apply_cov(self.vjp_raw(state, dy))

    def jacobian_rows(self, state) -> np.ndarray:
        raise NotImplementedError


class ModelState:
    """Solved forward state plus factorizations cached for sensitivity reuse."""

    def __init__(self, m, u0=None, lu=None, d_res_d_m=None, residual_history=None):
        self.m = m
        self.u0 = u0
        self.lu = lu
        self.d_res_d_m = d_res_d_m
        self.residual_history = residual_history or []


class DiffusionReactionModel(ForwardModel):
    """Nonlinear diffusion-reaction PDE on the interior grid of the unit square.

    Parameters
    ----------
    grid : Grid
        Interior n x n layout shared with the parameter field.
    prior : GaussianPrior
        Supplies the precision weighting for adjoint representers.
    obs_seed : int
        Seed freezing the 25 observation points, uniform over [0.1, 0.9]^2.
    newton_tol, newton_max_iter : float, int
        Termination of the damped Newton iteration on the residual norm.
    reaction : bool
        Debug switch; False removes the cubic term, making the PDE linear.
    """

    def __init__(self, grid: Grid, prior: GaussianPrior, obs_seed: int = 0,
                 d_y: int = 25, newton_tol: float = 1e-10, newton_max_iter: int = 50,
                 reaction: bool = True):
        super().__init__()
        self.grid = grid
        self.prior = prior
        self.d_y = d_y
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter
        self.reaction = reaction
        rng = np.random.default_rng(obs_seed)
        self.obs_points = rng.uniform(0.1, 0.9, size=(d_y, 2))
        self._obs_matrix, self._obs_offset = self._build_observation_operator()
        n = grid.n
        self._ylift = ((np.arange(n)[:, None] + 1.0) * grid.h) * np.ones((1, n))

    # -- observation ---------------------------------------------------------

    def _build_observation_operator(self):
        """Dense d_y x d_m matrix + offset: bilinear point values of u = u0 + y.

        The full (n+2)^2 nodal field is u0 extended by Dirichlet rows (u=0
        bottom, u=1 top) and zero-gradient copies on the left/right columns.
        """
        n, h = self.grid.n, self.grid.h
        O = np.zeros((self.d_y, self.grid.d_m))
        offset = np.zeros(self.d_y)
        for j, (x, y) in enumerate(self.obs_points):
            gx, gy = x / h, y / h
            i0 = min(int(np.floor(gx)), n)
            j0 = min(int(np.floor(gy)), n)
            tx, ty = gx - i0, gy - j0
            for (ii, jj, w) in (
                (i0, j0, (1 - tx) * (1 - ty)),
                (i0 + 1, j0, tx * (1 - ty)),
                (i0, j0 + 1, (1 - tx) * ty),
                (i0 + 1, j0 + 1, tx * ty),
            ):
                if jj == 0:
                    continue  # bottom Dirichlet, u = 0
                if jj == n + 1:
                    offset[j] += w  # top Dirichlet, u = 1
                    continue
                offset[j] += w * jj * h  # lifting u = u0 + y
                ix = min(max(ii - 1, 0), n - 1)  # Neumann copy on side columns
                O[j, (jj - 1) * n + ix] += w
        return O, offset

    def observe(self, state: ModelState) -> np.ndarray:
        return self._obs_matrix @ state.u0 + self._obs_offset

    # -- residual and Jacobians ------------------------------------------------

    def _face_conductivities(self, m: np.ndarray):
        n = self.grid.n
        kappa = np.exp(m).reshape(n, n)
        kv = np.empty((n + 1, n))  # vertical-flux faces, level f between rows f-1, f
        kv[0] = kappa[0]
        kv[n] = kappa[n - 1]
        kv[1:n] = 0.5 * (kappa[:-1] + kappa[1:])
        kh = 0.5 * (kappa[:, :-1] + kappa[:, 1:])  # interior horizontal-flux faces
        return kappa, kv, kh

    def _residual(self, u0_flat: np.ndarray, kv: np.ndarray, kh: np.ndarray) -> np.ndarray:
        n, h = self.grid.n, self.grid.h
        u = u0_flat.reshape(n, n)
        du_v = np.zeros((n + 1, n))  # (u_above - u_below) per vertical-flux face
        du_v[0] = u[0]
        du_v[n] = -u[n - 1]
        du_v[1:n] = u[1:] - u[:-1]
        fv = kv * (du_v / h + 1.0)
        r = -(fv[1:] - fv[:-1]) / h
        fh = kh * (u[:, 1:] - u[:, :-1]) / h
        r[:, :-1] -= fh / h
        r[:, 1:] += fh / h
        if self.reaction:
            r = r + (u + self._ylift) ** 3
        return r.ravel()

    def _jacobian_u(self, u0_flat: np.ndarray, kv: np.ndarray, kh: np.ndarray) -> sp.csc_matrix:
        n, h = self.grid.n, self.grid.h
        inv_h2 = 1.0 / (h * h)
        u = u0_flat.reshape(n, n)
        diag = (kv[:-1] + kv[1:]) * inv_h2
        diag[:, :-1] += kh * inv_h2
        diag[:, 1:] += kh * inv_h2
        if self.reaction:
            diag = diag + 3.0 * (u + self._ylift) ** 2
        idx = np.arange(n * n).reshape(n, n)
        rows = [idx.ravel()]
        cols = [idx.ravel()]
        vals = [diag.ravel()]
        # vertical neighbors (interior face levels 1..n-1)
        up, down = idx[1:].ravel(), idx[:-1].ravel()
        w = (kv[1:n] * inv_h2).ravel()
        rows += [down, up]
        cols += [up, down]
        vals += [-w, -w]
        # horizontal neighbors
        left, right = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        w = (kh * inv_h2).ravel()
        rows += [left, right]
        cols += [right, left]
        vals += [-w, -w]
        J = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n * n, n * n),
        )
        return J.tocsc()

    def _jacobian_m(self, u0_flat: np.ndarray, kappa: np.ndarray) -> sp.csr_matrix:
        """dR/dm, through the nodal kappa = exp(m) entering the face averages."""
        n, h = self.grid.n, self.grid.h
        u = u0_flat.reshape(n, n)
        idx = np.arange(n * n).reshape(n, n)
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(v.ravel())

        # vertical faces: dR/dkappa_face, face level f in 0..n
        du_v = np.zeros((n + 1, n))
        du_v[0] = u[0]
        du_v[n] = -u[n - 1]
        du_v[1:n] = u[1:] - u[:-1]
        dflux = du_v / h + 1.0
        # node above face f (row f, f<n): south face, +dflux/h; node below (row f-1): north, -dflux/h
        # boundary faces touch a single parameter node with weight kappa; interior faces split.
        add(idx[0], idx[0], (dflux[0] / h) * kappa[0])                     # f=0, south of row 0
        add(idx[n - 1], idx[n - 1], (-dflux[n] / h) * kappa[n - 1])       # f=n, north of row n-1
        dflux_int = dflux[1:n] / h
        f_rows = np.arange(1, n)
        above, below = idx[f_rows], idx[f_rows - 1]
        k_lo, k_hi = 0.5 * kappa[f_rows - 1], 0.5 * kappa[f_rows]
        add(above, idx[f_rows - 1], dflux_int * k_lo)
        add(above, idx[f_rows], dflux_int * k_hi)
        add(below, idx[f_rows - 1], -dflux_int * k_lo)
        add(below, idx[f_rows], -dflux_int * k_hi)
        # horizontal faces g in 1..n-1 between columns g-1, g
        dflux_h = (u[:, 1:] - u[:, :-1]) / (h * h)
        west_node, east_node = idx[:, 1:], idx[:, :-1]
        k_l, k_r = 0.5 * kappa[:, :-1], 0.5 * kappa[:, 1:]
        add(west_node, idx[:, :-1], dflux_h * k_l)
        add(west_node, idx[:, 1:], dflux_h * k_r)
        add(east_node, idx[:, :-1], -dflux_h * k_l)
        add(east_node, idx[:, 1:], -dflux_h * k_r)
        J = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n * n, n * n),
        )
        return J.tocsr()

    # -- forward solve ----------------------------------------------------------

    def solve_forward(self, m: np.ndarray) -> ModelState:
        m = np.asarray(m, dtype=float)
        if not np.all(np.isfinite(m)):
            raise SolverError("non-finite parameter vector")
        kappa, kv, kh = self._face_conductivities(m)
        u0 = np.zeros(self.grid.d_m)
        res = self._residual(u0, kv, kh)
        rnorm = np.linalg.norm(res)
        history = [rnorm]
        for it in range(self.newton_max_iter + 1):
            if rnorm <= self.newton_tol:
                break
            if it == self.newton_max_iter:
                raise SolverError(
                    f"Newton did not converge in {self.newton_max_iter} iterations "
                    f"(residual {rnorm:.3e})", rnorm)
            lu = spla.splu(self._jacobian_u(u0, kv, kh))
            step = -lu.solve(res)
            alpha = 1.0
            for _ in range(20):
                trial = u0 + alpha * step
                trial_res = self._residual(trial, kv, kh)
                trial_norm = np.linalg.norm(trial_res)
                if trial_norm <= (1.0 - 1e-4 * alpha) * rnorm:
                    break
                alpha *= 0.5
            else:
                raise SolverError("line search stalled", rnorm)
            u0, res, rnorm = trial, trial_res, trial_norm
            history.append(rnorm)
        if len(history) >= 3 and history[-2] < 1e-3:
            log.debug("newton tail: r_k=%.3e r_k+1=%.3e", history[-2], history[-1])
        # refresh the factorization at the solution for sensitivity reuse
        lu = spla.splu(self._jacobian_u(u0, kv, kh))
        self.n_solves += 1
        return ModelState(m=m, u0=u0, lu=lu,
                          d_res_d_m=self._jacobian_m(u0, kappa),
                          residual_history=history)

    # -- sensitivities ------------------------------------------------------------

    def jvp(self, state: ModelState, dm: np.ndarray) -> np.ndarray:
        if state.lu is None:
            raise RuntimeError("state has no cached factorization")
        du = -state.lu.solve(state.d_res_d_m @ np.asarray(dm, dtype=float))
        self.n_backsubs += 1
        return self._obs_matrix @ du

    def vjp_raw(self, state: ModelState, dy: np.ndarray) -> np.ndarray:
        self._require_data()
        w = self._obs_matrix.T @ (np.asarray(dy, dtype=float) / self.v_n)
        p = state.lu.solve(w, trans="T")
        self.n_backsubs += 1
        return -(state.d_res_d_m.T @ p)

    def jacobian_rows(self, state: ModelState) -> np.ndarray:
        """Full Jacobian DG (d_y x d_m) assembled by adjoint back-substitutions."""
        p = state.lu.solve(self._obs_matrix.T, trans="T")
        self.n_backsubs += self.d_y
        return -(state.d_res_d_m.T @ p).T


class LinearGaussianToy(ForwardModel):
    """Exactly linear map G(m) = B m with closed-form Gaussian posterior."""

    def __init__(self, prior: GaussianPrior, B: np.ndarray, v_n: float,
                 y: np.ndarray | None = None):
        super().__init__()
        self.prior = prior
        self.grid = prior.grid
        self.B = np.asarray(B, dtype=float)
        self.d_y = self.B.shape[0]
        if self.B.shape[1] != self.grid.d_m:
            raise ValueError("B column count must match grid d_m")
        if y is not None:
            self.set_data(np.asarray(y, dtype=float), v_n)
        else:
            self.v_n = float(v_n)
        # B acting on whitened coordinates: G = B_white z
        self.B_white = self.B @ (prior.solve_A(np.eye(self.grid.d_m)) * self.grid.h)

    @classmethod
    def random(cls, prior: GaussianPrior, d_y: int, v_n: float, seed: int = 0,
               scale: float = 1.0):
        rng = np.random.default_rng(seed)
        B = scale * rng.standard_normal((d_y, prior.grid.d_m)) / np.sqrt(prior.grid.d_m)
        return cls(prior, B, v_n)

    def solve_forward(self, m: np.ndarray) -> ModelState:
        self.n_solves += 1
        return ModelState(m=np.asarray(m, dtype=float))

    def observe(self, state: ModelState) -> np.ndarray:
        return self.B @ state.m

    def jvp(self, state: ModelState, dm: np.ndarray) -> np.ndarray:
        self.n_backsubs += 1
        return self.B @ dm

    def vjp_raw(self, state: ModelState, dy: np.ndarray) -> np.ndarray:
        self._require_data()
        self.n_backsubs += 1
        return self.B.T @ (np.asarray(dy, dtype=float) / self.v_n)

    def jacobian_rows(self, state: ModelState) -> np.ndarray:
        self.n_backsubs += self.d_y
        return self.B.copy()

    def whitened_jacobian(self, state: ModelState) -> np.ndarray:
        self._require_data()
        self.n_backsubs += self.d_y
        return self.B_white / np.sqrt(self.v_n)

    # closed-form posterior, whitened coordinates --------------------------------

    def whitened_forward_matrix(self) -> np.ndarray:
        """S with G(m)/sqrt(v_n) = S z for whitened z."""
        self._require_data()
        return self.B_white / np.sqrt(self.v_n)

    def posterior_whitened(self) -> tuple[np.ndarray, np.ndarray]:
        """(mean, covariance) of the posterior in whitened coordinates."""
        self._require_data()
        S = self.whitened_forward_matrix()
        cov = np.linalg.inv(np.eye(self.grid.d_m) + S.T @ S)
        mean = cov @ (S.T @ (self.y / np.sqrt(self.v_n)))
        return mean, cov

    def posterior_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and marginal variances in parameter coordinates."""
        mean_z, cov_z = self.posterior_whitened()
        U = self.prior.solve_A(np.eye(self.grid.d_m)) * self.grid.h
        mean = U @ mean_z
        var = np.einsum("ij,jk,ik->i", U, cov_z, U)
        return mean, var


def reduced_jacobian(model: ForwardModel, state: ModelState, basis,
                     by: str = "auto") -> np.ndarray:
    """Reduced Jacobian C_n^{-1/2} DG(m) Psi_r, assembled by rows or columns.

    Row assembly runs d_y adjoint back-substitutions; column assembly runs r
    tangent solves. "auto" picks the cheaper direction; both agree to solver
    precision.
    """
    scale = np.sqrt(model.v_n)
    r = basis.decoder.shape[1]
    if by == "auto":
        by = "columns" if r <= model.d_y else "rows"
    if by == "rows":
        return (model.jacobian_rows(state) @ basis.decoder) / scale
    if by == "columns":
        cols = [model.jvp(state, basis.decoder[:, j]) / scale for j in range(r)]
        return np.column_stack(cols)
    raise ValueError(f"assembly direction must be 'rows' or 'columns', got {by!r}")


def synthesize_data(model: ForwardModel, m_true: np.ndarray, noise_pct: float,
                    rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Observable at m_true corrupted with white noise scaled to the signal range.

    v_n = (noise_pct * max|G(m_true)|)^2; the pair (y, v_n) is returned and
    attached to the model.
    """
    if noise_pct <= 0:
        raise ValueError("noise_pct must be positive")
    g = model.pto(np.asarray(m_true, dtype=float))
    v_n = (noise_pct * float(np.max(np.abs(g)))) ** 2
    y = g + np.sqrt(v_n) * rng.standard_normal(len(g))
    model.set_data(y, v_n)
    return y, v_n


def two_level_truth(grid: Grid, seed: int, lo: float = -1.0, hi: float = 2.0) -> np.ndarray:
    """Seeded piecewise-constant field: value hi inside a random disk, lo outside."""
    rng = np.random.default_rng(seed)
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    radius = rng.uniform(0.15, 0.3)
    x, y = grid.node_coords()
    inside = (x - cx) ** 2 + (y - cy) ** 2 <= radius**2
    return np.where(inside, hi, lo)
