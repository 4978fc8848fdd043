"""Discretized Gaussian prior with squared-inverse-elliptic covariance.

The prior is N(0, C) with C realized through an SPD operator A built from a
5-point finite-difference Laplacian on the interior nodes of the unit square
(pure Neumann ghost-point closure) plus a mass term:

    A = h^2 * (delta * I - gamma * Lap_h),   M = h^2 * I (lumped mass),
    C  = A^{-1} M A^{-1}                      (coefficient covariance),
    samples:  m = A^{-1} M^{1/2} xi,  xi ~ N(0, I).

All weighted-inner-product quantities use M = h^2 I explicitly so results are
stable under grid refinement. The precision-weighted ("CM") inner product is

    <a, b>_C^{-1} = a^T A M^{-1} A b.

Whitened coordinates z = M^{-1/2} A m turn the prior into N(0, I); the rest of
the package does most of its linear algebra there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass(frozen=True)
class Grid:
    """Interior n x n node layout of the unit square, spacing h = 1/(n+1)."""

    n: int

    def __post_init__(self):
        if self.n < 4:
            raise ValueError(f"grid needs n >= 4 points per side, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def d_m(self) -> int:
        return self.n * self.n

    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinates of the interior nodes, flattened row-major in y."""
        ticks = self.h * np.arange(1, self.n + 1)
        yy, xx = np.meshgrid(ticks, ticks, indexing="ij")
        return xx.ravel(), yy.ravel()


def neumann_laplacian(n: int) -> sp.csr_matrix:
    """Graph Laplacian of the n x n grid: h^2 * (-Lap_h) with Neumann closure.

    Ghost-point reflection at the boundary drops the corresponding stencil
    pair, so each row has (number of present neighbors) on the diagonal.
    """
    main = np.zeros(n * n)
    rows, cols, vals = [], [], []
    for iy in range(n):
        for ix in range(n):
            k = iy * n + ix
            for jy, jx in ((iy - 1, ix), (iy + 1, ix), (iy, ix - 1), (iy, ix + 1)):
                if 0 <= jy < n and 0 <= jx < n:
                    main[k] += 1.0
                    rows.append(k)
                    cols.append(jy * n + jx)
                    vals.append(-1.0)
    lap = sp.coo_matrix((vals, (rows, cols)), shape=(n * n, n * n))
    return (lap + sp.diags(main)).tocsr()


class GaussianPrior:
    """Gaussian prior N(0, A^{-1} M A^{-1}) on a Grid; immutable after build.

    Attributes
    ----------
    grid : Grid
    gamma, delta : float
        Diffusion and mass weights of the elliptic operator.
    A : scipy.sparse.csr_matrix
        SPD operator h^2*(delta*I - gamma*Lap_h); factorized once at build.
    n_draws : int
        Counter of prior samples drawn (used by chain cost accounting).
    """

    def __init__(self, grid: Grid, gamma: float, delta: float):
        if gamma < 0 or delta <= 0:
            raise ValueError(
                f"prior coefficients must satisfy gamma >= 0, delta > 0; "
                f"got gamma={gamma}, delta={delta}"
            )
        self.grid = grid
        self.gamma = float(gamma)
        self.delta = float(delta)
        h2 = grid.h * grid.h
        A = (self.delta * h2) * sp.identity(grid.d_m, format="csr")
        if self.gamma > 0.0:
            A = A + self.gamma * neumann_laplacian(grid.n)
        # symmetrize exactly so A is symmetric as stored
        A = (A + A.T) * 0.5
        self.A = A.tocsr()
        self._solver = spla.splu(self.A.tocsc())
        self.mass_diag = h2
        self.n_draws = 0

    # -- basic solves ------------------------------------------------------

    def solve_A(self, v: np.ndarray) -> np.ndarray:
        """Apply A^{-1}; v may be a vector or a matrix of column right-hand sides."""
        if v.ndim == 1:
            return self._solver.solve(v)
        return self._solver.solve(np.asarray(v, dtype=float))

    def apply_cov(self, v: np.ndarray) -> np.ndarray:
        """Coefficient covariance action A^{-1} (h^2 *) A^{-1} v = E[m m^T] v."""
        return self.solve_A(self.mass_diag * self.solve_A(v))

    def cm_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Precision-weighted inner product a^T A M^{-1} A b."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape != (self.grid.d_m,) or b.shape != (self.grid.d_m,):
            raise ValueError(
                f"cm_inner expects two length-{self.grid.d_m} vectors, "
                f"got {a.shape} and {b.shape}"
            )
        return float((self.A @ a) @ (self.A @ b)) / self.mass_diag

    def cm_norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.cm_inner(a, a), 0.0)))

    # -- whitened coordinates ---------------------------------------------

    def whiten(self, m: np.ndarray) -> np.ndarray:
        """z = M^{-1/2} A m; prior draws become N(0, I) in z."""
        return (self.A @ m) / self.grid.h

    def unwhiten(self, z: np.ndarray) -> np.ndarray:
        """m = A^{-1} M^{1/2} z, inverse of whiten."""
        if z.ndim == 1:
            return self.solve_A(self.grid.h * z)
        return self.solve_A(self.grid.h * np.asarray(z, dtype=float))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Draw m = A^{-1} M^{1/2} xi with xi standard normal."""
        return self.unwhiten(self.sample_whitened(rng))

    def sample_whitened(self, rng: np.random.Generator) -> np.ndarray:
        """Prior draw in whitened coordinates (standard normal); counted."""
        self.n_draws += 1
        return rng.standard_normal(self.grid.d_m)

    # -- Karhunen-Loeve ----------------------------------------------------

    def kle_spectrum(self) -> tuple[np.ndarray, np.ndarray]:
        """Full covariance spectrum (lam, eta): mass-orthonormal eigenpairs.

        Pencil eigenvalues sigma of (A, M) give lam = sigma^{-2}, sorted
        decreasing; columns of eta are M-orthonormal.
        """
        dense = self.A.toarray() / self.mass_diag
        sigma, q = scipy.linalg.eigh(dense)
        lam = 1.0 / sigma**2
        order = np.argsort(lam)[::-1]
        eta = q[:, order] / self.grid.h
        return lam[order], eta

    def kle_basis(self, r: int):
        """Rank-r KLE reduced basis psi_j = sqrt(lam_j) eta_j (CM-orthonormal)."""
        from .subspace import ReducedBasis

        if not 1 <= r <= self.grid.d_m:
            raise ValueError(f"KLE rank must be in [1, {self.grid.d_m}], got {r}")
        lam, eta = self.kle_spectrum()
        decoder = eta[:, :r] * np.sqrt(lam[:r])
        return ReducedBasis(
            decoder=decoder,
            eigenvalues=lam[:r],
            kind="kle",
            prior=self,
            full_spectrum=lam,
        )


def build_prior(grid: Grid, gamma: float, delta: float) -> GaussianPrior:
    """Assemble and factorize the prior operator for the given grid."""
    return GaussianPrior(grid, gamma, delta)
