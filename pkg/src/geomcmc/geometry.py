"""Posterior local geometry: misfit gradients, Gauss-Newton eigenpairs, MAP.

Two coordinate systems appear throughout:

* parameter coordinates m, where the misfit gradient representer is
  preconditioned by the prior covariance (``ppg``);
* whitened coordinates z = M^{-1/2} A m, where the prior is N(0, I) and the
  misfit Gauss-Newton Hessian is S^T S for the whitened Jacobian
  S = C_n^{-1/2} DG A^{-1} M^{1/2}. Samplers and the MAP solver work here.

``surrogate_geometry`` evaluates the same quantities in the r-dimensional
reduced space through any surrogate exposing ``evaluate(x) -> (f, J)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ForwardModel, ModelState, SolverError
from .prior import GaussianPrior

log = logging.getLogger(__name__)


def ppg(model: ForwardModel, m: np.ndarray, state: ModelState | None = None) -> np.ndarray:
    """Prior-preconditioned misfit gradient C_pr DG^T C_n^{-1} (G(m) - y)."""
    state = state or model.solve_forward(m)
    residual = model.observe(state) - model.y
    return model.vjp(state, residual)


def whitened_pack(model: ForwardModel, state: ModelState):
    """(W, d, g) at a solved state: rank-d_y eigenpairs of S^T S plus gradient.

    Columns of W are orthonormal in whitened coordinates, d nonincreasing and
    >= 0, and g = S^T (G - y)/sqrt(v_n) is the whitened misfit gradient.
    """
    S = model.whitened_jacobian(state)
    _, svals, vt = np.linalg.svd(S, full_matrices=False)
    W = vt.T
    d = svals**2
    rhat = (model.observe(state) - model.y) / np.sqrt(model.v_n)
    g = S.T @ rhat
    return W, d, g


def ppgnh_eig(model: ForwardModel, m: np.ndarray, k: int,
              state: ModelState | None = None):
    """Top-k eigenpairs of the preconditioned Gauss-Newton Hessian at m.

    Returns (eigenvalues, decoder) with eigenvalues nonincreasing and decoder
    columns orthonormal in the precision inner product. k may not exceed d_y
    (the Hessian has rank at most d_y).
    """
    if k > model.d_y:
        raise ValueError(f"rank {k} exceeds the Hessian rank bound d_y={model.d_y}")
    state = state or model.solve_forward(m)
    W, d, _ = whitened_pack(model, state)
    decoder = np.column_stack([model.prior.unwhiten(W[:, j]) for j in range(k)])
    return d[:k], decoder


@dataclass
class GeometryPack:
    """Local geometry of the reduced misfit at one reduced position."""

    misfit: float          # reduced data misfit value
    g_r: np.ndarray        # reduced misfit gradient, length r
    rotation: np.ndarray   # r x r orthogonal eigenvector matrix
    eigenvalues: np.ndarray  # length r, nonincreasing, >= 0 up to roundoff
    f: np.ndarray          # surrogate observable prediction (kept for reuse)

    @property
    def r(self) -> int:
        return len(self.g_r)


def surrogate_geometry(surrogate, m_r: np.ndarray, y_proj: np.ndarray) -> GeometryPack:
    """Misfit, gradient, and Gauss-Newton eigendecomposition from a surrogate.

    One surrogate evaluation (value + Jacobian) and one r x r symmetric
    eigensolve. The gradient follows the G - y residual convention, matching
    the finite-difference direction of the reduced misfit.
    """
    m_r = np.asarray(m_r, dtype=float)
    f, J = surrogate.evaluate(m_r)
    if f.shape != y_proj.shape:
        raise ValueError(f"surrogate output {f.shape} does not match data {y_proj.shape}")
    res = f - y_proj
    misfit = 0.5 * float(res @ res)
    g_r = J.T @ res
    H = J.T @ J
    d, P = np.linalg.eigh(H)
    order = np.argsort(d)[::-1]
    return GeometryPack(misfit=misfit, g_r=g_r, rotation=P[:, order],
                        eigenvalues=d[order], f=f)


@dataclass
class LaplacePack:
    """MAP point and rank-k Gauss-Newton eigenpairs, whitened coordinates."""

    m_map: np.ndarray        # parameter coordinates
    z_map: np.ndarray        # whitened coordinates
    W: np.ndarray            # d_m x k eigenvectors (orthonormal)
    d: np.ndarray            # k eigenvalues, nonincreasing
    converged: bool
    gradient_norm: float
    iterations: int
    objective_trace: list = None

    def cov_apply_whitened(self, v: np.ndarray) -> np.ndarray:
        """(I + H)^{-1} v through the rank-k eigenpairs."""
        return v - self.W @ ((self.d / (self.d + 1.0)) * (self.W.T @ v))

    def sqrt_cov_apply_whitened(self, v: np.ndarray) -> np.ndarray:
        """(I + H)^{-1/2} v; maps white noise to Laplace-covariance draws."""
        return v + self.W @ ((1.0 / np.sqrt(self.d + 1.0) - 1.0) * (self.W.T @ v))

    def save(self, path: str | Path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "m_map.npy", self.m_map)
        np.save(path / "z_map.npy", self.z_map)
        np.save(path / "eigvecs.npy", self.W)
        np.save(path / "eigvals.npy", self.d)
        (path / "manifest.json").write_text(json.dumps({
            "converged": self.converged,
            "gradient_norm": self.gradient_norm,
            "iterations": self.iterations,
        }, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "LaplacePack":
        path = Path(path)
        info = json.loads((path / "manifest.json").read_text())
        return cls(np.load(path / "m_map.npy"), np.load(path / "z_map.npy"),
                   np.load(path / "eigvecs.npy"), np.load(path / "eigvals.npy"),
                   info["converged"], info["gradient_norm"], info["iterations"])


def map_estimate(model: ForwardModel, prior: GaussianPrior,
                 start: np.ndarray | None = None, grad_tol: float = 1e-6,
                 max_iter: int = 100) -> LaplacePack:
    """Gauss-Newton minimization of misfit + 0.5*||m||^2_{C^{-1}}.

    Works in whitened coordinates where the regularizer is 0.5*||z||^2; each
    iteration applies the exact (I + S^T S)^{-1} Newton step through the
    rank-d_y eigenpairs, globalized by Armijo backtracking on the objective.
    Returns the best iterate flagged unconverged if the gradient tolerance is
    not met.
    """
    z = prior.whiten(np.asarray(start, dtype=float)) if start is not None \
        else np.zeros(prior.grid.d_m)
    state = model.solve_forward(prior.unwhiten(z))
    objective = model.misfit(state) + 0.5 * float(z @ z)
    trace = [objective]
    W = d = None
    grad_norm = np.inf
    it = 0
    for it in range(max_iter + 1):
        W, d, g = whitened_pack(model, state)
        grad = g + z
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= grad_tol or it == max_iter:
            break
        step = -(grad - W @ ((d / (d + 1.0)) * (W.T @ grad)))
        slope = float(grad @ step)
        alpha = 1.0
        for _ in range(30):
            z_try = z + alpha * step
            try:
                state_try = model.solve_forward(prior.unwhiten(z_try))
            except SolverError:
                alpha *= 0.5
                continue
            obj_try = model.misfit(state_try) + 0.5 * float(z_try @ z_try)
            if obj_try <= objective + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            log.warning("MAP line search stalled at iteration %d", it)
            break
        z, state, objective = z_try, state_try, obj_try
        trace.append(objective)
    converged = grad_norm <= grad_tol
    if not converged:
        log.warning("MAP estimate unconverged: |grad|=%.3e after %d iterations",
                    grad_norm, it)
    return LaplacePack(m_map=prior.unwhiten(z), z_map=z, W=W, d=d,
                       converged=converged, gradient_norm=grad_norm, iterations=it,
                       objective_trace=trace)
