"""Linear encoders/decoders on the precision-weighted parameter space.

A ReducedBasis holds a rank-r decoder whose columns are orthonormal in the
prior-precision inner product. Encoding takes precision-weighted inner
products with the columns; in whitened coordinates (z = M^{-1/2} A m) the
decoder columns become an ordinary orthonormal matrix W and

    encode(m) = W^T z,    decode(x) = A^{-1} M^{1/2} W x.

The derivative-informed basis is the dominant eigenspace of the Monte Carlo
average of the misfit Gauss-Newton Hessian over prior samples, computed here
as an SVD of stacked whitened Jacobians.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .models import ForwardModel, SolverError
from .prior import GaussianPrior

log = logging.getLogger(__name__)


class ReducedBasis:
    """Rank-r reduced basis, columns orthonormal in the precision inner product.

    Attributes
    ----------
    decoder : ndarray, d_m x r
        Columns psi_j in parameter coordinates.
    whitened : ndarray, d_m x r
        The same columns in whitened coordinates (orthonormal).
    eigenvalues : ndarray, length r, nonincreasing
        Spectrum associated with the construction (expected-Hessian for the
        derivative-informed kind, covariance spectrum for KLE).
    kind : str
        "dis" or "kle".
    full_spectrum : ndarray or None
        All computed eigenvalues, used for truncation-tail reporting.
    """

    def __init__(self, decoder: np.ndarray, eigenvalues: np.ndarray, kind: str,
                 prior: GaussianPrior, full_spectrum: np.ndarray | None = None,
                 n_samples_used: int = 0):
        self.decoder = np.asarray(decoder, dtype=float)
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        self.kind = kind
        self.prior = prior
        self.full_spectrum = (np.asarray(full_spectrum, dtype=float)
                              if full_spectrum is not None else self.eigenvalues.copy())
        self.n_samples_used = n_samples_used
        self.whitened = np.column_stack(
            [prior.whiten(self.decoder[:, j]) for j in range(self.r)]
        ) if self.r else np.zeros((prior.grid.d_m, 0))

    @property
    def r(self) -> int:
        return self.decoder.shape[1]

    @property
    def d_m(self) -> int:
        return self.decoder.shape[0]

    def encode(self, m: np.ndarray) -> np.ndarray:
        """Coefficients <m, psi_j> in the precision inner product."""
        m = np.asarray(m, dtype=float)
        if m.shape[-1] != self.d_m:
            raise ValueError(f"encode expects length-{self.d_m} vectors, got {m.shape}")
        return (self.prior.whiten(m.T).T if m.ndim > 1 else self.prior.whiten(m)) @ self.whitened

    def encode_whitened(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.whitened

    def decode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.r:
            raise ValueError(f"decode expects length-{self.r} coefficients, got {x.shape}")
        return self.decoder @ x if x.ndim == 1 else x @ self.decoder.T

    def project(self, m: np.ndarray) -> np.ndarray:
        """decode(encode(m)): idempotent projector onto the span."""
        return self.decode(self.encode(m))

    def truncated(self, r: int) -> "ReducedBasis":
        if not 1 <= r <= self.r:
            raise ValueError(f"truncation rank must be in [1, {self.r}], got {r}")
        return ReducedBasis(self.decoder[:, :r], self.eigenvalues[:r], self.kind,
                            self.prior, self.full_spectrum, self.n_samples_used)

    def truncation_tail(self, r_keep: int) -> float:
        """Sum of stored eigenvalues beyond r_keep (basis truncation error term)."""
        if not 0 <= r_keep <= len(self.full_spectrum):
            raise ValueError(
                f"r_keep must be in [0, {len(self.full_spectrum)}], got {r_keep}")
        return float(np.sum(self.full_spectrum[r_keep:]))

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path, extra_manifest: dict | None = None):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "decoder.npy", self.decoder)
        np.save(path / "eigenvalues.npy", self.eigenvalues)
        np.save(path / "full_spectrum.npy", self.full_spectrum)
        manifest = {
            "kind": self.kind,
            "r": self.r,
            "d_m": self.d_m,
            "n_samples_used": self.n_samples_used,
        }
        manifest.update(extra_manifest or {})
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path, prior: GaussianPrior) -> "ReducedBasis":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        return cls(
            decoder=np.load(path / "decoder.npy"),
            eigenvalues=np.load(path / "eigenvalues.npy"),
            kind=manifest["kind"],
            prior=prior,
            full_spectrum=np.load(path / "full_spectrum.npy"),
            n_samples_used=manifest.get("n_samples_used", 0),
        )


def estimate_dis(model: ForwardModel, prior: GaussianPrior, n_dis: int, r: int,
                 rng: np.random.Generator, n_threads: int = 1) -> ReducedBasis:
    """Derivative-informed basis from n_dis prior samples.

    Stacks the whitened Jacobian S(m_j) of every successful sample and takes
    the SVD of the stack / sqrt(n_ok); right singular vectors are the basis in
    whitened coordinates and squared singular values the eigenvalues of the
    averaged Gauss-Newton Hessian. Failed forward solves are skipped; more
    than half failing aborts.
    """
    if n_dis < 1:
        raise ValueError("n_dis must be >= 1")
    if not 1 <= r <= prior.grid.d_m:
        raise ValueError(f"rank must be in [1, {prior.grid.d_m}], got {r}")
    seeds = rng.bit_generator.seed_seq.spawn(n_dis)

    def one_sample(seed_seq):
        m = prior.sample(np.random.default_rng(seed_seq))
        try:
            state = model.solve_forward(m)
            return model.whitened_jacobian(state)
        except SolverError as err:
            log.warning("skipping sample in basis estimation: %s", err)
            return None

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            blocks = list(pool.map(one_sample, seeds))
    else:
        blocks = [one_sample(s) for s in seeds]
    blocks = [b for b in blocks if b is not None]
    if len(blocks) < max(1, n_dis // 2):
        raise SolverError(
            f"basis estimation: only {len(blocks)}/{n_dis} forward solves succeeded")
    stack = np.vstack(blocks) / np.sqrt(len(blocks))
    _, svals, vt = np.linalg.svd(stack, full_matrices=False)
    spectrum = svals**2
    if r > vt.shape[0]:
        raise ValueError(
            f"rank {r} exceeds the {vt.shape[0]} directions resolved by "
            f"{len(blocks)} samples of a rank-{model.d_y} Hessian")
    decoder = np.column_stack([prior.unwhiten(vt[j]) for j in range(r)])
    return ReducedBasis(decoder, spectrum[:r], "dis", prior,
                        full_spectrum=spectrum, n_samples_used=len(blocks))
