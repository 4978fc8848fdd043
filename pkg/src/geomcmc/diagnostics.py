"""Chain-quality metrics, step-size tuning, and cost/speedup accounting.

Conventions:

* a chain pool is an (n_c, n_s, d) array of samples from independent chains
  targeting the same posterior;
* ESS% is estimated per degree of freedom from the multichain autocorrelation
  with the pairwise positive-sum truncation, using biased (n-normalized)
  autocovariances;
* the Wasserstein potential-scale-reduction diagnostic compares the averaged
  within-chain covariance and the pooled covariance by the 2-Wasserstein
  distance between zero-mean Gaussians, evaluated through symmetric matrix
  square roots;
* all sampling costs are measured in forward-solve-equivalent units derived
  from chain counters (never wall clock), with adjoint back-substitutions
  weighted at 0.01 solves by default.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

#: cost of one adjoint/tangent back-substitution in forward-solve units
BACKSUB_WEIGHT = 0.01


def as_pool(chains) -> np.ndarray:
    """Stack chain records or arrays into an (n_c, n_s, d) pool."""
    arrays = []
    for c in chains:
        arr = c.samples if hasattr(c, "samples") else np.asarray(c, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        arrays.append(arr)
    n_s = min(a.shape[0] for a in arrays)
    return np.stack([a[:n_s] for a in arrays])


def _autocov_biased(x: np.ndarray) -> np.ndarray:
    """Biased autocovariances along axis 1 of an (n_c, n_s, d) array."""
    n_s = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * n_s - 1).bit_length()
    f = np.fft.rfft(xc, n=nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=1)[:, :n_s]
    return acov / n_s


def ess_percent(chains, max_lag: int | None = None) -> np.ndarray:
    """Effective-sample-size percentage per degree of freedom.

    ESS% = 100 / (1 + 2 sum_{t=1}^{2n'+1} MAC(t)) with the multichain
    autocorrelation MAC(t) = 1 - (w - mean_k AC(t,k)) / v and n' the largest
    integer keeping pairwise sums MAC(2i-1)+MAC(2i) positive. Degrees of
    freedom with zero variance yield NaN.
    """
    pool = as_pool(chains)
    n_c, n_s, d = pool.shape
    if n_s < 100:
        raise ValueError(f"need at least 100 samples per chain, got {n_s}")
    acov = _autocov_biased(pool)          # (n_c, n_s, d)
    w = pool.var(axis=1, ddof=1).mean(axis=0)  # (d,)
    if n_c > 1:
        chain_means = pool.mean(axis=1)
        between = ((chain_means - chain_means.mean(axis=0)) ** 2).sum(axis=0)
        v = (n_s - 1) / n_s * w + (n_c + 1) / (n_c * (n_c - 1)) * between
    else:
        v = (n_s - 1) / n_s * w
    out = np.full(d, np.nan)
    alive = v > 0
    if not np.any(alive):
        return out
    mac = 1.0 - (w[None, alive] - acov[:, :, alive].mean(axis=0)) / v[None, alive]
    t_max = min(max_lag or n_s - 1, n_s - 1)
    for col, j in enumerate(np.nonzero(alive)[0]):
        series = mac[1:t_max + 1, col]
        n_pairs = 0
        while (2 * n_pairs + 1 < len(series)
               and series[2 * n_pairs] + series[2 * n_pairs + 1] > 0):
            n_pairs += 1
        upto = min(2 * n_pairs + 1, len(series))
        denom = 1.0 + 2.0 * float(np.sum(series[:upto]))
        out[j] = 100.0 / max(denom, 1e-12)
    return out


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def wasserstein_gaussian(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Squared 2-Wasserstein distance between N(0, cov_a) and N(0, cov_b)."""
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=float))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=float))
    root_a = _sym_sqrt(cov_a)
    inner = _sym_sqrt(root_a @ cov_b @ root_a)
    return float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(inner))


def chain_covariances(pool: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Averaged within-chain covariance W and pooled covariance V."""
    n_c, n_s, d = pool.shape
    if n_c < 2:
        raise ValueError("need at least 2 chains")
    centered = pool - pool.mean(axis=1, keepdims=True)
    w = np.einsum("kji,kjl->il", centered, centered) / (n_c * (n_s - 1))
    chain_means = pool.mean(axis=1)
    dm = chain_means - chain_means.mean(axis=0)
    between = dm.T @ dm
    v = (n_s - 1) / n_s * w + (n_c + 1) / (n_c * (n_c - 1)) * between
    return w, v


def wasserstein_mpsrf(chains, positions=None, mass_scale: float = 1.0):
    """Wasserstein potential-scale-reduction curve over chain positions.

    Samples are scaled by mass_scale (sqrt of the lumped mass) so traces are
    taken in the function-space inner product. Returns (positions, values).
    """
    pool = as_pool(chains) * mass_scale
    n_s = pool.shape[1]
    if positions is None:
        positions = [p for p in (2 ** np.arange(7, 40)) if p < n_s] + [n_s]
    vals = []
    for p in positions:
        w, v = chain_covariances(pool[:, :p])
        vals.append(wasserstein_gaussian(w, v))
    return np.asarray(positions), np.asarray(vals)


def ar_msj(record, mass_h: float | None = None) -> tuple[float, float]:
    """Acceptance rate (%) and mean square jump of one chain record.

    The jump norm is the lumped-mass L2 norm; mass_h defaults to the square
    grid spacing inferred from the sample dimension.
    """
    samples, accepted = record.samples, record.accepted
    if len(accepted) < 1:
        raise ValueError("chain too short")
    if mass_h is None:
        mass_h = 1.0 / (np.sqrt(samples.shape[1]) + 1.0)
    ar = 100.0 * float(np.mean(accepted))
    jumps = np.diff(samples, axis=0)
    msj = float(np.mean(np.sum(jumps * jumps, axis=1))) * mass_h**2
    return ar, msj


@dataclass
class TuneReport:
    candidates: list
    ar: list
    msj: list
    ess_median: list
    chosen_dt: float
    prefix_len: int
    flagged: bool = False
    restart_ars: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "candidates": list(map(float, self.candidates)),
            "ar": list(map(float, self.ar)),
            "msj": list(map(float, self.msj)),
            "ess_median": list(map(float, self.ess_median)),
            "chosen_dt": float(self.chosen_dt),
            "prefix_len": self.prefix_len,
            "flagged": self.flagged,
            "restart_ars": {k: list(map(float, v)) for k, v in self.restart_ars.items()},
        }


def tune_step_size(kernel_factory, init_fn, candidates, pilot_n_s: int,
                   rng: np.random.Generator, kind: str = "", burn_in: int | None = None,
                   n_restarts: int = 3, mass_h: float | None = None) -> TuneReport:
    """Appendix-style step-size selection from pilot chains.

    Runs one pilot per candidate, keeps the largest prefix (in increasing dt)
    on which AR decreases and MSJ increases monotonically, and picks the
    median-ESS% maximizer inside it. For gradient-only and Laplace-recentered
    kernels ("mala", "la_pcn"), restarts at the chosen dt must agree in AR
    within +-5% of their mean; otherwise the choice steps down.
    """
    from .mcmc import run_chain

    candidates = sorted(float(c) for c in candidates)
    if not candidates:
        raise ValueError("need at least one candidate step size")
    burn_in = pilot_n_s // 5 if burn_in is None else burn_in
    ar_list, msj_list, ess_list = [], [], []
    for dt in candidates:
        kernel = kernel_factory(dt)
        rec = run_chain(kernel, init_fn(rng), pilot_n_s, burn_in, rng)
        ar, msj = ar_msj(rec, mass_h=mass_h)
        ess = ess_percent([rec])
        ar_list.append(ar)
        msj_list.append(msj)
        ess_list.append(float(np.nanmedian(ess)))

    prefix = 1
    while (prefix < len(candidates)
           and ar_list[prefix] <= ar_list[prefix - 1]
           and msj_list[prefix] >= msj_list[prefix - 1]):
        prefix += 1
    flagged = False
    order = int(np.argmax(ess_list[:prefix]))

    if kind in ("mala", "la_pcn"):
        while order >= 0:
            dt = candidates[order]
            ars = []
            for _ in range(n_restarts):
                rec = run_chain(kernel_factory(dt), init_fn(rng), pilot_n_s, burn_in, rng)
                ars.append(ar_msj(rec, mass_h=mass_h)[0])
            mean_ar = float(np.mean(ars))
            if mean_ar > 0 and max(abs(a - mean_ar) for a in ars) <= 0.05 * mean_ar:
                break
            log.info("step size %.3g rejected by AR-variation rule (ARs %s)", dt, ars)
            order -= 1
        if order < 0:
            order, flagged = 0, True
    chosen = candidates[order]
    report = TuneReport(candidates, ar_list, msj_list, ess_list, chosen,
                        prefix_len=prefix, flagged=flagged)
    if kind in ("mala", "la_pcn"):
        report.restart_ars[str(chosen)] = ars
    return report


# ---------------------------------------------------------------------------
# cost accounting


def chain_cost_units(counters: dict, backsub_weight: float = BACKSUB_WEIGHT) -> float:
    """Forward-solve-equivalent cost of a chain from its counters."""
    return (counters.get("forward_solves", 0)
            + backsub_weight * counters.get("backsubs", 0))


def sampling_stats(records, backsub_weight: float = BACKSUB_WEIGHT) -> dict:
    """Median ESS% and cost per 100 samples for a pool of chain records."""
    ess = ess_percent(records)
    total_cost = sum(chain_cost_units(r.counters, backsub_weight) for r in records)
    total_steps = sum(r.n_steps for r in records)
    return {
        "median_ess_pct": float(np.nanmedian(ess)),
        "cost_per_100": 100.0 * total_cost / max(total_steps, 1),
        "n_steps": total_steps,
    }


def speedup_report(stats_a: dict, stats_b: dict, offline_costs: tuple[float, float],
                   n_ess_grid) -> dict:
    """Effective and total sampling speedups of method A over method B.

    Effective speed is median ESS% divided by the cost of 100 samples; total
    speed at a requested effective sample count folds in the offline cost.
    Returns the speedup ratio, the total-speedup curve over n_ess_grid, and
    the break-even effective sample count (None if the methods never cross).
    """
    for stats in (stats_a, stats_b):
        if stats["median_ess_pct"] <= 0:
            raise ValueError("median ESS% must be positive")
    off_a, off_b = offline_costs
    speed_a = stats_a["median_ess_pct"] / stats_a["cost_per_100"]
    speed_b = stats_b["median_ess_pct"] / stats_b["cost_per_100"]
    c_a = stats_a["cost_per_100"] / stats_a["median_ess_pct"]
    c_b = stats_b["cost_per_100"] / stats_b["median_ess_pct"]
    grid = np.asarray(list(n_ess_grid), dtype=float)
    total = (off_b + c_b * grid) / (off_a + c_a * grid)
    if c_b != c_a:
        crossing = (off_a - off_b) / (c_b - c_a)
        break_even = float(crossing) if crossing > 0 else None
    else:
        break_even = None
    return {
        "effective_speedup": speed_a / speed_b,
        "n_ess": grid.tolist(),
        "total_speedup": total.tolist(),
        "break_even_n_ess": break_even,
    }
