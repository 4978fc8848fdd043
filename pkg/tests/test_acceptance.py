"""Acceptance suite: one test per primary criterion, printed pass/fail lines.

Heavier criteria share module-scoped artifacts (reduced basis, datasets,
trained surrogates). Seeds are fixed so every run is deterministic.
"""

import time

import numpy as np
import pytest
import scipy.linalg

from geomcmc.diagnostics import ess_percent, tune_step_size, wasserstein_gaussian
from geomcmc.geometry import map_estimate
from geomcmc.mcmc import (DASurrogateKernel, GeometricKernel, LAPCNKernel,
                          PCNKernel, SurrogateMMALAKernel, run_chain)
from geomcmc.subspace import estimate_dis
from geomcmc.surrogate import (LinearReducedMap, MLPSurrogate, TrainConfig,
                               generate_dataset, generalization_errors, train)


def _report(name, ok, detail):
    print(f"\nACCEPTANCE {'PASS' if ok else 'FAIL'} | {name} | {detail}", flush=True)
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def dis50(dr16):
    return estimate_dis(dr16["model"], dr16["prior"], n_dis=64, r=50,
                        rng=np.random.default_rng(2))


@pytest.fixture(scope="module")
def dr16_data(dr16, dis50):
    """Train/test datasets with Jacobians on the n=16 problem."""
    model, prior = dr16["model"], dr16["prior"]
    train_256 = generate_dataset(model, prior, dis50, 256, np.random.default_rng(3))
    test_set = generate_dataset(model, prior, dis50, 128, np.random.default_rng(4))
    return {"train_256": train_256, "test": test_set}


@pytest.fixture(scope="module")
def trained_256(dr16, dr16_data):
    """H1- and L2-trained surrogates at n_t=256 (seed 0) for the DA criteria."""
    widths = [50, 100, 100, 100, 25]
    nets = {}
    for kind, epochs in (("h1", 600), ("l2", 600)):
        net = MLPSurrogate(widths, seed=0)
        net, _ = train(net, dr16_data["train_256"],
                       TrainConfig(loss_kind=kind, epochs=epochs, lr=3e-3,
                                   batch_size=32, patience=10**9),
                       np.random.default_rng(50))
        nets[kind] = net
    return nets


@pytest.fixture(scope="module")
def toy_parts(toy_problem):
    toy, prior = toy_problem["model"], toy_problem["prior"]
    basis = estimate_dis(toy, prior, n_dis=4, r=8, rng=np.random.default_rng(5))
    exact = LinearReducedMap.from_toy(toy, basis)
    return toy, prior, basis, exact


def test_criterion_1_adjoint_consistency(dr16):
    t0 = time.time()
    model, prior = dr16["model"], dr16["prior"]
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(10):
        state = model.solve_forward(prior.sample(rng))
        dm = prior.sample(rng)
        dy = rng.standard_normal(model.d_y)
        lhs = model.jvp(state, dm) @ dy / model.v_n
        rhs = prior.cm_inner(dm, model.vjp(state, dy))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    _report("adjoint consistency (n=16, 10 points, 1e-10)", worst <= 1e-10,
            f"max rel mismatch {worst:.2e}, {time.time() - t0:.1f}s")


def test_criterion_2_jacobian_fd(dr16):
    t0 = time.time()
    model, prior = dr16["model"], dr16["prior"]
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(5):
        m = prior.sample(rng)
        state = model.solve_forward(m)
        for _ in range(10):
            dm = prior.sample(rng)
            h = 1e-5
            fd = (model.pto(m + h * dm) - model.pto(m - h * dm)) / (2 * h)
            jv = model.jvp(state, dm)
            worst = max(worst, np.linalg.norm(fd - jv) / np.linalg.norm(jv))
    _report("jvp vs central differences (10 dirs x 5 draws, 1e-5)", worst <= 1e-5,
            f"max rel error {worst:.2e}, {time.time() - t0:.1f}s")


def test_criterion_3_gaussian_posterior_exactness(toy_parts):
    t0 = time.time()
    toy, prior, _, _ = toy_parts
    worst = 0.0
    for dt in (0.1, 1.0, 4.0):
        kernel = GeometricKernel(toy, prior, dt, mode="mmala")
        rec = run_chain(kernel, prior.sample(np.random.default_rng(103)), 300, 0,
                        np.random.default_rng(104))
        worst = max(worst, float(np.max(np.abs(np.expm1(
            np.minimum(rec.log_ratios, 0.0))))))
    lap = map_estimate(toy, prior)

    def laplace_misfit(z):
        v = z - lap.z_map
        return 0.5 * (v @ v + np.sum(lap.d * (lap.W.T @ v) ** 2) - z @ z)

    rec = run_chain(LAPCNKernel(toy, prior, 1.0, lap, misfit_fn=laplace_misfit),
                    prior.sample(np.random.default_rng(105)), 300, 0,
                    np.random.default_rng(106))
    worst_la = float(np.max(np.abs(np.expm1(np.minimum(rec.log_ratios, 0.0)))))
    ok = worst <= 1e-8 and worst_la <= 1e-8
    _report("Gaussian-posterior exactness (mMALA dt in {0.1,1,4}; LA-pCN)",
            ok, f"mMALA max |alpha-1| {worst:.2e}, LA-pCN {worst_la:.2e}, "
                f"{time.time() - t0:.1f}s")


def test_criterion_4_posterior_moment_oracle(toy_parts):
    t0 = time.time()
    toy, prior, basis, exact = toy_parts
    mean_ref, var_ref = toy.posterior_moments()
    n_s = 200_000
    kernels = {
        "pCN": PCNKernel(toy, prior, 1.0),
        "mMALA": GeometricKernel(toy, prior, 1.0, mode="mmala"),
        "surrogate-mMALA(exact)": SurrogateMMALAKernel(toy, prior, 1.0, basis, exact),
        "DA(exact)": DASurrogateKernel(toy, prior, 1.0, basis, exact),
    }
    details, ok = [], True
    for i, (name, kernel) in enumerate(kernels.items()):
        rec = run_chain(kernel, prior.sample(np.random.default_rng(110 + i)),
                        n_s, 2000, np.random.default_rng(120 + i))
        ess = np.maximum(np.nan_to_num(ess_percent([rec]), nan=0.5), 0.5)
        n_eff = ess / 100.0 * n_s
        z_mean = np.abs(rec.samples.mean(axis=0) - mean_ref) / np.sqrt(var_ref / n_eff)
        z_var = (np.abs(rec.samples.var(axis=0) - var_ref)
                 / (var_ref * np.sqrt(2.0 / n_eff)))
        this_ok = np.max(z_mean) <= 4.0 and np.max(z_var) <= 4.0
        ok = ok and this_ok
        details.append(f"{name}: mean z {np.max(z_mean):.2f}, var z {np.max(z_var):.2f}")
    _report("posterior-moment oracle (4 kernels, n_s=2e5, 4 sigma)", ok,
            "; ".join(details) + f", {time.time() - t0:.0f}s")


def test_criterion_5_da_exact_surrogate_ceiling(toy_parts):
    t0 = time.time()
    toy, prior, basis, exact = toy_parts
    kernel = DASurrogateKernel(toy, prior, 1.0, basis, exact)
    rec = run_chain(kernel, prior.sample(np.random.default_rng(130)), 2000, 0,
                    np.random.default_rng(131))
    reached = ~np.isnan(rec.stage2)
    stage2_rate = float(np.mean(rec.stage2[reached])) if np.any(reached) else np.nan
    stage1_passes = int(np.sum(rec.stage1))
    counter_ok = rec.counters["forward_solves"] == stage1_passes + 1
    ok = stage2_rate == 1.0 and counter_ok
    _report("DA exact-surrogate ceiling (stage-2 = 100%, counter discipline)", ok,
            f"stage-2 acceptance {100 * stage2_rate:.1f}%, solves "
            f"{rec.counters['forward_solves']} vs stage-1 passes {stage1_passes} "
            f"(+1 init), {time.time() - t0:.1f}s")


def test_criterion_6_h1_vs_l2_ordering(dr16, dis50, dr16_data):
    t0 = time.time()
    model, prior = dr16["model"], dr16["prior"]
    test_set = dr16_data["test"]
    widths = [50, 100, 100, 100, 25]
    errors = {}
    for n_t in (64, 256):
        tr = (dr16_data["train_256"].subset(np.arange(64)) if n_t == 64
              else dr16_data["train_256"])
        for loss in ("h1", "l2"):
            for seed in range(3):
                net = MLPSurrogate(widths, seed=seed)
                net, _ = train(net, tr,
                               TrainConfig(loss_kind=loss, epochs=600, lr=3e-3,
                                           batch_size=32, patience=10**9),
                               np.random.default_rng(140 + seed))
                errors.setdefault((loss, n_t), []).append(
                    generalization_errors(net, test_set))
    ok = True
    details = []
    for n_t in (64, 256):
        med = {loss: np.median([e[1] for e in errors[(loss, n_t)]])
               for loss in ("h1", "l2")}
        med_obs = {loss: np.median([e[0] for e in errors[(loss, n_t)]])
                   for loss in ("h1", "l2")}
        jac_ok = med["h1"] < med["l2"]
        obs_ok = med_obs["h1"] <= 1.2 * med_obs["l2"]
        ok = ok and jac_ok and obs_ok
        details.append(
            f"n_t={n_t}: E_jac {med['h1']:.3f}(H1) vs {med['l2']:.3f}(L2), "
            f"E_obs {med_obs['h1']:.3f}(H1) vs {med_obs['l2']:.3f}(L2)")
    _report("H1-vs-L2 ordering (r=50, n_t in {64,256}, 3 seeds)", ok,
            "; ".join(details) + f", {time.time() - t0:.0f}s")


def test_criterion_7_da_sampling_quality(dr16, dis50, trained_256):
    t0 = time.time()
    model, prior, grid = dr16["model"], dr16["prior"], dr16["grid"]
    lap = map_estimate(model, prior)

    def init(rng):
        return prior.unwhiten(lap.z_map
                              + lap.sqrt_cov_apply_whitened(rng.standard_normal(grid.d_m)))

    tuned = {}
    for name, factory, candidates in (
        ("pcn", lambda dt: PCNKernel(model, prior, dt), [0.0025, 0.005, 0.01, 0.02]),
        ("da_h1", lambda dt: DASurrogateKernel(model, prior, dt, dis50,
                                               trained_256["h1"]),
         [0.02, 0.04, 0.08]),
    ):
        report = tune_step_size(factory, init, candidates, 600,
                                np.random.default_rng(150), burn_in=120,
                                mass_h=grid.h)
        tuned[name] = report.chosen_dt

    n_s, n_c, burn = 6000, 3, 500
    pools = {}
    for name, factory in (
        ("pcn", lambda: PCNKernel(model, prior, tuned["pcn"])),
        ("da_h1", lambda: DASurrogateKernel(model, prior, tuned["da_h1"], dis50,
                                            trained_256["h1"])),
    ):
        pools[name] = [run_chain(factory(), init(np.random.default_rng(160 + c)),
                                 n_s, burn, np.random.default_rng(170 + c))
                       for c in range(n_c)]
    ess = {name: float(np.nanmedian(ess_percent(recs)))
           for name, recs in pools.items()}
    ratio = ess["da_h1"] / ess["pcn"]

    # stage-2 ordering at matched n_t: H1-trained vs L2-trained surrogate
    stage2 = {}
    for kind in ("h1", "l2"):
        recs = [run_chain(
            DASurrogateKernel(model, prior, tuned["da_h1"], dis50, trained_256[kind]),
            init(np.random.default_rng(180)), 2000, 200, np.random.default_rng(181))]
        stage2[kind] = recs[0].stage_rates()["stage2"]
    ok = ratio >= 2.0 and stage2["h1"] >= stage2["l2"]
    _report("DA sampling-quality ordering (ESS ratio >= 2, stage-2 H1 >= L2)", ok,
            f"median ESS% {ess['da_h1']:.3f} vs pCN {ess['pcn']:.3f} "
            f"(ratio {ratio:.2f}; dt {tuned['da_h1']:.3g}/{tuned['pcn']:.3g}), "
            f"stage-2 {stage2['h1']:.0f}% (H1) vs {stage2['l2']:.0f}% (L2), "
            f"{time.time() - t0:.0f}s")


def test_criterion_8_diagnostics_oracles(toy_problem):
    t0 = time.time()
    # ESS on synthetic AR(1) chains within +-30% of analytic
    rho = 0.9
    rng = np.random.default_rng(190)
    chains = []
    for _ in range(4):
        x = np.empty(40_000)
        x[0] = rng.standard_normal()
        eps = np.sqrt(1 - rho**2) * rng.standard_normal(40_000)
        for i in range(1, 40_000):
            x[i] = rho * x[i - 1] + eps[i]
        chains.append(x[:, None])
    est = ess_percent(np.stack(chains))[0]
    ref = 100.0 * (1 - rho) / (1 + rho)
    ess_ok = abs(est - ref) <= 0.3 * ref

    # Wasserstein: zero for identical covariances, brute-force match on 5x5
    C = rng.standard_normal((5, 5))
    C = C @ C.T + 0.1 * np.eye(5)
    zero_ok = abs(wasserstein_gaussian(C, C)) <= 1e-10
    B = rng.standard_normal((5, 5))
    B = B @ B.T + 0.1 * np.eye(5)
    ra = scipy.linalg.sqrtm(C)
    brute = np.trace(C) + np.trace(B) - 2 * np.trace(scipy.linalg.sqrtm(ra @ B @ ra)).real
    dense_ok = abs(wasserstein_gaussian(C, B) - brute) <= 1e-8

    # step-size tuner reproducibility on pCN/toy
    toy, prior = toy_problem["model"], toy_problem["prior"]
    choices = []
    for seed in range(5):
        report = tune_step_size(lambda dt: PCNKernel(toy, prior, dt),
                                lambda r: prior.sample(r), [0.25, 1.0, 4.0], 600,
                                np.random.default_rng(200 + seed), burn_in=100)
        choices.append(report.chosen_dt)
    tuner_ok = choices.count(max(set(choices), key=choices.count)) >= 4

    ok = ess_ok and zero_ok and dense_ok and tuner_ok
    _report("diagnostics oracles (AR(1) ESS, Wasserstein, tuner 4/5)", ok,
            f"AR(1) ESS% {est:.2f} vs {ref:.2f}; |W2(C,C)| {abs(wasserstein_gaussian(C, C)):.1e}; "
            f"dense diff {abs(wasserstein_gaussian(C, B) - brute):.1e}; "
            f"tuner choices {choices}, {time.time() - t0:.0f}s")


def test_criterion_9_poincare(toy_problem, dr16):
    t0 = time.time()
    # equality for the linear map
    toy = toy_problem["model"]
    S = toy.whitened_forward_matrix()
    variance = np.trace(S @ S.T)
    deriv = np.linalg.norm(S, "fro") ** 2
    linear_ok = abs(variance - deriv) <= 1e-6 * deriv

    # Monte Carlo ratio on the nonlinear model
    model, prior = dr16["model"], dr16["prior"]
    rng = np.random.default_rng(210)
    n = 2000
    vals, dnorms = [], []
    for _ in range(n):
        state = model.solve_forward(prior.sample(rng))
        vals.append(model.observe(state) / np.sqrt(model.v_n))
        dnorms.append(np.linalg.norm(model.whitened_jacobian(state), "fro") ** 2)
    vals = np.array(vals)
    v_i = np.sum((vals - vals.mean(axis=0)) ** 2, axis=1)
    d_i = np.array(dnorms)
    ratio = v_i.mean() / d_i.mean()
    # delta-method standard error of the ratio of means
    cov = np.cov(v_i, d_i)
    se = np.sqrt((cov[0, 0] - 2 * ratio * cov[0, 1] + ratio**2 * cov[1, 1])
                 / n) / d_i.mean()
    nonlinear_ok = ratio <= 1.0 + 3.0 * se
    _report("Poincare property (linear equality; nonlinear MC ratio <= 1)",
            linear_ok and nonlinear_ok,
            f"linear gap {abs(variance - deriv) / deriv:.1e}, MC ratio "
            f"{ratio:.4f} (3se={3 * se:.4f}), {time.time() - t0:.0f}s")
