"""Configuration-driven experiment stages behind the command-line interface.

Stages (run in order; each reads the previous stage's artifacts from the
output directory and writes its own):

    setup    -> problem/   grid, prior spec, truth field, synthetic data
    dis      -> basis/     reduced basis (+ MAP/Laplace pack in laplace/)
    train    -> datasets/, nets/   training data, surrogates, generalization
    tune     -> tune/      step sizes per kernel from pilot chains
    sample   -> chains/    n_chains chain records per kernel
    diagnose -> diagnostics/   ESS%, Wasserstein PSRF, AR/MSJ (JSON + CSV)
    report   -> report/    speedup tables, summary table, figures

Every manifest carries the config hash, master seed, stage name, and code
version; array payloads are deterministic given config + seed.

Kernel names may carry a surrogate-loss suffix, e.g.
``da_surrogate_mmala@l2``, selecting which trained net drives the kernel.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (BACKSUB_WEIGHT, ar_msj, chain_cost_units, ess_percent,
                          sampling_stats, speedup_report, tune_step_size,
                          wasserstein_mpsrf)
from . import figures
from .geometry import LaplacePack, map_estimate
from .mcmc import ChainRecord, KernelConfig, make_kernel, run_chain
from .models import (DiffusionReactionModel, LinearGaussianToy, synthesize_data,
                     two_level_truth)
from .prior import Grid, build_prior
from .subspace import ReducedBasis, estimate_dis
from .surrogate import (Dataset, MLPSurrogate, TrainConfig, generalization_errors,
                        generate_dataset, train)

log = logging.getLogger(__name__)

STAGES = ("setup", "dis", "train", "tune", "sample", "diagnose", "report")

DEFAULT_CONFIG = {
    "master_seed": 0,
    "problem": {
        "model": "diffusion_reaction",   # or "toy"
        "grid_n": 16,
        "prior_gamma": 0.03,
        "prior_delta": 3.33,
        "seed": 0,
        "obs_seed": 7,
        "d_y": 25,
        "noise_pct": 0.02,
        "newton_tol": 1e-10,
        "newton_max_iter": 50,
        "truth_seed": 11,
        "truth_levels": [-1.0, 2.0],
        "toy_scale": 1.0,
    },
    "subspace": {"kind": "dis", "r": 50, "n_dis": 64},
    "surrogate": {
        "losses": ["h1"],
        "n_t": 256,
        "n_test": 128,
        "hidden": [100, 100, 100],
        "epochs": 400,
        "batch_size": 32,
        "lr": 1e-3,
        "val_fraction": 0.1,
        "patience": 60,
        "net_seed": 0,
    },
    "mcmc": {
        "kernels": ["pcn", "da_surrogate_mmala"],
        "dt_candidates": [0.04, 0.16, 0.64, 1.6],
        "n_chains": 4,
        "n_samples": 3000,
        "burn_in": 300,
        "pilot_n_s": 600,
        "pilot_burn_in": 150,
        "baseline": "pcn",
        "n_ess_grid": [1, 3, 10, 30, 100, 300, 1000],
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str | Path | None) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        user = json.loads(Path(path).read_text())
        cfg = _merge(DEFAULT_CONFIG, user)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:16]


def _write_manifest(directory: Path, stage: str, cfg: dict, extra: dict | None = None):
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "master_seed": cfg["master_seed"],
        "code_version": __version__,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra or {})
    (directory / "stage_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def _require(path: Path, what: str, produced_by: str):
    if not path.exists():
        raise FileNotFoundError(
            f"missing {what} at {path}; run the '{produced_by}' stage first")


def _rng(cfg: dict, *tags: int) -> np.random.Generator:
    return np.random.default_rng([cfg["master_seed"], *tags])


# ---------------------------------------------------------------------------
# problem reconstruction


def build_problem(cfg: dict, out: Path | None = None):
    """(grid, prior, model); attaches synthetic data when already on disk."""
    p = cfg["problem"]
    grid = Grid(p["grid_n"])
    prior = build_prior(grid, p["prior_gamma"], p["prior_delta"])
    if p["model"] == "toy":
        model = LinearGaussianToy.random(prior, d_y=p["d_y"], v_n=1.0,
                                         seed=p["obs_seed"], scale=p["toy_scale"])
    else:
        model = DiffusionReactionModel(
            grid, prior, obs_seed=p["obs_seed"], d_y=p["d_y"],
            newton_tol=p["newton_tol"], newton_max_iter=p["newton_max_iter"])
    if out is not None:
        data_file = Path(out) / "problem" / "data.json"
        if data_file.exists():
            data = json.loads(data_file.read_text())
            model.set_data(np.asarray(data["y"]), data["v_n"])
    return grid, prior, model


def _truth(cfg: dict, grid: Grid, prior) -> np.ndarray:
    p = cfg["problem"]
    if p["model"] == "toy":
        return prior.sample(np.random.default_rng(p["truth_seed"]))
    lo, hi = p["truth_levels"]
    return two_level_truth(grid, p["truth_seed"], lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# stages


def stage_setup(cfg: dict, out: Path, threads: int = 1) -> None:
    grid, prior, model = build_problem(cfg)
    truth = _truth(cfg, grid, prior)
    y, v_n = synthesize_data(model, truth, cfg["problem"]["noise_pct"], _rng(cfg, 1))
    pdir = out / "problem"
    pdir.mkdir(parents=True, exist_ok=True)
    np.save(pdir / "truth.npy", truth)
    obs_points = getattr(model, "obs_points", np.zeros((0, 2)))
    (pdir / "data.json").write_text(json.dumps({
        "y": [float(v) for v in y],
        "v_n": v_n,
        "obs_points": [[float(a), float(b)] for a, b in obs_points],
        "m_true_file": "truth.npy",
    }, indent=2, sort_keys=True))
    _write_manifest(pdir, "setup", cfg, {"misfit_at_truth": model.misfit(truth)})
    log.info("setup: d_m=%d, d_y=%d, v_n=%.3e", grid.d_m, model.d_y, v_n)


def stage_dis(cfg: dict, out: Path, threads: int = 1) -> None:
    _require(out / "problem" / "data.json", "synthetic data", "setup")
    grid, prior, model = build_problem(cfg, out)
    sub = cfg["subspace"]
    before = (model.n_solves, model.n_backsubs)
    if sub["kind"] == "kle":
        basis = prior.kle_basis(sub["r"])
    else:
        basis = estimate_dis(model, prior, sub["n_dis"], sub["r"], _rng(cfg, 2),
                             n_threads=threads)
    cost = {"forward_solves": model.n_solves - before[0],
            "backsubs": model.n_backsubs - before[1]}
    basis.save(out / "basis", extra_manifest={"cost": cost})
    _write_manifest(out / "basis", "dis", cfg, {"cost": cost})

    before = (model.n_solves, model.n_backsubs)
    laplace = map_estimate(model, prior)
    laplace.save(out / "laplace")
    _write_manifest(out / "laplace", "dis", cfg, {
        "cost": {"forward_solves": model.n_solves - before[0],
                 "backsubs": model.n_backsubs - before[1]}})
    log.info("dis: basis r=%d (%s), MAP converged=%s", basis.r, basis.kind,
             laplace.converged)


def stage_train(cfg: dict, out: Path, threads: int = 1) -> None:
    _require(out / "basis" / "manifest.json", "reduced basis", "dis")
    grid, prior, model = build_problem(cfg, out)
    basis = ReducedBasis.load(out / "basis", prior)
    scfg = cfg["surrogate"]

    before = (model.n_solves, model.n_backsubs)
    train_set = generate_dataset(model, prior, basis, scfg["n_t"], _rng(cfg, 3))
    train_cost = {"forward_solves": model.n_solves - before[0],
                  "backsubs": model.n_backsubs - before[1]}
    train_set.manifest["cost"] = train_cost
    train_set.save(out / "datasets" / "train")
    before = (model.n_solves, model.n_backsubs)
    test_set = generate_dataset(model, prior, basis, scfg["n_test"], _rng(cfg, 4))
    test_set.manifest["cost"] = {"forward_solves": model.n_solves - before[0],
                                 "backsubs": model.n_backsubs - before[1]}
    test_set.save(out / "datasets" / "test")
    _write_manifest(out / "datasets", "train", cfg, {"train_cost": train_cost})

    widths = [basis.r, *scfg["hidden"], model.d_y]
    gen_errors = {}
    for loss_kind in scfg["losses"]:
        net = MLPSurrogate(widths, seed=scfg["net_seed"])
        tc = TrainConfig(loss_kind=loss_kind, epochs=scfg["epochs"],
                         batch_size=scfg["batch_size"], lr=scfg["lr"],
                         val_fraction=scfg["val_fraction"], patience=scfg["patience"])
        net, history = train(net, train_set, tc, _rng(cfg, 5, scfg["net_seed"]))
        e_obs, e_jac = generalization_errors(net, test_set)
        gen_errors[loss_kind] = (e_obs, e_jac)
        ndir = out / "nets" / loss_kind
        net.save(ndir, extra_manifest={"loss_kind": loss_kind, "n_t": len(train_set)})
        (ndir / "history.json").write_text(json.dumps(
            {k: v for k, v in history.items()}, indent=2))
        (ndir / "generalization.json").write_text(json.dumps(
            {"e_obs": e_obs, "e_jac": e_jac}, indent=2, sort_keys=True))
        log.info("train[%s]: e_obs=%.3e e_jac=%.3e (best epoch %d)",
                 loss_kind, e_obs, e_jac, history["best_epoch"])
    _write_manifest(out / "nets", "train", cfg,
                    {"generalization": {k: list(v) for k, v in gen_errors.items()}})


def _kernel_label_parts(label: str) -> tuple[str, str]:
    """'da_surrogate_mmala@l2' -> (kind, loss); loss defaults to 'h1'."""
    if "@" in label:
        kind, loss = label.split("@", 1)
        return kind, loss
    return label, "h1"


def _load_kernel_refs(cfg: dict, out: Path, prior, model, label: str) -> KernelConfig:
    kind, loss = _kernel_label_parts(label)
    basis = surrogate = laplace = None
    if kind in ("dis_mmala", "surrogate_mmala", "da_surrogate_mmala"):
        _require(out / "basis" / "manifest.json", "reduced basis", "dis")
        basis = ReducedBasis.load(out / "basis", prior)
    if kind in ("surrogate_mmala", "da_surrogate_mmala"):
        _require(out / "nets" / loss / "manifest.json", f"{loss} surrogate", "train")
        surrogate = MLPSurrogate.load(out / "nets" / loss)
    if kind == "la_pcn":
        _require(out / "laplace" / "manifest.json", "Laplace pack", "dis")
        laplace = LaplacePack.load(out / "laplace")
    return KernelConfig(kind=kind, dt=1.0, basis=basis, surrogate=surrogate,
                        laplace=laplace)


def _chain_init(cfg: dict, out: Path, prior, rng: np.random.Generator) -> np.ndarray:
    """Chain start: Laplace draw when available, otherwise a prior draw."""
    lap_dir = out / "laplace"
    if (lap_dir / "manifest.json").exists():
        lap = LaplacePack.load(lap_dir)
        z = lap.z_map + lap.sqrt_cov_apply_whitened(rng.standard_normal(len(lap.z_map)))
        return prior.unwhiten(z)
    return prior.sample(rng)


def stage_tune(cfg: dict, out: Path, threads: int = 1) -> None:
    _require(out / "problem" / "data.json", "synthetic data", "setup")
    grid, prior, model = build_problem(cfg, out)
    mcfg = cfg["mcmc"]
    results = {}
    for ki, label in enumerate(mcfg["kernels"]):
        kind, _ = _kernel_label_parts(label)
        template = _load_kernel_refs(cfg, out, prior, model, label)
        rng = _rng(cfg, 6, ki)

        def factory(dt, template=template):
            kc = KernelConfig(kind=template.kind, dt=dt, basis=template.basis,
                              surrogate=template.surrogate, laplace=template.laplace)
            return make_kernel(kc, model, prior)

        report = tune_step_size(
            factory, lambda r: _chain_init(cfg, out, prior, r),
            mcfg["dt_candidates"], mcfg["pilot_n_s"], rng, kind=kind,
            burn_in=mcfg["pilot_burn_in"], mass_h=grid.h)
        results[label] = report.to_dict()
        log.info("tune[%s]: dt=%.3g (AR %s)", label, report.chosen_dt,
                 [f"{a:.0f}" for a in report.ar])
    tdir = out / "tune"
    tdir.mkdir(parents=True, exist_ok=True)
    (tdir / "tune.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    _write_manifest(tdir, "tune", cfg)


def stage_sample(cfg: dict, out: Path, threads: int = 1) -> None:
    _require(out / "tune" / "tune.json", "tuned step sizes", "tune")
    grid, prior, model = build_problem(cfg, out)
    tuned = json.loads((out / "tune" / "tune.json").read_text())
    mcfg = cfg["mcmc"]
    for ki, label in enumerate(mcfg["kernels"]):
        template = _load_kernel_refs(cfg, out, prior, model, label)
        dt = tuned[label]["chosen_dt"]
        for ci in range(mcfg["n_chains"]):
            rng = _rng(cfg, 7, ki, ci)
            kc = KernelConfig(kind=template.kind, dt=dt, basis=template.basis,
                              surrogate=template.surrogate, laplace=template.laplace)
            kernel = make_kernel(kc, model, prior)
            rec = run_chain(kernel, _chain_init(cfg, out, prior, rng),
                            mcfg["n_samples"], mcfg["burn_in"], rng,
                            seed=int(np.array([cfg["master_seed"], 7, ki, ci]).sum()))
            rec.save(out / "chains" / label / f"chain_{ci:03d}")
        log.info("sample[%s]: %d chains x %d samples at dt=%.3g",
                 label, mcfg["n_chains"], mcfg["n_samples"], dt)
    _write_manifest(out / "chains", "sample", cfg)


def _load_chains(out: Path, label: str) -> list[ChainRecord]:
    cdir = out / "chains" / label
    _require(cdir, f"chains for {label}", "sample")
    return [ChainRecord.load(p) for p in sorted(cdir.glob("chain_*"))]


def stage_diagnose(cfg: dict, out: Path, threads: int = 1) -> None:
    _require(out / "chains", "chain records", "sample")
    grid, _, _ = build_problem(cfg, out)
    ddir = out / "diagnostics"
    ddir.mkdir(parents=True, exist_ok=True)
    summary = {}
    mpsrf_rows = []
    for label in cfg["mcmc"]["kernels"]:
        records = _load_chains(out, label)
        ess = ess_percent(records)
        np.save(ddir / f"ess_{label.replace('@', '_')}.npy", ess)
        stats = sampling_stats(records)
        per_chain = [dict(zip(("ar", "msj"), ar_msj(r, mass_h=grid.h))) for r in records]
        entry = {
            "median_ess_pct": stats["median_ess_pct"],
            "cost_per_100": stats["cost_per_100"],
            "acceptance": [r.stage_rates() for r in records],
            "ar_msj": per_chain,
        }
        if len(records) >= 2:
            pos, vals = wasserstein_mpsrf(records, mass_scale=grid.h)
            entry["mpsrf_positions"] = pos.tolist()
            entry["mpsrf"] = vals.tolist()
            mpsrf_rows.extend((label, int(p), float(v)) for p, v in zip(pos, vals))
        summary[label] = entry
    (ddir / "diagnostics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    with open(ddir / "mpsrf.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kernel", "position", "wasserstein_psrf"])
        writer.writerows(mpsrf_rows)
    _write_manifest(ddir, "diagnose", cfg)
    log.info("diagnose: %s", {k: round(v["median_ess_pct"], 2) for k, v in summary.items()})


def _offline_cost(cfg: dict, out: Path, label: str) -> float:
    """Solver-unit offline cost attributable to a kernel (basis + training data)."""
    kind, loss = _kernel_label_parts(label)
    if kind not in ("surrogate_mmala", "da_surrogate_mmala", "dis_mmala"):
        return 0.0
    cost = 0.0
    basis_manifest = json.loads((out / "basis" / "manifest.json").read_text())
    bc = basis_manifest.get("cost", {})
    cost += bc.get("forward_solves", 0) + BACKSUB_WEIGHT * bc.get("backsubs", 0)
    if kind == "dis_mmala":
        return cost
    train_manifest = json.loads((out / "datasets" / "train" / "manifest.json").read_text())
    tc = train_manifest.get("cost", {})
    cost += tc.get("forward_solves", 0)
    if loss == "h1":
        cost += BACKSUB_WEIGHT * tc.get("backsubs", 0)
    return cost


def stage_report(cfg: dict, out: Path, threads: int = 1) -> None:
    _require(out / "diagnostics" / "diagnostics.json", "diagnostics", "diagnose")
    grid, prior, model = build_problem(cfg, out)
    diag = json.loads((out / "diagnostics" / "diagnostics.json").read_text())
    mcfg = cfg["mcmc"]
    rdir = out / "report"
    fdir = rdir / "figures"
    fdir.mkdir(parents=True, exist_ok=True)

    baseline = mcfg["baseline"]
    if baseline not in diag:
        baseline = next(iter(diag))
    n_ess_grid = mcfg["n_ess_grid"]
    speedups = {}
    for label, entry in diag.items():
        stats = {"median_ess_pct": entry["median_ess_pct"],
                 "cost_per_100": entry["cost_per_100"]}
        base_stats = {"median_ess_pct": diag[baseline]["median_ess_pct"],
                      "cost_per_100": diag[baseline]["cost_per_100"]}
        speedups[label] = speedup_report(
            stats, base_stats,
            (_offline_cost(cfg, out, label), _offline_cost(cfg, out, baseline)),
            n_ess_grid)

    # summary table: one row per kernel
    rows = []
    for label, entry in diag.items():
        acc = entry["acceptance"][0] if entry["acceptance"] else {}
        rows.append({
            "kernel": label,
            "median_ess_pct": round(entry["median_ess_pct"], 4),
            "cost_per_100": round(entry["cost_per_100"], 3),
            "acceptance_pct": round(acc.get("overall", float("nan")), 2),
            "stage2_pct": round(acc.get("stage2", float("nan")), 2)
            if acc.get("stage2") is not None else None,
            "effective_speedup_vs_" + baseline:
                round(speedups[label]["effective_speedup"], 3),
            "break_even_n_ess": speedups[label]["break_even_n_ess"],
        })
    with open(rdir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    with open(rdir / "speedup.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kernel", "n_ess", "total_speedup_vs_" + baseline])
        for label, rep in speedups.items():
            for n, v in zip(rep["n_ess"], rep["total_speedup"]):
                writer.writerow([label, n, v])
    (rdir / "report.json").write_text(json.dumps(
        {"baseline": baseline, "speedups": speedups, "summary": rows},
        indent=2, sort_keys=True))

    # figures
    ess_by_kernel = {
        label: np.load(out / "diagnostics" / f"ess_{label.replace('@', '_')}.npy")
        for label in diag
    }
    figures.save_ess_violin(ess_by_kernel, fdir / "ess_violin.png")
    curves = {label: (np.array(e["mpsrf_positions"]), np.array(e["mpsrf"]))
              for label, e in diag.items() if "mpsrf" in e}
    if curves:
        figures.save_mpsrf_curves(curves, fdir / "mpsrf.png")
    figures.save_speedup_curves(
        {f"{label} vs {baseline}": (np.array(rep["n_ess"]), np.array(rep["total_speedup"]))
         for label, rep in speedups.items() if label != baseline},
        fdir / "total_speedup.png")
    if cfg["problem"]["model"] != "toy":
        truth = np.load(out / "problem" / "truth.npy")
        figures.save_field(truth, grid.n, fdir / "truth.png", title="true parameter")
        for label in diag:
            records = _load_chains(out, label)
            pool = np.vstack([r.samples for r in records])
            figures.save_field(pool.mean(axis=0), grid.n,
                               fdir / f"posterior_mean_{label.replace('@', '_')}.png",
                               title=f"posterior mean ({label})")
            figures.save_field(pool.var(axis=0), grid.n,
                               fdir / f"posterior_var_{label.replace('@', '_')}.png",
                               title=f"posterior variance ({label})", cmap="magma")
            break  # one field set is enough for the report
    traces = {}
    for label in diag:
        records = _load_chains(out, label)
        traces[label] = records[0].misfits
    figures.save_misfit_trace(traces, fdir / "misfit_trace.png")
    nets_dir = out / "nets"
    if nets_dir.exists():
        histories, gen = {}, {}
        for ndir in sorted(nets_dir.iterdir()):
            if (ndir / "history.json").exists():
                histories[ndir.name] = json.loads((ndir / "history.json").read_text())
                g = json.loads((ndir / "generalization.json").read_text())
                gen[ndir.name] = (g["e_obs"], g["e_jac"])
        if histories:
            figures.save_training_history(histories, fdir / "training_history.png")
            figures.save_generalization(gen, fdir / "generalization.png")

    _write_manifest(rdir, "report", cfg)
    for row in rows:
        log.info("report: %s", row)


STAGE_FUNCS = {
    "setup": stage_setup,
    "dis": stage_dis,
    "train": stage_train,
    "tune": stage_tune,
    "sample": stage_sample,
    "diagnose": stage_diagnose,
    "report": stage_report,
}


def run_stage(stage: str, cfg: dict, out: Path, threads: int = 1) -> None:
    if stage == "all":
        for name in STAGES:
            STAGE_FUNCS[name](cfg, out, threads)
        return
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES + ('all',)}")
    STAGE_FUNCS[stage](cfg, out, threads)
