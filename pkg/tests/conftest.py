"""Shared fixtures: a small linear-Gaussian problem and the n=16 PDE problem."""

import numpy as np
import pytest

from geomcmc.models import DiffusionReactionModel, LinearGaussianToy, synthesize_data, two_level_truth
from geomcmc.prior import Grid, build_prior


@pytest.fixture(scope="session")
def toy_problem():
    """d_m=64, d_y=8 linear model with data and moderate noise (pCN can mix)."""
    rng = np.random.default_rng(42)
    prior = build_prior(Grid(8), 0.1, 4.0)
    toy = LinearGaussianToy.random(prior, d_y=8, v_n=0.5, seed=1)
    m_true = prior.sample(rng)
    y = toy.pto(m_true) + np.sqrt(0.5) * rng.standard_normal(8)
    toy.set_data(y, 0.5)
    return {"prior": prior, "model": toy, "m_true": m_true}


@pytest.fixture(scope="session")
def toy_sharp():
    """Same toy with small noise: posterior far from the prior (MAP tests)."""
    rng = np.random.default_rng(7)
    prior = build_prior(Grid(8), 0.1, 4.0)
    toy = LinearGaussianToy.random(prior, d_y=8, v_n=0.02, seed=3)
    m_true = prior.sample(rng)
    y = toy.pto(m_true) + np.sqrt(0.02) * rng.standard_normal(8)
    toy.set_data(y, 0.02)
    return {"prior": prior, "model": toy, "m_true": m_true}


@pytest.fixture(scope="session")
def dr16():
    """n=16 diffusion-reaction problem with 2% synthetic data."""
    rng = np.random.default_rng(0)
    grid = Grid(16)
    prior = build_prior(grid, 0.03, 3.33)
    model = DiffusionReactionModel(grid, prior, obs_seed=7)
    truth = two_level_truth(grid, seed=11)
    y, v_n = synthesize_data(model, truth, 0.02, rng)
    return {"grid": grid, "prior": prior, "model": model, "truth": truth}
