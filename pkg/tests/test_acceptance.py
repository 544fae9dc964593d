"""Recovery on the default simulation grid: 100 cells, 800 genes, 3 cell groups.

These take minutes; run them with TORCH_PCMF_RUN_SLOW=1.
"""

import functools
import time

import numpy as np
import pytest

from torch_pcmf.cli import evaluate_embedding
from torch_pcmf.inference import FitConfig, fit
from torch_pcmf.methods import MethodResult, get_method
from torch_pcmf.metrics import selection_accuracy
from torch_pcmf.simulate import SimOutput, SimScenario, simulate
from torch_pcmf.testing import random_counts

pytestmark = pytest.mark.slow

SEEDS = range(10)
BASELINES = ("poisson-nmf", "pca")


@functools.cache
def scenario_output(dropout: float, noise: float, seed: int) -> SimOutput:
    return simulate(SimScenario(dropout_mean=dropout, noise_prop_mean=noise, rng_seed=seed))


@functools.cache
def run(method: str, dropout: float, noise: float, seed: int) -> MethodResult:
    output = scenario_output(dropout, noise, seed)
    return get_method(method)(output.X, FitConfig(K=2, rng_seed=seed, n_jobs=5))


def ari_cells(method: str, dropout: float, noise: float, seed: int) -> float:
    output = scenario_output(dropout, noise, seed)
    embedding = run(method, dropout, noise, seed).cell_embedding.numpy()
    return evaluate_embedding(embedding, output.cell_labels, 3, np.random.default_rng(seed))


def ari_genes(method: str, dropout: float, noise: float, seed: int) -> float:
    output = scenario_output(dropout, noise, seed)
    embedding = run(method, dropout, noise, seed).gene_embedding.numpy()
    return evaluate_embedding(embedding, output.gene_labels, 3, np.random.default_rng(seed))


@pytest.mark.parametrize("dropout", [0.3, 0.5, 0.7])
def test_cell_groups_are_recovered(dropout):
    values = [ari_cells("spcmf", dropout, 0.4, seed) for seed in SEEDS]
    assert np.median(values) >= 0.7


def test_heavy_dropout_hurts_nmf_more():
    wins = sum(
        ari_cells("spcmf", 0.9, 0.4, seed) > ari_cells("poisson-nmf", 0.9, 0.4, seed)
        for seed in SEEDS
    )
    assert wins >= 8


@pytest.mark.parametrize("noise", [0.2, 0.6])
def test_gene_groups_are_recovered(noise):
    sparse = np.median([ari_genes("spcmf", 0.5, noise, seed) for seed in SEEDS])
    for baseline in BASELINES:
        assert sparse >= np.median([ari_genes(baseline, 0.5, noise, seed) for seed in SEEDS])


@pytest.mark.parametrize("noise", [0.4, 0.6])
def test_selection_beats_a_constant_guess(noise):
    values = []
    for seed in SEEDS:
        output = scenario_output(0.5, noise, seed)
        selected = run("spcmf", 0.5, noise, seed).selected_genes
        values.append(selection_accuracy(selected, output.informative_genes))
    assert np.median(values) > max(noise, 1 - noise)


def test_sparse_model_explains_more_deviance_under_heavy_dropout():
    wins = sum(
        run("spcmf", 0.9, 0.4, seed).pct_dev >= run("poisson-nmf", 0.9, 0.4, seed).pct_dev
        for seed in SEEDS
    )
    assert wins >= 8


@pytest.mark.parametrize("instance", range(50))
def test_sparse_elbo_decreases_stay_small(instance):
    generator = np.random.default_rng(2000 + instance)
    X = random_counts(generator, 8, 10, K=2, dropout=0.3)
    _, report = fit(X, FitConfig(K=2, n_restarts=1, max_sweeps=200, rng_seed=instance))
    assert report.max_relative_decrease <= 1e-6


@pytest.mark.all_threads
def test_default_scale_fit_time():
    X = scenario_output(0.5, 0.4, 0).X
    start = time.perf_counter()
    fit(X, FitConfig(K=10, rng_seed=0, n_jobs=4))
    assert time.perf_counter() - start < 60
