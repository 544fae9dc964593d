import numpy as np
import pytest
import torch

from torch_pcmf.errors import InputError
from torch_pcmf.simulate import (
    SimScenario,
    block_bounds,
    generate_counts,
    generate_U,
    generate_V,
    simulate,
)

SMALL = dict(n=30, m=60, K=4, N=3, M=2)


def within_standard_errors(samples: np.ndarray | torch.Tensor, expected: float, k: float = 4.0):
    samples = np.asarray(samples, dtype=np.float64).ravel()
    standard_error = samples.std(ddof=1) / np.sqrt(samples.size)
    return abs(samples.mean() - expected) <= k * standard_error


def test_same_seed_same_output():
    first, second = simulate(SimScenario(**SMALL, rng_seed=3)), simulate(SimScenario(**SMALL, rng_seed=3))
    assert first.X.equals(second.X)
    assert torch.equal(first.U_true, second.U_true)
    assert torch.equal(first.V_true, second.V_true)
    assert np.array_equal(first.dropout_mask, second.dropout_mask)


def test_different_seeds_differ():
    assert not simulate(SimScenario(**SMALL, rng_seed=1)).X.equals(
        simulate(SimScenario(**SMALL, rng_seed=2)).X
    )


def test_block_bounds_give_remainder_to_last_block():
    assert block_bounds(10, 3) == [(0, 3), (3, 6), (6, 10)]
    assert block_bounds(5, 1) == [(0, 5)]


def test_labels_follow_the_blocks():
    output = simulate(SimScenario(n=31, m=100, K=7, N=3, M=2, rng_seed=0))
    assert output.cell_labels.tolist() == [1] * 10 + [2] * 10 + [3] * 11
    labels = output.gene_labels
    assert len(labels) == 100
    informative = int((labels != 0).sum())
    # informative genes come first, in consecutive groups
    assert bool((labels[:informative] != 0).all()) and bool((labels[informative:] == 0).all())
    assert sorted(set(labels[:informative].tolist())) == [1, 2]
    assert np.array_equal(output.informative_genes, labels != 0)


def test_dropped_cells_are_zero():
    output = simulate(SimScenario(**SMALL, dropout_mean=0.3, rng_seed=5))
    dense = output.X.dense().numpy()
    assert bool((dense[~output.dropout_mask] == 0).all())
    assert output.pi_D_true.shape == (60,)


def test_no_dropout():
    output = simulate(SimScenario(**SMALL, dropout_mean=None, rng_seed=5))
    assert bool(output.dropout_mask.all())
    assert bool((output.pi_D_true == 1).all())


def test_in_block_mean():
    scenario = SimScenario(n=100, m=10, K=100, N=1, M=1, alpha_g=(250.0,))
    U, labels = generate_U(scenario, np.random.default_rng(0))
    assert bool((labels == 1).all())
    assert within_standard_errors(U, 250.0)


def test_off_block_mean():
    scenario = SimScenario(n=300, m=10, K=300, N=2, M=1, alpha_g=(100.0, 300.0), theta_u=0.5)
    U, _ = generate_U(scenario, np.random.default_rng(1))
    off_block = torch.cat([U[:150, 150:].flatten(), U[150:, :150].flatten()])
    assert within_standard_errors(off_block, 0.5 * 200.0)


def test_noisy_gene_mean():
    scenario = SimScenario(n=10, m=2000, K=5, N=3, M=2, noise_prop_mean=0.8)
    V, labels = generate_V(scenario, np.random.default_rng(2))
    noisy = V[torch.as_tensor(labels == 0)]
    assert noisy.shape[0] > 1000
    assert within_standard_errors(noisy, (1 - 0.8) * 80.0)


def test_no_noise_means_all_genes_informative():
    scenario = SimScenario(n=10, m=50, K=5, N=3, M=2, noise_prop_mean=0.0)
    _, labels = generate_V(scenario, np.random.default_rng(0))
    assert bool((labels != 0).all())


def test_informative_genes_never_drop_below_group_count():
    scenario = SimScenario(n=10, m=10, K=5, N=3, M=2, noise_prop_mean=0.99)
    _, labels = generate_V(scenario, np.random.default_rng(0))
    assert int((labels != 0).sum()) == 2
    assert len(labels) == 10


def test_expected_counts_scale_with_dropout():
    n, lam = 20000, 5.0
    U = torch.ones(n, 1, dtype=torch.float64)
    V = torch.full((3, 1), lam, dtype=torch.float64)
    output = generate_counts(U, V, SimScenario(dropout_mean=0.5), np.random.default_rng(4))
    dense = output.X.dense().numpy()
    for j in range(3):
        assert within_standard_errors(dense[:, j], output.pi_D_true[j] * lam)


def test_generate_counts_checks_shapes():
    with pytest.raises(InputError):
        generate_counts(
            torch.ones(3, 2, dtype=torch.float64),
            torch.ones(4, 3, dtype=torch.float64),
            SimScenario(),
            np.random.default_rng(0),
        )


def test_zero_fraction_grows_as_dropout_mean_falls():
    fractions = []
    for dropout_mean in (0.9, 0.7, 0.5, 0.3):
        per_seed = [
            1 - simulate(SimScenario(**SMALL, dropout_mean=dropout_mean, rng_seed=seed)).X.nnz / (30 * 60)
            for seed in range(20)
        ]
        fractions.append(np.mean(per_seed))
    assert fractions == sorted(fractions)


def test_informative_genes_are_over_dispersed():
    output = simulate(SimScenario(n=200, m=100, K=4, N=3, M=2, dropout_mean=None, rng_seed=8))
    dense = output.X.dense().numpy()[:, output.informative_genes]
    ratio = dense.var(axis=0, ddof=1) / dense.mean(axis=0)
    assert float(np.median(ratio)) > 1


@pytest.mark.parametrize(
    "kwargs",
    [
        {"K": 3, "N": 3},
        {"K": 2, "M": 2, "N": 1},
        {"n": 2, "N": 3},
        {"theta_u": 1.0},
        {"theta_v": 0.0},
        {"dropout_mean": 1.0},
        {"noise_prop_mean": 1.0},
        {"alpha_g": (100.0,)},
    ],
)
def test_invalid_scenarios(kwargs):
    with pytest.raises(InputError):
        SimScenario(**kwargs)
