import itertools
import math

import numpy as np
import pytest
import torch

from torch_pcmf.counts import CountMatrix
from torch_pcmf.errors import InputError
from torch_pcmf.model_core import (
    EPS_RATE,
    FactorPair,
    HyperParams,
    ModelFamily,
    bregman_divergence,
    column_mean_model,
    deviance,
    deviance_curve,
    explained_deviance,
    explained_deviance_report,
    explained_variance_gaussian,
    gaussian_loglik,
    order_factors,
    poisson_loglik,
    truncated_svd,
    zero_probability,
)
from torch_pcmf.testing import random_counts


def f64(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def test_poisson_loglik_single_cell():
    assert poisson_loglik(f64([[2.0]]), f64([[3.0]])) == pytest.approx(
        2 * math.log(3) - 3 - math.log(2)
    )


def test_zero_count_zero_rate_contributes_nothing():
    assert poisson_loglik(f64([[0.0]]), f64([[0.0]])) == 0.0
    assert bregman_divergence(f64([[0.0]]), f64([[0.0]])) == 0.0


def test_zero_rate_facing_positive_count_is_floored():
    value = bregman_divergence(f64([[1.0]]), f64([[0.0]]))
    assert math.isfinite(value)
    assert value == pytest.approx(-math.log(EPS_RATE) - 1 + EPS_RATE)


def test_bregman_of_exact_fit_is_zero():
    x = f64([[1.0, 4.0], [0.0, 2.0]])
    assert bregman_divergence(x, x) == 0.0


def test_bregman_worked_example():
    # 2 log 2 - 1
    assert bregman_divergence(f64([[2.0]]), f64([[1.0]])) == pytest.approx(0.386294361, abs=1e-9)


def test_deviance_is_twice_bregman(rng, small_counts: CountMatrix):
    Lambda = f64(rng.gamma(2.0, 2.0, size=small_counts.shape))
    assert deviance(small_counts, Lambda) == pytest.approx(
        2 * bregman_divergence(small_counts, Lambda), rel=1e-14
    )
    assert deviance(small_counts, Lambda) == pytest.approx(
        -2 * (poisson_loglik(small_counts, Lambda) - poisson_loglik(small_counts, small_counts.dense())),
        rel=1e-10,
    )


def test_bregman_is_non_negative(rng, small_counts: CountMatrix):
    for _ in range(20):
        Lambda = f64(rng.gamma(1.0, 3.0, size=small_counts.shape))
        assert bregman_divergence(small_counts, Lambda) >= 0


def test_shape_mismatch():
    with pytest.raises(InputError, match="Shape mismatch"):
        bregman_divergence(f64([[1.0, 2.0]]), f64([[1.0]]))


def test_negative_rates_rejected():
    with pytest.raises(InputError):
        poisson_loglik(f64([[1.0]]), f64([[-1.0]]))


def test_explained_deviance_bounds(small_counts: CountMatrix):
    x = small_counts.dense()
    assert explained_deviance(small_counts, x) == pytest.approx(1.0, abs=1e-12)
    assert explained_deviance(small_counts, column_mean_model(x)) == pytest.approx(0.0, abs=1e-12)


def test_explained_deviance_can_be_negative(small_counts: CountMatrix):
    bad = torch.full(small_counts.shape, 1000.0, dtype=torch.float64)
    value, worse = explained_deviance_report(small_counts, bad)
    assert value < 0
    assert worse


def test_explained_deviance_rejects_constant_columns():
    with pytest.raises(InputError, match="saturated equals null model"):
        explained_deviance(f64([[2.0, 3.0], [2.0, 3.0]]), f64([[1.0, 1.0], [1.0, 1.0]]))


def test_gaussian_specialization_matches_pca_variance_ratio(rng):
    for _ in range(100):
        n, m = rng.integers(4, 12, size=2)
        x = f64(rng.normal(size=(n, m)))
        x = x - x.mean(dim=0, keepdim=True)
        K = int(rng.integers(1, min(n, m)))
        scores, loadings, _ = truncated_svd(x, K)
        ratio = explained_deviance(x, scores @ loadings.T, loglik=gaussian_loglik)
        assert ratio == pytest.approx(explained_variance_gaussian(x, K), abs=1e-8)


def test_explained_variance_full_rank_is_one():
    x = f64([[1.0, 0.0], [-1.0, 0.0]])
    assert explained_variance_gaussian(x, 1) == pytest.approx(1.0)


def test_explained_variance_requires_centered_input():
    with pytest.raises(InputError, match="centered"):
        explained_variance_gaussian(f64([[1.0, 2.0], [3.0, 5.0]]), 1)


def test_explained_variance_rejects_k_above_rank():
    x = f64([[1.0, 2.0], [-1.0, -2.0]])
    with pytest.raises(InputError, match="rank"):
        explained_variance_gaussian(x, 2)


def test_zero_probability():
    U = f64([[0.0], [1.0]])
    V = f64([[math.log(2)]])
    pi = f64([0.5])
    expected = f64([[1.0], [0.5 + 0.5 * 0.5]])
    torch.testing.assert_close(zero_probability(U, V, pi), expected)


def test_factor_pair_validation():
    with pytest.raises(InputError):
        FactorPair(f64([[1.0, 2.0]]), f64([[1.0]]))
    with pytest.raises(InputError):
        FactorPair(f64([[-1.0]]), f64([[1.0]]))


def test_hyperparams_validation():
    ones = torch.ones(2, 2, dtype=torch.float64)
    with pytest.raises(InputError):
        HyperParams(-ones, ones, f64([1.0]), f64([1.0]), False, False)
    with pytest.raises(InputError, match="pi_S"):
        HyperParams(ones, ones, f64([0.5]), f64([1.0]), False, False)
    hyper = HyperParams(ones, ones, f64([0.5]), f64([0.3]), True, True)
    assert hyper.K == 2


def test_family_flags():
    assert not ModelFamily.GAP.zero_inflated
    assert ModelFamily.ZI_GAP.zero_inflated and not ModelFamily.ZI_GAP.sparse
    assert ModelFamily.SPARSE_ZI_GAP.sparse


def test_order_factors_puts_dominant_factor_first():
    U = f64([[0.1, 5.0], [0.1, 4.0], [0.1, 6.0]])
    V = f64([[0.1, 3.0], [0.1, 2.0]])
    X = CountMatrix.from_dense(np.rint((U @ V.T).numpy()))
    assert order_factors(FactorPair(U, V), X) == [1, 0]


def test_order_factors_ties_go_to_lower_index():
    U = f64([[1.0, 1.0], [2.0, 2.0]])
    V = f64([[1.0, 1.0], [3.0, 3.0]])
    X = CountMatrix.from_dense([[2, 6], [4, 12]])
    assert order_factors(FactorPair(U, V), X) == [0, 1]


def test_order_factors_is_a_permutation(rng):
    X = random_counts(rng, 10, 7, K=4)
    factors = FactorPair(f64(rng.gamma(1.0, 1.0, (10, 4))), f64(rng.gamma(1.0, 1.0, (7, 4))))
    order = order_factors(factors, X)
    assert sorted(order) == [0, 1, 2, 3]


def test_deviance_curve_values_and_length(rng):
    X = random_counts(rng, 10, 7, K=3)
    factors = FactorPair(f64(rng.gamma(1.0, 1.0, (10, 3))), f64(rng.gamma(1.0, 1.0, (7, 3))))
    curve = deviance_curve(factors, X)
    assert len(curve) == 3
    for k, value in enumerate(curve, start=1):
        assert value == bregman_divergence(X, factors.reconstruction(k))


def test_deviance_curve_single_factor(small_counts: CountMatrix):
    n, m = small_counts.shape
    factors = FactorPair(torch.ones(n, 1, dtype=torch.float64), torch.ones(m, 1, dtype=torch.float64))
    assert len(deviance_curve(factors, small_counts)) == 1


def block_factors(cell_values, gene_values, size: int = 2) -> FactorPair:
    """Factor k lives on cells and genes of block k only."""
    K = len(cell_values)
    U = torch.zeros(K * size, K, dtype=torch.float64)
    V = torch.zeros(K * size, K, dtype=torch.float64)
    for k, (u, v) in enumerate(zip(cell_values, gene_values)):
        U[k * size : (k + 1) * size, k] = u
        V[k * size : (k + 1) * size, k] = v
    return FactorPair(U, V)


def test_order_factors_matches_exhaustive_search():
    factors = block_factors([1.0, 2.0, 3.0], [2.0, 2.0, 3.0])
    X = CountMatrix.from_dense(factors.reconstruction().numpy())

    def prefix_divergences(order):
        ordered = factors.permute(list(order))
        return tuple(bregman_divergence(X, ordered.reconstruction(k)) for k in range(1, 4))

    best = min(itertools.permutations(range(3)), key=prefix_divergences)
    order = order_factors(factors, X)
    assert order[0] == 2
    assert order == list(best) == [2, 1, 0]


def test_deviance_curve_on_nested_prefixes():
    factors = block_factors([1.0, 2.0, 3.0], [2.0, 2.0, 3.0])
    X = CountMatrix.from_dense(factors.reconstruction().numpy())
    curve = deviance_curve(factors.permute(order_factors(factors, X)), X)
    assert all(after <= before for before, after in itertools.pairwise(curve))
    assert curve[0] > curve[1] > 0
    assert curve[-1] == pytest.approx(0.0, abs=1e-12)
