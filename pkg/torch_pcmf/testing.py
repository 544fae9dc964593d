import itertools

import numpy as np
import torch

from torch_pcmf.counts import CountMatrix
from torch_pcmf.inference import VariationalState, elbo
from torch_pcmf.model_core import HyperParams
from torch_pcmf.special import digamma

PERTURBATIONS = (0.95, 1.05)


def random_counts(
    rng: np.random.Generator, n: int, m: int, K: int = 2, dropout: float = 0.0
) -> CountMatrix:
    """Poisson counts of a random rank-K intensity, with no all-zero or
    constant column."""
    U = rng.gamma(2.0, 1.0, size=(n, K))
    V = rng.gamma(2.0, 1.0, size=(m, K))
    counts = rng.poisson(U @ V.T)
    if dropout > 0:
        counts = np.where(rng.random((n, m)) < dropout, 0, counts)
    counts[0] += 1
    counts[-1] += 2 + np.arange(m) % 2
    counts[-1] += counts[0]
    return CountMatrix.from_dense(counts)


def assert_elbo_non_decreasing(trace: list[float], rel_tol: float = 1e-8):
    for sweep, (before, after) in enumerate(itertools.pairwise(trace), start=2):
        assert after >= before - rel_tol * abs(before), (
            f"ELBO decreased at sweep {sweep}: {before} -> {after}"
        )


def assert_moments_consistent(state: VariationalState):
    torch.testing.assert_close(state.U_hat, state.a[..., 0] / state.a[..., 1])
    torch.testing.assert_close(
        state.log_U, digamma(state.a[..., 0]) - torch.log(state.a[..., 1])
    )
    torch.testing.assert_close(state.V_hat, state.b[..., 0] / state.b[..., 1])
    torch.testing.assert_close(
        state.log_V, digamma(state.b[..., 0]) - torch.log(state.b[..., 1])
    )
    assert torch.equal(state.S_tilde, state.pS > state.tau)


def assert_gamma_block_optimal(
    state: VariationalState,
    hyper: HyperParams,
    X: CountMatrix,
    block: str,
    atol: float = 1e-9,
):
    """The ELBO at the current value of block `a` or `b` is at least the ELBO
    at +-5% perturbations of its shapes and rates."""
    base = elbo(state, hyper, X)
    for shape_factor, rate_factor in itertools.product((1.0, *PERTURBATIONS), repeat=2):
        if shape_factor == rate_factor == 1.0:
            continue
        perturbed = state.clone()
        params = getattr(perturbed, block).clone()
        params[..., 0] *= shape_factor
        params[..., 1] *= rate_factor
        setattr(perturbed, block, params)
        perturbed.refresh_U()
        perturbed.refresh_V()
        value = elbo(perturbed, hyper, X)
        assert value <= base + atol, (
            f"Perturbing {block} by (shape x{shape_factor}, rate x{rate_factor}) "
            f"raised the ELBO from {base} to {value}"
        )
