"""Reference factorizations: Poisson NMF on raw counts and PCA on log counts."""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from torch_pcmf.counts import CountMatrix, as_count_matrix
from torch_pcmf.errors import InputError
from torch_pcmf.flags import verbose_enabled
from torch_pcmf.model_core import (
    EPS_RATE,
    bregman_divergence,
    explained_variance_gaussian,
    numerical_rank,
    truncated_svd,
)
from torch_pcmf.utils import DTYPE


@dataclass(frozen=True)
class BaselineModel:
    method: str
    U: torch.Tensor
    V: torch.Tensor
    objective_trace: list[float] = field(default_factory=list)
    singular_values: torch.Tensor | None = None
    explained_variance: float | None = None

    def reconstruction(self) -> torch.Tensor:
        return self.U @ self.V.T


def _kl_ratio(x: torch.Tensor, U: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
    lam = (U @ V.T).clamp_min(EPS_RATE)
    return torch.where(x > 0, x / lam, torch.zeros_like(x))


def poisson_nmf(
    X: CountMatrix | torch.Tensor | np.ndarray,
    K: int,
    rng: np.random.Generator,
    max_iters: int = 500,
    tol: float = 1e-5,
    init: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> BaselineModel:
    """Multiplicative updates minimizing the generalized KL divergence
    D(X | U V^T), which is the Poisson Bregman divergence."""
    X = as_count_matrix(X)
    if X.nnz == 0:
        raise InputError("degenerate all-zero input")
    if K < 1:
        raise InputError(f"K must be at least 1, got {K}")
    x = X.dense()
    n, m = X.shape

    if init is None:
        scale = math.sqrt(float(x.mean()) / K)
        U = torch.as_tensor(rng.uniform(0.5, 1.5, size=(n, K)), dtype=DTYPE) * scale
        V = torch.as_tensor(rng.uniform(0.5, 1.5, size=(m, K)), dtype=DTYPE) * scale
    else:
        U, V = (t.to(DTYPE).clone() for t in init)
        if U.shape != (n, K) or V.shape != (m, K):
            raise InputError("Initial factors do not match X and K")

    trace = [bregman_divergence(x, U @ V.T)]
    for iteration in range(max_iters):
        U = U * (_kl_ratio(x, U, V) @ V) / V.sum(dim=0).clamp_min(EPS_RATE)
        V = V * (_kl_ratio(x, U, V).T @ U) / U.sum(dim=0).clamp_min(EPS_RATE)
        trace.append(bregman_divergence(x, U @ V.T))
        previous, current = trace[-2], trace[-1]
        if verbose_enabled():
            print(f"poisson-nmf iteration {iteration} objective={current:.6f}")
        if previous == 0 or abs(previous - current) / previous < tol:
            break
    return BaselineModel("poisson-nmf", U, V, objective_trace=trace)


def log_transform(X: CountMatrix | torch.Tensor | np.ndarray) -> torch.Tensor:
    """log(1 + x), centered by column."""
    X = as_count_matrix(X)
    y = torch.log1p(X.dense())
    return y - y.mean(dim=0, keepdim=True)


def pca_logcounts(X: CountMatrix | torch.Tensor | np.ndarray, K: int) -> BaselineModel:
    X = as_count_matrix(X)
    n, m = X.shape
    if not 1 <= K <= min(n, m):
        raise InputError(f"K must lie in [1, {min(n, m)}] for a {n} x {m} matrix, got {K}")
    centered = log_transform(X)
    scores, loadings, singular_values = truncated_svd(centered, K)
    rank = numerical_rank(singular_values, (n, m))
    explained = (
        explained_variance_gaussian(centered, min(K, rank)) if rank > 0 else math.nan
    )
    return BaselineModel(
        "pca",
        scores,
        loadings,
        singular_values=singular_values,
        explained_variance=explained,
    )
