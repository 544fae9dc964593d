"""Model types and the likelihood / divergence computations shared by inference,
evaluation and model selection.

All functions are pure. Counts and intensities are handled as float64 tensors;
`0 * log 0 = 0` everywhere, and an intensity of exactly zero facing a positive
count is floored at `EPS_RATE` so the result stays finite.
"""

import enum
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch

from torch_pcmf.counts import CountMatrix
from torch_pcmf.errors import InputError
from torch_pcmf.utils import DTYPE, as_float_tensor

EPS_RATE = 1e-12
LOG_EPS_RATE = math.log(EPS_RATE)

Matrix = CountMatrix | torch.Tensor | np.ndarray


class ModelFamily(enum.Enum):
    GAP = "gap"
    ZI_GAP = "zigap"
    SPARSE_ZI_GAP = "spcmf"

    @property
    def zero_inflated(self) -> bool:
        return self is not ModelFamily.GAP

    @property
    def sparse(self) -> bool:
        return self is ModelFamily.SPARSE_ZI_GAP


@dataclass(frozen=True)
class FactorPair:
    U: torch.Tensor
    V: torch.Tensor

    def __post_init__(self):
        if self.U.ndim != 2 or self.V.ndim != 2:
            raise InputError("Factors must be 2-D matrices.")
        if self.U.shape[1] != self.V.shape[1]:
            raise InputError(
                f"U has {self.U.shape[1]} factors but V has {self.V.shape[1]}"
            )
        if bool((self.U < 0).any()) or bool((self.V < 0).any()):
            raise InputError("Factors must be non-negative.")

    @property
    def K(self) -> int:
        return int(self.U.shape[1])

    def reconstruction(self, k: int | None = None) -> torch.Tensor:
        """U_{1:k} V_{1:k}^T, the full reconstruction when k is None."""
        if k is None:
            k = self.K
        return self.U[:, :k] @ self.V[:, :k].T

    def permute(self, order: list[int]) -> "FactorPair":
        return FactorPair(self.U[:, order], self.V[:, order])


@dataclass(frozen=True)
class HyperParams:
    """Prior parameters. `alpha` and `beta` are K x 2 (shape, rate) tensors."""

    alpha: torch.Tensor
    beta: torch.Tensor
    pi_S: torch.Tensor
    pi_D: torch.Tensor
    zero_inflated: bool
    sparse: bool

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if value.ndim != 2 or value.shape[1] != 2:
                raise InputError(f"{name} must be a K x 2 tensor of (shape, rate)")
            if not bool((value > 0).all()):
                raise InputError(f"{name} shapes and rates must be strictly positive")
        if self.alpha.shape[0] != self.beta.shape[0]:
            raise InputError("alpha and beta disagree on K")
        for name in ("pi_S", "pi_D"):
            value = getattr(self, name)
            if not bool(((value >= 0) & (value <= 1)).all()):
                raise InputError(f"{name} must hold probabilities in [0, 1]")
        if not self.sparse and not bool((self.pi_S == 1).all()):
            raise InputError("pi_S must be 1 when the sparse layer is off")
        if not self.zero_inflated and not bool((self.pi_D == 1).all()):
            raise InputError("pi_D must be 1 when zero inflation is off")

    @property
    def K(self) -> int:
        return int(self.alpha.shape[0])


def _dense(x: Matrix) -> torch.Tensor:
    if isinstance(x, CountMatrix):
        return x.dense()
    return as_float_tensor(x)


def _check_counts_and_rates(
    X: Matrix, Lambda: torch.Tensor | np.ndarray
) -> tuple[torch.Tensor, torch.Tensor]:
    x = _dense(X)
    lam = as_float_tensor(Lambda)
    if x.shape != lam.shape:
        raise InputError(f"Shape mismatch: X is {tuple(x.shape)}, Lambda is {tuple(lam.shape)}")
    if bool((lam < 0).any()):
        raise InputError("Intensities must be non-negative.")
    if bool((x < 0).any()):
        raise InputError("Counts must be non-negative.")
    lam = torch.where((x > 0) & (lam == 0), torch.full_like(lam, EPS_RATE), lam)
    return x, lam


def poisson_loglik(X: Matrix, Lambda: torch.Tensor | np.ndarray) -> float:
    """sum_ij x log(lambda) - lambda - log(x!)"""
    x, lam = _check_counts_and_rates(X, Lambda)
    terms = torch.special.xlogy(x, lam) - lam - torch.lgamma(x + 1)
    return float(terms.sum())


def _bregman_terms(x: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    terms = torch.special.xlogy(x, x) - torch.special.xlogy(x, lam) - x + lam
    return terms.clamp_min(0.0)


def bregman_divergence(X: Matrix, Lambda: torch.Tensor | np.ndarray) -> float:
    """Poisson Bregman divergence D(X | Lambda) = sum x log(x / lambda) - x + lambda."""
    x, lam = _check_counts_and_rates(X, Lambda)
    return float(_bregman_terms(x, lam).sum())


def deviance(X: Matrix, Lambda: torch.Tensor | np.ndarray) -> float:
    """-2 (loglik(Lambda) - loglik(X)), which is twice the Bregman divergence."""
    return 2.0 * bregman_divergence(X, Lambda)


def gaussian_loglik(X: Matrix, M: torch.Tensor | np.ndarray) -> float:
    """Unit-variance Gaussian log-likelihood, without its additive constant."""
    x = _dense(X)
    mean = as_float_tensor(M)
    if x.shape != mean.shape:
        raise InputError(f"Shape mismatch: X is {tuple(x.shape)}, M is {tuple(mean.shape)}")
    return float(-0.5 * ((x - mean) ** 2).sum())


def column_mean_model(X: Matrix) -> torch.Tensor:
    """1_n X_bar: every row replaced by the column means."""
    x = _dense(X)
    return x.mean(dim=0, keepdim=True).expand_as(x).clone()


def explained_deviance(
    X: Matrix,
    Lambda_hat: torch.Tensor | np.ndarray,
    loglik: Callable = poisson_loglik,
) -> float:
    """Share of the gap between the column-mean model and the saturated model
    that is recovered by `Lambda_hat`.

    The value is returned raw: it is negative for fits worse than the
    column-mean model.
    """
    x = _dense(X)
    lam = as_float_tensor(Lambda_hat)
    if x.shape != lam.shape:
        raise InputError(f"Shape mismatch: X is {tuple(x.shape)}, Lambda is {tuple(lam.shape)}")
    null = column_mean_model(x)
    null_loglik = loglik(x, null)
    saturated = loglik(x, x)
    denominator = saturated - null_loglik
    if not denominator > 1e-13 * max(1.0, abs(saturated)):
        raise InputError("saturated equals null model: every column of X is constant")
    return (loglik(x, lam) - null_loglik) / denominator


def explained_deviance_report(
    X: Matrix, Lambda_hat: torch.Tensor | np.ndarray
) -> tuple[float, bool]:
    """Explained deviance and whether it falls outside [0, 1]."""
    value = explained_deviance(X, Lambda_hat)
    return value, not (0.0 <= value <= 1.0)


def truncated_svd(
    X: torch.Tensor | np.ndarray, K: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Rank-K SVD of X: (scores U_K * s_K, loadings V_K, all singular values)."""
    x = as_float_tensor(X)
    left, singular_values, right_t = torch.linalg.svd(x, full_matrices=False)
    scores = left[:, :K] * singular_values[:K]
    return scores, right_t[:K].T, singular_values


def numerical_rank(singular_values: torch.Tensor, shape: tuple[int, int]) -> int:
    if singular_values.numel() == 0:
        return 0
    tol = max(shape) * torch.finfo(DTYPE).eps * float(singular_values.max())
    return int((singular_values > tol).sum())


def explained_variance_gaussian(X: torch.Tensor | np.ndarray, K: int) -> float:
    """Explained variance ratio of the first K principal components of a
    column-centered matrix."""
    x = as_float_tensor(X)
    if x.ndim != 2:
        raise InputError("Expected a 2-D matrix")
    if float(torch.linalg.norm(x.mean(dim=0))) > 1e-8:
        raise InputError("X must be centered by column")
    singular_values = torch.linalg.svdvals(x)
    rank = numerical_rank(singular_values, tuple(x.shape))
    if not 1 <= K <= rank:
        raise InputError(f"K must lie in [1, rank(X)] = [1, {rank}], got {K}")
    squared = singular_values**2
    return float(squared[:K].sum() / squared.sum())


def zero_probability(
    U: torch.Tensor, V: torch.Tensor, pi_D: torch.Tensor
) -> torch.Tensor:
    """P(X_ij = 0) = (1 - pi_j) + pi_j exp(-sum_k U_ik V_jk)."""
    return (1 - pi_D)[None, :] + pi_D[None, :] * torch.exp(-(U @ V.T))


def order_factors(model: FactorPair, X: Matrix) -> list[int]:
    """Greedy ordering by cumulative Bregman divergence.

    The first factor is the best single-factor reconstruction, each next one
    the best addition to the factors already chosen. Ties go to the lower index.
    Returned indices are 0-based.
    """
    x = _dense(X)
    if tuple(x.shape) != (model.U.shape[0], model.V.shape[0]):
        raise InputError(
            f"Factors describe a {model.U.shape[0]} x {model.V.shape[0]} matrix, X is {tuple(x.shape)}"
        )
    remaining = list(range(model.K))
    order: list[int] = []
    prefix = torch.zeros_like(x)
    while remaining:
        best_k, best_value, best_recon = None, math.inf, None
        for k in remaining:
            candidate = prefix + torch.outer(model.U[:, k], model.V[:, k])
            value = bregman_divergence(x, candidate)
            if best_k is None or value < best_value:
                best_k, best_value, best_recon = k, value, candidate
        order.append(best_k)
        remaining.remove(best_k)
        prefix = best_recon
    return order


def deviance_curve(model: FactorPair, X: Matrix) -> list[float]:
    """k -> D(X | U_{1:k} V_{1:k}^T) for k = 1..K, on already ordered factors."""
    x = _dense(X)
    return [bregman_divergence(x, model.reconstruction(k)) for k in range(1, model.K + 1)]
