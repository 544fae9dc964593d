"""Synthetic zero-inflated, over-dispersed counts with known structure.

Cells come in N groups and informative genes in M groups, each group owning a
diagonal block of the factor matrices. The remaining genes are noise: their
loadings carry no group structure. Gamma draws are parameterized by their mean
(shape 1), so a block entry drawn "with rate 1/alpha" has mean alpha.
"""

from dataclasses import dataclass

import numpy as np
import torch

from torch_pcmf.counts import CountMatrix
from torch_pcmf.errors import InputError
from torch_pcmf.utils import DTYPE, spawn_generators

GROUP_RATES = (100.0, 250.0)


@dataclass
class SimScenario:
    n: int = 100
    m: int = 800
    K: int = 40
    N: int = 3
    M: int = 2
    alpha_g: tuple[float, ...] | None = None
    theta_u: float = 0.8
    beta_rate: float = 80.0
    theta_v: float = 0.8
    noise_prop_mean: float = 0.4
    # None disables dropout
    dropout_mean: float | None = 0.5
    concentration: float = 100.0
    rng_seed: int | None = None

    def __post_init__(self):
        if min(self.n, self.m, self.N, self.M) < 1:
            raise InputError("n, m, N and M must be positive")
        if not (self.K > self.N and self.K > self.M):
            raise InputError(
                f"The block construction needs K > N and K > M, got K={self.K}, N={self.N}, M={self.M}"
            )
        if self.n < self.N:
            raise InputError(f"Cannot split {self.n} cells into {self.N} groups")
        if self.m < self.M:
            raise InputError(f"Cannot split {self.m} genes into {self.M} groups")
        for name in ("theta_u", "theta_v"):
            if not 0 < getattr(self, name) < 1:
                raise InputError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if not 0 <= self.noise_prop_mean < 1:
            raise InputError(f"noise_prop_mean must lie in [0, 1), got {self.noise_prop_mean}")
        if self.dropout_mean is not None and not 0 < self.dropout_mean < 1:
            raise InputError(f"dropout_mean must lie in (0, 1), got {self.dropout_mean}")
        if self.alpha_g is not None:
            self.alpha_g = tuple(float(a) for a in self.alpha_g)
            if len(self.alpha_g) != self.N or min(self.alpha_g) <= 0:
                raise InputError(f"alpha_g needs {self.N} positive rates, got {self.alpha_g}")
        if self.beta_rate <= 0 or self.concentration <= 0:
            raise InputError("beta_rate and concentration must be positive")


@dataclass
class SimOutput:
    X: CountMatrix
    U_true: torch.Tensor
    V_true: torch.Tensor
    cell_labels: np.ndarray | None = None
    gene_labels: np.ndarray | None = None
    dropout_mask: np.ndarray | None = None
    pi_D_true: np.ndarray | None = None

    @property
    def informative_genes(self) -> np.ndarray:
        return self.gene_labels != 0


def block_bounds(size: int, groups: int) -> list[tuple[int, int]]:
    """Balanced consecutive blocks; the remainder goes to the last one."""
    step = size // groups
    bounds = [(g * step, (g + 1) * step) for g in range(groups)]
    bounds[-1] = (bounds[-1][0], size)
    return bounds


def _block_diagonal(
    rows: int, K: int, means: np.ndarray, off_mean: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    groups = len(means)
    matrix = rng.gamma(1.0, off_mean, size=(rows, K))
    labels = np.zeros(rows, dtype=np.int64)
    for g, ((r0, r1), (c0, c1)) in enumerate(
        zip(block_bounds(rows, groups), block_bounds(K, groups))
    ):
        matrix[r0:r1, c0:c1] = rng.gamma(1.0, means[g], size=(r1 - r0, c1 - c0))
        labels[r0:r1] = g + 1
    return matrix, labels


def _beta_draw(mean: float, concentration: float, rng: np.random.Generator, size=None):
    return rng.beta(mean * concentration, (1 - mean) * concentration, size=size)


def generate_U(
    scenario: SimScenario, rng: np.random.Generator
) -> tuple[torch.Tensor, np.ndarray]:
    if scenario.alpha_g is None:
        alpha = rng.choice(GROUP_RATES, size=scenario.N)
    else:
        alpha = np.asarray(scenario.alpha_g)
    off_mean = (1 - scenario.theta_u) * alpha.mean()
    U, labels = _block_diagonal(scenario.n, scenario.K, alpha, off_mean, rng)
    return torch.as_tensor(U, dtype=DTYPE), labels


def generate_V(
    scenario: SimScenario, rng: np.random.Generator
) -> tuple[torch.Tensor, np.ndarray]:
    m, M = scenario.m, scenario.M
    if scenario.noise_prop_mean == 0:
        m0 = m
    else:
        noise_prop = _beta_draw(scenario.noise_prop_mean, scenario.concentration, rng)
        m0 = m - int(round(noise_prop * m))
    m0 = max(m0, M)

    noise_mean = (1 - scenario.theta_v) * scenario.beta_rate
    means = np.full(M, scenario.beta_rate)
    informative, informative_labels = _block_diagonal(m0, scenario.K, means, noise_mean, rng)
    noisy = rng.gamma(1.0, noise_mean, size=(m - m0, scenario.K))
    V = np.concatenate([informative, noisy], axis=0)
    labels = np.concatenate([informative_labels, np.zeros(m - m0, dtype=np.int64)])
    return torch.as_tensor(V, dtype=DTYPE), labels


def generate_counts(
    U_true: torch.Tensor,
    V_true: torch.Tensor,
    scenario: SimScenario,
    rng: np.random.Generator,
    cell_labels: np.ndarray | None = None,
    gene_labels: np.ndarray | None = None,
) -> SimOutput:
    n, m = U_true.shape[0], V_true.shape[0]
    if U_true.shape[1] != V_true.shape[1]:
        raise InputError("U_true and V_true disagree on K")

    if scenario.dropout_mean is None:
        pi_D = np.ones(m)
    else:
        pi_D = _beta_draw(scenario.dropout_mean, scenario.concentration, rng, size=m)
    dropout_mask = rng.random((n, m)) < pi_D[None, :]
    intensity = (U_true @ V_true.T).numpy()
    counts = np.where(dropout_mask, rng.poisson(intensity), 0)

    X = CountMatrix.from_dense(
        counts,
        row_names=[f"cell{i + 1}" for i in range(n)],
        col_names=[f"gene{j + 1}" for j in range(m)],
    )
    return SimOutput(
        X=X,
        U_true=U_true,
        V_true=V_true,
        cell_labels=cell_labels,
        gene_labels=gene_labels,
        dropout_mask=dropout_mask,
        pi_D_true=pi_D,
    )


def simulate(scenario: SimScenario) -> SimOutput:
    u_rng, v_rng, count_rng = spawn_generators(scenario.rng_seed, 3)
    U_true, cell_labels = generate_U(scenario, u_rng)
    V_true, gene_labels = generate_V(scenario, v_rng)
    return generate_counts(U_true, V_true, scenario, count_rng, cell_labels, gene_labels)
