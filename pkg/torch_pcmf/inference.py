"""Variational EM for the (zero-inflated, sparse) Gamma-Poisson factor model.

The variational family is fully factorized: Gamma factors for U and V',
multinomial allocations of each non-zero count over the K factors, Bernoulli
factors for the dropout indicators D and the gene selection indicators S.

One sweep updates, in this order:

    r -> a -> b -> pD -> pS -> hyperparameters

The count allocations are only ever stored on the non-zero cells of X, so a
sweep costs O(nnz * K) for the allocation terms plus a few n x K by K x m
products for the rate terms.
"""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from torch_pcmf.counts import CountMatrix, as_count_matrix
from torch_pcmf.errors import InputError, NumericalError, PCMFWarning
from torch_pcmf.flags import verbose_enabled
from torch_pcmf.model_core import (
    EPS_RATE,
    LOG_EPS_RATE,
    FactorPair,
    HyperParams,
    ModelFamily,
    explained_deviance_report,
    order_factors,
    zero_probability,
)
from torch_pcmf.profiler import profile
from torch_pcmf.special import digamma, inv_digamma, trigamma
from torch_pcmf.utils import DTYPE, spawn_generators

# sigmoid(+-30) is within 1e-13 of 1 and 0
LOGIT_CLAMP = 30.0
PROB_FLOOR = 1e-10
SHAPE_CAP = 1e6
RATE_BOUNDS = (1e-8, 1e8)
# Gamma(INIT_SHAPE, .) draws for the initial shapes
INIT_SHAPE = 2.0
M_STEP_TOL = 1e-10
M_STEP_MAX_ITER = 100


@dataclass
class FitConfig:
    K: int
    family: ModelFamily = ModelFamily.SPARSE_ZI_GAP
    max_sweeps: int = 1000
    rel_tol: float = 1e-5
    n_restarts: int = 5
    tau: float = 0.5
    rng_seed: int | None = None
    # None means: fix the prior rates iff the matrix is square
    fix_scale: bool | None = None
    order_factors: bool = True
    n_jobs: int = 1
    # non-sparse sweeps before the selection layer is switched on
    warmup_sweeps: int = 30

    def __post_init__(self):
        if self.K < 1:
            raise InputError(f"K must be at least 1, got {self.K}")
        if self.max_sweeps < 1:
            raise InputError(f"max_sweeps must be at least 1, got {self.max_sweeps}")
        if not self.rel_tol > 0:
            raise InputError(f"rel_tol must be positive, got {self.rel_tol}")
        if self.n_restarts < 1:
            raise InputError(f"n_restarts must be at least 1, got {self.n_restarts}")
        if not 0 < self.tau < 1:
            raise InputError(f"tau must lie in (0, 1), got {self.tau}")
        if self.n_jobs < 1:
            raise InputError(f"n_jobs must be at least 1, got {self.n_jobs}")
        if self.warmup_sweeps < 0:
            raise InputError(f"warmup_sweeps must be non-negative, got {self.warmup_sweeps}")

    def resolved_fix_scale(self, shape: tuple[int, int]) -> bool:
        if self.fix_scale is None:
            return shape[0] == shape[1]
        return self.fix_scale


@dataclass
class MultinomialAllocation:
    """Allocation probabilities r of each non-zero count over the factors.

    `rows`, `cols` and `counts` describe the non-zero cells of X; `r` is nnz x K.
    Cells of a gene with an empty support are inactive: their counts are not
    allocated and their rows of `r` are uniform placeholders.
    """

    rows: torch.Tensor
    cols: torch.Tensor
    counts: torch.Tensor
    r: torch.Tensor
    active: torch.Tensor

    @property
    def Z_hat(self) -> torch.Tensor:
        # D_hat is exactly 1 on non-zero cells
        return (self.counts * self.active)[:, None] * self.r


class VariationalState:
    """Variational parameters and the moments derived from them.

    a: n x K x 2 Gamma (shape, rate) for U
    b: m x K x 2 Gamma (shape, rate) for V'
    pD: n x m dropout probabilities (1 means "not a dropout")
    pS: m x K selection probabilities
    support: m x K factors each gene's counts are allocated over, pS > tau
        unless `update_r` kept an earlier support
    """

    def __init__(
        self,
        a: torch.Tensor,
        b: torch.Tensor,
        pD: torch.Tensor,
        pS: torch.Tensor,
        tau: float = 0.5,
        support: torch.Tensor | None = None,
    ):
        n, K, _ = a.shape
        m = b.shape[0]
        if tuple(b.shape) != (m, K, 2) or tuple(pD.shape) != (n, m) or tuple(pS.shape) != (m, K):
            raise InputError(
                f"Inconsistent state shapes: a {tuple(a.shape)}, b {tuple(b.shape)}, "
                f"pD {tuple(pD.shape)}, pS {tuple(pS.shape)}"
            )
        self.a = a.to(DTYPE)
        self.b = b.to(DTYPE)
        self.pD = pD.to(DTYPE)
        self.pS = pS.to(DTYPE)
        self.tau = tau
        self.allocation: MultinomialAllocation | None = None
        self.refresh_U()
        self.refresh_V()
        self.refresh_S()
        if support is None:
            support = self.S_tilde
        if tuple(support.shape) != (m, K):
            raise InputError(f"Support must be {m} x {K}, got {tuple(support.shape)}")
        self.support = support.to(torch.bool)

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.a.shape[0]), int(self.b.shape[0])

    @property
    def K(self) -> int:
        return int(self.a.shape[1])

    def refresh_U(self) -> None:
        self.U_hat = self.a[..., 0] / self.a[..., 1]
        self.log_U = digamma(self.a[..., 0]) - torch.log(self.a[..., 1])

    def refresh_V(self) -> None:
        self.V_hat = self.b[..., 0] / self.b[..., 1]
        self.log_V = digamma(self.b[..., 0]) - torch.log(self.b[..., 1])

    def refresh_S(self) -> None:
        self.S_tilde = self.pS > self.tau

    @property
    def loadings(self) -> torch.Tensor:
        """S_hat * V'_hat, the expected loadings."""
        return self.pS * self.V_hat

    def clone(self) -> "VariationalState":
        state = VariationalState(
            self.a.clone(),
            self.b.clone(),
            self.pD.clone(),
            self.pS.clone(),
            self.tau,
            self.support.clone(),
        )
        state.allocation = self.allocation
        return state


@dataclass(frozen=True)
class FittedModel:
    family: ModelFamily
    U: torch.Tensor
    V: torch.Tensor
    log_U: torch.Tensor
    log_V: torch.Tensor
    pS: torch.Tensor
    pD_mean: torch.Tensor
    hyper: HyperParams
    selected_genes: torch.Tensor
    reestimated: bool = False

    @property
    def K(self) -> int:
        return int(self.U.shape[1])

    def factors(self) -> FactorPair:
        return FactorPair(self.U, self.V)

    def reconstruction(self) -> torch.Tensor:
        return self.U @ self.V.T

    def expected_counts(self) -> torch.Tensor:
        """E[X] on the raw-count scale, pi_D * U V^T (U V^T without zero inflation)."""
        return self.hyper.pi_D[None, :] * self.reconstruction()

    def zero_probability(self) -> torch.Tensor:
        return zero_probability(self.U, self.V, self.hyper.pi_D)


@dataclass
class FitReport:
    elbo_trace: list[float]
    explained_deviance: float
    worse_than_null: bool
    sweeps: int
    converged: bool
    restart: int
    restart_elbos: list[float | None]
    selected_genes: torch.Tensor | None = None
    uninformative_genes: list[int] = field(default_factory=list)
    elbo_decreases: int = 0
    max_relative_decrease: float = 0.0
    flags: list[str] = field(default_factory=list)
    first_stage: "FitReport | None" = None

    @property
    def final_elbo(self) -> float:
        return self.elbo_trace[-1]


@dataclass
class _RestartResult:
    state: VariationalState
    hyper: HyperParams
    elbo_trace: list[float]
    sweeps: int
    converged: bool
    elbo_decreases: int
    max_relative_decrease: float
    flags: list[str]


def _ones(*shape: int) -> torch.Tensor:
    return torch.ones(*shape, dtype=DTYPE)


def _logit(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p) - torch.log1p(-p)


def _clamped_sigmoid(logit: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


def _clamp_prob(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_FLOOR, 1 - PROB_FLOOR)


def selection_prior(X: CountMatrix) -> tuple[torch.Tensor, list[int]]:
    """P0_j = 1 - exp(-s_j / m_j) per gene.

    m_j is the mean of the non-zero counts of gene j and s_j its standard
    deviation over all cells. All-zero genes get 0 and are reported.
    """
    n, m = X.shape
    sums = torch.zeros(m, dtype=DTYPE).index_add_(0, X.cols, X.values)
    squares = torch.zeros(m, dtype=DTYPE).index_add_(0, X.cols, X.values**2)
    nonzero = X.nonzero_counts_per_column()
    mean = sums / n
    std = (squares / n - mean**2).clamp_min(0.0).sqrt()
    empty = nonzero == 0
    nonzero_mean = torch.where(empty, torch.ones_like(sums), sums / nonzero.clamp_min(1))
    prior = torch.where(empty, torch.zeros_like(sums), 1 - torch.exp(-std / nonzero_mean))
    return prior, torch.nonzero(empty).flatten().tolist()


def init_state(
    X: CountMatrix | torch.Tensor | np.ndarray,
    config: FitConfig,
    rng: np.random.Generator,
) -> tuple[VariationalState, HyperParams]:
    X = as_count_matrix(X)
    if X.nnz == 0:
        raise InputError("degenerate all-zero input")
    n, m = X.shape
    K = config.K
    family = config.family

    scale = math.sqrt(float(X.values.sum()) / (n * m) / K)
    # rates are 1, so the shapes are the initial moments
    a = torch.stack(
        [
            torch.as_tensor(rng.gamma(INIT_SHAPE, scale / INIT_SHAPE, size=(n, K)), dtype=DTYPE),
            _ones(n, K),
        ],
        dim=-1,
    )
    b = torch.stack(
        [
            torch.as_tensor(rng.gamma(INIT_SHAPE, scale / INIT_SHAPE, size=(m, K)), dtype=DTYPE),
            _ones(m, K),
        ],
        dim=-1,
    )

    if family.zero_inflated:
        pD = X.expressed_fraction()[None, :].expand(n, m).clone()
        pD[X.rows, X.cols] = 1.0
    else:
        pD = _ones(n, m)

    if family.sparse:
        prior, _ = selection_prior(X)
        pS = prior[:, None].expand(m, K).clone()
    else:
        pS = _ones(m, K)

    state = VariationalState(a, b, pD, pS, config.tau)
    hyper = m_step(state, family=family)
    return state, hyper


def _support_allocation(
    state: VariationalState, X: CountMatrix, support: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """r restricted to `support`, the active cells and each gene's allocation value.

    On the support r is proportional to exp(pS * (log U + log V')), the maximizer
    of sum_k r (pS (log U + log V')) - r log r. The maximum is the logsumexp of
    the same logits, and 0 for a gene with an empty support.
    """
    logits = state.pS[X.cols] * (state.log_U[X.rows] + state.log_V[X.cols])
    on = support[X.cols]
    active = on.any(dim=1)
    logits = logits.masked_fill(~on, -math.inf)
    logits[~active] = 0.0
    r = torch.softmax(logits, dim=1)
    cell_values = X.values * torch.logsumexp(logits, dim=1) * active
    values = torch.zeros(state.shape[1], dtype=DTYPE).index_add_(0, X.cols, cell_values)
    return r, active, values


def update_r(state: VariationalState, X: CountMatrix) -> MultinomialAllocation:
    """Allocations over each gene's support.

    A gene whose proposal pS > tau differs from its support moves to the
    proposal only if that does not lower the allocation term of the bound.
    """
    r, active, values = _support_allocation(state, X, state.support)
    moving = (state.S_tilde != state.support).any(dim=1)
    if bool(moving.any()):
        proposal_r, proposal_active, proposal_values = _support_allocation(
            state, X, state.S_tilde
        )
        moving &= proposal_values >= values
        state.support = torch.where(moving[:, None], state.S_tilde, state.support)
        moved = moving[X.cols]
        r = torch.where(moved[:, None], proposal_r, r)
        active = torch.where(moved, proposal_active, active)
    state.allocation = MultinomialAllocation(X.rows, X.cols, X.values, r, active)
    return state.allocation


def _allocation(state: VariationalState) -> MultinomialAllocation:
    if state.allocation is None:
        raise InputError("update_r must run before the Gamma and selection updates")
    return state.allocation


def update_a(state: VariationalState, X: CountMatrix, hyper: HyperParams) -> torch.Tensor:
    alloc = _allocation(state)
    n = state.shape[0]
    counts = torch.zeros(n, state.K, dtype=DTYPE).index_add_(
        0, alloc.rows, alloc.Z_hat * state.pS[alloc.cols]
    )
    shape = hyper.alpha[:, 0] + counts
    rate = hyper.alpha[:, 1] + state.pD @ state.loadings
    state.a = torch.stack([shape, rate], dim=-1)
    state.refresh_U()
    return state.a


def update_b(state: VariationalState, X: CountMatrix, hyper: HyperParams) -> torch.Tensor:
    alloc = _allocation(state)
    m = state.shape[1]
    counts = torch.zeros(m, state.K, dtype=DTYPE).index_add_(0, alloc.cols, alloc.Z_hat)
    shape = hyper.beta[:, 0] + state.pS * counts
    rate = hyper.beta[:, 1] + state.pS * (state.pD.T @ state.U_hat)
    state.b = torch.stack([shape, rate], dim=-1)
    state.refresh_V()
    return state.b


def update_pD(state: VariationalState, X: CountMatrix, hyper: HyperParams) -> torch.Tensor:
    if not hyper.zero_inflated:
        return state.pD
    logit = _logit(hyper.pi_D)[None, :] - state.U_hat @ state.loadings.T
    pD = _clamped_sigmoid(logit)
    pD[X.rows, X.cols] = 1.0
    state.pD = pD
    return state.pD


def update_pS(state: VariationalState, X: CountMatrix, hyper: HyperParams) -> torch.Tensor:
    if not hyper.sparse:
        return state.pS
    alloc = _allocation(state)
    m = state.shape[1]
    rate_term = state.V_hat * (state.pD.T @ state.U_hat)
    log_terms = alloc.Z_hat * (state.log_U[alloc.rows] + state.log_V[alloc.cols])
    count_term = torch.zeros(m, state.K, dtype=DTYPE).index_add_(0, alloc.cols, log_terms)
    logit = _logit(hyper.pi_S)[:, None] - rate_term + count_term
    state.pS = _clamped_sigmoid(logit)
    state.refresh_S()
    return state.pS


def solve_gamma_prior(
    mean: torch.Tensor,
    mean_log: torch.Tensor,
    rate: torch.Tensor | None = None,
    fix_scale: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Maximize sum E[log Gamma(x; shape, rate)] given E[x] and E[log x] averages.

    With `fix_scale` the rate is kept and only the shape is solved for.
    Otherwise the coupled stationarity equations

        shape = inv_digamma(log(rate) + mean_log),   rate = shape / mean

    are solved: Newton steps on the profiled equation
    log(shape) - digamma(shape) = log(mean) - mean_log give the starting
    point, the alternating fixed point confirms it.
    """
    if not bool(torch.isfinite(mean).all() and torch.isfinite(mean_log).all()):
        raise NumericalError("Non-finite variational moments in the M-step")

    if fix_scale:
        if rate is None:
            raise InputError("fix_scale needs the rates to keep")
        shape = inv_digamma(torch.log(rate) + mean_log)
        return _cap_shape(shape), rate

    gap = torch.log(mean) - mean_log
    degenerate = ~(gap > 1e-12)
    g = gap.clamp_min(1e-12)
    shape = (3 - g + torch.sqrt((g - 3) ** 2 + 24 * g)) / (12 * g)
    for _ in range(M_STEP_MAX_ITER):
        numerator = mean_log - torch.log(mean) + torch.log(shape) - digamma(shape)
        denominator = shape**2 * (1 / shape - trigamma(shape))
        new_shape = 1 / (1 / shape + numerator / denominator)
        new_shape = torch.where(new_shape > 0, new_shape, shape / 2)
        done = bool(((new_shape - shape).abs() <= M_STEP_TOL * shape).all())
        shape = new_shape
        if done:
            break

    capped = degenerate | ~torch.isfinite(shape) | (shape >= SHAPE_CAP)
    shape = torch.where(capped, torch.full_like(shape, SHAPE_CAP), shape)
    for _ in range(M_STEP_MAX_ITER):
        new_shape = torch.where(
            capped, shape, inv_digamma(torch.log(shape / mean) + mean_log)
        )
        done = bool(((new_shape - shape).abs() <= M_STEP_TOL * shape).all())
        shape = new_shape
        if done:
            break

    shape = _cap_shape(shape)
    return shape, shape / mean


def _cap_shape(shape: torch.Tensor) -> torch.Tensor:
    if bool((shape >= SHAPE_CAP).any()):
        warnings.warn(
            f"Gamma prior shape reached the cap {SHAPE_CAP:g}: the factor moments have no spread",
            PCMFWarning,
        )
    return shape.clamp_max(SHAPE_CAP)


def m_step(
    state: VariationalState,
    hyper: HyperParams | None = None,
    fix_scale: bool = False,
    family: ModelFamily | None = None,
) -> HyperParams:
    """Hyperparameters maximizing E_q[log p] given the current state.

    `hyper` supplies the family and, with `fix_scale`, the rates to keep.
    """
    if family is None:
        if hyper is None:
            raise InputError("m_step needs either the previous hyperparameters or a family")
        zero_inflated, sparse = hyper.zero_inflated, hyper.sparse
    else:
        zero_inflated, sparse = family.zero_inflated, family.sparse
    keep_rates = fix_scale and hyper is not None

    alpha_shape, alpha_rate = solve_gamma_prior(
        state.U_hat.mean(dim=0),
        state.log_U.mean(dim=0),
        hyper.alpha[:, 1] if keep_rates else None,
        fix_scale=keep_rates,
    )
    beta_shape, beta_rate = solve_gamma_prior(
        state.V_hat.mean(dim=0),
        state.log_V.mean(dim=0),
        hyper.beta[:, 1] if keep_rates else None,
        fix_scale=keep_rates,
    )
    n, m = state.shape
    pi_D = _clamp_prob(state.pD.mean(dim=0)) if zero_inflated else _ones(m)
    pi_S = _clamp_prob(state.pS.mean(dim=1)) if sparse else _ones(m)
    return HyperParams(
        alpha=torch.stack([alpha_shape, alpha_rate], dim=-1),
        beta=torch.stack([beta_shape, beta_rate], dim=-1),
        pi_S=pi_S,
        pi_D=pi_D,
        zero_inflated=zero_inflated,
        sparse=sparse,
    )


def _gamma_prior_term(
    prior: torch.Tensor, moment: torch.Tensor, log_moment: torch.Tensor
) -> torch.Tensor:
    shape, rate = prior[:, 0], prior[:, 1]
    per_entry = (
        shape * torch.log(rate) - torch.lgamma(shape) + (shape - 1) * log_moment - rate * moment
    )
    return per_entry.sum()


def _gamma_entropy(params: torch.Tensor) -> torch.Tensor:
    shape, rate = params[..., 0], params[..., 1]
    return (shape - torch.log(rate) + torch.lgamma(shape) + (1 - shape) * digamma(shape)).sum()


def _bernoulli_terms(p: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    xlogy = torch.special.xlogy
    expected_log_prior = xlogy(p, prior) + xlogy(1 - p, 1 - prior)
    entropy = -xlogy(p, p) - xlogy(1 - p, 1 - p)
    return (expected_log_prior + entropy).sum()


def elbo_terms(
    state: VariationalState, hyper: HyperParams, X: CountMatrix
) -> dict[str, float]:
    """The evidence lower bound split into named terms, all in closed form.

    Counts of genes with an empty support enter the allocation term only
    through -log(x!).
    """
    alloc = state.allocation
    if alloc is None:
        alloc = update_r(state.clone(), X)
    Z_hat = alloc.Z_hat
    log_rates = state.log_U[alloc.rows] + state.log_V[alloc.cols]
    terms = {
        "allocation": (state.pS[alloc.cols] * Z_hat * log_rates).sum()
        - torch.special.xlogy(Z_hat, alloc.r).sum()
        - torch.lgamma(alloc.counts + 1).sum(),
        "poisson_rate": -(state.pD * (state.U_hat @ state.loadings.T)).sum(),
        "gamma_U": _gamma_prior_term(hyper.alpha, state.U_hat, state.log_U)
        + _gamma_entropy(state.a),
        "gamma_V": _gamma_prior_term(hyper.beta, state.V_hat, state.log_V)
        + _gamma_entropy(state.b),
    }
    if hyper.sparse:
        terms["selection"] = _bernoulli_terms(state.pS, hyper.pi_S[:, None])
    if hyper.zero_inflated:
        terms["dropout"] = _bernoulli_terms(state.pD, hyper.pi_D[None, :])

    values = {name: float(value) for name, value in terms.items()}
    for name, value in values.items():
        if not math.isfinite(value):
            raise NumericalError(f"ELBO term '{name}' is not finite ({value})")
    return values


def elbo(state: VariationalState, hyper: HyperParams, X: CountMatrix) -> float:
    return sum(elbo_terms(state, hyper, X).values())


def _relative_change(new: torch.Tensor, old: torch.Tensor) -> float:
    reference = float(torch.linalg.norm(old))
    if reference == 0:
        return math.inf if float(torch.linalg.norm(new)) > 0 else 0.0
    return float(torch.linalg.norm(new - old)) / reference


def _check_rates(state: VariationalState) -> None:
    low, high = RATE_BOUNDS
    for name, params in (("a", state.a), ("b", state.b)):
        rates = params[..., 1]
        if not bool(torch.isfinite(rates).all()) or bool(((rates < low) | (rates > high)).any()):
            raise NumericalError(
                f"Variational rates of {name} left [{low:g}, {high:g}]: the factors diverge to an infinite norm"
            )


def sweep(
    state: VariationalState, X: CountMatrix, hyper: HyperParams, fix_scale: bool
) -> HyperParams:
    """One pass of coordinate updates followed by the M-step."""
    update_r(state, X)
    update_a(state, X, hyper)
    update_b(state, X, hyper)
    update_pD(state, X, hyper)
    update_pS(state, X, hyper)
    hyper = m_step(state, hyper, fix_scale=fix_scale)
    _check_rates(state)
    return hyper


def warm_up(
    state: VariationalState, X: CountMatrix, hyper: HyperParams, sweeps: int, fix_scale: bool
) -> HyperParams:
    """Sweeps with every gene on every factor, then a selection seeded from the loadings.

    Gene j starts on factor k when its loading exceeds the mean loading of
    factor k over all genes.
    """
    m, K = state.pS.shape
    state.pS = _ones(m, K)
    state.refresh_S()
    state.support = torch.ones(m, K, dtype=torch.bool)
    dense = replace(hyper, sparse=False, pi_S=_ones(m))
    for _ in range(sweeps):
        dense = sweep(state, X, dense, fix_scale)

    seeded = state.V_hat > state.V_hat.mean(dim=0)
    state.pS = torch.full((m, K), PROB_FLOOR, dtype=DTYPE).masked_fill(seeded, 1 - PROB_FLOOR)
    state.refresh_S()
    state.support = seeded
    return m_step(state, replace(dense, sparse=True), fix_scale=fix_scale)


def _run_restart(
    X: CountMatrix, config: FitConfig, rng: np.random.Generator, restart: int
) -> _RestartResult:
    fix_scale = config.resolved_fix_scale(X.shape)
    with profile(f"restart {restart} init"):
        state, hyper = init_state(X, config, rng)
    if config.family.sparse and config.warmup_sweeps > 0:
        with profile(f"restart {restart} warm-up"):
            hyper = warm_up(state, X, hyper, config.warmup_sweeps, fix_scale)

    trace: list[float] = []
    converged = False
    decreases, worst_decrease = 0, 0.0
    flags: list[str] = []
    sweeps = 0
    with profile(f"restart {restart} sweeps"):
        for sweeps in range(1, config.max_sweeps + 1):
            previous_U = state.U_hat
            previous_V = state.loadings
            hyper = sweep(state, X, hyper, fix_scale)
            value = elbo(state, hyper, X)
            if trace and value < trace[-1]:
                decreases += 1
                relative = (trace[-1] - value) / abs(trace[-1])
                worst_decrease = max(worst_decrease, relative)
                if verbose_enabled():
                    print(f"restart {restart} sweep {sweeps} elbo decreased by {relative:.3e} (relative)")
            trace.append(value)
            gap = max(
                _relative_change(state.U_hat, previous_U),
                _relative_change(state.loadings, previous_V),
            )
            if verbose_enabled():
                print(f"restart {restart} sweep {sweeps} elbo={value:.6f} gap={gap:.3e}")
            if gap < config.rel_tol:
                converged = True
                break

    if not converged:
        flags.append("max_sweeps_reached")
    if verbose_enabled():
        print(f"restart {restart} finished after {sweeps} sweeps, elbo={trace[-1]:.6f}")
    return _RestartResult(state, hyper, trace, sweeps, converged, decreases, worst_decrease, flags)


def _attempt_restart(
    X: CountMatrix, config: FitConfig, rng: np.random.Generator, restart: int
) -> _RestartResult | None:
    try:
        return _run_restart(X, config, rng, restart)
    except NumericalError as e:
        warnings.warn(f"Restart {restart} aborted: {e}", PCMFWarning)
        return None


def _fitted_model(
    state: VariationalState, hyper: HyperParams, family: ModelFamily, order: list[int]
) -> FittedModel:
    hyper = replace(hyper, alpha=hyper.alpha[order], beta=hyper.beta[order])
    return FittedModel(
        family=family,
        U=state.U_hat[:, order],
        V=state.loadings[:, order],
        log_U=state.log_U[:, order],
        log_V=state.log_V[:, order],
        pS=state.pS[:, order],
        pD_mean=state.pD.mean(dim=0),
        hyper=hyper,
        selected_genes=state.support.any(dim=1),
    )


def _deviance_or_nan(X: CountMatrix, model: FittedModel) -> tuple[float, bool]:
    """Explained deviance of the raw-scale mean, over the selected genes only."""
    Lambda = model.expected_counts()
    try:
        if model.family.sparse:
            selected = model.selected_genes
            return explained_deviance_report(X.select_columns(selected), Lambda[:, selected])
        return explained_deviance_report(X, Lambda)
    except InputError as e:
        warnings.warn(f"Explained deviance undefined: {e}", PCMFWarning)
        return math.nan, False


def fit(
    X: CountMatrix | torch.Tensor | np.ndarray, config: FitConfig
) -> tuple[FittedModel, FitReport]:
    """Run `config.n_restarts` independent restarts and keep the one with the
    highest final ELBO (the lowest restart index on ties)."""
    X = as_count_matrix(X)
    if X.nnz == 0:
        raise InputError("degenerate all-zero input")
    generators = spawn_generators(config.rng_seed, config.n_restarts)

    with profile("fit"):
        if config.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
                results = list(
                    pool.map(
                        lambda job: _attempt_restart(X, config, *job),
                        zip(generators, range(config.n_restarts)),
                    )
                )
        else:
            results = [
                _attempt_restart(X, config, rng, restart)
                for restart, rng in enumerate(generators)
            ]

    restart_elbos = [None if result is None else result.elbo_trace[-1] for result in results]
    candidates = [i for i, value in enumerate(restart_elbos) if value is not None]
    if not candidates:
        raise NumericalError(f"All {config.n_restarts} restarts failed")
    best = max(candidates, key=lambda i: (restart_elbos[i], -i))
    result = results[best]
    if verbose_enabled():
        print(f"selected restart {best} with elbo={restart_elbos[best]:.6f}")

    order = list(range(config.K))
    if config.order_factors:
        order = order_factors(FactorPair(result.state.U_hat, result.state.loadings), X)
    model = _fitted_model(result.state, result.hyper, config.family, order)

    pct_dev, worse = _deviance_or_nan(X, model)
    flags = list(result.flags)
    if worse:
        flags.append("worse_than_null")
        warnings.warn(
            f"Fitted model explains {pct_dev:.3f} of the deviance, outside [0, 1]", PCMFWarning
        )
    _, uninformative = selection_prior(X)
    report = FitReport(
        elbo_trace=result.elbo_trace,
        explained_deviance=pct_dev,
        worse_than_null=worse,
        sweeps=result.sweeps,
        converged=result.converged,
        restart=best,
        restart_elbos=restart_elbos,
        selected_genes=model.selected_genes if config.family.sparse else None,
        uninformative_genes=uninformative,
        elbo_decreases=result.elbo_decreases,
        max_relative_decrease=result.max_relative_decrease,
        flags=flags,
    )
    return model, report


def fit_sparse_reestimate(
    X: CountMatrix | torch.Tensor | np.ndarray, config: FitConfig
) -> tuple[FittedModel, FitReport]:
    """Sparse fit, then a zero-inflated refit on the genes it selected.

    Genes left out of the selection get zero loadings in the returned model.
    The returned report describes the refit, so its explained deviance is
    measured on the selected genes, and carries the first stage as
    `first_stage`.
    """
    if config.family is not ModelFamily.SPARSE_ZI_GAP:
        raise InputError(f"Re-estimation starts from a sparse fit, got family {config.family.value}")
    X = as_count_matrix(X)
    first_model, first_report = fit(X, config)
    selected = first_model.selected_genes
    if not bool(selected.any()):
        warnings.warn("No gene was selected: returning the sparse fit", PCMFWarning)
        first_report.flags.append("empty_selection")
        return first_model, first_report

    refit_model, refit_report = fit(
        X.select_columns(selected), replace(config, family=ModelFamily.ZI_GAP)
    )
    m, K = X.shape[1], config.K
    V = torch.zeros(m, K, dtype=DTYPE)
    V[selected] = refit_model.V
    log_V = torch.full((m, K), LOG_EPS_RATE, dtype=DTYPE)
    log_V[selected] = refit_model.log_V
    pS = torch.zeros(m, K, dtype=DTYPE)
    pS[selected] = 1.0
    pD_mean = torch.zeros(m, dtype=DTYPE)
    pD_mean[selected] = refit_model.pD_mean
    # unselected genes only produce zeros under the refit model
    pi_D = torch.full((m,), EPS_RATE, dtype=DTYPE)
    pi_D[selected] = refit_model.hyper.pi_D
    hyper = replace(refit_model.hyper, pi_D=pi_D, pi_S=torch.ones(m, dtype=DTYPE))

    model = FittedModel(
        family=ModelFamily.SPARSE_ZI_GAP,
        U=refit_model.U,
        V=V,
        log_U=refit_model.log_U,
        log_V=log_V,
        pS=pS,
        pD_mean=pD_mean,
        hyper=hyper,
        selected_genes=selected,
        reestimated=True,
    )
    refit_report.selected_genes = selected
    refit_report.first_stage = first_report
    return model, refit_report
