"""Dimension reduction methods compared by `pcmf compare`.

Every method maps (X, FitConfig) to a `MethodResult`. New methods are added
with the `register_method` decorator.
"""

import math
from collections.abc import Callable
from dataclasses import dataclass, replace

import numpy as np
import torch

from torch_pcmf.baselines import pca_logcounts, poisson_nmf
from torch_pcmf.counts import CountMatrix
from torch_pcmf.errors import InputError
from torch_pcmf.inference import FitConfig, fit, fit_sparse_reestimate
from torch_pcmf.model_core import ModelFamily, explained_deviance


@dataclass
class MethodResult:
    # coordinates k-means runs on
    cell_embedding: torch.Tensor
    gene_embedding: torch.Tensor
    pct_dev: float
    selected_genes: torch.Tensor | None = None


METHODS: dict[str, Callable[[CountMatrix, FitConfig], MethodResult]] = {}


def register_method(name: str):
    def decorator(func: Callable[[CountMatrix, FitConfig], MethodResult]):
        if name in METHODS:
            raise ValueError(f"Method {name} is already registered")
        METHODS[name] = func
        return func

    return decorator


def get_method(name: str) -> Callable[[CountMatrix, FitConfig], MethodResult]:
    try:
        return METHODS[name]
    except KeyError:
        raise InputError(
            f"Unknown method {name}, choose among {', '.join(sorted(METHODS))}"
        ) from None


def _pct_dev(X: CountMatrix, Lambda: torch.Tensor) -> float:
    try:
        return explained_deviance(X, Lambda)
    except InputError:
        return math.nan


def _factor_model_result(X: CountMatrix, config: FitConfig, family: ModelFamily) -> MethodResult:
    model, report = fit(X, replace(config, family=family))
    return MethodResult(
        cell_embedding=model.log_U,
        gene_embedding=model.log_V,
        pct_dev=report.explained_deviance,
    )


@register_method("gap")
def gap(X: CountMatrix, config: FitConfig) -> MethodResult:
    return _factor_model_result(X, config, ModelFamily.GAP)


@register_method("zigap")
def zigap(X: CountMatrix, config: FitConfig) -> MethodResult:
    return _factor_model_result(X, config, ModelFamily.ZI_GAP)


@register_method("spcmf")
def spcmf(X: CountMatrix, config: FitConfig) -> MethodResult:
    # the deviance of the refit, on the genes it was fitted to
    model, report = fit_sparse_reestimate(X, replace(config, family=ModelFamily.SPARSE_ZI_GAP))
    return MethodResult(
        cell_embedding=model.log_U,
        gene_embedding=model.log_V,
        pct_dev=report.explained_deviance,
        selected_genes=model.selected_genes,
    )


@register_method("poisson-nmf")
def nmf(X: CountMatrix, config: FitConfig) -> MethodResult:
    model = poisson_nmf(
        X, config.K, np.random.default_rng(config.rng_seed), tol=config.rel_tol
    )
    return MethodResult(
        cell_embedding=model.U,
        gene_embedding=model.V,
        pct_dev=_pct_dev(X, model.reconstruction()),
    )


@register_method("pca")
def pca(X: CountMatrix, config: FitConfig) -> MethodResult:
    model = pca_logcounts(X, config.K)
    return MethodResult(
        cell_embedding=model.U,
        gene_embedding=model.V,
        pct_dev=model.explained_variance,
    )
