from torch_pcmf.flags import beartype_enabled

if beartype_enabled():
    from beartype import BeartypeConf
    from beartype.claw import beartype_this_package

    beartype_this_package(conf=BeartypeConf(is_pep484_tower=True))


from torch_pcmf.counts import CountMatrix, read_matrix, write_matrix
from torch_pcmf.errors import InputError, NumericalError, PCMFError, PCMFWarning
from torch_pcmf.inference import FitConfig, FitReport, FittedModel, fit, fit_sparse_reestimate
from torch_pcmf.model_core import (
    FactorPair,
    HyperParams,
    ModelFamily,
    bregman_divergence,
    deviance,
    deviance_curve,
    explained_deviance,
    order_factors,
)
from torch_pcmf.simulate import SimScenario, simulate

__all__ = [
    "CountMatrix",
    "read_matrix",
    "write_matrix",
    "InputError",
    "NumericalError",
    "PCMFError",
    "PCMFWarning",
    "FitConfig",
    "FitReport",
    "FittedModel",
    "fit",
    "fit_sparse_reestimate",
    "FactorPair",
    "HyperParams",
    "ModelFamily",
    "bregman_divergence",
    "deviance",
    "deviance_curve",
    "explained_deviance",
    "order_factors",
    "SimScenario",
    "simulate",
]
