"""Cumulative deviance of the ordered factors of an over-specified sparse fit.

The curve flattens once the true structure is captured, which is how the
number of factors is chosen in practice.
"""

import os

from torch_pcmf.inference import FitConfig, fit
from torch_pcmf.model_core import ModelFamily, deviance_curve
from torch_pcmf.simulate import SimScenario, simulate

os.environ["TORCH_PCMF_PROFILE"] = "1"
os.environ["TORCH_PCMF_VERBOSE"] = "0"

if __name__ == "__main__":
    output = simulate(SimScenario(rng_seed=0))
    for family in (ModelFamily.ZI_GAP, ModelFamily.SPARSE_ZI_GAP):
        model, report = fit(output.X, FitConfig(K=8, family=family, rng_seed=0, n_jobs=5))
        curve = deviance_curve(model.factors(), output.X)
        print(f"{family.value}: explained deviance {report.explained_deviance:.3f}")
        for k, value in enumerate(curve, start=1):
            print(f"  k={k}: {value:.1f}")
