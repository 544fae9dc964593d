"""Cell clustering recovery as the dropout rate grows, for low and high group
separation. Writes one row per (method, dropout, seed) to results/."""

import os
from pathlib import Path

from torch_pcmf.cli import RunConfig, cmd_compare

os.environ["TORCH_PCMF_PROFILE"] = "1"

RESULTS = Path(__file__).parent / "results"

if __name__ == "__main__":
    for theta_u in (0.5, 0.8):
        config = RunConfig(
            command="compare",
            output=str(RESULTS / f"dropout_grid_theta{theta_u}.csv"),
            dropouts="none,0.9,0.7,0.5,0.3",
            noise_props="0.4",
            theta_u=theta_u,
            n_seeds=10,
            jobs=os.cpu_count() or 1,
        )
        RESULTS.mkdir(exist_ok=True)
        cmd_compare(config)
