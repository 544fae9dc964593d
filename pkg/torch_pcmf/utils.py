import numpy as np
import torch

DTYPE = torch.float64


def as_float_tensor(x: torch.Tensor | np.ndarray | list) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype=DTYPE, device="cpu")
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def spawn_generators(seed: int | None, count: int) -> list[np.random.Generator]:
    # Child i only depends on (seed, i), so adding restarts never changes
    # the streams of the earlier ones.
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]


def generator_seed(rng: np.random.Generator) -> int:
    """Draw an integer seed from a generator, for libraries taking `random_state`."""
    return int(rng.integers(0, 2**31 - 1))
