import torch

from torch_pcmf.errors import InputError
from torch_pcmf.utils import DTYPE

EULER_GAMMA = 0.5772156649015329
# below this point exp(y) + 1/2 is a poor starting guess
_SMALL_Y = -2.22


def digamma(x: torch.Tensor) -> torch.Tensor:
    return torch.special.digamma(x)


def trigamma(x: torch.Tensor) -> torch.Tensor:
    return torch.special.polygamma(1, x)


def inv_digamma(
    y: float | torch.Tensor, max_iter: int = 10, tol: float = 1e-12
) -> float | torch.Tensor:
    """Inverse of the digamma function, elementwise.

    Newton iterations on psi(x) - y started from the usual approximations
    exp(y) + 1/2 (large y) and -1/(y + gamma) (small y).
    """
    scalar = not isinstance(y, torch.Tensor)
    y = torch.as_tensor(y, dtype=DTYPE)
    if not bool(torch.isfinite(y).all()):
        raise InputError("inv_digamma needs finite inputs")

    x = torch.where(y >= _SMALL_Y, torch.exp(y) + 0.5, -1.0 / (y + EULER_GAMMA))
    for _ in range(max_iter):
        residual = digamma(x) - y
        if bool((residual.abs() <= tol * y.abs().clamp_min(1.0)).all()):
            break
        step = residual / trigamma(x)
        new_x = x - step
        # keep the iterate in the domain
        x = torch.where(new_x > 0, new_x, x / 2)

    if scalar:
        return float(x)
    return x
