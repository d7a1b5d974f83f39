"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

STEP = 1e-5


class NonDeterministicError(RuntimeError):
    """The checked function returned different values for identical inputs."""


@dataclass
class GradCheckResult:
    max_error: float
    worst_param: int
    worst_index: int
    analytic: float
    numeric: float
    checked: int


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))


def grad_check_detailed(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = STEP,
    fraction: float = 1.0,
    rng: np.random.Generator | None = None,
    retry_above: float = 1e-7,
) -> GradCheckResult:
    """Compare backward gradients of ``f`` with central differences.

    ``f`` takes no arguments and must read the current ``data`` of ``params``.
    With ``fraction < 1`` a random subset of each parameter's coordinates is
    checked (at least one per parameter).

    A coordinate whose error exceeds ``retry_above`` is measured again with
    step ``h / 10`` and keeps the smaller error.  A perturbation that happens
    to straddle a ReLU kink disagrees with the one-sided truth at ``h`` but
    not at ``h / 10``; a wrong backward rule disagrees at every step size.
    """
    for p in params:
        p.zero_grad()
    base = f()
    backward(base)
    again = f().item()
    if again != base.item():
        raise NonDeterministicError(f"f() gave {base.item()!r} then {again!r}")
    analytic = [p.grad.copy() for p in params]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = GradCheckResult(0.0, -1, -1, 0.0, 0.0, 0)
    checked = 0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        size = flat.size
        if fraction >= 1.0:
            coords = np.arange(size)
        else:
            n_pick = max(1, int(round(fraction * size)))
            coords = np.sort(rng.choice(size, size=n_pick, replace=False))
        for i in coords:
            ana = analytic[k].reshape(-1)[i]
            num = _central(f, flat, i, h)
            err = float(relative_error(ana, num))
            if err > retry_above:
                num_fine = _central(f, flat, i, h / 10.0)
                err_fine = float(relative_error(ana, num_fine))
                if err_fine < err:
                    num, err = num_fine, err_fine
            checked += 1
            if err > worst.max_error or worst.worst_param < 0:
                worst = GradCheckResult(err, k, int(i), float(ana), float(num), 0)
    worst.checked = checked
    return worst


def _central(f: Callable[[], Tensor], flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    fp = f().item()
    flat[i] = orig - h
    fm = f().item()
    flat[i] = orig
    return (fp - fm) / (2.0 * h)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = STEP, **kw) -> float:
    """Maximum relative error ``|a - n| / max(1, |a|, |n|)`` over checked coordinates."""
    return grad_check_detailed(f, params, h=h, **kw).max_error
