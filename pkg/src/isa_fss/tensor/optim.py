"""Plain SGD and a central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import ContractError, DegenerateInputError
from .core import Tensor

ParamSet = Mapping[str, Tensor] | Sequence[Tensor]


def _items(params: ParamSet):
    if isinstance(params, Mapping):
        return list(params.items())
    return list(enumerate(params))


def sgd_step(params: ParamSet, lr: float) -> None:
    """In-place ``p <- p - lr * p.grad`` for every tensor in ``params``."""
    if lr < 0:
        raise ContractError(f"sgd_step: learning rate must be >= 0, got {lr}")
    items = _items(params)
    for key, p in items:
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {key!r} has no gradient")
    if lr == 0:
        return
    for _, p in items:
        p.data -= lr * p.grad


def finite_diff_grad(loss_fn: Callable[[], float], params: ParamSet, step: float = 1e-5):
    """Central-difference estimate of d loss_fn / d p for each scalar entry.

    ``loss_fn`` is re-evaluated with each entry nudged by ``+-step``; the
    parameter value is restored exactly afterwards. Returns arrays in the same
    container type as ``params``.
    """
    out = {}
    for key, p in _items(params):
        grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise DegenerateInputError(f"non-finite loss while probing {key!r}[{i}]")
            gflat[i] = (up - down) / (2.0 * step)
        out[key] = grad
    if isinstance(params, Mapping):
        return out
    return [out[i] for i in range(len(out))]
