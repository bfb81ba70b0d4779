"""Central finite-difference gradient oracle.

Independent of the autodiff path it checks: gradients are estimated by
perturbing raw numpy buffers one entry at a time and re-running the forward
function. All checks run in float64 so the comparison tolerance reflects the
math, not float32 rounding.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from sitsformer.tensor import Tensor, backward


def finite_difference(
    f: Callable[[], float], buf: np.ndarray, h: float = 1e-3
) -> np.ndarray:
    """Central-difference gradient of ``f()`` w.r.t. every entry of ``buf``.

    ``f`` must read ``buf`` afresh on every call; ``buf`` is restored on exit.
    """
    grad = np.zeros_like(buf, dtype=np.float64)
    flat = buf.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(
    make_loss: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between reverse-mode and FD gradients.

    ``make_loss`` rebuilds the scalar loss from the given parameter tensors;
    it is invoked once per FD probe so intermediate state is never reused.
    """
    for p in params:
        assert p.dtype == np.float64, "gradient checks must run in float64"
        p.zero_grad()
    loss = make_loss(params)
    backward(loss)
    worst = 0.0
    for p in params:
        ad = p.grad if p.grad is not None else np.zeros_like(p.data)

        def scalar() -> float:
            from sitsformer.tensor import no_grad

            with no_grad():
                return float(make_loss(params).data)

        fd = finite_difference(scalar, p.data, h=h)
        worst = max(worst, max_rel_err(ad, fd, floor=floor))
    return worst
