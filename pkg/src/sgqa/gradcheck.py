"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, backward


# (offset, weight) pairs; the derivative is sum(w * f(x + k*eps)) / (denominator * eps)
STENCILS = {
    2: (((1, 1.0), (-1, -1.0)), 2.0),
    4: (((2, -1.0), (1, 8.0), (-1, -8.0), (-2, 1.0)), 12.0),
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps coordinates whose true derivative sits below the
    finite-difference resolution from dividing noise by noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def numeric_derivative(f: Callable[[], Tensor], flat: np.ndarray, i: int, eps: float, order: int = 2) -> float:
    """Finite-difference derivative along coordinate ``i`` of the view ``flat``."""
    if order not in STENCILS:
        raise ContractError(f"no stencil of order {order}; choose from {sorted(STENCILS)}")
    taps, denom = STENCILS[order]
    orig = flat[i]
    acc = 0.0
    try:
        for k, w in taps:
            flat[i] = orig + k * eps
            acc += w * _value(f)
    finally:
        flat[i] = orig
    return acc / (denom * eps)


def _value(f: Callable[[], Tensor]) -> float:
    out = f()
    return float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])


def analytic_gradients(f: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    return float(loss.data.reshape(-1)[0]), [p.grad.copy() for p in params]


def grad_check_groups(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
    order: int = 2,
    floor: float = 1e-12,
) -> dict[str, float]:
    """Max relative error between tape and finite-difference gradients, per parameter.

    ``f`` is re-evaluated with each coordinate nudged by multiples of ``eps``
    (central differences for ``order=2``, the five-point stencil for
    ``order=4``); it must be deterministic (dropout off). When ``max_coords``
    is set, at most that many coordinates per parameter are checked, drawn
    with ``seed``.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    taped, grads = analytic_gradients(f, tensors)
    first, second = _value(f), _value(f)
    if not (first == second == taped):
        raise ContractError(
            f"function is not deterministic: evaluations gave {taped!r}, {first!r}, {second!r}")

    rng = np.random.default_rng(seed)
    report = {}
    for name, p, g in zip(names, tensors, grads):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.array([numeric_derivative(f, flat, int(i), eps, order) for i in coords])
        err = relative_error(g.reshape(-1)[coords], numeric, floor)
        report[name] = float(err.max()) if err.size else 0.0
    return report


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest relative error over every coordinate of every parameter."""
    report = grad_check_groups(f, {str(i): p for i, p in enumerate(params)}, eps=eps)
    return max(report.values(), default=0.0)
