"""Finite-difference gradient oracle shared by the test modules.

Central differences are evaluated in extended precision with one Richardson
extrapolation step. Piecewise-linear activations (ReLU, absolute value) make
the loss non-differentiable on measure-zero sets; when a stencil point flips
any activation sign the difference quotient straddles a kink and says nothing
about the derivative, so such coordinates are reported as ``None``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from cavmarl import numcore as nc

EXTENDED = np.longdouble


@contextlib.contextmanager
def record_kinks(log: List[np.ndarray]):
    """Capture the sign pattern of every ReLU / abs input while active."""
    relu, absolute = nc.relu, nc.absolute

    def relu_spy(x, tape):
        log.append(np.asarray(x.value > 0))
        return relu(x, tape)

    def abs_spy(x, tape):
        log.append(np.asarray(x.value >= 0))
        return absolute(x, tape)

    nc.relu, nc.absolute = relu_spy, abs_spy
    try:
        yield log
    finally:
        nc.relu, nc.absolute = relu, absolute


def evaluate(loss_fn: Callable[[Dict[str, np.ndarray]], np.ndarray], params):
    log: List[np.ndarray] = []
    with record_kinks(log):
        value = loss_fn(params)
    return value, log


def same_pattern(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def fd_coordinate(loss_fn, params, name: str, idx: Tuple[int, ...], h: float,
                  base_pattern) -> Optional[float]:
    arr = params[name]
    old = arr[idx]
    values = {}
    for step in (h, -h, h / 2, -h / 2):
        arr[idx] = old + step
        values[step], pattern = evaluate(loss_fn, params)
        if not same_pattern(pattern, base_pattern):
            arr[idx] = old
            return None
    arr[idx] = old
    d_h = (values[h] - values[-h]) / (2 * h)
    d_h2 = (values[h / 2] - values[-h / 2]) / h
    return float((4 * d_h2 - d_h) / 3)


def check_gradients(loss_fn, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                    coords: Optional[Dict[str, Iterable[Tuple[int, ...]]]] = None,
                    h: float = 1e-5, threshold: float = 1e-8):
    """Compare ``grads`` with the oracle; returns ``(max_rel_error, checked, skipped)``.

    ``loss_fn`` must evaluate the loss for a parameter dict without
    converting it to float64. ``coords`` defaults to every coordinate.
    """
    ext = {k: np.array(v, dtype=EXTENDED) for k, v in params.items()}
    _, base = evaluate(loss_fn, ext)
    worst, checked, skipped = 0.0, 0, 0
    for name, g in grads.items():
        idxs = coords[name] if coords is not None else np.ndindex(g.shape)
        for idx in idxs:
            if abs(g[idx]) <= threshold:
                continue
            fd = fd_coordinate(loss_fn, ext, name, idx, h, base)
            if fd is None:
                skipped += 1
                continue
            rel = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd))
            worst = max(worst, rel)
            checked += 1
    return worst, checked, skipped


def sample_coords(grads, per_array: int, rng: np.random.Generator):
    out = {}
    for name, g in grads.items():
        flat = rng.choice(g.size, size=min(per_array, g.size), replace=False)
        out[name] = [np.unravel_index(i, g.shape) for i in flat]
    return out
