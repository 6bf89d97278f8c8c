"""Central finite-difference gradients, used as an independent oracle."""
from __future__ import annotations

from typing import Callable, Dict

import numpy as np


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def numeric_grads(f: Callable[[Dict[str, np.ndarray]], float], params: Dict[str, np.ndarray],
                  h: float = 1e-5) -> Dict[str, np.ndarray]:
    out = {}
    for name in params:
        def g(v, name=name):
            return f({**params, name: v})
        out[name] = numeric_grad(g, params[name], h)
    return out


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
