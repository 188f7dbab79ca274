from __future__ import annotations

import numpy as np


def perturbation_pairs(x: np.ndarray, rng, scales=(1e-4, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Pair each row of ``x`` with a random-direction neighbour.

    Step lengths are log-uniform over ``scales``.
    """
    d = rng.standard_normal(x.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lo, hi = np.log10(scales[0]), np.log10(scales[1])
    r = 10.0 ** rng.uniform(lo, hi, size=(len(x), 1))
    return x, x + r * d


def difference_quotients(fn, x1: np.ndarray, x2: np.ndarray, batch: int = 8192) -> np.ndarray:
    """``|f(x1) - f(x2)| / ||x1 - x2||`` per pair (Euclidean on both sides).

    Vector-valued ``fn`` uses the output norm. Coincident pairs give NaN.
    """
    out = np.empty(len(x1))
    for i in range(0, len(x1), batch):
        a, b = x1[i:i + batch], x2[i:i + batch]
        fa = np.asarray(fn(a), dtype=np.float64)
        fb = np.asarray(fn(b), dtype=np.float64)
        num = np.abs(fa - fb) if fa.ndim == 1 else np.linalg.norm(fa - fb, axis=1)
        den = np.linalg.norm(a - b, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[i:i + batch] = np.where(den > 0, num / den, np.nan)
    return out


def max_quotient(q: np.ndarray) -> float:
    q = q[np.isfinite(q)]
    return float(q.max()) if q.size else 0.0
