import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(fn, arrays, eps=1e-6, picks=6, rng=None):
    """Central differences of scalar ``fn()`` at a few random entries of each array."""
    rng = rng or np.random.default_rng(0)
    out = []
    for a in arrays:
        idxs = [tuple(int(rng.integers(d)) for d in a.shape) for _ in range(picks)]
        vals = []
        for idx in idxs:
            old = a[idx]
            a[idx] = old + eps
            hi = fn()
            a[idx] = old - eps
            lo = fn()
            a[idx] = old
            vals.append((idx, (hi - lo) / (2 * eps)))
        out.append(vals)
    return out
