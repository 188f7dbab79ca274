"""Exact optimal-transport oracles, Lipschitz estimation and concentration experiments."""
from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import nn_core as nn
from .lipschitz import difference_quotients, max_quotient, perturbation_pairs
from .reward import make_w_potential, potential, w_potential_loss

MAX_SUPPORT = 64


class InfeasibleWeights(ValueError):
    pass


def emd_1d_exact(xs, ys) -> float:
    """W1 between two equal-size empirical measures on the line (order statistics)."""
    xs = np.sort(np.asarray(xs, dtype=np.float64).ravel())
    ys = np.sort(np.asarray(ys, dtype=np.float64).ravel())
    if len(xs) != len(ys):
        raise ValueError("unequal sample counts; use emd_discrete_exact with weights")
    if len(xs) == 0:
        raise ValueError("empty samples")
    return float(np.mean(np.abs(xs - ys)))


def _tree_path(basis: set, n: int, m: int, start_col: int, end_row: int) -> list[tuple[int, int]]:
    """Edges of the unique basis-tree path from column ``start_col`` to row ``end_row``."""
    adj: dict[tuple[str, int], list[tuple[str, int]]] = {}
    for i, j in basis:
        adj.setdefault(("r", i), []).append(("c", j))
        adj.setdefault(("c", j), []).append(("r", i))
    src, dst = ("c", start_col), ("r", end_row)
    prev = {src: None}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        if node == dst:
            break
        for nb in adj.get(node, ()):
            if nb not in prev:
                prev[nb] = node
                queue.append(nb)
    if dst not in prev:
        raise RuntimeError("basis is not a spanning tree")
    path = []
    node = dst
    while prev[node] is not None:
        p = prev[node]
        a, b = (node, p) if node[0] == "r" else (p, node)
        path.append((a[1], b[1]))
        node = p
    path.reverse()
    return path


def _potentials(basis: set, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, m = C.shape
    u = np.full(n, np.nan)
    v = np.full(m, np.nan)
    u[0] = 0.0
    rows: dict[int, list[int]] = {}
    cols: dict[int, list[int]] = {}
    for i, j in basis:
        rows.setdefault(i, []).append(j)
        cols.setdefault(j, []).append(i)
    queue = deque([("r", 0)])
    while queue:
        kind, k = queue.popleft()
        if kind == "r":
            for j in rows.get(k, ()):
                if np.isnan(v[j]):
                    v[j] = C[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in cols.get(k, ()):
                if np.isnan(u[i]):
                    u[i] = C[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def transport_lp(a, b, C, max_iter: int = 100_000) -> tuple[float, np.ndarray]:
    """Exact transportation problem by the primal simplex on a spanning-tree basis.

    Northwest-corner start, most-negative reduced cost entering, and Bland's
    smallest-index rule once a run of degenerate pivots suggests cycling.
    Returns ``(optimal cost, plan)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError("weights do not match the cost matrix")
    x = np.zeros((n, m))
    basis: set[tuple[int, int]] = set()
    ra, rb = a.copy(), b.copy()
    i = j = 0
    while True:
        q = min(ra[i], rb[j])
        x[i, j] = q
        basis.add((i, j))
        ra[i] -= q
        rb[j] -= q
        if i == n - 1 and j == m - 1:
            break
        if i == n - 1:
            j += 1
        elif j == m - 1 or ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    tol = 1e-12 * max(1.0, float(np.abs(C).max()))
    degenerate_run = 0
    for _ in range(max_iter):
        u, v = _potentials(basis, C)
        red = C - u[:, None] - v[None, :]
        if degenerate_run > n + m:
            cand = np.argwhere(red < -tol)
            if len(cand) == 0:
                break
            ei, ej = map(int, cand[0])
        else:
            ei, ej = map(int, np.unravel_index(np.argmin(red), red.shape))
            if red[ei, ej] >= -tol:
                break
        path = _tree_path(basis, n, m, ej, ei)
        minus = path[0::2]
        plus = path[1::2]
        theta = min(x[c] for c in minus)
        leave = min((c for c in minus if x[c] <= theta), key=lambda c: (c[0], c[1]))
        for c in minus:
            x[c] -= theta
        for c in plus:
            x[c] += theta
        x[ei, ej] += theta
        x[leave] = 0.0
        basis.remove(leave)
        basis.add((ei, ej))
        degenerate_run = degenerate_run + 1 if theta == 0.0 else 0
    else:
        raise RuntimeError("transportation simplex did not converge")
    return float(np.sum(x * C)), x


def _check_measure(w, p, side: str) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(w, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if len(w) != len(p):
        raise ValueError(f"{side}: {len(w)} weights for {len(p)} points")
    if len(w) == 0 or len(w) > MAX_SUPPORT:
        raise ValueError(f"{side}: support size must be between 1 and {MAX_SUPPORT}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InfeasibleWeights(f"{side}: weights must be non-negative and sum to 1")
    return w, p


def emd_discrete_exact(weights_a, points_a, weights_b, points_b, metric: str = "euclidean") -> float:
    """Exact W1 between two discrete measures with at most 64 atoms each."""
    wa, pa = _check_measure(weights_a, points_a, "a")
    wb, pb = _check_measure(weights_b, points_b, "b")
    if pa.shape[1] != pb.shape[1]:
        raise ValueError("point dimensions differ")
    wb = wb * (wa.sum() / wb.sum())
    cost, _ = transport_lp(wa, wb, cdist(pa, pb, metric=metric))
    return cost


def emd_bruteforce(weights_a, points_a, weights_b, points_b) -> float:
    """Minimum cost over all basic feasible couplings (tiny instances only).

    Every vertex of the transportation polytope is the unique solution of the
    marginal equations restricted to some set of ``n + m - 1`` cells.
    """
    wa, pa = _check_measure(weights_a, points_a, "a")
    wb, pb = _check_measure(weights_b, points_b, "b")
    n, m = len(wa), len(wb)
    if n * m > 16:
        raise ValueError("brute force is limited to 4x4 instances")
    C = cdist(pa, pb)
    cells = [(i, j) for i in range(n) for j in range(m)]
    rhs = np.concatenate([wa, wb])
    best = math.inf
    for subset in itertools.combinations(range(n * m), n + m - 1):
        A = np.zeros((n + m, len(subset)))
        for k, c in enumerate(subset):
            i, j = cells[c]
            A[i, k] = 1.0
            A[n + j, k] = 1.0
        if np.linalg.matrix_rank(A) < len(subset):
            continue
        sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        if np.any(sol < -1e-12) or np.abs(A @ sol - rhs).max() > 1e-9:
            continue
        best = min(best, sum(sol[k] * C[cells[c]] for k, c in enumerate(subset)))
    return float(best)


@dataclass(frozen=True)
class DualGapResult:
    learned: float  # -L at the trained potential
    exact: float
    ratio: float
    lipschitz: float
    converged: bool


def dual_gap_check(xa, xb, budget: int = 3000, hidden=(64, 64), lr: float = 1e-3, rng=None,
                   model=None, tol: float = 1e-2) -> DualGapResult:
    """Train a spectrally normalized scalar potential on two fixed sample sets.

    The potential descends on ``xa`` (expert side) and ascends on ``xb``; at
    the optimum ``mean_b h - mean_a h`` approaches W1(a, b).  ``converged``
    is false when the objective still moved by more than ``tol`` (relative)
    over the last tenth of the budget.
    """
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    if xa.ndim == 1:
        xa, xb = xa[:, None], xb[:, None]
    if len(xa) > 256 or len(xb) > 256 or xa.shape[1] > 4:
        raise ValueError("dual check is limited to 256 points in at most 4 dimensions")
    rng = np.random.default_rng(rng)
    model = model or make_w_potential(xa.shape[1], hidden, rng)
    opt = nn.AdamState.like(model.net.arrays(), lr=lr)
    history = []
    for _ in range(budget):
        nn.refresh_spectral_state(model.net, 1)
        loss, grads, _, _ = w_potential_loss(model, xa, xb)
        nn.adam_update(model.net, grads, opt)
        history.append(-loss)
    learned = float(np.mean(potential(model, xb)) - np.mean(potential(model, xa)))
    tail = history[-max(1, budget // 10):]
    converged = (max(tail) - min(tail)) <= tol * max(1.0, abs(learned))
    if xa.shape[1] == 1 and len(xa) == len(xb):
        exact = emd_1d_exact(xa, xb)
    else:
        exact = emd_discrete_exact(np.full(len(xa), 1 / len(xa)), xa, np.full(len(xb), 1 / len(xb)), xb)
    sampler = _box_sampler(np.concatenate([xa, xb]))
    lip = empirical_lipschitz(lambda z: potential(model, z), sampler, 4000, rng)
    return DualGapResult(learned, exact, learned / exact if exact > 0 else math.nan, lip, converged)


def _box_sampler(x: np.ndarray):
    lo, hi = x.min(axis=0), x.max(axis=0)
    return lambda rng, k: rng.uniform(lo, hi, size=(k, len(lo)))


def empirical_lipschitz(fn, domain_sampler, n_pairs: int = 1000, rng=None, scales=(1e-4, 1.0)) -> float:
    """Max difference quotient over random pairs plus local perturbation pairs.

    ``domain_sampler(rng, k)`` returns ``k`` domain points as rows.
    """
    if n_pairs < 1000:
        raise ValueError("n_pairs must be at least 1000")
    rng = np.random.default_rng(rng)
    x1, x2 = domain_sampler(rng, n_pairs), domain_sampler(rng, n_pairs)
    p1, p2 = perturbation_pairs(domain_sampler(rng, n_pairs), rng, scales)
    q = np.concatenate([difference_quotients(fn, x1, x2), difference_quotients(fn, p1, p2)])
    return max_quotient(q)


def mcdiarmid_bound(lam: float, diam: float, n: int, epsilon: float) -> float:
    """``exp(-eps^2 n / (lam^2 diam^2))``, the tail bound on the empirical loss deviation."""
    if lam <= 0 or not 0 < diam < math.inf:
        raise ValueError("need lam > 0 and a finite positive diameter")
    return math.exp(-(epsilon**2) * n / (lam**2 * diam**2))


@dataclass(frozen=True)
class ConcentrationReport:
    n: int
    epsilon: float
    lambda_used: float
    diameter: float
    bound: float
    empirical_tail: float
    trials: int
    reference_loss: float

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def concentration_experiment(h, sample_e, sample_a, n: int, epsilon: float, trials: int = 10_000,
                             diameter: float = 1.0, lam: float = 1.0, rng=None,
                             reference_size: int = 1_000_000) -> ConcentrationReport:
    """Tail frequency of ``|L_hat - L| >= epsilon`` for a fixed potential ``h``.

    ``sample_e(rng, shape)`` and ``sample_a(rng, shape)`` draw from the two
    distributions (bounded support of the given diameter); ``h`` maps an array
    of samples elementwise.  ``L`` is estimated from ``reference_size`` draws
    per side.
    """
    if diameter <= 0:
        raise ValueError("degenerate support: zero diameter")
    rng = np.random.default_rng(rng)
    ref = float(np.mean(h(sample_e(rng, (reference_size,)))) - np.mean(h(sample_a(rng, (reference_size,)))))
    chunk = max(1, 2_000_000 // max(1, n))
    hits = 0
    done = 0
    while done < trials:
        k = min(chunk, trials - done)
        le = np.mean(h(sample_e(rng, (k, n))), axis=1)
        la = np.mean(h(sample_a(rng, (k, n))), axis=1)
        hits += int(np.count_nonzero(np.abs(le - la - ref) >= epsilon))
        done += k
    return ConcentrationReport(n, epsilon, lam, diameter, mcdiarmid_bound(lam, diameter, n, epsilon),
                               hits / trials, trials, ref)
