"""Pairing losses between predictor and prior embeddings.

All losses act on row batches: ``pred``/``target`` are ``[B, m]`` (or a
single ``[m]`` vector) and return per-row losses ``[B]`` together with
``dLoss/dPred``.  Targets come from the frozen prior, so no target gradient
is ever needed.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, log_softmax, softmax

HLG_PAD = 1e-6


def _rows(a: np.ndarray) -> tuple[np.ndarray, bool]:
    a = np.asarray(a)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def huber(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Huber kernel averaged over the embedding dimension."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    p, squeeze = _rows(pred)
    t, _ = _rows(target)
    if p.shape != t.shape:
        raise ValueError(f"pred {p.shape} and target {t.shape} differ")
    e = p - t
    a = np.abs(e)
    quad = a <= delta
    kern = np.where(quad, 0.5 * e * e, delta * (a - 0.5 * delta))
    m = p.shape[1]
    loss = kern.mean(axis=1)
    grad = np.where(quad, e, delta * np.sign(e)) / m
    return (loss[0], grad[0]) if squeeze else (loss, grad)


def softmax_mse(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """MSE between the softmaxes of two embeddings."""
    p, squeeze = _rows(pred)
    t, _ = _rows(target)
    if p.shape != t.shape:
        raise ValueError(f"pred {p.shape} and target {t.shape} differ")
    m = p.shape[1]
    if m < 2:
        raise ValueError("softmax_mse needs at least two dimensions")
    sp = softmax(p, axis=1)
    st = softmax(t, axis=1)
    d = sp - st
    loss = np.mean(d * d, axis=1)
    g = 2.0 * d / m
    # softmax Jacobian-vector product: s * (g - <g, s>)
    grad = sp * (g - np.sum(g * sp, axis=1, keepdims=True))
    return (loss[0], grad[0]) if squeeze else (loss, grad)


@dataclass(frozen=True)
class HlgConfig:
    a: float = -1.0
    b: float = 1.0
    n_bins: int = 21
    sigma: float = 0.25

    def __post_init__(self) -> None:
        if not self.a < self.b:
            raise ValueError("support needs a < b")
        if self.n_bins < 2:
            raise ValueError("need at least 2 bins")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def bin_width(self) -> float:
        return (self.b - self.a) / self.n_bins

    @property
    def support(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        s = self.support
        return 0.5 * (s[:-1] + s[1:])


def hlg_transform_to_probs(t, cfg: HlgConfig) -> np.ndarray:
    """Truncated-Gaussian bin masses for scalar target(s) ``t``.

    Output has shape ``t.shape + (N,)``.  The normalizer is padded by 1e-6,
    so rows sum to slightly less than one.
    """
    t = np.asarray(t, dtype=np.float64)
    cdf = erf((cfg.support - t[..., None]) / (math.sqrt(2.0) * cfg.sigma))
    z = cdf[..., -1] - cdf[..., 0]
    return (cdf[..., 1:] - cdf[..., :-1]) / (z + HLG_PAD)[..., None]


def hlg_row_loss(logits: np.ndarray, target_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy per row over the last axis, with gradient ``softmax(logits) - p``."""
    ls = log_softmax(logits, axis=-1)
    loss = -np.sum(target_probs * ls, axis=-1)
    return loss, np.exp(ls) - target_probs


def hlg_loss(logits: np.ndarray, targets: np.ndarray, cfg: HlgConfig) -> tuple[np.ndarray, np.ndarray]:
    """HL-Gaussian loss of flat ``m*N`` logits against ``m`` scalar targets.

    The flat layout is bin-major (index ``bin * m + dim``), i.e. the vector
    is viewed as ``[N, m]`` and each of the ``m`` columns is a distribution
    over bins.  Row losses are averaged over ``m``.
    """
    lg, squeeze = _rows(logits)
    tg, _ = _rows(targets)
    n = cfg.n_bins
    batch, m = tg.shape
    if lg.shape != (batch, m * n):
        raise ValueError(f"logits shape {lg.shape} incompatible with {m} targets x {n} bins")
    per_dim = lg.reshape(batch, n, m).transpose(0, 2, 1)  # [B, m, N]
    probs = hlg_transform_to_probs(tg, cfg)
    row_loss, row_grad = hlg_row_loss(per_dim, probs)
    loss = row_loss.mean(axis=1)
    grad = (row_grad / m).transpose(0, 2, 1).reshape(batch, n * m)
    return (loss[0], grad[0]) if squeeze else (loss, grad)


def hlg_pmax(cfg: HlgConfig, warn: bool = True) -> float:
    """Rectangle approximation of the largest bin mass."""
    pmax = cfg.bin_width / (cfg.sigma * math.sqrt(2.0 * math.pi))
    if warn:
        issues = hlg_pmax_validity(cfg)
        if issues:
            warnings.warn("p_max approximation outside its validity regime: " + "; ".join(issues), stacklevel=2)
    return pmax


def hlg_pmax_validity(cfg: HlgConfig) -> list[str]:
    """Reasons the p_max approximation is unreliable for ``cfg`` (empty when fine)."""
    issues = []
    if cfg.bin_width > 0.5 * cfg.sigma:
        issues.append(f"bin width {cfg.bin_width:.4g} is not small against sigma {cfg.sigma:.4g}")
    if 6 * cfg.sigma > cfg.b - cfg.a:
        issues.append(f"[t-3s, t+3s] cannot fit inside [{cfg.a}, {cfg.b}]")
    return issues


def hlg_lipschitz_bound(cfg: HlgConfig) -> float:
    c = cfg.bin_width * math.sqrt((cfg.n_bins - 1) / (2.0 * math.pi))
    return math.sqrt(1.0 + (c / cfg.sigma) ** 2)


def hlg_lipschitz_from_pmax(n_bins: int, pmax: float) -> float:
    return math.sqrt(1.0 + (n_bins - 1) * pmax**2)


def hlg_true_pmax(cfg: HlgConfig, grid: int = 20001) -> float:
    """Largest bin mass over a fine grid of targets in ``[a, b]``."""
    ts = np.linspace(cfg.a, cfg.b, grid)
    return float(hlg_transform_to_probs(ts, cfg).max())


def hlg_worst_gradient_norm(cfg: HlgConfig, grid: int = 2001) -> float:
    """Exact sup of ||q - p|| over one-hot predictions and a grid of targets.

    For fixed ``p`` the sup over the simplex of the convex map q -> ||q - p||
    is attained at a vertex, so enumerating one-hot ``q`` is exact.
    """
    p = hlg_transform_to_probs(np.linspace(cfg.a, cfg.b, grid), cfg)
    sq = np.sum(p * p, axis=1, keepdims=True)
    # ||e_j - p||^2 = 1 - 2 p_j + sum p^2
    return float(np.sqrt(np.max(1.0 - 2.0 * p + sq)))


PAIRING_LOSSES = ("huber", "softmax_mse", "hlg")
