"""The verification battery behind ``ngt verify``: bounds, oracles and invariants."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .losses import HlgConfig, hlg_lipschitz_bound, hlg_loss, hlg_row_loss, hlg_transform_to_probs
from .reward import component_lipschitz, empirical_potential_lipschitz, make_pair, percentile_rescale, reward_loss
from .theory import concentration_experiment, emd_1d_exact, emd_bruteforce, emd_discrete_exact, mcdiarmid_bound


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str

    def as_row(self) -> dict:
        return {"check": self.name, "passed": self.passed, "value": self.value, "threshold": self.threshold,
                "detail": self.detail}


def hlg_loss_lipschitz(cfg: HlgConfig, n_pairs: int, rng, logit_scale: float = 3.0) -> float:
    """Max difference quotient of the one-dimensional HLG loss in its logits.

    Half the pairs are global (independent logit vectors), half are local
    perturbations; each pair shares one target drawn uniformly from ``[a, b]``.
    """
    n = cfg.n_bins
    t = rng.uniform(cfg.a, cfg.b, size=(n_pairs, 1))
    z1 = rng.normal(0.0, logit_scale, size=(n_pairs, n))
    z2 = rng.normal(0.0, logit_scale, size=(n_pairs, n))
    half = n_pairs // 2
    d = rng.standard_normal((n_pairs - half, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    z2[half:] = z1[half:] + 10.0 ** rng.uniform(-4, 0, size=(n_pairs - half, 1)) * d
    l1, _ = hlg_loss(z1, t, cfg)
    l2, _ = hlg_loss(z2, t, cfg)
    return float(np.max(np.abs(l1 - l2) / np.linalg.norm(z1 - z2, axis=1)))


def check_hlg_bounds() -> list[CheckResult]:
    out = []
    for sigma, want in ((0.25, 1.2091), (0.05, 3.5424)):
        got = hlg_lipschitz_bound(HlgConfig(sigma=sigma))
        out.append(CheckResult(f"hlg_bound_sigma_{sigma}", abs(got - want) < 1e-4, got, want,
                               f"bound {got:.6f} vs {want}"))
    return out


def check_hlg_lipschitz(rng, n_pairs: int = 20_000) -> list[CheckResult]:
    out = []
    for sigma in (0.25, 0.5, 1.0):
        cfg = HlgConfig(sigma=sigma)
        bound = hlg_lipschitz_bound(cfg)
        lip = hlg_loss_lipschitz(cfg, n_pairs, rng)
        out.append(CheckResult(f"hlg_lipschitz_sigma_{sigma}", lip <= 1.01 * bound, lip, 1.01 * bound,
                               f"empirical {lip:.4f} <= 1.01 x {bound:.4f}"))
    return out


def check_hlg_gradient(rng, instances: int = 200) -> CheckResult:
    cfg = HlgConfig(sigma=0.25)
    worst = 0.0
    for _ in range(instances):
        z = rng.normal(0, 2, size=cfg.n_bins)
        t = rng.uniform(cfg.a, cfg.b)
        p = hlg_transform_to_probs(t, cfg)
        _, g = hlg_row_loss(z, p)
        eps = 1e-6
        fd = np.array([(hlg_row_loss(z + eps * e, p)[0] - hlg_row_loss(z - eps * e, p)[0]) / (2 * eps)
                       for e in np.eye(cfg.n_bins)])
        worst = max(worst, float(np.linalg.norm(fd - g) / np.linalg.norm(fd)))
    return CheckResult("hlg_gradient_fd", worst < 1e-4, worst, 1e-4, f"max relative error {worst:.2e}")


def check_orthogonal(rng) -> CheckResult:
    worst = 0.0
    for rows, cols in ((64, 64), (64, 16), (16, 64)):
        w = nn.orthogonal_init(rows, cols, 1.0, rng)
        g = w @ w.T if rows <= cols else w.T @ w
        worst = max(worst, float(np.abs(g - np.eye(len(g))).max()))
    return CheckResult("orthogonal_gram", worst < 1e-6, worst, 1e-6, f"max |Gram - I| {worst:.2e}")


def _train_pair(spectral_norm: bool, rng, updates: int):
    pair = make_pair(4, "huber", 16, (64, 64), rng, spectral_norm=spectral_norm)
    opt = nn.AdamState.like(pair.predictor.arrays(), lr=1e-3)
    for _ in range(updates):
        e = rng.normal(0.5, 0.3, size=(128, 4))
        a = rng.normal(-0.5, 0.6, size=(128, 4))
        nn.refresh_spectral_state(pair.predictor, 1)
        _, grads, _, _ = reward_loss(pair, e, a)
        nn.adam_update(pair.predictor, grads, opt)
    return pair


def check_spectral(rng, spectral_norm: bool = True, updates: int = 300) -> list[CheckResult]:
    """Trained predictor layers must stay 1-Lipschitz, and the pair must obey the composition bound."""
    pair = _train_pair(spectral_norm, rng, updates)
    nn.refresh_spectral_state(pair.predictor, 50)  # converge the power-iteration state before the SVD
    sv = []
    for layer in pair.predictor.layers:
        w, _ = nn.effective_weight(layer, pair.predictor.spectral_norm)
        sv.append(float(np.linalg.svd(w, compute_uv=False)[0]))
    smax, smin = max(sv), min(sv)
    out = [CheckResult("spectral_norm_svd", 0.999 <= smin and smax <= 1.001, smax, 1.001,
                       f"layer top singular values in [{smin:.5f}, {smax:.5f}]")]
    x1 = rng.uniform(-2, 2, size=(20_000, 4))
    x2 = np.concatenate([rng.uniform(-2, 2, size=(10_000, 4)),
                         x1[10_000:] + 1e-3 * rng.standard_normal((10_000, 4))])
    lf, lp = component_lipschitz(pair, x1, x2)
    unit = lf / pair.output_rescale
    out.append(CheckResult("predictor_lipschitz", unit <= 1.001, unit, 1.001,
                           f"predictor Lipschitz / rescale = {unit:.4f}"))
    lh = empirical_potential_lipschitz(pair, x1, x2)
    out.append(CheckResult("composition_bound", lh <= 1.05 * (lf + lp), lh, 1.05 * (lf + lp),
                           f"potential {lh:.4f} <= 1.05 x ({lf:.4f} + {lp:.4f})"))
    return out


def check_ot(rng) -> list[CheckResult]:
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 33))
        x, y = rng.standard_normal(n), rng.standard_normal(n) + 1
        w = np.full(n, 1.0 / n)
        worst = max(worst, abs(emd_1d_exact(x, y) - emd_discrete_exact(w, x, w, y)))
    brute = 0.0
    for _ in range(20):
        n, m = (int(k) for k in rng.integers(1, 5, size=2))
        wa, wb = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
        pa, pb = rng.standard_normal((n, 2)), rng.standard_normal((m, 2))
        brute = max(brute, abs(emd_discrete_exact(wa, pa, wb, pb) - emd_bruteforce(wa, pa, wb, pb)))
    return [
        CheckResult("emd_1d_vs_lp", worst < 1e-9, worst, 1e-9, f"max gap {worst:.2e}"),
        CheckResult("emd_lp_vs_vertices", brute < 1e-9, brute, 1e-9, f"max gap {brute:.2e}"),
    ]


def check_concentration(rng, trials: int = 2000) -> list[CheckResult]:
    out = []
    uni = lambda r, shape: r.uniform(0.0, 1.0, size=shape)  # noqa: E731
    for n, eps in ((10, 0.5), (50, 0.3), (200, 0.2)):
        rep = concentration_experiment(lambda x: x, uni, uni, n, eps, trials, rng=rng, reference_size=200_000)
        limit = rep.bound + 10.0 / math.sqrt(trials)
        out.append(CheckResult(f"concentration_n{n}", rep.empirical_tail <= limit, rep.empirical_tail, limit,
                               f"tail {rep.empirical_tail:.4f} vs bound {rep.bound:.4g}"))
    b = mcdiarmid_bound(1.0, 1.0, 100, 0.5)
    out.append(CheckResult("concentration_formula", abs(b - math.exp(-25)) < 1e-20, b, math.exp(-25),
                           f"exp(-25) = {b:.4e}"))
    return out


def check_rescale(rng, batches: int = 200) -> CheckResult:
    worst = 0.0
    for _ in range(batches):
        r = rng.standard_normal(256)
        scale, shift = math.exp(rng.uniform(-5, 5)), rng.uniform(-100, 100)
        worst = max(worst, float(np.abs(percentile_rescale(scale * r + shift) - percentile_rescale(r)).max()))
    return CheckResult("percentile_affine_invariance", worst < 1e-9, worst, 1e-9, f"max deviation {worst:.2e}")


def run_checks(spectral_norm: bool = True, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = check_hlg_bounds()
    results += check_hlg_lipschitz(rng)
    results.append(check_hlg_gradient(rng))
    results.append(check_orthogonal(rng))
    results += check_spectral(rng, spectral_norm)
    results += check_ot(rng)
    results += check_concentration(rng)
    results.append(check_rescale(rng))
    return results

