import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from ngt import losses as L


def test_huber_regions():
    loss, g = L.huber(np.array([0.5, 3.0]), np.zeros(2), 1.0)
    # mean of 0.125 and 2.5
    assert loss == pytest.approx(1.3125)
    assert np.allclose(g, [0.25, 0.5])


def test_huber_zero_at_match(rng):
    x = rng.standard_normal((4, 6))
    loss, g = L.huber(x, x)
    assert np.all(loss == 0) and np.all(g == 0)


@pytest.mark.parametrize("fn", [L.huber, L.softmax_mse])
def test_pairing_gradients_match_finite_differences(rng, fn):
    p = rng.standard_normal((5, 4)) * 2
    t = rng.standard_normal((5, 4))
    _, g = fn(p, t)
    eps = 1e-6
    for i in range(5):
        for j in range(4):
            d = np.zeros_like(p)
            d[i, j] = eps
            fd = (fn(p + d, t)[0][i] - fn(p - d, t)[0][i]) / (2 * eps)
            assert g[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_softmax_mse_shift_invariant(rng):
    p = rng.standard_normal(5)
    t = rng.standard_normal(5)
    assert L.softmax_mse(p + 3.0, t)[0] == pytest.approx(L.softmax_mse(p, t)[0])


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        L.huber(np.zeros(3), np.zeros(4))


def test_hlg_config_geometry():
    cfg = L.HlgConfig()
    assert cfg.bin_width == pytest.approx(2 / 21)
    assert len(cfg.support) == 22 and len(cfg.centers) == 21
    with pytest.raises(ValueError):
        L.HlgConfig(a=1.0, b=-1.0)
    with pytest.raises(ValueError):
        L.HlgConfig(sigma=0.0)


def test_hlg_probs_match_gaussian_cdf_oracle():
    cfg = L.HlgConfig(sigma=0.25)
    t = 0.13
    edges = cfg.support
    mass = norm.cdf(edges[1:], t, 0.25) - norm.cdf(edges[:-1], t, 0.25)
    z = norm.cdf(1, t, 0.25) - norm.cdf(-1, t, 0.25)
    want = mass / (z + 0.5 * L.HLG_PAD)  # erf difference is twice the CDF difference
    got = L.hlg_transform_to_probs(t, cfg)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-15)
    assert 1 - 1e-5 < got.sum() < 1.0


def test_hlg_center_bin_mass_narrow_sigma():
    # oracle: 2*Phi(dS/(2 sigma)) - 1 with dS = 2/21, sigma = 0.05
    p = L.hlg_transform_to_probs(0.0, L.HlgConfig(sigma=0.05))
    assert p[10] == pytest.approx(0.65910, abs=5e-5)
    assert p[10] == pytest.approx(2 * norm.cdf((2 / 21) / 0.1) - 1, rel=1e-5)


def test_hlg_loss_layout_bin_major(rng):
    cfg = L.HlgConfig(n_bins=5, sigma=0.3)
    m = 3
    logits = rng.standard_normal(m * 5)
    t = rng.uniform(-1, 1, m)
    loss, g = L.hlg_loss(logits, t, cfg)
    per_dim = logits.reshape(5, m)
    want = np.mean([L.hlg_row_loss(per_dim[:, k], L.hlg_transform_to_probs(t[k], cfg))[0] for k in range(m)])
    assert loss == pytest.approx(want, rel=1e-12)
    assert g.shape == logits.shape


def test_hlg_loss_gradient_fd(rng):
    cfg = L.HlgConfig(sigma=0.25)
    m = 2
    z = rng.standard_normal(m * 21)
    t = rng.uniform(-1, 1, m)
    _, g = L.hlg_loss(z, t, cfg)
    eps = 1e-6
    fd = np.array([(L.hlg_loss(z + eps * e, t, cfg)[0] - L.hlg_loss(z - eps * e, t, cfg)[0]) / (2 * eps)
                   for e in np.eye(len(z))])
    assert np.linalg.norm(fd - g) / np.linalg.norm(fd) < 1e-4


def test_hlg_loss_rejects_bad_width():
    with pytest.raises(ValueError):
        L.hlg_loss(np.zeros(20), np.zeros(1), L.HlgConfig())


def test_hlg_bounds_frozen():
    assert L.hlg_lipschitz_bound(L.HlgConfig(sigma=0.25)) == pytest.approx(1.2091097, abs=1e-6)
    assert L.hlg_lipschitz_bound(L.HlgConfig(sigma=0.05)) == pytest.approx(3.5424085, abs=1e-6)
    assert L.hlg_lipschitz_bound(L.HlgConfig(sigma=0.5)) == pytest.approx(1.0562, abs=1e-4)
    assert L.hlg_lipschitz_bound(L.HlgConfig(sigma=1.0)) == pytest.approx(1.0143, abs=1e-4)


def test_hlg_pmax_and_pmax_bound_agree():
    for sigma in (0.25, 0.05):
        cfg = L.HlgConfig(sigma=sigma)
        pm = L.hlg_pmax(cfg, warn=False)
        assert L.hlg_lipschitz_from_pmax(21, pm) == pytest.approx(L.hlg_lipschitz_bound(cfg), rel=1e-12)
    assert L.hlg_pmax(L.HlgConfig(sigma=0.25), warn=False) == pytest.approx(0.15198, abs=1e-5)
    assert L.hlg_pmax(L.HlgConfig(sigma=0.05), warn=False) == pytest.approx(0.75989, abs=1e-5)


def test_hlg_pmax_warns_outside_regime():
    with pytest.warns(UserWarning):
        L.hlg_pmax(L.HlgConfig(sigma=0.05))
    assert L.hlg_pmax_validity(L.HlgConfig(a=-10, b=10, n_bins=201, sigma=0.5)) == []


def test_rectangle_pmax_accurate_for_interior_targets():
    # narrow bins, target far from the edges: the centre bin mass matches the rectangle rule
    cfg = L.HlgConfig(a=-10, b=10, n_bins=401, sigma=0.5)
    centre = L.hlg_transform_to_probs(0.0, cfg).max()
    assert centre == pytest.approx(L.hlg_pmax(cfg, warn=False), rel=1e-3)


def test_true_pmax_doubles_at_the_edges():
    # truncation at the support boundary removes half the Gaussian
    cfg = L.HlgConfig(a=-10, b=10, n_bins=401, sigma=0.5)
    assert L.hlg_true_pmax(cfg) == pytest.approx(2 * L.hlg_pmax(cfg, warn=False), rel=2e-3)


def test_hlg_worst_gradient_norm_frozen():
    got = [L.hlg_worst_gradient_norm(L.HlgConfig(sigma=s)) for s in (0.25, 0.5, 1.0)]
    assert got == pytest.approx([1.1017, 1.0522, 1.0173], abs=2e-4)
    for s, g in zip((0.25, 0.5, 1.0), got):
        assert g <= 1.01 * L.hlg_lipschitz_bound(L.HlgConfig(sigma=s))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-20, 20), min_size=21, max_size=21),
    st.floats(-1, 1),
)
def test_hlg_gradient_identity_property(logits, t):
    cfg = L.HlgConfig()
    z = np.array(logits)
    p = L.hlg_transform_to_probs(t, cfg)
    _, g = L.hlg_row_loss(z, p)
    q = np.exp(z - z.max())
    q /= q.sum()
    assert np.abs(g - (q - p)).max() < 1e-12
    assert math.isfinite(float(np.linalg.norm(g)))
