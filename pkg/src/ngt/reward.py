"""Reward learning from random priors.

A frozen, randomly initialized prior network maps an input to an
``m``-dimensional embedding; a trainable predictor tries to match it.  The
mismatch ``h(x) = loss(predictor(x), prior(x))`` is the potential.  Training
descends ``h`` on expert inputs and ascends it on agent inputs, and the
reward handed to the critic is ``exp(-h)`` after per-batch percentile
rescaling.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn_core as nn
from .lipschitz import difference_quotients, max_quotient
from .losses import HlgConfig, hlg_loss, huber, softmax_mse

INPUT_MODES = ("state_action", "state_state", "state_only")
VARIANTS = ("ngt", "red_star", "w_potential")
PAIRINGS = ("huber", "softmax_mse", "hlg")

MIN_RESCALE_BATCH = 16


def input_dim(mode: str, obs_dim: int, act_dim: int) -> int:
    if mode == "state_action":
        return obs_dim + act_dim
    if mode == "state_state":
        return 2 * obs_dim
    if mode == "state_only":
        return obs_dim
    raise ValueError(f"unknown input mode {mode!r}")


def project_input(s: np.ndarray, a: np.ndarray, s_next: np.ndarray, mode: str) -> np.ndarray:
    """Reward input for one transition or a batch: ``(s, a)``, ``(s, s')`` or ``s``."""
    if mode == "state_action":
        return np.concatenate([s, a], axis=-1)
    if mode == "state_state":
        return np.concatenate([s, s_next], axis=-1)
    if mode == "state_only":
        return np.asarray(s)
    raise ValueError(f"unknown input mode {mode!r}")


@dataclass
class PotentialPair:
    prior: nn.MlpParams
    predictor: nn.MlpParams
    pairing: str = "huber"
    input_mode: str = "state_action"
    output_rescale: float = 5.0
    hlg_expert: HlgConfig = field(default_factory=lambda: HlgConfig(sigma=0.25))
    hlg_agent: HlgConfig = field(default_factory=lambda: HlgConfig(sigma=0.05))
    huber_delta: float = 1.0

    def __post_init__(self) -> None:
        if self.pairing not in PAIRINGS:
            raise ValueError(f"unknown pairing loss {self.pairing!r}")
        want = self.embed_dim * (self.hlg_expert.n_bins if self.pairing == "hlg" else 1)
        if self.predictor.out_dim != want:
            raise ValueError(f"predictor emits {self.predictor.out_dim} values, {self.pairing} needs {want}")
        if self.pairing == "hlg" and self.hlg_expert.n_bins != self.hlg_agent.n_bins:
            raise ValueError("expert and agent HLG configs must share the bin count")

    @property
    def embed_dim(self) -> int:
        return self.prior.out_dim

    @property
    def in_dim(self) -> int:
        return self.prior.in_dim


@dataclass
class WPotential:
    """Sign-unconstrained scalar critic, the WGAN-style baseline potential."""

    net: nn.MlpParams
    input_mode: str = "state_action"

    @property
    def in_dim(self) -> int:
        return self.net.in_dim


def make_pair(
    in_dim: int,
    pairing: str = "huber",
    embed_dim: int = 32,
    hidden: tuple[int, ...] = (256, 256),
    rng=None,
    input_mode: str = "state_action",
    output_rescale: float = 5.0,
    spectral_norm: bool = True,
    hlg_expert: HlgConfig | None = None,
    hlg_agent: HlgConfig | None = None,
    dtype=np.float64,
) -> PotentialPair:
    """Prior and predictor with the same trunk, independently initialized.

    Under ``hlg`` the predictor head widens to ``embed_dim * n_bins``.
    """
    rng = np.random.default_rng(rng)
    hlg_expert = hlg_expert or HlgConfig(sigma=0.25)
    hlg_agent = hlg_agent or HlgConfig(sigma=0.05)
    out = embed_dim * (hlg_expert.n_bins if pairing == "hlg" else 1)
    kw = dict(
        hidden_activation="leaky_relu",
        output_activation="tanh",
        leak=nn.REWARD_LEAK,
        spectral_norm=spectral_norm,
        dtype=dtype,
    )
    prior = nn.build_mlp([in_dim, *hidden, embed_dim], rng=rng, **kw)
    predictor = nn.build_mlp([in_dim, *hidden, out], rng=rng, **kw)
    return PotentialPair(prior, predictor, pairing, input_mode, output_rescale, hlg_expert, hlg_agent)


def make_w_potential(in_dim, hidden=(256, 256), rng=None, input_mode="state_action", spectral_norm=True, dtype=np.float64):
    net = nn.build_mlp(
        [in_dim, *hidden, 1],
        hidden_activation="leaky_relu",
        output_activation="identity",
        leak=nn.REWARD_LEAK,
        spectral_norm=spectral_norm,
        rng=rng,
        dtype=dtype,
    )
    return WPotential(net, input_mode)


def _hlg_targets(pair: PotentialPair, prior_out: np.ndarray, cfg: HlgConfig) -> np.ndarray:
    # prior embeddings live in [-rescale, rescale]; map them affinely onto [a, b]
    unit = prior_out / pair.output_rescale
    return cfg.a + 0.5 * (unit + 1.0) * (cfg.b - cfg.a)


def pairing_loss(pair: PotentialPair, pred_out, prior_out, side: str = "expert"):
    """Per-row pairing loss and its gradient w.r.t. the predictor output."""
    if pair.pairing == "huber":
        return huber(pred_out, prior_out, pair.huber_delta)
    if pair.pairing == "softmax_mse":
        return softmax_mse(pred_out, prior_out)
    cfg = pair.hlg_expert if side == "expert" else pair.hlg_agent
    return hlg_loss(pred_out, _hlg_targets(pair, prior_out, cfg), cfg)


def embeddings(pair: PotentialPair, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = pair.output_rescale * nn.predict(pair.predictor, x)
    prior = pair.output_rescale * nn.predict(pair.prior, x)
    return pred, prior


def potential(model, x: np.ndarray, side: str = "expert") -> np.ndarray:
    """``h(x)`` for a batch (or a single input).

    For a :class:`PotentialPair` this is non-negative; ``side`` only matters
    for HLG, whose smoothing differs between the expert and agent terms.
    """
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != model.in_dim:
        raise ValueError(f"input has dimension {xb.shape[1]}, potential expects {model.in_dim}")
    if isinstance(model, WPotential):
        h = nn.predict(model.net, xb)[:, 0]
    else:
        pred, prior = embeddings(model, xb)
        h, _ = pairing_loss(model, pred, prior, side)
    return h[0] if single else h


def _check_batches(expert_x, agent_x):
    if len(expert_x) == 0 or len(agent_x) == 0:
        raise ValueError("reward loss needs non-empty expert and agent batches")


def reward_loss(pair: PotentialPair, expert_x: np.ndarray, agent_x: np.ndarray, expert_only: bool = False):
    """Empirical ``mean_expert h - mean_agent h`` and predictor gradients.

    Returns ``(loss, grads, expert_mean_h, agent_mean_h)``; the prior gets no
    gradient.  ``expert_only`` drops the agent term (the RED* ablation).
    """
    _check_batches(expert_x, agent_x)
    ne = len(expert_x)
    x = np.concatenate([expert_x, agent_x]) if not expert_only else np.asarray(expert_x)
    out, cache = nn.forward(pair.predictor, x)
    pred = pair.output_rescale * out
    prior = pair.output_rescale * nn.predict(pair.prior, x)
    he, ge = pairing_loss(pair, pred[:ne], prior[:ne], "expert")
    me = float(he.mean())
    if expert_only:
        ha = potential(pair, agent_x, "agent")
        ma = float(ha.mean())
        g = ge / ne
        loss = me
    else:
        ha, ga = pairing_loss(pair, pred[ne:], prior[ne:], "agent")
        ma = float(ha.mean())
        g = np.concatenate([ge / ne, -ga / len(agent_x)])
        loss = me - ma
    grads, _ = nn.backward(pair.predictor, cache, (pair.output_rescale * g).astype(out.dtype, copy=False))
    return loss, grads, me, ma


def w_potential_loss(model: WPotential, expert_x: np.ndarray, agent_x: np.ndarray):
    _check_batches(expert_x, agent_x)
    ne, na = len(expert_x), len(agent_x)
    out, cache = nn.forward(model.net, np.concatenate([expert_x, agent_x]))
    h = out[:, 0]
    me, ma = float(h[:ne].mean()), float(h[ne:].mean())
    g = np.concatenate([np.full(ne, 1.0 / ne), np.full(na, -1.0 / na)]).astype(out.dtype)[:, None]
    grads, _ = nn.backward(model.net, cache, g)
    return me - ma, grads, me, ma


def reward_variant_loss(variant: str, model, expert_x, agent_x):
    """Dispatch to the NGT loss, its expert-only ablation, or the WGAN-style potential."""
    if variant == "ngt":
        return reward_loss(model, expert_x, agent_x)
    if variant == "red_star":
        return reward_loss(model, expert_x, agent_x, expert_only=True)
    if variant == "w_potential":
        return w_potential_loss(model, expert_x, agent_x)
    raise ValueError(f"unknown reward variant {variant!r}")


@dataclass(frozen=True)
class RewardBatchStats:
    p05: float
    p95: float


def percentile_rescale(raw: np.ndarray, return_stats: bool = False):
    """Shift by the 5th percentile and divide by the 5th-95th percentile gap.

    Statistics come from this batch alone.  Percentiles are order statistics
    (no interpolation), so any affine map that is exact in floating point
    leaves the output bit-identical.  A zero gap (constant batch) maps
    everything to 0.
    """
    r = np.asarray(raw, dtype=np.float64)
    if r.ndim != 1 or r.size < MIN_RESCALE_BATCH:
        raise ValueError(f"percentile rescaling needs a 1-D batch of at least {MIN_RESCALE_BATCH} rewards")
    p05, p95 = np.percentile(r, [5.0, 95.0], method="inverted_cdf")
    gap = p95 - p05
    out = (r - p05) / (gap if gap > 0 else 1.0)
    if return_stats:
        return out, RewardBatchStats(float(p05), float(p95))
    return out


def raw_reward(model, x: np.ndarray, side: str = "expert") -> np.ndarray:
    h = potential(model, x, side)
    if isinstance(model, WPotential):
        return -h
    return np.exp(-h)


def compute_reward(model, x: np.ndarray, side: str = "expert") -> np.ndarray:
    """Rewards for a critic minibatch: ``exp(-h)`` (or ``-h`` for the W potential), rescaled."""
    return percentile_rescale(raw_reward(model, x, side))


def empirical_potential_lipschitz(model, x1: np.ndarray, x2: np.ndarray, side: str = "expert") -> float:
    if len(x1) < 1000:
        raise ValueError("need at least 1000 input pairs")
    return max_quotient(difference_quotients(lambda z: potential(model, z, side), x1, x2))


def component_lipschitz(pair: PotentialPair, x1: np.ndarray, x2: np.ndarray) -> tuple[float, float]:
    """Empirical Lipschitz constants of the scaled predictor and prior on the same pairs."""
    f = difference_quotients(lambda z: pair.output_rescale * nn.predict(pair.predictor, z), x1, x2)
    fd = difference_quotients(lambda z: pair.output_rescale * nn.predict(pair.prior, z), x1, x2)
    return max_quotient(f), max_quotient(fd)


class RewardModel:
    """Trainable reward: one of the three variants plus its optimizer."""

    def __init__(
        self,
        variant: str,
        in_dim: int,
        input_mode: str = "state_action",
        pairing: str = "huber",
        embed_dim: int = 32,
        hidden=(256, 256),
        lr: float = 1e-3,
        spectral_norm: bool = True,
        output_rescale: float = 5.0,
        hlg_expert: HlgConfig | None = None,
        hlg_agent: HlgConfig | None = None,
        rng=None,
        dtype=np.float64,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown reward variant {variant!r}")
        self.variant = variant
        rng = np.random.default_rng(rng)
        if variant == "w_potential":
            self.model = make_w_potential(in_dim, hidden, rng, input_mode, spectral_norm, dtype)
            self.trainable = self.model.net
        else:
            self.model = make_pair(
                in_dim, pairing, embed_dim, hidden, rng, input_mode, output_rescale,
                spectral_norm, hlg_expert, hlg_agent, dtype,
            )
            self.trainable = self.model.predictor
        self.opt = nn.AdamState.like(self.trainable.arrays(), lr=lr)

    def update(self, expert_x: np.ndarray, agent_x: np.ndarray) -> dict:
        nn.refresh_spectral_state(self.trainable, 1)
        loss, grads, me, ma = reward_variant_loss(self.variant, self.model, expert_x, agent_x)
        if not np.isfinite(loss):
            raise nn.NumericFault(f"reward loss became {loss}")
        nn.adam_update(self.trainable, grads, self.opt)
        return {"reward_loss": loss, "expert_h": me, "agent_h": ma}

    def reward(self, x: np.ndarray) -> np.ndarray:
        return compute_reward(self.model, x)

    def potential(self, x: np.ndarray, side: str = "expert") -> np.ndarray:
        return potential(self.model, x, side)

    def networks(self) -> dict[str, nn.MlpParams]:
        if isinstance(self.model, WPotential):
            return {"w_potential": self.model.net}
        return {"prior": self.model.prior, "predictor": self.model.predictor}

    def checkpoint_meta(self) -> dict:
        meta = {"variant": self.variant, "input_mode": self.model.input_mode}
        if isinstance(self.model, PotentialPair):
            meta.update(
                pairing=self.model.pairing,
                output_rescale=self.model.output_rescale,
                huber_delta=self.model.huber_delta,
                hlg_expert=asdict(self.model.hlg_expert),
                hlg_agent=asdict(self.model.hlg_agent),
            )
        return meta

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.networks(), self.checkpoint_meta())


def load_reward_model(path):
    """Rebuild the potential stored by :meth:`RewardModel.save` (no optimizer state)."""
    nets, meta = nn.load_checkpoint(path)
    if meta.get("variant") == "w_potential":
        return WPotential(nets["w_potential"], meta["input_mode"]), meta
    return (
        PotentialPair(
            nets["prior"],
            nets["predictor"],
            meta["pairing"],
            meta["input_mode"],
            meta["output_rescale"],
            HlgConfig(**meta["hlg_expert"]),
            HlgConfig(**meta["hlg_agent"]),
            meta["huber_delta"],
        ),
        meta,
    )
