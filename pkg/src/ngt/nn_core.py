"""Dense networks with hand-written backprop, orthogonal init, spectral norm and Adam.

Weights are stored ``[out, in]`` and inputs are row batches ``[B, in]``, so a
layer computes ``x @ W.T + b``.  Every network, loss and policy in the package
is built from these pieces; there is no general autodiff.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
REWARD_LEAK = 0.05

_CKPT_MAGIC = b"NGTCKPT1\n"


class NumericFault(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


class StaleCacheError(RuntimeError):
    pass


class DegenerateScaleWarning(RuntimeWarning):
    pass


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    leak: float = 0.0
    u: np.ndarray | None = None  # left singular vector estimate, SN only

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")


@dataclass
class MlpParams:
    layers: list[Layer]
    spectral_norm: bool = False
    seed: int | None = None

    def __post_init__(self) -> None:
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError("layer shapes do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weight.dtype

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def set_arrays(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != 2 * len(self.layers):
            raise ValueError("wrong number of arrays")
        for i, layer in enumerate(self.layers):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ValueError("array shapes do not match parameters")
            layer.weight, layer.bias = w, b

    def copy(self) -> MlpParams:
        return MlpParams(
            layers=[
                Layer(
                    l.weight.copy(),
                    l.bias.copy(),
                    l.activation,
                    l.leak,
                    None if l.u is None else l.u.copy(),
                )
                for l in self.layers
            ],
            spectral_norm=self.spectral_norm,
            seed=self.seed,
        )

    def astype(self, dtype) -> MlpParams:
        p = self.copy()
        for l in p.layers:
            l.weight = l.weight.astype(dtype)
            l.bias = l.bias.astype(dtype)
            if l.u is not None:
                l.u = l.u.astype(dtype)
        return p

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def orthogonal_init(rows: int, cols: int, gain: float = 1.0, rng=None) -> np.ndarray:
    """Orthogonal ``rows x cols`` matrix scaled by ``gain``.

    QR of a Gaussian matrix with the signs fixed so that R has a positive
    diagonal; the thin side ends up with Gram matrix ``gain**2 * I``.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    rng = np.random.default_rng(rng)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d
    if rows < cols:
        q = q.T
    return gain * q


def power_iteration(weight: np.ndarray, u: np.ndarray, iters: int = 1) -> tuple[np.ndarray, np.ndarray, float]:
    """Run ``iters`` power iterations; returns (u, v, sigma estimate)."""
    v = None
    for _ in range(iters):
        v = weight.T @ u
        v = v / max(np.linalg.norm(v), 1e-30)
        u = weight @ v
        u = u / max(np.linalg.norm(u), 1e-30)
    if v is None:
        v = weight.T @ u
        v = v / max(np.linalg.norm(v), 1e-30)
    return u, v, float(u @ weight @ v)


def spectral_normalize(weight: np.ndarray, u: np.ndarray, power_iters: int = 1) -> tuple[np.ndarray, np.ndarray]:
    if u.shape != (weight.shape[0],):
        raise ValueError(f"u has shape {u.shape}, expected ({weight.shape[0]},)")
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    if not np.any(weight):
        warnings.warn("zero weight matrix left unnormalized", DegenerateScaleWarning, stacklevel=2)
        return weight.copy(), u
    u, _, sigma = power_iteration(weight, u, power_iters)
    return weight / sigma, u


def refresh_spectral_state(params: MlpParams, iters: int = 1) -> None:
    """Advance every layer's persistent ``u`` by ``iters`` power iterations."""
    if not params.spectral_norm:
        return
    for layer in params.layers:
        if np.any(layer.weight):
            layer.u, _, _ = power_iteration(layer.weight, layer.u, iters)


def build_mlp(
    sizes: list[int],
    hidden_activation: str = "relu",
    output_activation: str = "identity",
    rng=None,
    leak: float = 0.0,
    spectral_norm: bool = False,
    output_gain: float = 1.0,
    dtype=np.float64,
    seed: int | None = None,
) -> MlpParams:
    """Orthogonally initialized MLP with zero biases.

    ``sizes`` lists every width including input and output. With
    ``spectral_norm`` each layer gets a persistent ``u`` warmed up by 20 power
    iterations so the first forward pass is already normalized.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    layers = []
    n = len(sizes) - 1
    for i in range(n):
        last = i == n - 1
        w = orthogonal_init(sizes[i + 1], sizes[i], output_gain if last else 1.0, rng)
        layers.append(
            Layer(
                weight=w.astype(dtype),
                bias=np.zeros(sizes[i + 1], dtype=dtype),
                activation=output_activation if last else hidden_activation,
                leak=leak,
            )
        )
    params = MlpParams(layers, spectral_norm=spectral_norm, seed=seed)
    if spectral_norm:
        for layer in layers:
            u0 = rng.standard_normal(layer.weight.shape[0])
            layer.u = (u0 / np.linalg.norm(u0)).astype(dtype)
        refresh_spectral_state(params, 20)
    return params


def _activate(z: np.ndarray, kind: str, leak: float) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "leaky_relu":
        return np.where(z > 0, z, leak * z)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(z: np.ndarray, y: np.ndarray, g: np.ndarray, kind: str, leak: float) -> np.ndarray:
    if kind == "relu":
        return g * (z > 0)
    if kind == "leaky_relu":
        return g * np.where(z > 0, 1.0, leak).astype(g.dtype)
    if kind == "tanh":
        return g * (1 - y * y)
    return g


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)  # effective (normalized) weights
    raw: list[np.ndarray] = field(default_factory=list)  # identity check against params
    sn: list[tuple[np.ndarray, np.ndarray, float] | None] = field(default_factory=list)
    squeeze: bool = False


def effective_weight(layer: Layer, apply_sn: bool) -> tuple[np.ndarray, tuple | None]:
    w = layer.weight
    if not apply_sn or layer.u is None:
        return w, None
    v = w.T @ layer.u
    sigma = float(np.linalg.norm(v))
    if sigma == 0.0:
        return w, None
    return w / sigma, (layer.u, v / sigma, sigma)


def forward(params: MlpParams, x: np.ndarray, apply_sn: bool | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on a vector or a row batch.

    With SN the normalizing constant is ``||W.T u||`` for the stored ``u``;
    ``u`` itself is only advanced by :func:`refresh_spectral_state`.
    """
    if apply_sn is None:
        apply_sn = params.spectral_norm
    x = np.asarray(x)
    cache = ForwardCache(squeeze=x.ndim == 1)
    h = x[None, :] if x.ndim == 1 else x
    if h.shape[-1] != params.in_dim:
        raise ValueError(f"input has dimension {h.shape[-1]}, network expects {params.in_dim}")
    for layer in params.layers:
        w, sn = effective_weight(layer, apply_sn)
        z = h @ w.T + layer.bias
        y = _activate(z, layer.activation, layer.leak)
        cache.inputs.append(h)
        cache.pre.append(z)
        cache.post.append(y)
        cache.weights.append(w)
        cache.raw.append(layer.weight)
        cache.sn.append(sn)
        h = y
    return (h[0] if cache.squeeze else h), cache


def backward(
    params: MlpParams, cache: ForwardCache, output_grad: np.ndarray, need_param_grads: bool = True
) -> tuple[list[np.ndarray] | None, np.ndarray]:
    """Gradients of a scalar loss given ``dLoss/dOutput``.

    Returns parameter gradients in :meth:`MlpParams.arrays` order and the
    input gradient.  Spectral normalization is differentiated with ``u`` held
    fixed, i.e. through ``sigma(W) = ||W.T u||``.
    """
    if len(cache.raw) != len(params.layers) or any(
        r is not l.weight for r, l in zip(cache.raw, params.layers)
    ):
        raise StaleCacheError("forward cache does not belong to these parameters")
    g = np.asarray(output_grad)
    if cache.squeeze:
        g = g[None, :]
    grads: list[np.ndarray] = [None] * (2 * len(params.layers)) if need_param_grads else None
    for i in reversed(range(len(params.layers))):
        layer = params.layers[i]
        gz = _activate_grad(cache.pre[i], cache.post[i], g, layer.activation, layer.leak)
        w = cache.weights[i]
        if need_param_grads:
            gw = gz.T @ cache.inputs[i]
            sn = cache.sn[i]
            if sn is not None:
                u, v, sigma = sn
                gw = (gw - np.sum(gw * w) * np.outer(u, v)) / sigma
            grads[2 * i] = gw
            grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ w
    return grads, (g[0] if cache.squeeze else g)


def predict(params: MlpParams, x: np.ndarray, apply_sn: bool | None = None) -> np.ndarray:
    """Forward pass without keeping a cache."""
    if apply_sn is None:
        apply_sn = params.spectral_norm
    h = np.asarray(x)
    for layer in params.layers:
        w, _ = effective_weight(layer, apply_sn)
        h = _activate(h @ w.T + layer.bias, layer.activation, layer.leak)
    return h


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, arrays: list[np.ndarray], lr: float = 1e-3, **kw) -> AdamState:
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr=lr, **kw)


def adam_step(arrays: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericFault("non-finite gradient, update rejected")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    out = []
    for i, (p, g) in enumerate(zip(arrays, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append((p - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False))
    return out


def adam_update(params: MlpParams, grads: list[np.ndarray], state: AdamState) -> None:
    params.set_arrays(adam_step(params.arrays(), grads, state))


# -- checkpoints ------------------------------------------------------------


def _layer_meta(params: MlpParams) -> list[dict]:
    return [
        {
            "shape": list(l.weight.shape),
            "activation": l.activation,
            "leak": l.leak,
            "has_u": l.u is not None,
        }
        for l in params.layers
    ]


def save_checkpoint(path, nets: dict[str, MlpParams], extra: dict | None = None) -> None:
    """Write named networks as a JSON header line followed by little-endian f8 blocks."""
    header = {
        "format": "ngt-mlp",
        "version": 1,
        "networks": {
            name: {"layers": _layer_meta(p), "spectral_norm": p.spectral_norm, "seed": p.seed}
            for name, p in nets.items()
        },
        "meta": extra or {},
    }
    chunks = []
    for _, p in sorted(nets.items()):  # the header is written with sorted keys
        for l in p.layers:
            chunks.append(l.weight)
            chunks.append(l.bias)
            if l.u is not None:
                chunks.append(l.u)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for c in chunks:
            fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())


def load_checkpoint(path, dtype=np.float64) -> tuple[dict[str, MlpParams], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not an NGT checkpoint")
    rest = data[len(_CKPT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    payload = np.frombuffer(rest[nl + 1:], dtype="<f8")
    pos = 0

    def take(n: int) -> np.ndarray:
        nonlocal pos
        if pos + n > payload.size:
            raise ValueError(f"{path}: truncated payload")
        a = payload[pos:pos + n]
        pos += n
        return a.astype(dtype)

    nets = {}
    for name, spec in sorted(header["networks"].items()):
        layers = []
        for lm in spec["layers"]:
            out, inp = lm["shape"]
            w = take(out * inp).reshape(out, inp)
            b = take(out)
            u = take(out) if lm["has_u"] else None
            layers.append(Layer(w, b, lm["activation"], lm["leak"], u))
        nets[name] = MlpParams(layers, spectral_norm=spec["spectral_norm"], seed=spec["seed"])
    if pos != payload.size:
        raise ValueError(f"{path}: {payload.size - pos} trailing values")
    return nets, header.get("meta", {})
