"""Run configuration: defaults, INI-style files and command-line overrides."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

METHODS = ("ngt", "red_star", "w_potential", "bc", "bc1")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # [run]
    task: str = "point_mass_reach"
    method: str = "ngt"
    demos: str = ""
    refs: str = ""
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    total_steps: int = 10_000_000
    num_envs: int = 4
    action_repeat: int = 1
    obs_norm: bool = False
    dtype: str = "float32"
    reward_source: str = "learned"  # "env" trains on the true reward (expert training, debugging)
    # [sac]
    hidden: tuple[int, ...] = (256, 256)
    learning_starts: int = 0
    buffer_size: int = 4_000_000
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 0.005
    lr_policy: float = 3e-4
    lr_q: float = 1e-3
    lr_alpha: float = 1e-3
    alpha_autotune: bool = True
    alpha_init: float = 0.2
    target_entropy: float | None = None  # None -> -|A|
    actor_clip_norm: float = 20.0
    grad_steps_per_update: int = 1
    env_steps_per_update: int = 1
    # [reward]
    input_mode: str = "state_action"
    pairing: str = "huber"
    embed_dim: int = 32
    reward_hidden: tuple[int, ...] = (256, 256)
    lr_reward: float = 1e-3
    spectral_norm: bool = True
    gradient_penalty: bool = False
    output_rescale: float = 5.0
    huber_delta: float = 1.0
    # [hlg]
    hlg_a: float = -1.0
    hlg_b: float = 1.0
    hlg_bins: int = 21
    hlg_sigma_expert: float = 0.25
    hlg_sigma_agent: float = 0.05
    # [eval]
    eval_every: int = 10_000
    eval_episodes: int = 10
    eval_window: int = 20
    # [bc]
    bc_iterations: int = 10_000_000
    bc_batch_size: int = 256
    bc_lr: float = 3e-4

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        from .envs import TASKS
        from .reward import INPUT_MODES, PAIRINGS

        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; known: {sorted(TASKS)}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; known: {list(METHODS)}")
        if self.pairing not in PAIRINGS:
            raise ConfigError(f"unknown pairing {self.pairing!r}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        if self.reward_source not in ("learned", "env"):
            raise ConfigError("reward_source must be 'learned' or 'env'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.action_repeat != 1 or self.obs_norm:
            raise ConfigError("only action_repeat = 1 without observation normalization is supported")
        if self.gradient_penalty:
            raise ConfigError("gradient penalty is not supported; spectral normalization bounds the potential")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.batch_size < 16:
            raise ConfigError("batch_size must be at least 16 for percentile rescaling")
        for name in ("total_steps", "num_envs", "buffer_size", "eval_every", "eval_episodes", "eval_window"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def resolved(self) -> dict:
        return asdict(self)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()


SECTIONS = {
    "run": ("task", "method", "demos", "refs", "seeds", "total_steps", "num_envs", "action_repeat",
            "obs_norm", "dtype", "reward_source"),
    "sac": ("hidden", "learning_starts", "buffer_size", "batch_size", "gamma", "tau", "lr_policy", "lr_q",
            "lr_alpha", "alpha_autotune", "alpha_init", "target_entropy", "actor_clip_norm",
            "grad_steps_per_update", "env_steps_per_update"),
    "reward": ("input_mode", "pairing", "embed_dim", "reward_hidden", "lr_reward", "spectral_norm",
               "gradient_penalty", "output_rescale", "huber_delta"),
    "hlg": ("hlg_a", "hlg_b", "hlg_bins", "hlg_sigma_expert", "hlg_sigma_agent"),
    "eval": ("eval_every", "eval_episodes", "eval_window"),
    "bc": ("bc_iterations", "bc_batch_size", "bc_lr"),
}

_FIELDS = {f.name: f for f in fields(RunConfig)}
assert sorted(k for ks in SECTIONS.values() for k in ks) == sorted(_FIELDS)


def parse_value(name: str, text: str):
    """Convert the string form of field ``name`` to its typed value."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = _FIELDS[name].default
    text = text.strip()
    try:
        if name == "target_entropy":
            return None if text.lower() in ("", "none", "auto") else float(text)
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
        if isinstance(default, int):
            return int(float(text)) if "e" in text.lower() else int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {name}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    values: dict = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, text in cp.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                values[key] = parse_value(key, text)
    for key, val in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, val) if isinstance(val, str) else val
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    cp = configparser.ConfigParser(interpolation=None)
    for section, keys in SECTIONS.items():
        cp[section] = {}
        for k in keys:
            v = getattr(cfg, k)
            if isinstance(v, tuple):
                v = " ".join(str(i) for i in v)
            cp[section][k] = "none" if v is None else str(v)
    from io import StringIO

    buf = StringIO()
    cp.write(buf)
    return buf.getvalue()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, cfg: RunConfig, inputs: dict[str, str] | None = None, extra: dict | None = None) -> Path:
    """Resolved config plus a sha256 over the config and every input file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digests = {k: file_digest(v) for k, v in sorted((inputs or {}).items()) if v and Path(v).exists()}
    h = hashlib.sha256(cfg.content_hash().encode())
    for k, d in digests.items():
        h.update(f"{k}={d}".encode())
    manifest = {"config": cfg.resolved(), "inputs": digests, "content_hash": h.hexdigest()}
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
