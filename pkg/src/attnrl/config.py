"""Run configuration, validation and the factories that turn it into cores and envs."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .pipeline import ConfigError

ARCHS = ("mott", "adaptive", "sp-temp-seq", "sp-temp-oneshot", "divided", "joint")
ENVS = ("catch", "minipong")

# joint space-time attention scores every cached patch token, so it gets a
# shorter memory and chunk by default to stay within desk-scale memory
ARCH_DEFAULTS = {"joint": {"chunk_size": 10, "mem_len": 20}}


@dataclass
class Config:
    arch: str = "adaptive"
    env: str = "catch"
    total_steps: int = 200_000
    unroll_length: int = 239
    chunk_size: int = 80
    num_actors: int = 4
    num_buffers: int = 40
    batch_size: int = 4
    mem_len: int = 100
    emb_size: int = 16
    patch_size: int = 7
    n_layer: int = 1
    heads: int = 4
    gamma: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    baseline_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 1e-3
    rescale_images: bool = False
    frame_stack: int = 4
    seed: int = 0
    # model and runtime knobs beyond the hyperparameter tables
    d_model: int = 64
    frame_size: int = 28
    hybrid: bool = True
    optimizer: str = "adam"
    grad_clip: float = 40.0
    max_pos: int = 512
    metrics_window: int = 100
    mode: str = "sequential"

    @property
    def obs_shape(self) -> tuple:
        return (self.frame_stack, self.frame_size, self.frame_size)

    def to_dict(self) -> dict:
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(Config)}
_POSITIVE = ("total_steps", "unroll_length", "chunk_size", "num_actors", "num_buffers",
             "batch_size", "mem_len", "emb_size", "patch_size", "n_layer", "heads",
             "frame_stack", "d_model", "frame_size", "max_pos", "metrics_window")


def _convert(key: str, value):
    kind = _TYPES[key]
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if kind == "int":
            return int(text.replace("_", ""))
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    return text


def read_config_file(path) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def parse_config(overrides: dict | None = None, path=None) -> Config:
    """Defaults, then the file at ``path``, then ``overrides`` (flags win)."""
    raw = read_config_file(path) if path is not None else {}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    raw = {k.replace("-", "_"): v for k, v in raw.items()}
    for key in raw:
        if key not in _TYPES:
            raise ConfigError(f"{key}: unknown configuration key")
    values = {k: _convert(k, v) for k, v in raw.items()}
    arch = values.get("arch", Config.arch)
    for k, v in ARCH_DEFAULTS.get(arch, {}).items():
        values.setdefault(k, v)
    cfg = Config(**values)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    if cfg.arch not in ARCHS:
        raise ConfigError(f"arch: {cfg.arch!r} is not one of {', '.join(ARCHS)}")
    if cfg.env not in ENVS:
        raise ConfigError(f"env: {cfg.env!r} is not one of {', '.join(ENVS)}")
    for key in _POSITIVE:
        if getattr(cfg, key) <= 0:
            raise ConfigError(f"{key}: must be positive, got {getattr(cfg, key)}")
    if (cfg.unroll_length + 1) % cfg.chunk_size:
        raise ConfigError(
            f"chunk_size: rollouts of unroll_length+1 = {cfg.unroll_length + 1} rows are not "
            f"divisible by chunk_size {cfg.chunk_size}")
    if not cfg.rho_bar >= cfg.c_bar > 0:
        raise ConfigError(f"c_bar: need rho_bar >= c_bar > 0 (rho_bar={cfg.rho_bar}, "
                          f"c_bar={cfg.c_bar})")
    if not 0 <= cfg.gamma <= 1:
        raise ConfigError(f"gamma: must lie in [0, 1], got {cfg.gamma}")
    if cfg.num_buffers < cfg.batch_size + cfg.num_actors:
        raise ConfigError(f"num_buffers: {cfg.num_buffers} < batch_size + num_actors "
                          f"({cfg.batch_size + cfg.num_actors})")
    if cfg.mode not in ("sequential", "threaded"):
        raise ConfigError(f"mode: {cfg.mode!r} is not sequential or threaded")
    if cfg.optimizer not in ("adam", "rmsprop"):
        raise ConfigError(f"optimizer: {cfg.optimizer!r} is not adam or rmsprop")
    if cfg.arch in ("divided", "joint") and not cfg.hybrid and cfg.frame_size % cfg.patch_size:
        raise ConfigError(f"patch_size: {cfg.patch_size} does not divide frame_size "
                          f"{cfg.frame_size}")
    if cfg.d_model % cfg.heads or cfg.emb_size % cfg.heads:
        raise ConfigError(f"heads: {cfg.heads} must divide d_model and emb_size")


def make_core(cfg: Config, seed: int | None = None, num_actions: int = 3):
    """Build the policy core named by ``cfg.arch``; same seed → same weights."""
    from .attention import AdaptiveCore
    from .mott import MottCore, SpatioTemporalCore
    from .timesformer import TimeSformerCore

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    obs = cfg.obs_shape
    if cfg.arch == "mott":
        return MottCore(obs, num_actions, rng, heads=cfg.heads, hidden=cfg.d_model)
    if cfg.arch == "adaptive":
        return AdaptiveCore(obs, num_actions, rng, d_model=cfg.d_model, d_enc=cfg.d_model,
                            n_layer=cfg.n_layer, heads=cfg.heads, mem_len=cfg.mem_len,
                            max_pos=cfg.max_pos)
    if cfg.arch in ("sp-temp-seq", "sp-temp-oneshot"):
        source = "sequential" if cfg.arch == "sp-temp-seq" else "actor_cached"
        return SpatioTemporalCore(obs, num_actions, rng, query_source=source,
                                  d_model=cfg.d_model, n_layer=cfg.n_layer, heads=cfg.heads,
                                  mem_len=cfg.mem_len, max_pos=cfg.max_pos)
    return TimeSformerCore(obs, num_actions, rng, scheme=cfg.arch, emb_size=cfg.emb_size,
                           patch_size=cfg.patch_size, n_layer=cfg.n_layer, heads=cfg.heads,
                           mem_len=cfg.mem_len, hybrid=cfg.hybrid, max_pos=cfg.max_pos)


def make_runner(cfg: Config, actor_id: int = 0, seed: int | None = None):
    from .envs import EnvRunner, Preprocessor, make_env

    base = cfg.seed if seed is None else seed
    env = make_env(cfg.env, seed=base * 7919 + actor_id)
    pre = Preprocessor((cfg.frame_size, cfg.frame_size), cfg.frame_stack, cfg.rescale_images)
    return EnvRunner(env, pre)
