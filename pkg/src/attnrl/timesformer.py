"""Space-time attention policy core in the TimeSformer style.

Each frame becomes ``N`` patch tokens. Blocks attend either jointly over all
visible (patch, frame) tokens or in two factorised stages: across frames for
the same patch, then across patches of the same frame. Past frames come from
a detached per-layer cache, Transformer-XL style, and every frame yields one
policy output (there is no classification token).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionRecord,
    FeedForward,
    LayerNorm,
    MultiHeadAttention,
    core_inputs,
    segment_layout,
)
from .layers import Conv2d, Linear, Module, VisionNet, gaussian_encoding
from .tensor import DimensionError, Tensor, concat, relu


class ComparisonCounter:
    """Counts query-key score evaluations (one per visible pair)."""

    def __init__(self):
        self.scores = 0

    def add(self, n) -> None:
        self.scores += int(n)

    def reset(self) -> None:
        self.scores = 0


@dataclass
class FrameCache:
    """Detached per-layer token grids for past frames, ``[B, n_layer, M, N, d]``."""

    layers: np.ndarray
    valid: np.ndarray
    steps: np.ndarray

    @classmethod
    def empty(cls, batch, n_layer, mem_len, n_tokens, d) -> "FrameCache":
        return cls(np.zeros((batch, n_layer, mem_len, n_tokens, d)),
                   np.zeros((batch, mem_len), dtype=bool),
                   np.zeros(batch, dtype=np.int64))

    @property
    def mem_len(self) -> int:
        return self.layers.shape[2]


class PatchEmbedder(Module):
    """Frame ``[C, H, W]`` → tokens ``[N, emb]`` plus a spatial positional encoding.

    ``plain`` cuts non-overlapping ``P×P`` patches with a strided convolution;
    ``hybrid`` runs a residual vision net and treats each feature-map cell as
    a 1×1 patch.
    """

    def __init__(self, in_channels: int, height: int, width: int, emb_size: int,
                 rng: np.random.Generator, mode: str = "hybrid", patch_size: int = 7,
                 channels=(8, 16), pos_sigma: float = 0.02):
        self.mode = mode
        self.emb_size = emb_size
        if mode == "plain":
            if height % patch_size or width % patch_size:
                raise DimensionError(
                    f"frame {height}x{width} (H={height}, W={width}) is not divisible by "
                    f"patch size P={patch_size}")
            self.proj = Conv2d(in_channels, emb_size, patch_size, rng, stride=patch_size)
            self.grid = (height // patch_size, width // patch_size)
        elif mode == "hybrid":
            self.vision = VisionNet(in_channels, rng, channels)
            c, gh, gw = self.vision.output_shape(height, width)
            self.proj = Conv2d(c, emb_size, 1, rng)
            self.grid = (gh, gw)
        else:
            raise ValueError(f"unknown patch mode {mode!r}")
        self.n_tokens = self.grid[0] * self.grid[1]
        self.pos = gaussian_encoding((self.n_tokens, emb_size), pos_sigma, rng)

    def __call__(self, frames: Tensor) -> Tensor:
        return patch_embed(self, frames)


def patch_embed(embedder: PatchEmbedder, frames: Tensor) -> Tensor:
    """``[C,H,W]`` → ``[N, emb]`` or ``[B,C,H,W]`` → ``[B, N, emb]``."""
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    x = frames
    if embedder.mode == "hybrid":
        x = relu(embedder.vision(x))
    x = embedder.proj(x)                                   # [(B,) emb, gh, gw]
    lead = x.shape[:-3]
    x = x.reshape(*lead, embedder.emb_size, embedder.n_tokens).swapaxes(-1, -2)
    return x + embedder.pos


class SpaceTimeBlock(Module):
    """Pre-LN space-time attention block; ``scheme`` is ``divided`` or ``joint``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, scheme: str = "divided",
                 d_ff: int | None = None):
        if scheme not in ("divided", "joint"):
            raise ValueError(f"unknown scheme {scheme!r}")
        self.scheme = scheme
        self.d = d
        if scheme == "divided":
            self.ln_time = LayerNorm(d)
            self.attn_time = MultiHeadAttention(d, heads, rng)
            self.ln_space = LayerNorm(d)
            self.attn_space = MultiHeadAttention(d, heads, rng)
        else:
            self.ln_joint = LayerNorm(d)
            self.attn_joint = MultiHeadAttention(d, heads, rng)
        self.ln_mlp = LayerNorm(d)
        self.mlp = FeedForward(d, d_ff or 2 * d, rng)

    def __call__(self, x, cached, allowed, counter=None, record=None):
        if self.scheme == "divided":
            return divided_attention(self, x, cached, allowed, counter, record)
        return joint_attention(self, x, cached, allowed, counter, record)


def _check(block: SpaceTimeBlock, x: Tensor, cached: np.ndarray):
    if x.shape[-1] != block.d or cached.shape[-1] != block.d:
        raise DimensionError(
            f"block width {block.d} does not match tokens {x.shape} / cache {cached.shape}")


def joint_attention(block: SpaceTimeBlock, x: Tensor, cached: np.ndarray,
                    allowed: np.ndarray, counter: ComparisonCounter | None = None,
                    record: AttentionRecord | None = None) -> Tensor:
    """Every query patch attends all visible (patch, frame) tokens at once.

    ``x`` is ``[B, T, N, d]``, ``cached`` ``[B, M, N, d]`` and ``allowed``
    ``[B, T, M+T]`` frame visibility.
    """
    _check(block, x, cached)
    B, T, N, d = x.shape
    M = cached.shape[1]
    h = block.ln_joint(x).reshape(B, T * N, d)
    if M:
        kv = concat([block.ln_joint(Tensor(cached)).reshape(B, M * N, d), h], axis=1)
    else:
        kv = h
    mask = np.broadcast_to(allowed[:, :, None, :, None], (B, T, N, M + T, N))
    mask = mask.reshape(B, T * N, (M + T) * N)
    if counter is not None:
        counter.add(allowed.sum() * N * N)
    att, probs = block.attn_joint(h, kv, mask)
    if record is not None:
        record.append(probs)
    x = x + att.reshape(B, T, N, d)
    return x + block.mlp(block.ln_mlp(x))


def divided_attention(block: SpaceTimeBlock, x: Tensor, cached: np.ndarray,
                      allowed: np.ndarray, counter: ComparisonCounter | None = None,
                      record: AttentionRecord | None = None) -> Tensor:
    """Temporal attention (same patch across frames), then spatial (same frame), then MLP."""
    _check(block, x, cached)
    B, T, N, d = x.shape
    M = cached.shape[1]
    # temporal: sequences over frames, one per (batch, patch)
    xt = x.swapaxes(1, 2)                                   # [B, N, T, d]
    h = block.ln_time(xt)
    if M:
        ctx = block.ln_time(Tensor(cached.swapaxes(1, 2)))  # [B, N, M, d]
        kv = concat([ctx, h], axis=2)
    else:
        kv = h
    if counter is not None:
        counter.add(allowed.sum() * N + B * T * N * N)
    att, p_time = block.attn_time(h, kv, allowed[:, None])
    x = (xt + att).swapaxes(1, 2)                            # [B, T, N, d]
    # spatial: within each frame
    hs = block.ln_space(x)
    att, p_space = block.attn_space(hs, hs, None)
    x = x + att
    if record is not None:
        record.append({"time": p_time, "space": p_space})
    return x + block.mlp(block.ln_mlp(x))


class TimeSformerCore(Module):
    """Patch embedding → space-time blocks → shrink → [·, r, π] → policy/value heads."""

    def __init__(self, obs_shape, num_actions: int, rng: np.random.Generator,
                 scheme: str = "divided", emb_size: int = 16, patch_size: int = 7,
                 n_layer: int = 1, heads: int = 4, mem_len: int = 100, hybrid: bool = True,
                 shrink: int = 64, channels=(8, 16), max_pos: int = 512,
                 pos_sigma: float = 0.02):
        m, H, W = obs_shape
        self.obs_shape = tuple(obs_shape)
        self.num_actions = num_actions
        self.scheme = scheme
        self.mem_len = mem_len
        self.emb_size = emb_size
        self.embedder = PatchEmbedder(m, H, W, emb_size, rng, "hybrid" if hybrid else "plain",
                                      patch_size, channels, pos_sigma)
        self.n_tokens = self.embedder.n_tokens
        self.time_pos = gaussian_encoding((max_pos, emb_size), pos_sigma, rng)
        self.blocks = [SpaceTimeBlock(emb_size, heads, rng, scheme) for _ in range(n_layer)]
        self.ln_out = LayerNorm(emb_size)
        self.shrink = Linear(self.n_tokens * emb_size, shrink, rng)
        self.policy = Linear(shrink + 1 + num_actions, num_actions, rng)
        self.value = Linear(shrink + 1 + num_actions, 1, rng)
        self.counter = ComparisonCounter()

    @property
    def arch(self) -> str:
        return self.scheme

    def empty_cache(self, batch: int) -> FrameCache:
        return FrameCache.empty(batch, len(self.blocks), self.mem_len, self.n_tokens,
                                self.emb_size)

    def initial_state(self, batch: int = 1) -> dict:
        c = self.empty_cache(batch)
        return {"mem": c.layers, "mem_valid": c.valid, "steps": c.steps}

    def __call__(self, inputs: dict, state: dict, record: bool = False):
        return timesformer_core_forward(self, inputs, state, record)


def timesformer_core_forward(core: TimeSformerCore, inputs: dict, state: dict,
                             record: bool = False):
    obs = np.asarray(inputs["observation"], dtype=np.float64)
    T, B = obs.shape[:2]
    reward, logits, done = core_inputs(inputs, core.num_actions)
    cache = FrameCache(state["mem"], state["mem_valid"], state["steps"])
    M = cache.mem_len
    lay = segment_layout(cache.valid, cache.steps, done.T, T, M)
    tokens = core.embedder(Tensor(obs.reshape((T * B,) + obs.shape[2:])))
    x = tokens.reshape(T, B, core.n_tokens, core.emb_size).swapaxes(0, 1)   # [B, T, N, d]
    pos = np.minimum(lay.positions, core.time_pos.shape[0] - 1)
    x = x + core.time_pos[pos].reshape(B, T, 1, core.emb_size)
    core.counter.reset()
    records = AttentionRecord() if record else None
    new_layers = np.empty_like(cache.layers)
    for n, block in enumerate(core.blocks):
        cached = cache.layers[:, n]
        new_layers[:, n] = np.concatenate([cached, x.data], axis=1)[:, T:] if T < M \
            else x.data[:, T - M:]
        x = block(x, cached, lay.allowed, core.counter, records)
    y = core.ln_out(x).reshape(B, T, core.n_tokens * core.emb_size)
    y = relu(core.shrink(y))
    feats = concat([y, Tensor(reward.T[..., None]), Tensor(logits.swapaxes(0, 1))], axis=-1)
    out = {
        "policy_logits": core.policy(feats).swapaxes(0, 1),
        "baseline": core.value(feats).reshape(B, T).swapaxes(0, 1),
    }
    if record:
        out["records"] = records
    new_state = {"mem": new_layers, "mem_valid": lay.new_valid, "steps": lay.new_steps}
    return out, new_state
