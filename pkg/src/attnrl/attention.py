"""Scaled dot-product attention, Transformer-XL recurrence and the Adaptive core.

Sequences are batch-major inside this module: ``[B, L, d]``. Cores that talk
to the rollout pipeline accept time-major ``[T, B, ...]`` inputs and
transpose at the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Linear, Module, VisionNet, sinusoidal_encoding
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    gelu,
    layer_norm,
    relu,
    softmax,
    where_mask,
)

MASK_FILL = -1e30


@dataclass
class AttentionRecord:
    """Attention probabilities per layer, each ``[..., heads, queries, keys]``."""

    layers: list = field(default_factory=list)
    labels: tuple = ("heads", "queries", "keys")

    def append(self, probs: np.ndarray) -> None:
        self.layers.append(probs)

    def __len__(self):
        return len(self.layers)


def causal_mask(q_len: int, k_len: int) -> np.ndarray:
    """Query ``i`` may see key ``j`` iff ``j <= i + (k_len - q_len)``."""
    if k_len < q_len:
        raise ValueError(f"k_len ({k_len}) must be >= q_len ({q_len})")
    i = np.arange(q_len)[:, None]
    j = np.arange(k_len)[None, :]
    return j <= i + (k_len - q_len)


def sdpa(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None):
    """softmax(QKᵀ/√d_k)·V over the last two axes; returns ``(Y, A)``.

    ``mask`` is boolean, True where attention is allowed, broadcastable to
    ``[..., Nq, Nk]``.
    """
    d_k = Q.shape[-1]
    if K.shape[-1] != d_k or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"sdpa shapes Q{Q.shape} K{K.shape} V{V.shape} disagree")
    logits = (Q @ K.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise ContractError("attention mask leaves a query row with no visible key")
        logits = where_mask(logits, mask, MASK_FILL)
    A = softmax(logits, axis=-1)
    return A @ V, A


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads
        self.W_q = Linear(d_model, d_model, rng, bias=False)
        self.W_k = Linear(d_model, d_model, rng, bias=False)
        self.W_v = Linear(d_model, d_model, rng, bias=False)
        self.W_o = Linear(d_model, d_model, rng, bias=False)

    def __call__(self, x_q, x_kv, mask=None):
        return mha_forward(self, x_q, x_kv, mask)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def mha_forward(mha: MultiHeadAttention, x_q: Tensor, x_kv: Tensor,
                mask: np.ndarray | None = None):
    """Project, attend per head, concatenate heads, output-project.

    Returns ``(output, probs)`` where ``probs`` is ``[..., H, Nq, Nk]``.
    """
    if x_q.shape[-1] != mha.d_model or x_kv.shape[-1] != mha.d_model:
        raise DimensionError(
            f"mha width {mha.d_model} does not match inputs {x_q.shape}, {x_kv.shape}")
    q = _split_heads(mha.W_q(x_q), mha.heads)
    k = _split_heads(mha.W_k(x_kv), mha.heads)
    v = _split_heads(mha.W_v(x_kv), mha.heads)
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)
    y, A = sdpa(q, k, v, mask)
    *lead, h, n, dk = y.shape
    y = y.swapaxes(-2, -3).reshape(*lead, n, h * dk)
    return mha.W_o(y), A.data


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, axis=-1, eps=self.eps)


class FeedForward(Module):
    """Two linear layers with GELU in between."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-LN block: x + MHA(LN(x)), then + MLP(LN(·))."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator,
                 d_ff: int | None = None):
        self.d_model = d_model
        self.ln1 = LayerNorm(d_model)
        self.mha = MultiHeadAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.mlp = FeedForward(d_model, d_ff or 2 * d_model, rng)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask=None):
        """``context`` holds earlier (layer-input) tokens prepended to the keys."""
        h = self.ln1(x)
        kv = h if context is None else concat([self.ln1(context), h], axis=-2)
        att, probs = self.mha(h, kv, mask)
        x = x + att
        x = x + self.mlp(self.ln2(x))
        return x, probs

    def zero_(self) -> "EncoderBlock":
        for p in (self.mha.parameters() + self.mlp.parameters()):
            p.data[...] = 0.0
        return self


def encoder_stack(blocks, x: Tensor, mask=None):
    """Plain masked encoder (no memory). Returns ``(x, probs per layer)``."""
    probs = []
    for block in blocks:
        x, p = block(x, None, mask)
        probs.append(p)
    return x, probs


@dataclass
class TxlMemory:
    """Detached per-layer caches of layer inputs.

    ``layers`` is ``[B, n_layer, M, d]`` ordered oldest→newest; ``valid`` marks
    slots that belong to the episode still in progress; ``steps`` is the
    within-episode index of the next token.
    """

    layers: np.ndarray
    valid: np.ndarray
    steps: np.ndarray

    @classmethod
    def empty(cls, batch: int, n_layer: int, mem_len: int, d: int) -> "TxlMemory":
        return cls(np.zeros((batch, n_layer, mem_len, d)),
                   np.zeros((batch, mem_len), dtype=bool),
                   np.zeros(batch, dtype=np.int64))

    @property
    def mem_len(self) -> int:
        return self.layers.shape[2]


@dataclass
class SegmentLayout:
    allowed: np.ndarray        # [B, L, M+L]
    positions: np.ndarray      # [B, L] within-episode index
    new_valid: np.ndarray      # [B, M]
    new_steps: np.ndarray      # [B]


def segment_layout(valid: np.ndarray, steps: np.ndarray, done: np.ndarray | None,
                   length: int, window: int) -> SegmentLayout:
    """Visibility of memory + segment keys for each segment query.

    A key is visible when it is causal, inside the sliding window of
    ``window`` past tokens, and in the same episode as the query. ``done[b,t]``
    marks token ``t`` as the first of a new episode.
    """
    B, M = valid.shape
    L = length
    d = np.zeros((B, L), dtype=bool) if done is None else np.asarray(done, dtype=bool)
    ep = np.cumsum(d, axis=1)
    idx = np.arange(L)
    last_reset = np.maximum.accumulate(np.where(d, idx[None, :], -1), axis=1)
    positions = np.where(last_reset >= 0, idx[None, :] - last_reset, steps[:, None] + idx[None, :])

    k_idx = np.concatenate([np.arange(-M, 0), idx])
    k_ep = np.concatenate([np.zeros((B, M), dtype=ep.dtype), ep], axis=1)
    k_valid = np.concatenate([valid, np.ones((B, L), dtype=bool)], axis=1)
    lag = idx[:, None] - k_idx[None, :]
    structural = causal_mask(L, M + L) & (lag <= window)
    allowed = structural[None] & k_valid[:, None, :] & (k_ep[:, None, :] == ep[:, :, None])

    last_ep = ep[:, -1:]
    all_valid = np.concatenate([valid & (last_ep == 0), ep == last_ep], axis=1)
    new_valid = all_valid[:, -M:] if M else all_valid[:, :0]
    new_steps = positions[:, -1] + 1
    return SegmentLayout(allowed, positions, new_valid, new_steps)


def txl_segment_forward(blocks, segment: Tensor, memory: TxlMemory,
                        done: np.ndarray | None = None, pos_table: Tensor | None = None,
                        window: int | None = None, record: bool = False):
    """Process one segment ``[B, L, d]`` with cached memory.

    Keys/values at each layer span ``[SG(memory) ; current]``; queries are the
    current tokens. Returns ``(output, new_memory, records)``.
    """
    B, L, d = segment.shape
    mem_len = memory.mem_len
    if memory.layers.shape[-1] != d or memory.layers.shape[1] != len(blocks):
        raise DimensionError(
            f"memory {memory.layers.shape} does not fit segment width {d} / "
            f"{len(blocks)} layers")
    lay = segment_layout(memory.valid, memory.steps, done, L,
                         mem_len if window is None else window)
    x = segment
    if pos_table is not None:
        pos = np.minimum(lay.positions, pos_table.shape[0] - 1)
        x = x + pos_table[pos]
    records = AttentionRecord() if record else None
    new_layers = np.empty_like(memory.layers)
    for n, block in enumerate(blocks):
        cached = memory.layers[:, n]
        new_layers[:, n] = np.concatenate([cached, x.data], axis=1)[:, L:] if L < mem_len \
            else x.data[:, L - mem_len:]
        ctx = Tensor(cached) if mem_len else None
        x, probs = block(x, ctx, lay.allowed)
        if record:
            records.append(probs)
    new_mem = TxlMemory(new_layers, lay.new_valid, lay.new_steps)
    return x, new_mem, records


class TransformerXL(Module):
    """Encoder-only Transformer-XL with a trainable sinusoid-initialised position table."""

    def __init__(self, d_model: int, n_layer: int, heads: int, mem_len: int,
                 rng: np.random.Generator, max_pos: int = 512):
        self.d_model = d_model
        self.mem_len = mem_len
        self.blocks = [EncoderBlock(d_model, heads, rng) for _ in range(n_layer)]
        self.pos_table = sinusoidal_encoding(max_pos, d_model)
        self.pos_table.requires_grad = True

    def empty_memory(self, batch: int) -> TxlMemory:
        return TxlMemory.empty(batch, len(self.blocks), self.mem_len, self.d_model)

    def __call__(self, x: Tensor, memory: TxlMemory, done=None, record=False):
        return txl_segment_forward(self.blocks, x, memory, done, self.pos_table,
                                   record=record)

    def step_with_context(self, x: Tensor, memory: TxlMemory, contexts: list,
                          t: int, done_row: np.ndarray, record: bool = False):
        """Run the token at offset ``t`` of a segment whose earlier tokens are
        still attached.

        ``contexts[n]`` collects this segment's layer-``n`` inputs so far; it is
        extended in place. Produces the same values as processing the whole
        segment at once, while letting callers feed each step's output back
        into the next step's input.
        """
        B = x.shape[0]
        mem_len = memory.mem_len
        # layout for a segment of length t+1, keep only the last query row
        done_rows = done_row[:, :t + 1]
        lay = segment_layout(memory.valid, memory.steps, done_rows, t + 1, mem_len)
        allowed = lay.allowed[:, -1:, :]
        pos = np.minimum(lay.positions[:, -1:], self.pos_table.shape[0] - 1)
        x = x + self.pos_table[pos]
        records = AttentionRecord() if record else None
        for n, block in enumerate(self.blocks):
            prev = contexts[n]
            parts = ([Tensor(memory.layers[:, n])] if mem_len else []) + prev
            ctx = concat(parts, axis=1) if parts else None
            prev.append(x)
            x, probs = block(x, ctx, allowed)
            if record:
                records.append(probs)
        return x, records

    @staticmethod
    def memory_from_contexts(memory: TxlMemory, contexts: list, done: np.ndarray) -> TxlMemory:
        L = len(contexts[0])
        lay = segment_layout(memory.valid, memory.steps, done, L, memory.mem_len)
        new_layers = np.empty_like(memory.layers)
        M = memory.mem_len
        for n, ctx in enumerate(contexts):
            seg = np.concatenate([c.data for c in ctx], axis=1)
            new_layers[:, n] = np.concatenate([memory.layers[:, n], seg], axis=1)[:, -M:] \
                if M else memory.layers[:, n]
        return TxlMemory(new_layers, lay.new_valid, lay.new_steps)


# ---------------------------------------------------------------------------
# pipeline-facing helpers shared by all cores
# ---------------------------------------------------------------------------

def memory_to_state(mem: TxlMemory, prefix: str = "") -> dict:
    return {f"{prefix}mem": mem.layers, f"{prefix}mem_valid": mem.valid,
            f"{prefix}steps": mem.steps}


def state_to_memory(state: dict, prefix: str = "") -> TxlMemory:
    return TxlMemory(state[f"{prefix}mem"], state[f"{prefix}mem_valid"],
                     state[f"{prefix}steps"])


def core_inputs(inputs: dict, num_actions: int):
    """Previous reward and previous logits per step, zeroed at episode starts.

    Rollout rows carry the reward that led to the row's frame and the logits
    emitted on the previous frame, so they are exactly the "previous step"
    signals; ``done`` rows start a new episode and see zeros instead.
    """
    done = np.asarray(inputs["done"], dtype=bool)
    keep = (~done).astype(np.float64)
    reward = np.asarray(inputs["reward"], dtype=np.float64) * keep
    logits = np.asarray(inputs.get("policy_logits", np.zeros(done.shape + (num_actions,))),
                        dtype=np.float64) * keep[..., None]
    return reward, logits, done


class AdaptiveCore(Module):
    """Vision net → shrink MLP → [·, r_{t-1}, π_{t-1}] → Transformer-XL → heads."""

    arch = "adaptive"

    def __init__(self, obs_shape, num_actions: int, rng: np.random.Generator,
                 d_model: int = 64, d_enc: int = 64, n_layer: int = 1, heads: int = 4,
                 mem_len: int = 100, channels=(8, 16), max_pos: int = 512):
        m, h, w = obs_shape
        self.obs_shape = tuple(obs_shape)
        self.num_actions = num_actions
        self.vision = VisionNet(m, rng, channels)
        c, vh, vw = self.vision.output_shape(h, w)
        self.encode = Linear(c * vh * vw, d_enc, rng)
        self.embed = Linear(d_enc + 1 + num_actions, d_model, rng)
        self.txl = TransformerXL(d_model, n_layer, heads, mem_len, rng, max_pos)
        self.policy = Linear(d_model, num_actions, rng)
        self.value = Linear(d_model, 1, rng)

    def initial_state(self, batch: int = 1) -> dict:
        return memory_to_state(self.txl.empty_memory(batch))

    def encode_frames(self, obs: np.ndarray) -> Tensor:
        """``[T, B, m, h, w]`` → ``[T, B, d_enc]``."""
        T, B = obs.shape[:2]
        feat = self.vision(Tensor(obs.reshape((T * B,) + obs.shape[2:])))
        feat = relu(feat).reshape(T, B, -1)
        return relu(self.encode(feat))

    def __call__(self, inputs: dict, state: dict, record: bool = False):
        obs = np.asarray(inputs["observation"], dtype=np.float64)
        reward, logits, done = core_inputs(inputs, self.num_actions)
        encoded = self.encode_frames(obs)
        return adaptive_core_forward(self, encoded.swapaxes(0, 1), reward.T,
                                     logits.swapaxes(0, 1), state, done.T, record)


def adaptive_core_forward(core: AdaptiveCore, encoded_obs: Tensor, prev_reward,
                          prev_logits, state: dict, done=None, record: bool = False):
    """Batch-major ``[B, T, ·]`` inputs; returns time-major outputs.

    Output dict holds ``policy_logits [T, B, A]`` and ``baseline [T, B]``.
    """
    B, T = encoded_obs.shape[:2]
    r = Tensor(np.asarray(prev_reward, dtype=np.float64).reshape(B, T, 1))
    pl = prev_logits if isinstance(prev_logits, Tensor) else Tensor(prev_logits)
    if pl.shape != (B, T, core.num_actions):
        raise DimensionError(f"prev_logits shape {pl.shape} != {(B, T, core.num_actions)}")
    x = core.embed(concat([encoded_obs, r, pl], axis=-1))
    memory = state_to_memory(state)
    y, new_mem, records = core.txl(x, memory, done, record)
    out = {
        "policy_logits": core.policy(y).swapaxes(0, 1),
        "baseline": core.value(y).reshape(B, T).swapaxes(0, 1),
        "core_output": y.swapaxes(0, 1),
    }
    if record:
        out["records"] = records
    return out, memory_to_state(new_mem)
