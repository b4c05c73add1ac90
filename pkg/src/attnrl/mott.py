"""Spatial-attention cores: Mott's LSTM core and the spatio-temporal variants.

Keys and values come from splitting the vision feature map along channels;
both are extended with a fixed Fourier spatial basis. Queries are produced
from the previous step's core output, so the LSTM core and the sequential
spatio-temporal core must walk a rollout one step at a time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    TransformerXL,
    core_inputs,
    memory_to_state,
    state_to_memory,
)
from .layers import MLP, Linear, LstmCell, Module, VisionNet
from .tensor import ContractError, DimensionError, Tensor, concat, relu, softmax


@dataclass(frozen=True)
class SpatialBasis:
    """Non-trainable ``[h, w, (U+V)²]`` tensor of separable Fourier products."""

    S: np.ndarray
    U: int
    V: int

    @property
    def channels(self) -> int:
        return self.S.shape[-1]


def _basis_1d(n: int, U: int, V: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    even = [np.cos(np.pi * u * i / n) for u in range(U)]
    odd = [np.sin(np.pi * v * i / n) for v in range(1, V + 1)]
    return np.stack(even + odd, axis=1)          # [n, U+V]


def build_spatial_basis(h: int, w: int, U: int = 4, V: int = 4) -> SpatialBasis:
    """Even basis = cos at frequencies 0..U-1; odd basis = sin at 1..V."""
    if U < 1 or V < 1:
        raise ValueError("U and V must be at least 1")
    rows, cols = _basis_1d(h, U, V), _basis_1d(w, U, V)
    S = np.einsum("ia,jb->ijab", rows, cols).reshape(h, w, (U + V) ** 2)
    S.setflags(write=False)
    return SpatialBasis(S, U, V)


def spatial_attention(keys: Tensor, queries: Tensor) -> Tensor:
    """Inner products of each query with every key cell, softmaxed over space.

    ``keys`` is ``[..., h, w, c]`` and ``queries`` ``[..., H, c]``; the result
    is ``[..., H, h, w]``.
    """
    *lead, h, w, c = keys.shape
    if queries.shape[-1] != c:
        raise DimensionError(f"query width {queries.shape[-1]} != key width {c}")
    flat = keys.reshape(*lead, h * w, c)
    logits = queries @ flat.swapaxes(-1, -2)                 # [..., H, hw]
    maps = softmax(logits, axis=-1)
    return maps.reshape(*lead, queries.shape[-2], h, w)


def answer_vectors(maps: Tensor, values: Tensor) -> Tensor:
    """Attention-weighted spatial sums: ``[..., H, h, w]`` × ``[..., h, w, c]`` → ``[..., H, c]``."""
    *lead, H, h, w = maps.shape
    if values.shape[-3:-1] != (h, w):
        raise DimensionError(f"maps {maps.shape} and values {values.shape} disagree")
    return maps.reshape(*lead, H, h * w) @ values.reshape(*lead, h * w, values.shape[-1])


class _SpatialReader(Module):
    """Vision net, key/value split, spatial basis and query network."""

    def __init__(self, obs_shape, rng, heads: int, seed_size: int, channels, U: int, V: int,
                 c_k: int | None):
        m, h, w = obs_shape
        self.vision = VisionNet(m, rng, channels)
        c, fh, fw = self.vision.output_shape(h, w)
        self.c_k = c // 2 if c_k is None else c_k
        self.c_v = c - self.c_k
        if self.c_k <= 0 or self.c_v <= 0:
            raise ValueError(f"key/value split {self.c_k}/{self.c_v} of {c} channels is invalid")
        self.basis = build_spatial_basis(fh, fw, U, V)
        self.heads = heads
        q_width = self.basis.channels + self.c_k
        self.query_mlp = MLP([seed_size, 2 * heads * q_width, heads * q_width], rng)
        self.q_width = q_width
        self.a_width = self.basis.channels + self.c_v

    def features(self, obs: np.ndarray):
        """``[N, m, h, w]`` → keys ``[N, h', w', c_K+c_S]`` and values ``[N, h', w', c_V+c_S]``."""
        feat = self.vision(Tensor(obs)).transpose(0, 2, 3, 1)   # channels last
        n = feat.shape[0]
        S = Tensor(np.broadcast_to(self.basis.S, (n,) + self.basis.S.shape))
        keys = concat([feat[..., :self.c_k], S], axis=-1)
        values = concat([feat[..., self.c_k:], S], axis=-1)
        return keys, values

    def queries(self, seed: Tensor) -> Tensor:
        q = self.query_mlp(seed)
        return q.reshape(*seed.shape[:-1], self.heads, self.q_width)

    def read(self, keys, values, seed):
        q = self.queries(seed)
        maps = spatial_attention(keys, q)
        return answer_vectors(maps, values), q, maps


class MottCore(_SpatialReader):
    """Spatial attention read by a single LSTM cell."""

    arch = "mott"

    def __init__(self, obs_shape, num_actions: int, rng: np.random.Generator,
                 heads: int = 4, hidden: int = 64, answer_hidden: int = 128,
                 channels=(8, 16), U: int = 4, V: int = 4, c_k: int | None = None):
        super().__init__(obs_shape, rng, heads, hidden, channels, U, V, c_k)
        self.obs_shape = tuple(obs_shape)
        self.num_actions = num_actions
        self.hidden = hidden
        in_width = heads * (self.a_width + self.q_width) + 1 + num_actions
        self.answer_mlp = MLP([in_width, answer_hidden, answer_hidden], rng,
                              final_activation=True)
        self.lstm = LstmCell(answer_hidden, hidden, rng)
        self.policy = Linear(hidden, num_actions, rng)
        self.value = Linear(hidden, 1, rng)

    def initial_state(self, batch: int = 1) -> dict:
        return {"h": np.zeros((batch, self.hidden)), "c": np.zeros((batch, self.hidden))}

    def _step(self, keys, values, reward, logits, h, c):
        answers, q, maps = self.read(keys, values, h)
        B = reward.shape[0]
        x = concat([answers.reshape(B, -1), q.reshape(B, -1),
                    Tensor(reward.reshape(B, 1)), Tensor(logits)], axis=-1)
        h, c = self.lstm(self.answer_mlp(x), h, c)
        return self.policy(h), self.value(h).reshape(B), h, c, maps

    def __call__(self, inputs: dict, state: dict, record: bool = False):
        obs = np.asarray(inputs["observation"], dtype=np.float64)
        T, B = obs.shape[:2]
        reward, logits, done = core_inputs(inputs, self.num_actions)
        keys, values = self.features(obs.reshape((T * B,) + obs.shape[2:]))
        keys = keys.reshape(T, B, *keys.shape[1:])
        values = values.reshape(T, B, *values.shape[1:])
        h, c = Tensor(state["h"]), Tensor(state["c"])
        pol, val, maps_all = [], [], []
        for t in range(T):
            keep = (~done[t]).astype(np.float64)[:, None]
            if done[t].any():
                h, c = h * keep, c * keep
            p, v, h, c, maps = self._step(keys[t], values[t], reward[t], logits[t], h, c)
            pol.append(p)
            val.append(v)
            if record:
                maps_all.append(maps.data)
        out = {"policy_logits": _stack0(pol), "baseline": _stack0(val)}
        if record:
            out["maps"] = np.stack(maps_all)
        return out, {"h": h.data, "c": c.data}


def mott_step(core: MottCore, frame_stack, prev_reward, prev_logits, state: dict):
    """Single step for a batch ``[B, m, h, w]``; returns ``(logits, baseline, state, maps)``.

    Episode resets are the caller's responsibility (zero the state).
    """
    obs = np.asarray(frame_stack, dtype=np.float64)
    if obs.ndim == 3:
        obs = obs[None]
    B = obs.shape[0]
    keys, values = core.features(obs)
    p, v, h, c, maps = core._step(keys, values, np.asarray(prev_reward, float).reshape(B),
                                  np.asarray(prev_logits, float).reshape(B, -1),
                                  Tensor(state["h"]), Tensor(state["c"]))
    return p, v, {"h": h, "c": c}, maps


def _stack0(tensors):
    return concat([t.reshape((1,) + t.shape) for t in tensors], axis=0)


class SpatioTemporalCore(_SpatialReader):
    """Spatial attention per step followed by a Transformer-XL over time.

    ``query_source="sequential"`` seeds each step's queries with the core's
    own previous output; ``"actor_cached"`` takes per-step seeds recorded by
    the actor (rollout field ``query_seed``) so a whole chunk runs at once.
    """

    def __init__(self, obs_shape, num_actions: int, rng: np.random.Generator,
                 query_source: str = "sequential", d_model: int = 64, n_layer: int = 1,
                 heads: int = 4, mem_len: int = 100, answer_hidden: int = 128,
                 channels=(8, 16), U: int = 4, V: int = 4, c_k: int | None = None,
                 max_pos: int = 512):
        if query_source not in ("sequential", "actor_cached"):
            raise ValueError(f"unknown query_source {query_source!r}")
        super().__init__(obs_shape, rng, heads, d_model, channels, U, V, c_k)
        self.obs_shape = tuple(obs_shape)
        self.num_actions = num_actions
        self.query_source = query_source
        self.d_model = d_model
        in_width = heads * (self.a_width + self.q_width) + 1 + num_actions
        self.answer_mlp = MLP([in_width, answer_hidden, d_model], rng)
        self.txl = TransformerXL(d_model, n_layer, heads, mem_len, rng, max_pos)
        self.policy = Linear(d_model, num_actions, rng)
        self.value = Linear(d_model, 1, rng)

    @property
    def arch(self) -> str:
        return "sp-temp-seq" if self.query_source == "sequential" else "sp-temp-oneshot"

    @property
    def extra_fields(self) -> dict:
        """Additional rollout fields (name → per-step shape) the actor must record."""
        return {"query_seed": (self.d_model,)}

    def initial_state(self, batch: int = 1) -> dict:
        state = memory_to_state(self.txl.empty_memory(batch))
        state["seed"] = np.zeros((batch, self.d_model))
        return state

    def _embed(self, keys, values, seed, reward, logits):
        answers, q, maps = self.read(keys, values, seed)
        lead = reward.shape
        x = concat([answers.reshape(*lead, -1), q.reshape(*lead, -1),
                    Tensor(reward.reshape(*lead, 1)), Tensor(logits)], axis=-1)
        return self.answer_mlp(x), maps

    def __call__(self, inputs: dict, state: dict, record: bool = False,
                 query_source: str | None = None):
        return spatio_temporal_step(self, inputs, state, record,
                                    query_source or self.query_source)

    def act(self, inputs: dict, state: dict):
        """Actor-side step; the seed carried in ``state`` is the previous output."""
        return spatio_temporal_step(self, inputs, state, False, "sequential")


def spatio_temporal_step(core: SpatioTemporalCore, inputs: dict, state: dict,
                         record: bool = False, query_source: str = "sequential"):
    """Process a time-major chunk; see :class:`SpatioTemporalCore`."""
    obs = np.asarray(inputs["observation"], dtype=np.float64)
    T, B = obs.shape[:2]
    reward, logits, done = core_inputs(inputs, core.num_actions)
    keys, values = core.features(obs.reshape((T * B,) + obs.shape[2:]))
    keys = keys.reshape(T, B, *keys.shape[1:]).swapaxes(0, 1)       # [B, T, ...]
    values = values.reshape(T, B, *values.shape[1:]).swapaxes(0, 1)
    memory = state_to_memory(state)
    done_b = done.T                                                  # [B, T]
    out = {}

    if query_source == "actor_cached":
        if "query_seed" not in inputs:
            raise ContractError("actor_cached mode needs per-step query seeds in the rollout")
        seeds = np.asarray(inputs["query_seed"], dtype=np.float64) * (~done)[..., None]
        x, maps = core._embed(keys, values, Tensor(seeds.swapaxes(0, 1)), reward.T,
                              logits.swapaxes(0, 1))
        y, new_mem, records = core.txl(x, memory, done_b, record)
        last = y.data[:, -1]
        maps_data = maps.data
    else:
        seed = Tensor(state["seed"])
        contexts = [[] for _ in core.txl.blocks]
        ys, maps_list, records = [], [], []
        for t in range(T):
            keep = (~done[t]).astype(np.float64)[:, None]
            if done[t].any():
                seed = seed * keep
            x, maps = core._embed(keys[:, t], values[:, t], seed, reward[t], logits[t])
            yt, rec = core.txl.step_with_context(x.reshape(B, 1, -1), memory, contexts, t,
                                                 done_b, record)
            seed = yt.reshape(B, -1)
            ys.append(yt)
            maps_list.append(maps.data)
            if record:
                records.append(rec)
        y = concat(ys, axis=1)
        new_mem = TransformerXL.memory_from_contexts(memory, contexts, done_b)
        last = y.data[:, -1]
        maps_data = np.stack(maps_list, axis=1)

    out["policy_logits"] = core.policy(y).swapaxes(0, 1)
    out["baseline"] = core.value(y).reshape(B, T).swapaxes(0, 1)
    out["core_output"] = y.swapaxes(0, 1)
    if record:
        out["maps"] = maps_data.swapaxes(0, 1)
        out["records"] = records
    new_state = memory_to_state(new_mem)
    new_state["seed"] = last.copy()
    return out, new_state
