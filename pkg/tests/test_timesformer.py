import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnrl.attention import AttentionRecord, sdpa
from attnrl.layers import gaussian_encoding
from attnrl.tensor import DimensionError, Tensor, backward, no_grad, reset_tape
from attnrl.timesformer import (
    ComparisonCounter,
    PatchEmbedder,
    SpaceTimeBlock,
    TimeSformerCore,
    divided_attention,
    joint_attention,
    patch_embed,
)
from conftest import fd_check, param


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0.0
    return module


def _visible(T, M):
    """All cached frames plus causal visibility inside the segment."""
    allowed = np.zeros((1, T, M + T), dtype=bool)
    for t in range(T):
        allowed[0, t, :M + t + 1] = True
    return allowed


def _count(scheme, N, F, d=4):
    block = SpaceTimeBlock(d, 2, np.random.default_rng(0), scheme)
    counter = ComparisonCounter()
    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, N, d)))
    cached = np.random.default_rng(2).normal(size=(1, F - 1, N, d))
    with no_grad():
        block(x, cached, _visible(1, F - 1), counter)
    return counter.scores


# --- patch embedding --------------------------------------------------------

@pytest.mark.parametrize("P,N", [(7, 144), (28, 9)])
def test_plain_patch_count(rng, P, N):
    emb = PatchEmbedder(1, 84, 84, 4, rng, mode="plain", patch_size=P)
    assert emb.n_tokens == N
    assert patch_embed(emb, Tensor(np.zeros((1, 84, 84)))).shape == (N, 4)


def test_zero_embedder_returns_positional_encoding(rng):
    for mode in ("plain", "hybrid"):
        emb = PatchEmbedder(2, 28, 28, 8, rng, mode=mode, patch_size=7)
        for name, p in emb.named_parameters():
            if name != "pos":
                p.data[...] = 0.0
        tokens = patch_embed(emb, Tensor(np.zeros((2, 28, 28))))
        np.testing.assert_array_equal(tokens.data, emb.pos.data)


def test_plain_patch_divisibility_error(rng):
    with pytest.raises(DimensionError) as err:
        PatchEmbedder(1, 30, 28, 4, rng, mode="plain", patch_size=7)
    msg = str(err.value)
    assert "H=30" in msg and "W=28" in msg and "P=7" in msg


def test_plain_patch_matches_manual_projection(rng):
    emb = PatchEmbedder(2, 14, 14, 3, rng, mode="plain", patch_size=7)
    frame = rng.normal(size=(2, 14, 14))
    tokens = patch_embed(emb, Tensor(frame)).data
    W, b = emb.proj.weight.data.reshape(3, -1), emb.proj.bias.data
    n = 0
    for i in range(2):
        for j in range(2):
            patch = frame[:, 7 * i:7 * i + 7, 7 * j:7 * j + 7].reshape(-1)
            np.testing.assert_allclose(tokens[n], W @ patch + b + emb.pos.data[n], atol=1e-12)
            n += 1


def test_hybrid_token_count(rng):
    emb = PatchEmbedder(4, 28, 28, 16, rng, mode="hybrid")
    assert emb.n_tokens == 49
    assert patch_embed(emb, Tensor(np.zeros((3, 4, 28, 28)))).shape == (3, 49, 16)


# --- comparison counts ------------------------------------------------------

def test_counts_worked_example():
    assert _count("joint", 9, 4) == 324
    assert _count("divided", 9, 4) == 117


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 6))
def test_count_law(N, F):
    div, joint = _count("divided", N, F), _count("joint", N, F)
    assert div == N * (N + F)
    assert joint == N * (N * F)
    # N + F < N·F exactly when (N-1)(F-1) > 1; the two tie at N = F = 2
    if (N - 1) * (F - 1) > 1:
        assert div < joint
    elif N == F == 2:
        assert div == joint


def test_counter_resets():
    c = ComparisonCounter()
    c.add(5)
    c.add(np.int64(3))
    assert c.scores == 8
    c.reset()
    assert c.scores == 0


# --- blocks -----------------------------------------------------------------

def test_joint_single_frame_is_spatial_attention(rng):
    block = SpaceTimeBlock(8, 2, rng, "joint")
    x = rng.normal(size=(1, 1, 5, 8))
    with no_grad():
        out = joint_attention(block, Tensor(x), np.zeros((1, 0, 5, 8)), _visible(1, 0))
        h = block.ln_joint(Tensor(x[0, 0]))
        att, _ = block.attn_joint(h, h, None)
        ref = Tensor(x[0, 0]) + att
        ref = ref + block.mlp(block.ln_mlp(ref))
    assert np.max(np.abs(out.data[0, 0] - ref.data)) <= 1e-12


def test_divided_single_frame_temporal_is_identity_mixing(rng):
    block = SpaceTimeBlock(8, 2, rng, "divided")
    x = rng.normal(size=(1, 1, 5, 8))
    with no_grad():
        out = divided_attention(block, Tensor(x), np.zeros((1, 0, 5, 8)), _visible(1, 0))
        xt = Tensor(x[0, 0])
        mha = block.attn_time
        # singleton softmax: every token keeps its own value vector
        x1 = xt + mha.W_o(mha.W_v(block.ln_time(xt)))
        hs = block.ln_space(x1)
        y, _ = sdpa(*(getattr(block.attn_space, n)(hs).reshape(5, 2, 4).swapaxes(0, 1)
                      for n in ("W_q", "W_k", "W_v")))
        x2 = x1 + block.attn_space.W_o(y.swapaxes(0, 1).reshape(5, 8))
        ref = x2 + block.mlp(block.ln_mlp(x2))
    assert np.max(np.abs(out.data[0, 0] - ref.data)) <= 1e-9


@pytest.mark.parametrize("scheme", ["divided", "joint"])
def test_block_probabilities_sum_to_one(rng, scheme):
    block = SpaceTimeBlock(8, 2, rng, scheme)
    rec = AttentionRecord()
    with no_grad():
        block(Tensor(rng.normal(size=(1, 3, 4, 8))), rng.normal(size=(1, 2, 4, 8)),
              _visible(3, 2), None, rec)
    probs = rec.layers[0]
    arrays = [probs["time"], probs["space"]] if scheme == "divided" else [probs]
    for a in arrays:
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    if scheme == "joint":
        assert probs.shape == (1, 2, 12, 20)


@pytest.mark.parametrize("scheme", ["divided", "joint"])
def test_block_uses_cached_frames_deterministically(rng, scheme):
    block = SpaceTimeBlock(8, 2, rng, scheme)
    x = Tensor(rng.normal(size=(1, 1, 4, 8)))
    cached = rng.normal(size=(1, 3, 4, 8))
    with no_grad():
        a = block(x, cached, _visible(1, 3)).data
        b = block(x, cached, _visible(1, 3)).data
        changed = cached.copy()
        changed[0, 0] += rng.normal(size=changed[0, 0].shape)
        c = block(x, changed, _visible(1, 3)).data
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, c)


@pytest.mark.parametrize("scheme", ["divided", "joint"])
def test_block_gradient(rng, scheme):
    block = SpaceTimeBlock(4, 2, rng, scheme)
    x = param(rng, 1, 2, 3, 4)
    cached = rng.normal(size=(1, 2, 3, 4))
    loss = lambda: (block(x, cached, _visible(2, 2)) ** 2).sum()
    assert fd_check(loss, block.parameters() + [x], max_coords=8) <= 1e-5


# --- core -------------------------------------------------------------------

def _core(rng, scheme="divided", mem_len=6, emb=8, hybrid=False):
    size = 8 if hybrid else 14
    return TimeSformerCore((2, size, size), 3, rng, scheme=scheme, emb_size=emb, patch_size=7,
                           heads=2, mem_len=mem_len, hybrid=hybrid, shrink=8,
                           channels=(2, 3), max_pos=32)


def _inputs(rng, T, B=1, size=14):
    return {"observation": rng.normal(size=(T, B, 2, size, size)),
            "reward": rng.normal(size=(T, B)), "done": np.zeros((T, B), bool),
            "policy_logits": rng.normal(size=(T, B, 3))}


@pytest.mark.parametrize("scheme", ["divided", "joint"])
def test_core_zero_heads_uniform(rng, scheme):
    core = _core(rng, scheme)
    core.policy.zero_()
    with no_grad():
        out, _ = core(_inputs(rng, 3, 2), core.initial_state(2))
    assert out["policy_logits"].shape == (3, 2, 3)
    np.testing.assert_array_equal(out["policy_logits"].data, 0.0)


@pytest.mark.parametrize("scheme", ["divided", "joint"])
@pytest.mark.parametrize("hybrid", [False, True])
def test_core_cache_equivalence(rng, scheme, hybrid):
    core = _core(rng, scheme, mem_len=4, hybrid=hybrid)
    inp = _inputs(rng, 7, 2, size=8 if hybrid else 14)
    inp["done"][4, 1] = True
    with no_grad():
        full, _ = core(inp, core.initial_state(2))
        state, parts = core.initial_state(2), []
        for s in (slice(0, 2), slice(2, 3), slice(3, 7)):
            out, state = core({k: v[s] for k, v in inp.items()}, state)
            parts.append(out["policy_logits"].data)
    assert np.max(np.abs(np.concatenate(parts) - full["policy_logits"].data)) <= 1e-9


@pytest.mark.parametrize("scheme", ["divided", "joint"])
def test_core_causality(rng, scheme):
    core = _core(rng, scheme)
    inp = _inputs(rng, 5)
    with no_grad():
        ref, _ = core(inp, core.initial_state(1))
        for t in range(5):
            pert = {k: v.copy() for k, v in inp.items()}
            pert["observation"][t] += 1.0
            out, _ = core(pert, core.initial_state(1))
            assert np.array_equal(out["policy_logits"].data[:t], ref["policy_logits"].data[:t])
            assert not np.array_equal(out["policy_logits"].data[t], ref["policy_logits"].data[t])


@pytest.mark.parametrize("scheme", ["divided", "joint"])
def test_core_gradient(rng, scheme):
    core = _core(rng, scheme)
    for p in core.parameters():
        p.data += rng.normal(size=p.shape) * 0.05
    inp = _inputs(rng, 3)
    state = core.initial_state(1)

    def loss():
        out, _ = core(inp, state)
        return out["policy_logits"].sum() + out["baseline"].sum()

    assert fd_check(loss, core.parameters(), max_coords=3) <= 1e-4


def test_cache_receives_no_gradient(rng):
    core = _core(rng)
    with no_grad():
        _, state = core(_inputs(rng, 3), core.initial_state(1))
    assert isinstance(state["mem"], np.ndarray)
    reset_tape()
    out, _ = core(_inputs(rng, 2), state)
    backward(out["policy_logits"].sum())
    assert all(p.grad is not None for p in core.blocks[0].parameters())


def test_no_classification_token(rng):
    core = _core(rng)
    assert core.shrink.weight.shape[1] == core.n_tokens * core.emb_size == 4 * 8


def test_emb_size_orders_parameter_count():
    counts = [TimeSformerCore((4, 28, 28), 3, np.random.default_rng(0), emb_size=e)
              .parameter_count() for e in (8, 16)]
    assert counts[1] > counts[0]


def test_time_encoding_is_trainable_gaussian(rng):
    core = _core(rng)
    names = dict(core.named_parameters())
    assert "time_pos" in names and "embedder.pos" in names
    ref = gaussian_encoding((32, 8), 0.02, np.random.default_rng(0))
    assert core.time_pos.shape == ref.shape
