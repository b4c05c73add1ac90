"""End-to-end acceptance checks, one test per criterion, each printing PASS or FAIL."""
import threading
import time
from pathlib import Path

import numpy as np

from attnrl import tensor as tn
from attnrl.checkpoint import load_checkpoint, save_checkpoint
from attnrl.cli import bench_attn
from attnrl.config import make_core, make_runner, parse_config
from attnrl.layers import Linear, Module
from attnrl.metrics import CSV_HEADER, MetricsRow, MetricsWriter
from attnrl.mott import MottCore, answer_vectors, build_spatial_basis, mott_step, \
    spatial_attention
from attnrl.pipeline import run_training
from attnrl.tensor import Tensor, backward, no_grad, reset_tape
from attnrl.viz import colormap, core_scorer, overlay, perturb, saliency_map, write_image
from attnrl.vtrace import truncated_is_weights, vtrace_targets
from conftest import fd_check, small_cfg
from test_mott import loop_answers, loop_attention
from test_vtrace import nstep_oracle, random_traj, summation_oracle

GOLDEN = Path(__file__).parent / "golden"
ARCHS = ("mott", "adaptive", "sp-temp-seq", "sp-temp-oneshot", "divided", "joint")


def report(capsys, n, title, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail})", flush=True)
    assert ok, detail


def tiny_core(arch, seed=0):
    cfg = small_cfg(arch=arch, mem_len=16, chunk_size=10)
    return make_core(cfg, seed)


def random_inputs(rng, core, T, B=1):
    inp = {"observation": rng.normal(size=(T, B) + core.obs_shape),
           "reward": rng.normal(size=(T, B)), "done": np.zeros((T, B), bool),
           "policy_logits": rng.normal(size=(T, B, core.num_actions))}
    if "query_seed" in getattr(core, "extra_fields", {}):
        inp["query_seed"] = rng.normal(size=(T, B) + core.extra_fields["query_seed"])
    return inp


def jiggle(core, rng, scale=0.05):
    # random offsets move every relu and max-pool away from exact ties
    for p in core.parameters():
        p.data += rng.normal(size=p.shape) * scale
    return core


# --- 1 ----------------------------------------------------------------------

def _op_cases(rng):
    def P(*shape, positive=False):
        x = rng.normal(size=shape)
        return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)

    def dims(k):
        return [int(d) for d in rng.integers(1, 4, size=k)]

    a, b = dims(2)
    m, n = dims(2)
    x, y = P(a, b), P(a, b)
    yield "add", [x, y], lambda: ((x + y) ** 2).sum()
    yield "sub", [x, y], lambda: ((x - y) ** 2).sum()
    yield "mul", [x, y], lambda: (x * y * x).sum()
    d = P(a, b, positive=True)
    yield "div", [x, d], lambda: (x / d).sum()
    yield "rdiv", [d], lambda: (2.0 / d).sum()
    yield "neg", [x], lambda: ((-x) * x).sum()
    yield "pow", [d], lambda: (d ** 1.7).sum()
    row = P(b)
    yield "broadcast", [x, row], lambda: ((x + row) * row).sum()
    A, B = P(m, a), P(a, n)
    yield "matmul", [A, B], lambda: ((A @ B) ** 2).sum()
    Ab, Bb = P(2, m, a), P(a, n)
    yield "matmul_batched", [Ab, Bb], lambda: ((Ab @ Bb) ** 2).sum()
    t = P(3, a, b)
    yield "getitem_basic", [t], lambda: (t[1:, :, -1] ** 2).sum()
    yield "getitem_fancy", [t], lambda: (t[[0, 2, 0]] ** 2).sum()
    yield "reshape", [t], lambda: (t.reshape(-1, b) ** 2 * np.arange(b)).sum()
    ramp = np.arange(3 * a * b).reshape(b, 3, a)
    yield "transpose", [t], lambda: (t.transpose(2, 0, 1) ** 2 * ramp).sum()
    yield "swapaxes", [t], lambda: (t.swapaxes(0, 2) ** 2).sum()
    yield "sum_axis", [t], lambda: (t.sum(axis=1) ** 2).sum()
    yield "mean_keepdims", [t], lambda: ((t - t.mean(axis=-1, keepdims=True)) ** 2).sum()
    yield "exp", [x], lambda: x.exp().sum()
    yield "log", [d], lambda: (d.log() * d).sum()
    s = Tensor(rng.normal(size=(a, b)) + np.where(rng.random((a, b)) < 0.5, 0.3, -0.3),
               requires_grad=True)
    yield "relu", [s], lambda: (s.relu() ** 2).sum()
    yield "tanh", [x], lambda: (x.tanh() ** 2).sum()
    yield "sigmoid", [x], lambda: (x.sigmoid() ** 2).sum()
    yield "gelu", [x], lambda: (tn.gelu(x) ** 2).sum()
    w = rng.normal(size=(a, b + 1))
    z = P(a, b + 1)
    yield "softmax", [z], lambda: (tn.softmax(z) * w).sum()
    yield "log_softmax", [z], lambda: (tn.log_softmax(z) * w).sum()
    g, beta = P(b + 2), P(b + 2)
    u = P(a, b + 2)
    yield "layer_norm", [u, g, beta], \
        lambda: (tn.layer_norm(u, g, beta) ** 2 * np.arange(b + 2)).sum()
    img, ker, bias = P(2, 2, 5, 5), P(3, 2, 3, 3), P(3)
    yield "conv2d", [img, ker, bias], lambda: (tn.conv2d(img, ker, 1, 1, bias) ** 2).sum()
    yield "conv2d_stride", [img, ker], lambda: (tn.conv2d(img, ker, 2, 0) ** 2).sum()
    pool = Tensor(rng.permutation(64).reshape(1, 4, 4, 4) / 8.0, requires_grad=True)
    yield "max_pool2d", [pool], lambda: (tn.max_pool2d(pool) ** 2).sum()
    parts = [P(a, b), P(a + 1, b)]
    yield "concat", parts, lambda: (tn.concat(parts, axis=0) ** 2).sum()
    yield "stack", [x, y], lambda: (tn.stack([x, y], axis=1) ** 3).sum()
    keep = rng.random((a, b + 1)) < 0.7
    keep[:, 0] = True
    yield "where_mask", [z], lambda: (tn.softmax(tn.where_mask(z, keep)) * w).sum()


def _core_cases(rng):
    mott = jiggle(MottCore((2, 8, 8), 3, rng, heads=2, hidden=4, answer_hidden=8,
                           channels=(2, 4), U=2, V=2), rng)
    frame = rng.normal(size=(1, 2, 8, 8))
    st = {"h": rng.normal(size=(1, 4)) * 0.5, "c": rng.normal(size=(1, 4)) * 0.5}
    pl = rng.normal(size=(1, 3))

    def mott_loss():
        logits, value, _, _ = mott_step(mott, frame, 0.5, pl, st)
        return logits.sum() + value.sum()

    yield "mott_step", mott.parameters(), mott_loss
    for arch in ("adaptive", "divided", "joint"):
        core = jiggle(tiny_core(arch, int(rng.integers(1000))), rng)
        inp = random_inputs(rng, core, 3)
        state = core.initial_state(1)

        def loss(core=core, inp=inp, state=state):
            out, _ = core(inp, state)
            return out["policy_logits"].sum() + out["baseline"].sum()

        yield arch, core.parameters(), loss


def test_criterion_1_gradient_suite(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_op, worst_core, failures = 0.0, 0.0, []
    for _ in range(3):
        for name, params, loss in _op_cases(rng):
            err = fd_check(loss, params)
            worst_op = max(worst_op, err)
            if not err <= 1e-5:
                failures.append(f"{name}={err:.2e}")
    for name, params, loss in _core_cases(rng):
        err = fd_check(loss, params, max_coords=4)
        worst_core = max(worst_core, err)
        if not err <= 1e-4:
            failures.append(f"{name}={err:.2e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    report(capsys, 1, "gradient suite", ok,
           f"ops max {worst_op:.1e}, cores max {worst_core:.1e}, {elapsed:.0f}s"
           + (f", failing {failures}" if failures else ""))


# --- 2 ----------------------------------------------------------------------

def test_criterion_2_vtrace_oracles(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_sum = worst_nstep = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 9))
        gamma = float(rng.uniform(0, 1))
        traj = random_traj(rng, T)
        rho, c = truncated_is_weights(traj, float(rng.uniform(1, 2)), 1.0)
        vs = vtrace_targets(traj, gamma, rho, c).vs
        worst_sum = max(worst_sum, np.max(np.abs(vs - summation_oracle(traj, gamma, rho, c))))
        traj = random_traj(rng, T, on_policy=True)
        vs = vtrace_targets(traj, gamma, *truncated_is_weights(traj, 1.0, 1.0)).vs
        worst_nstep = max(worst_nstep, np.max(np.abs(vs - nstep_oracle(traj, gamma))))
    elapsed = time.perf_counter() - start
    ok = worst_sum <= 1e-12 and worst_nstep <= 1e-12 and elapsed < 10
    report(capsys, 2, "v-trace oracle equivalence", ok,
           f"summation {worst_sum:.1e}, n-step {worst_nstep:.1e}, {elapsed:.1f}s")


# --- 3 ----------------------------------------------------------------------

def test_criterion_3_causality(capsys):
    rng = np.random.default_rng(3)
    broken = []
    for arch in ARCHS:
        core = tiny_core(arch)
        for _ in range(100):
            T = int(rng.integers(2, 6))
            t = int(rng.integers(0, T))
            inp = random_inputs(rng, core, T)
            pert = {k: v.copy() for k, v in inp.items()}
            key = rng.choice(["observation", "reward", "policy_logits"])
            pert[key][t] += rng.normal(size=pert[key][t].shape)
            with no_grad():
                ref, _ = core(inp, core.initial_state(1))
                out, _ = core(pert, core.initial_state(1))
            for name in ("policy_logits", "baseline"):
                if not np.array_equal(ref[name].data[:t], out[name].data[:t]):
                    broken.append((arch, T, t, key))
    report(capsys, 3, "causality", not broken,
           f"{len(ARCHS)} architectures x 100 trials, {len(broken)} violations")


# --- 4 ----------------------------------------------------------------------

def test_criterion_4_cache_equivalence(capsys):
    rng = np.random.default_rng(4)
    worst, leaks = 0.0, []
    for arch in ("adaptive", "sp-temp-seq", "divided", "joint"):
        core = tiny_core(arch)
        for trial in range(5):
            T = 10
            inp = random_inputs(rng, core, T, B=2)
            inp["done"][int(rng.integers(1, T)), 1] = True
            cuts = np.sort(rng.choice(np.arange(1, T), size=2, replace=False))
            with no_grad():
                full, _ = core(inp, core.initial_state(2))
                state, parts = core.initial_state(2), []
                for s, e in zip([0, *cuts], [*cuts, T]):
                    out, state = core({k: v[s:e] for k, v in inp.items()}, state)
                    parts.append(out["policy_logits"].data)
            worst = max(worst, np.max(np.abs(np.concatenate(parts) - full["policy_logits"].data)))
        # gradients of the second chunk are the same whether or not the first chunk was recorded
        inp = random_inputs(rng, core, 6)
        first = {k: v[:3] for k, v in inp.items()}
        second = {k: v[3:] for k, v in inp.items()}
        grads = []
        for recorded in (True, False):
            reset_tape()
            for p in core.parameters():
                p.grad = None
            if recorded:
                _, state = core(first, core.initial_state(1))
            else:
                with no_grad():
                    _, state = core(first, core.initial_state(1))
            if any(isinstance(v, Tensor) for v in state.values()):
                leaks.append(f"{arch}: state holds a graph tensor")
            out, _ = core(second, state)
            backward(out["policy_logits"].sum())
            grads.append([np.zeros(p.shape) if p.grad is None else p.grad.copy()
                          for p in core.parameters()])
        if not all(np.array_equal(a, b) for a, b in zip(*grads)):
            leaks.append(f"{arch}: gradient reached cached tokens")
    ok = worst <= 1e-9 and not leaks
    report(capsys, 4, "cache equivalence", ok, f"max chunk deviation {worst:.1e}"
           + (f", {leaks}" if leaks else ", no gradient into caches"))


# --- 5 ----------------------------------------------------------------------

def test_criterion_5_comparison_counts(capsys):
    rows = bench_attn(ns=(4, 9, 16, 25), fs=(2, 4, 8, 16), repeats=3)
    bad_counts = [(r["N"], r["F"]) for r in rows
                  if r["divided"] != r["N"] * (r["N"] + r["F"])
                  or r["joint"] != r["N"] * (r["N"] * r["F"])]
    big = [r for r in rows if r["N"] >= 16 and r["F"] >= 8]
    slow = [(r["N"], r["F"], round(r["divided_ms"], 2), round(r["joint_ms"], 2)) for r in big
            if not r["divided_ms"] < r["joint_ms"]]
    ratio = min(r["joint_ms"] / r["divided_ms"] for r in big)
    report(capsys, 5, "comparison-count law", not bad_counts and not slow,
           f"16 grid cells exact={not bad_counts}, min joint/divided time ratio {ratio:.1f}"
           + (f", slower cells {slow}" if slow else ""))


# --- 6 ----------------------------------------------------------------------

def _train_until(arch, budget, threshold=0.9):
    for seed in (0, 1, 2):
        cfg = parse_config({"arch": arch, "env": "catch", "total_steps": budget, "seed": seed})
        hit = []

        def on_row(row):
            if row.episodes >= cfg.metrics_window and row.mean_return_100 >= threshold:
                hit.append(row)
                return True
            return False

        start = time.perf_counter()
        result = run_training(cfg, lambda s: make_core(cfg, s), lambda i: make_runner(cfg, i),
                              on_row)
        minutes = (time.perf_counter() - start) / 60
        if hit:
            return True, f"{arch} seed {seed}: {hit[0].mean_return_100:.2f} at step " \
                         f"{hit[0].step} ({minutes:.1f} min)"
        last = result.rows[-1].mean_return_100 if result.rows else float("nan")
        print(f"{arch} seed {seed}: {last:.2f} after {result.steps} steps ({minutes:.1f} min)")
    return False, f"{arch}: no seed reached {threshold} within {budget} steps"


def test_criterion_6_toy_training(capsys):
    ok_a, msg_a = _train_until("adaptive", 200_000)
    ok_d, msg_d = _train_until("divided", 400_000)
    report(capsys, 6, "toy training on catch", ok_a and ok_d, f"{msg_a}; {msg_d}")


# --- 7 ----------------------------------------------------------------------

def test_criterion_7_mott_oracle(capsys):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(1, 9))
        heads = int(rng.integers(1, 4))
        keys, values = rng.normal(size=(3, 3, c)), rng.normal(size=(3, 3, c))
        q = rng.normal(size=(heads, c)) * 2
        maps = spatial_attention(Tensor(keys), Tensor(q)).data
        worst = max(worst, np.max(np.abs(maps - loop_attention(keys, q))))
        ans = answer_vectors(Tensor(maps), Tensor(values)).data
        worst = max(worst, np.max(np.abs(ans - loop_answers(maps, values))))
    channels = build_spatial_basis(7, 7, 4, 4).S.shape[-1]
    default = MottCore((4, 28, 28), 3, np.random.default_rng(0)).basis.S.shape[-1]
    ok = worst <= 1e-12 and channels == 64 and default == 64
    report(capsys, 7, "mott math oracle", ok,
           f"max deviation {worst:.1e}, basis channels {channels}, default core {default}")


# --- 8 ----------------------------------------------------------------------

class OnePixelCore:
    """Policy and value read a single pixel of the newest frame."""

    num_actions = 3

    def __init__(self, i, j):
        self.i, self.j = i, j

    def initial_state(self, batch=1):
        return {"h": np.zeros((batch, 1))}

    def __call__(self, inputs, state):
        v = inputs["observation"][..., -1, self.i, self.j]
        logits = np.stack([v, np.zeros_like(v), -2 * v], axis=-1)
        return {"policy_logits": Tensor(logits), "baseline": Tensor(v)}, state


def test_criterion_8_saliency_sanity(capsys):
    rng = np.random.default_rng(8)
    blind = tiny_core("adaptive")
    blind.policy.zero_()
    blind.value.zero_()
    frame = rng.uniform(0, 255, blind.obs_shape)
    zero = all(np.all(saliency_map(core_scorer(blind, blind.initial_state(1)), frame, m) == 0)
               for m in ("policy", "value"))
    dists = []
    for i, j in [(2, 3), (9, 1), (5, 10)]:
        core = OnePixelCore(i, j)
        obs = rng.uniform(0, 255, (4, 12, 12))
        obs[:, i, j] = 255.0
        obs[:, max(i - 1, 0):i + 2, max(j - 1, 0):j + 2] *= 0.1
        obs[:, i, j] = 255.0
        for mode in ("policy", "value"):
            sal = saliency_map(core_scorer(core, core.initial_state(1)), obs, mode)
            y, x = np.unravel_index(np.argmax(sal), sal.shape)
            dists.append(float(np.hypot(y - i, x - j)))
    import inspect
    sig = inspect.signature(perturb).parameters
    defaults = (sig["sigma_blur"].default, sig["sigma_mask"].default)
    ok = zero and max(dists) <= 5.0 and defaults == (3.0, 5.0)
    report(capsys, 8, "saliency sanity", ok,
           f"blind core zero={zero}, max argmax distance {max(dists):.2f}, "
           f"sigma defaults {defaults}")


# --- 9 ----------------------------------------------------------------------

class TinyCore(Module):
    """Linear policy over the flattened observation; enough to drive the pipeline."""

    def __init__(self, obs_shape, num_actions, rng):
        self.obs_shape, self.num_actions = tuple(obs_shape), num_actions
        self.head = Linear(int(np.prod(obs_shape)), num_actions + 1, rng)

    def initial_state(self, batch=1):
        return {"h": np.zeros((batch, 1))}

    def __call__(self, inputs, state):
        obs = inputs["observation"]
        T, B = obs.shape[:2]
        out = self.head(Tensor(obs.reshape(T, B, -1) / 255.0))
        return {"policy_logits": out[..., :self.num_actions],
                "baseline": out[..., self.num_actions]}, state


def test_criterion_9_pipeline_soundness(capsys):
    cfg = small_cfg(unroll_length=4, chunk_size=5, num_actors=4, batch_size=4, num_buffers=10,
                    total_steps=10_000, mode="threaded")
    box = {}

    def go():
        box["result"] = run_training(
            cfg, lambda s: TinyCore(cfg.obs_shape, 3, np.random.default_rng(s)),
            lambda i: make_runner(cfg, i))

    th = threading.Thread(target=go, daemon=True)
    th.start()
    th.join(timeout=600)
    if th.is_alive():
        report(capsys, 9, "pipeline soundness", False, "training did not finish: deadlock")
    result = box["result"]
    ledger = result.pool.ledger
    owner = ["free"] * result.pool.num_buffers
    exclusive = True
    for idx, src, dst in ledger.log:
        exclusive &= owner[idx] == src
        owner[idx] = dst
    exclusive &= ledger.audit(result.pool.free, result.pool.full)
    versions = [lv for _, lv in result.consumed]
    increasing = versions == sorted(versions) and \
        sorted(set(versions)) == list(range(result.learner_steps))
    stale = sum(bv < lv for bv, lv in result.consumed)
    ok = (ledger.transfers >= 10_000 and exclusive and increasing and stale > 0
          and not result.actor_errors)
    report(capsys, 9, "pipeline soundness", ok,
           f"{ledger.transfers} transfers, exclusive={exclusive}, versions increasing="
           f"{increasing}, stale consumptions {stale}/{len(result.consumed)}")


# --- 10 ---------------------------------------------------------------------

def test_criterion_10_formats(tmp_path, capsys):
    checks = {}
    write_image(np.full((1, 1, 3), 255, np.uint8), tmp_path / "white_1x1.ppm")
    write_image(np.array([[0, 85], [170, 255]], np.uint8), tmp_path / "ramp_2x2.pgm")
    write_image(colormap(np.array([[0.0, 1 / 3, 2 / 3, 1.0]])), tmp_path / "stops_4x1.ppm")
    heat = np.array([[[255, 0, 0], [0, 0, 255]]], np.uint8)
    write_image(overlay(np.array([[0.0, 100.0]]), heat, 0.5), tmp_path / "overlay_2x1.ppm")
    for name in ("white_1x1.ppm", "ramp_2x2.pgm", "stops_4x1.ppm", "overlay_2x1.ppm"):
        checks[name] = (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes()
    worst = 0.0
    for arch in ARCHS:
        params = tiny_core(arch).state_dict()
        save_checkpoint(params, tmp_path / f"{arch}.atrl")
        back = load_checkpoint(tmp_path / f"{arch}.atrl")
        checks[f"ckpt-{arch}"] = list(back) == list(params) and all(
            back[k].shape == v.shape for k, v in params.items())
        for k, v in params.items():
            worst = max(worst, float(np.max(np.abs(back[k] - v) / np.maximum(np.abs(v), 1e-30))))
    with MetricsWriter(tmp_path / "m.csv") as w:
        w.write(MetricsRow(1, 0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1, 0.0))
    header = (tmp_path / "m.csv").read_bytes().split(b"\n")[0]
    checks["csv"] = header == (b"step,episodes,mean_return_100,mean_length_100,sps,loss_pg,"
                               b"loss_baseline,loss_entropy,parameter_count,inference_ms")
    checks["csv_const"] = CSV_HEADER.encode() == header
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and worst <= 1e-6
    report(capsys, 10, "formats", ok, f"{len(checks)} byte checks, checkpoint max rel "
           f"{worst:.1e}" + (f", failed {failed}" if failed else ""))
