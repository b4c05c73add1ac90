"""Command-line interface: train, eval, viz-attn, viz-saliency, bench-attn."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from .checkpoint import CheckpointError, checkpoint_io, load_checkpoint, save_checkpoint
from .config import ARCHS, Config, ConfigError, make_core, make_runner, parse_config
from .metrics import CSV_HEADER, MetricsRow, MetricsWindow, MetricsWriter, auc, metrics_update
from .tensor import DimensionError, Tensor, no_grad
from .viz import colormap, core_scorer, normalize_attention, overlay, saliency_map, upsample, \
    write_image

__all__ = ["Config", "parse_config", "MetricsRow", "metrics_update", "auc", "checkpoint_io",
           "CSV_HEADER", "main", "bench_attn", "play"]

log = logging.getLogger("attnrl")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def write_config(cfg: Config, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in cfg.to_dict().items():
            fh.write(f"{k}={v}\n")


def load_model(checkpoint, cfg: Config):
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint {checkpoint} does not exist")
    core = make_core(cfg)
    try:
        core.load_state_dict(load_checkpoint(checkpoint))
    except (KeyError, DimensionError) as exc:
        raise CheckpointError(f"{checkpoint} does not fit the configured model: {exc}") from None
    return core


def play(core, runner, episodes: int, seed: int = 0, on_step=None, max_steps=None):
    """Run whole episodes with actions sampled from the policy.

    ``on_step(t, env_output, out, state_before)`` sees each observation with
    the core output computed on it (``record=True``) and the agent state the
    core started from. Returns ``(returns, lengths, seconds per step)``.
    """
    rng = np.random.default_rng(seed)
    A = core.num_actions
    state = core.initial_state(1)
    env_out = runner.initial()
    prev_logits = np.zeros(A)
    seed_vec = None
    returns, lengths, times = [], [], []
    t = 0
    while len(returns) < episodes and (max_steps is None or t < max_steps):
        inputs = {"observation": env_out["observation"][None, None],
                  "reward": np.array([[env_out["reward"]]]),
                  "done": np.array([[env_out["done"]]]),
                  "policy_logits": prev_logits[None, None]}
        if seed_vec is not None:
            inputs["query_seed"] = seed_vec[None, None]
        state_before = state
        start = time.perf_counter()
        with no_grad():
            if on_step is not None:
                kw = {"query_source": "sequential"} if hasattr(core, "query_source") else {}
                out, state = core(inputs, state, record=True, **kw)
            else:
                out, state = getattr(core, "act", core)(inputs, state)
        times.append(time.perf_counter() - start)
        logits = out["policy_logits"].data[0, 0]
        if on_step is not None:
            on_step(t, env_out, out, state_before)
        if "core_output" in out:
            seed_vec = out["core_output"].data[0, 0]
        p = np.exp(logits - logits.max())
        action = int(min(np.searchsorted(np.cumsum(p / p.sum()), rng.random()), A - 1))
        env_out = runner.step(action)
        prev_logits = logits
        if env_out["done"]:
            returns.append(env_out["episode_return"])
            lengths.append(env_out["episode_step"])
        t += 1
    return returns, lengths, float(np.mean(times)) if times else 0.0


def spatial_maps(out: dict, core) -> np.ndarray | None:
    """Per-head spatial maps ``[H, h, w]`` for the current step, when the core has them."""
    if "maps" in out:
        return np.asarray(out["maps"])[0, 0]
    records = out.get("records")
    if records is None or not hasattr(core, "embedder"):
        return None
    gh, gw = core.embedder.grid
    last = records.layers[-1]
    if isinstance(last, dict):
        probs = last["space"][0, 0]                    # [H, N, N]
    else:
        N = core.n_tokens
        p = last[0]                                    # [H, N, K·N]
        probs = p[:, :, -N:]
    # average over query tiles
    return probs.mean(axis=1).reshape(-1, gh, gw)


def temporal_rows(out: dict) -> np.ndarray | None:
    records = out.get("records")
    if records is None:
        return None
    if isinstance(records, list):
        records = records[-1]
    last = records.layers[-1]
    if isinstance(last, dict):
        return last["time"][0].mean(axis=0)[:, -1, :]   # [H, keys]
    return last[0, :, -1, :]                             # [H, keys]


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def bench_attn(ns=(4, 9, 16, 25), fs=(2, 4, 8, 16), d: int = 16, heads: int = 4,
               batch: int = 16, repeats: int = 3, seed: int = 0) -> list[dict]:
    """Score counts for one frame with ``F-1`` cached frames, and clip wall-clock.

    Wall-clock is the best of ``repeats`` chunk-parallel forward passes over a
    clip of ``F`` frames for ``batch`` sequences.
    """
    from .attention import causal_mask
    from .timesformer import ComparisonCounter, SpaceTimeBlock

    rng = np.random.default_rng(seed)
    rows = []
    for N in ns:
        for F in fs:
            row = {"N": N, "F": F}
            for scheme in ("divided", "joint"):
                block = SpaceTimeBlock(d, heads, rng, scheme)
                counter = ComparisonCounter()
                x1 = Tensor(rng.normal(size=(1, 1, N, d)))
                cache = rng.normal(size=(1, F - 1, N, d))
                with no_grad():
                    block(x1, cache, np.ones((1, 1, F), dtype=bool), counter)
                row[scheme] = counter.scores
                clip = Tensor(rng.normal(size=(batch, F, N, d)))
                empty = np.zeros((batch, 0, N, d))
                allowed = np.broadcast_to(causal_mask(F, F), (batch, F, F))
                best = np.inf
                with no_grad():
                    for _ in range(repeats):
                        start = time.perf_counter()
                        block(clip, empty, allowed)
                        best = min(best, time.perf_counter() - start)
                row[f"{scheme}_ms"] = 1000.0 * best
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _config_from_args(args) -> Config:
    overrides = {k: v for k, v in vars(args).items()
                 if k in {f.name for f in fields(Config)} and v is not None}
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        side = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.txt")
        if os.path.exists(side):
            path = side
    return parse_config(overrides, path)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    write_config(cfg, os.path.join(args.out, "config.txt"))
    from .pipeline import run_training

    with MetricsWriter(os.path.join(args.out, "metrics.csv")) as writer:
        def on_row(row):
            writer.write(row)
            if not args.quiet:
                print(f"step {row.step} episodes {row.episodes} "
                      f"return {row.mean_return_100:.3f} sps {row.sps:.1f}", flush=True)

        result = run_training(cfg, lambda s: make_core(cfg, s),
                              lambda i: make_runner(cfg, i), on_row)
    path = os.path.join(args.out, "model.atrl")
    save_checkpoint(result.core.state_dict(), path)
    last = result.rows[-1] if result.rows else None
    print(f"trained {result.steps} steps in {result.elapsed:.1f}s "
          f"(sps {result.sps:.1f}); checkpoint {path}")
    if last is not None:
        curve = [(r.step, r.mean_return_100) for r in result.rows]
        area = auc(curve) if len(curve) >= 2 else float("nan")
        print(f"final mean_return_100 {last.mean_return_100:.3f}  auc {area:.3f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    core = load_model(args.checkpoint, cfg)
    runner = make_runner(cfg, 0, seed=args.eval_seed)
    returns, lengths, sec = play(core, runner, args.episodes, seed=args.eval_seed)
    print(f"episodes {len(returns)} mean_return {np.mean(returns):.4f} "
          f"mean_length {np.mean(lengths):.2f} inference_ms {1000 * sec:.3f}")
    return 0


def cmd_viz_attn(args) -> int:
    cfg = _config_from_args(args)
    core = load_model(args.checkpoint, cfg)
    runner = make_runner(cfg, 0, seed=args.eval_seed)
    os.makedirs(args.out, exist_ok=True)
    written = []

    def on_step(t, env_out, out, _state):
        frame = env_out["observation"][-1]
        frame = frame * 255.0 if cfg.rescale_images else frame
        maps = spatial_maps(out, core)
        if maps is not None:
            for k, m in enumerate(maps):
                heat = colormap(normalize_attention(upsample(m, *frame.shape)))
                path = os.path.join(args.out, f"frame{t:04d}_head{k}.ppm")
                write_image(overlay(frame, heat, args.alpha), path)
                written.append(path)
            return
        rows = temporal_rows(out)
        for k, r in enumerate(rows):
            heat = colormap(normalize_attention(r[None, :]))
            path = os.path.join(args.out, f"frame{t:04d}_head{k}.ppm")
            write_image(heat, path)
            written.append(path)

    play(core, runner, episodes=1, seed=args.eval_seed, on_step=on_step, max_steps=args.steps)
    print(f"wrote {len(written)} images to {args.out}")
    return 0


def cmd_viz_saliency(args) -> int:
    cfg = _config_from_args(args)
    core = load_model(args.checkpoint, cfg)
    runner = make_runner(cfg, 0, seed=args.eval_seed)
    os.makedirs(args.out, exist_ok=True)
    count = [0]
    prev = [np.zeros(core.num_actions)]

    def on_step(t, env_out, out, state):
        obs = env_out["observation"]
        score = core_scorer(core, state, float(env_out["reward"]), prev[0],
                            bool(env_out["done"]))
        frame = obs[-1] * (255.0 if cfg.rescale_images else 1.0)
        for mode in ("policy", "value"):
            sal = saliency_map(score, obs, mode, args.stride, args.sigma_blur, args.sigma_mask)
            path = os.path.join(args.out, f"frame{t:04d}_{mode}.ppm")
            write_image(overlay(frame, colormap(sal), args.alpha), path)
            count[0] += 1
        prev[0] = out["policy_logits"].data[0, 0]

    play(core, runner, episodes=1, seed=args.eval_seed, on_step=on_step, max_steps=args.steps)
    print(f"wrote {count[0]} images to {args.out}")
    return 0


def cmd_bench_attn(args) -> int:
    ns = [int(v) for v in args.n.split(",")]
    fs = [int(v) for v in args.f.split(",")]
    rows = bench_attn(ns, fs, batch=args.batch, repeats=args.repeats)
    print(f"{'N':>4} {'F':>4} {'divided':>9} {'joint':>9} {'div_ms':>9} {'joint_ms':>9}")
    for r in rows:
        print(f"{r['N']:>4} {r['F']:>4} {r['divided']:>9} {r['joint']:>9} "
              f"{r['divided_ms']:>9.3f} {r['joint_ms']:>9.3f}")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    for f in fields(Config):
        kind = {"int": int, "float": float}.get(f.type, str)
        kwargs = {"choices": ARCHS} if f.name == "arch" else {}
        names = dict.fromkeys([f"--{f.name}", f"--{f.name.replace('_', '-')}"])
        p.add_argument(*names, dest=f.name, type=kind, default=None, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a core and write metrics plus a checkpoint")
    _add_config_flags(p)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                              ("viz-attn", cmd_viz_attn, "write attention overlays"),
                              ("viz-saliency", cmd_viz_saliency, "write saliency overlays")):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--eval-seed", dest="eval_seed", type=int, default=123)
        if name == "eval":
            p.add_argument("--episodes", type=int, default=100)
        else:
            p.add_argument("--out", default="viz")
            p.add_argument("--steps", type=int, default=10)
            p.add_argument("--alpha", type=float, default=0.5)
        if name == "viz-saliency":
            p.add_argument("--stride", type=int, default=5)
            p.add_argument("--sigma-blur", dest="sigma_blur", type=float, default=3.0)
            p.add_argument("--sigma-mask", dest="sigma_mask", type=float, default=5.0)
        p.set_defaults(func=func)

    p = sub.add_parser("bench-attn", help="compare divided and joint space-time attention")
    p.add_argument("--n", default="4,9,16,25", help="comma-separated patch counts")
    p.add_argument("--f", default="2,4,8,16", help="comma-separated frame counts")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench_attn)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
