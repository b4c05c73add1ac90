# coding: utf-8

# # Training a small attention agent on Catch
#
# A short run of the spatial-attention LSTM core so it finishes in about a
# minute. Returns only start to climb at this budget; the adaptive core with
# default settings passes 0.9 after roughly 60k steps.

# In[1]:

import os
import tempfile

import numpy as np

from attnrl.cli import play, spatial_maps
from attnrl.config import make_core, make_runner, parse_config
from attnrl.metrics import auc
from attnrl.pipeline import run_training
from attnrl.viz import colormap, normalize_attention, overlay, upsample, write_image

cfg = parse_config({"arch": "mott", "total_steps": 6000, "unroll_length": 39, "chunk_size": 20,
                    "num_actors": 2, "batch_size": 2, "num_buffers": 8, "d_model": 32})
print(cfg)


# In[2]:

result = run_training(cfg, lambda s: make_core(cfg, s), lambda i: make_runner(cfg, i))
for row in result.rows[::10]:
    print(f"step {row.step:>6}  episodes {row.episodes:>4}  return {row.mean_return_100:+.2f}")
print("sps", round(result.sps, 1))
print("auc", round(auc([(r.step, r.mean_return_100) for r in result.rows]), 3))


# Attention maps from the trained core, one per head, blended over the
# newest frame of the stack.

# In[3]:

core = result.core
out_dir = tempfile.mkdtemp(prefix="catch_attn_")
frames = []


def on_step(t, env_out, out, _state):
    frame = env_out["observation"][-1]
    for k, m in enumerate(spatial_maps(out, core)):
        heat = colormap(normalize_attention(upsample(m, *frame.shape)))
        write_image(overlay(frame, heat, 0.5), os.path.join(out_dir, f"t{t:02d}_head{k}.ppm"))
    frames.append(t)


returns, lengths, sec = play(core, make_runner(cfg, 0, seed=5), episodes=1, on_step=on_step)
print("episode return", returns, "inference ms", round(1000 * sec, 2))
print(len(os.listdir(out_dir)), "overlays in", out_dir)
