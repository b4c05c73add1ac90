# coding: utf-8

# # Divided vs joint space-time attention
#
# One new frame of N patch tokens attends to F frames. Joint attention scores
# every token of every frame; divided attention scores one token per frame in
# time, then the N tokens of its own frame in space.

# In[1]:

from attnrl.cli import bench_attn

rows = bench_attn(ns=(4, 9, 16), fs=(2, 4, 8), batch=4, repeats=2)


# In[2]:

print(f"{'N':>3} {'F':>3} {'divided':>8} {'joint':>8} {'N(N+F)':>8} {'N*N*F':>8} {'ms div':>7} {'ms joint':>8}")
for r in rows:
    N, F = r["N"], r["F"]
    print(f"{N:>3} {F:>3} {r['divided']:>8} {r['joint']:>8} {N * (N + F):>8} {N * N * F:>8} "
          f"{r['divided_ms']:>7.2f} {r['joint_ms']:>8.2f}")


# The counts follow N(N+F) and N²F exactly. Wall-clock follows the same
# ordering once N and F are large enough for the score matrices to dominate.
