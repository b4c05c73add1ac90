import numpy as np
import pytest

from attnrl.tensor import Tensor, backward, no_grad, reset_tape


def fd_check(loss_fn, params, eps=1e-6, max_coords=40, seed=0):
    """Relative error between backprop gradients and central differences.

    ``loss_fn()`` must rebuild the loss from the current parameter values.
    Up to ``max_coords`` coordinates per parameter are probed.
    """
    rng = np.random.default_rng(seed)
    reset_tape()
    for p in params:
        p.grad = None
    backward(loss_fn())
    analytic, numeric = [], []
    for p in params:
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        for k in coords:
            old = flat[k]
            flat[k] = old + eps
            with no_grad():
                up = loss_fn().item()
            flat[k] = old - eps
            with no_grad():
                down = loss_fn().item()
            flat[k] = old
            numeric.append((up - down) / (2 * eps))
            analytic.append(grad.reshape(-1)[k])
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_cfg(**kw):
    """A desk-sized adaptive configuration for fast pipeline runs."""
    from attnrl.config import Config, validate

    base = dict(arch="adaptive", unroll_length=9, chunk_size=5, num_actors=1, num_buffers=4,
                batch_size=1, d_model=16, heads=2, emb_size=8, mem_len=8, frame_size=12,
                max_pos=64, total_steps=10)
    base.update(kw)
    cfg = Config(**base)
    validate(cfg)
    return cfg
