"""Heatmaps, overlays, perturbation saliency and PPM/PGM image files."""
from __future__ import annotations

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import map_coordinates

from .tensor import DimensionError, no_grad

# blue → green → yellow → red
COLOR_STOPS = np.array([[0, 0, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]],
                       dtype=np.float64)
COLOR_POSITIONS = np.array([0.0, 1 / 3, 2 / 3, 1.0])


def normalize_attention(a) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant input maps to zeros."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("cannot normalize an empty array")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return np.clip((a - lo) / (hi - lo), 0.0, 1.0)


def _to_byte(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def colormap(h) -> np.ndarray:
    """Heatmap in [0, 1] → ``[H, W, 3]`` bytes by piecewise-linear interpolation."""
    h = np.clip(np.asarray(h, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.interp(h, COLOR_POSITIONS, COLOR_STOPS[:, k]) for k in range(3)],
                   axis=-1)
    return _to_byte(rgb)


def overlay(frame, heat, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend an RGB heatmap over a grayscale (or RGB) frame."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    frame = np.asarray(frame, dtype=np.float64)
    heat = np.asarray(heat, dtype=np.float64)
    if frame.ndim == 2:
        frame = np.repeat(frame[..., None], 3, axis=-1)
    if frame.shape != heat.shape:
        raise DimensionError(f"frame {frame.shape} and heatmap {heat.shape} differ")
    return _to_byte(alpha * heat + (1.0 - alpha) * frame)


def upsample(a, height: int, width: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and clamped borders."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(a, [yy, xx], order=1, mode="nearest")


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    # written as I + Σ w_k (shift_k(I) - I) so constant regions stay exact
    radius = len(kernel) // 2
    n = img.shape[axis]
    out = img.copy()
    for k, w in zip(range(-radius, radius + 1), kernel):
        if k == 0:
            continue
        idx = np.clip(np.arange(n) + k, 0, n - 1)
        out += w * (np.take(img, idx, axis=axis) - img)
    return out


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, kernels cut at 3σ, edges replicated."""
    img = np.asarray(img, dtype=np.float64)
    if sigma <= 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(img, k, img.ndim - 2), k, img.ndim - 1)


def gaussian_mask(height: int, width: int, i: float, j: float, sigma: float) -> np.ndarray:
    y = np.arange(height, dtype=np.float64)[:, None]
    x = np.arange(width, dtype=np.float64)[None, :]
    return np.exp(-((y - i) ** 2 + (x - j) ** 2) / (2.0 * sigma ** 2))


def perturb(frame, i: int, j: int, sigma_blur: float = 3.0, sigma_mask: float = 5.0,
            blurred: np.ndarray | None = None) -> np.ndarray:
    """Blend toward a blurred copy under a unit-peak Gaussian mask centred at ``(i, j)``.

    Works on ``[H, W]`` or on stacks ``[..., H, W]`` (same mask on every channel).
    """
    frame = np.asarray(frame, dtype=np.float64)
    H, W = frame.shape[-2:]
    if not (0 <= i < H and 0 <= j < W):
        raise IndexError(f"({i}, {j}) outside a {H}x{W} frame")
    if blurred is None:
        blurred = gaussian_blur(frame, sigma_blur)
    M = gaussian_mask(H, W, i, j, sigma_mask)
    return frame + M * (blurred - frame)


def sample_grid(n: int, stride: int) -> np.ndarray:
    pts = list(range(0, n, stride))
    if pts[-1] != n - 1:
        pts.append(n - 1)
    return np.array(pts)


def saliency_map(score_fn, frame, mode: str = "policy", stride: int = 5,
                 sigma_blur: float = 3.0, sigma_mask: float = 5.0) -> np.ndarray:
    """Perturbation saliency over the last two axes of ``frame``.

    ``score_fn`` maps a batch of observations ``[K, *frame.shape]`` to
    ``(logits [K, A], values [K])``. Every ``stride``-th pixel (plus the last
    row and column) is scored; the rest is filled bilinearly.
    """
    if mode not in ("policy", "value"):
        raise ValueError(f"mode must be policy or value, got {mode!r}")
    frame = np.asarray(frame, dtype=np.float64)
    H, W = frame.shape[-2:]
    rows, cols = sample_grid(H, stride), sample_grid(W, stride)
    blurred = gaussian_blur(frame, sigma_blur)
    batch = [frame] + [perturb(frame, i, j, sigma_blur, sigma_mask, blurred)
                       for i in rows for j in cols]
    logits, values = score_fn(np.stack(batch))
    logits = np.asarray(logits, dtype=np.float64).reshape(len(batch), -1)
    values = np.asarray(values, dtype=np.float64).reshape(len(batch))
    if mode == "policy":
        s = 0.5 * np.sum((logits[1:] - logits[0]) ** 2, axis=-1)
    else:
        s = 0.5 * (values[1:] - values[0]) ** 2
    coarse = s.reshape(len(rows), len(cols))
    if stride == 1:
        full = coarse
    else:
        interp = RegularGridInterpolator((rows, cols), coarse, method="linear")
        yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        full = interp(np.stack([yy, xx], axis=-1))
    return normalize_attention(full)


def core_scorer(core, state: dict, prev_reward: float = 0.0, prev_logits=None,
                done: bool = False):
    """Wrap a policy core and a batch-1 agent state as a ``score_fn`` for saliency."""
    A = core.num_actions
    pl = np.zeros(A) if prev_logits is None else np.asarray(prev_logits, dtype=np.float64)

    def score(obs: np.ndarray):
        K = obs.shape[0]
        tiled = {k: np.repeat(v, K, axis=0) for k, v in state.items()}
        inputs = {"observation": obs[None], "reward": np.full((1, K), prev_reward),
                  "done": np.full((1, K), done), "policy_logits": np.tile(pl, (1, K, 1))}
        if "seed" in state:
            inputs["query_seed"] = tiled["seed"][None]
        with no_grad():
            out, _ = getattr(core, "act", core)(inputs, tiled)
        return out["policy_logits"].data[0], out["baseline"].data[0]

    return score


def write_image(img, path) -> None:
    """Binary PPM for ``[H, W, 3]``, PGM for ``[H, W]``; values must be bytes."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = _to_byte(arr.astype(np.float64))
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise DimensionError(f"cannot write image of shape {arr.shape}")
    H, W = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{W} {H}".encode() + b"\n255\n")
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_image(path) -> np.ndarray:
    """Read files produced by :func:`write_image`."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6") or parts[2] != b"255":
        raise ValueError(f"{path}: not a binary PPM/PGM written by this module")
    W, H = (int(v) for v in parts[1].split())
    channels = 3 if parts[0] == b"P6" else 1
    raw = np.frombuffer(parts[3], dtype=np.uint8)
    if raw.size != H * W * channels:
        raise ValueError(f"{path}: expected {H * W * channels} pixel bytes, found {raw.size}")
    return raw.reshape((H, W, 3) if channels == 3 else (H, W)).copy()
