"""Small deterministic grid games and the frame preprocessing used by all agents."""
from __future__ import annotations

from collections import deque

import numpy as np

BACKGROUND, PADDLE, BALL = 0.0, 128.0, 255.0


class CatchEnv:
    """A ball falls one row per step; the agent slides a paddle on the bottom row.

    Actions: 0 left, 1 stay, 2 right. The episode lasts ``rows`` steps and
    pays +1 for a catch, -1 for a miss.
    """

    num_actions = 3

    def __init__(self, rows: int = 10, cols: int = 8, seed: int | None = 0):
        self.rows, self.cols = rows, cols
        self.rng = np.random.default_rng(seed)
        self.ball_row = self.ball_col = self.paddle = self.steps = 0
        self.reset()

    def reset(self) -> np.ndarray:
        self.ball_row = 0
        self.ball_col = int(self.rng.integers(self.cols))
        self.paddle = self.cols // 2
        self.steps = 0
        return self.render()

    def render(self) -> np.ndarray:
        frame = np.full((self.rows, self.cols), BACKGROUND)
        frame[self.rows - 1, self.paddle] = PADDLE
        frame[self.ball_row, self.ball_col] = BALL
        return frame

    def step(self, action: int):
        return env_step(self, action)


class MiniPongEnv:
    """One-point Pong on a small grid against a scripted opponent.

    The agent paddle sits in the rightmost column, the opponent in the
    leftmost. Actions: 0 up, 1 stay, 2 down. The episode ends when the ball
    passes a paddle (+1 if it passes the opponent, -1 otherwise) or after
    ``max_steps`` with reward 0.
    """

    num_actions = 3

    def __init__(self, size: int = 16, paddle_len: int = 3, opponent_skill: float = 0.8,
                 max_steps: int = 200, seed: int | None = 0):
        self.size = size
        self.paddle_len = paddle_len
        self.opponent_skill = opponent_skill
        self.max_steps = max_steps
        self.rng = np.random.default_rng(seed)
        self.reset()

    def reset(self) -> np.ndarray:
        n = self.size
        self.ball = np.array([n // 2, n // 2])
        self.vel = np.array([self.rng.choice([-1, 1]), self.rng.choice([-1, 1])])
        self.agent = self.opponent = (n - self.paddle_len) // 2
        self.steps = 0
        return self.render()

    def _covers(self, top: int, row: int) -> bool:
        return top <= row < top + self.paddle_len

    def render(self) -> np.ndarray:
        n = self.size
        frame = np.full((n, n), BACKGROUND)
        frame[self.agent:self.agent + self.paddle_len, n - 1] = PADDLE
        frame[self.opponent:self.opponent + self.paddle_len, 0] = PADDLE
        frame[self.ball[0], self.ball[1]] = BALL
        return frame

    def step(self, action: int):
        return env_step(self, action)


def _check_action(env, action) -> int:
    a = int(action)
    if not 0 <= a < env.num_actions:
        raise ValueError(f"action {action} out of range [0, {env.num_actions})")
    return a


def _catch_step(env: CatchEnv, a: int):
    env.paddle = int(np.clip(env.paddle + a - 1, 0, env.cols - 1))
    env.steps += 1
    if env.ball_row == env.rows - 1:
        reward = 1.0 if env.paddle == env.ball_col else -1.0
        return env.render(), reward, True
    env.ball_row += 1
    return env.render(), 0.0, False


def _pong_step(env: MiniPongEnv, a: int):
    n, L = env.size, env.paddle_len
    env.agent = int(np.clip(env.agent + a - 1, 0, n - L))
    if env.rng.random() < env.opponent_skill:
        centre = env.opponent + L // 2
        env.opponent = int(np.clip(env.opponent + np.sign(env.ball[0] - centre), 0, n - L))
    env.steps += 1

    r, c = env.ball
    dr, dc = env.vel
    if not 0 <= r + dr < n:
        dr = -dr
    r += dr
    reward, done = 0.0, False
    if c + dc == n - 1:
        if env._covers(env.agent, r):
            dc = -dc
        else:
            reward, done = -1.0, True
    elif c + dc == 0:
        if env._covers(env.opponent, r):
            dc = -dc
        else:
            reward, done = 1.0, True
    c += dc
    env.ball = np.array([r, c])
    env.vel = np.array([dr, dc])
    if not done and env.steps >= env.max_steps:
        done = True
    return env.render(), reward, done


def env_step(env, action: int):
    """Advance one step; returns ``(frame, reward, done)``."""
    a = _check_action(env, action)
    if isinstance(env, CatchEnv):
        return _catch_step(env, a)
    return _pong_step(env, a)


def make_env(name: str, seed: int | None = 0):
    if name == "catch":
        return CatchEnv(seed=seed)
    if name == "minipong":
        return MiniPongEnv(seed=seed)
    raise ValueError(f"unknown env {name!r}")


def resize_nearest(frame: np.ndarray, height: int, width: int) -> np.ndarray:
    H, W = frame.shape
    rows = ((np.arange(height) + 0.5) * H / height).astype(np.int64)
    cols = ((np.arange(width) + 0.5) * W / width).astype(np.int64)
    return frame[np.minimum(rows, H - 1)][:, np.minimum(cols, W - 1)]


class Preprocessor:
    """Resize, optionally rescale to [0, 1], and stack the last ``m`` frames oldest-first."""

    def __init__(self, size=(28, 28), m: int = 4, rescale: bool = False):
        self.size = tuple(size)
        self.m = m
        self.rescale = rescale
        self.ring: deque = deque(maxlen=m)

    @property
    def shape(self) -> tuple:
        return (self.m,) + self.size

    def reset(self) -> None:
        self.ring.clear()

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        return preprocess(self, frame)


def preprocess(pre: Preprocessor, frame: np.ndarray) -> np.ndarray:
    img = resize_nearest(np.asarray(frame, dtype=np.float64), *pre.size)
    if pre.rescale:
        img = img / 255.0
    if not pre.ring:
        pre.ring.extend([img] * pre.m)
    else:
        pre.ring.append(img)
    return np.stack(pre.ring)


class EnvRunner:
    """Environment plus preprocessing with automatic resets.

    Emits dictionaries with the stacked observation, the reward of the
    transition that led to it, a ``done`` flag that is True on the first
    frame of every episode, and running episode statistics.
    """

    def __init__(self, env, pre: Preprocessor):
        self.env = env
        self.pre = pre
        self.episode_return = 0.0
        self.episode_step = 0

    @property
    def num_actions(self) -> int:
        return self.env.num_actions

    def initial(self) -> dict:
        self.pre.reset()
        obs = self.pre(self.env.reset())
        self.episode_return, self.episode_step = 0.0, 0
        return {"observation": obs, "reward": 0.0, "done": True,
                "episode_return": 0.0, "episode_step": 0}

    def step(self, action: int) -> dict:
        frame, reward, done = env_step(self.env, action)
        self.episode_return += reward
        self.episode_step += 1
        ret, length = self.episode_return, self.episode_step
        if done:
            self.pre.reset()
            frame = self.env.reset()
            self.episode_return, self.episode_step = 0.0, 0
        return {"observation": self.pre(frame), "reward": reward, "done": done,
                "episode_return": ret, "episode_step": length}
