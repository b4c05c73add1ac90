"""V-trace off-policy targets and the actor-critic losses built on them.

Arrays are time-major: ``[T]`` or ``[T, B]`` with logits ``[T, (B,) A]``.
``dones[t]`` marks transition ``t`` as terminal, so nothing after it is
bootstrapped into step ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax as np_log_softmax

from .tensor import DimensionError, Tensor, log_softmax, softmax


@dataclass
class Trajectory:
    behaviour_logits: np.ndarray
    target_logits: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    bootstrap_value: np.ndarray | float

    def __post_init__(self):
        self.behaviour_logits = np.asarray(self.behaviour_logits, dtype=np.float64)
        if isinstance(self.target_logits, Tensor):
            self.target_logits = self.target_logits.data
        self.target_logits = np.asarray(self.target_logits, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        if isinstance(self.values, Tensor):
            self.values = self.values.data
        self.values = np.asarray(self.values, dtype=np.float64)
        if isinstance(self.bootstrap_value, Tensor):
            self.bootstrap_value = self.bootstrap_value.data
        self.bootstrap_value = np.asarray(self.bootstrap_value, dtype=np.float64)
        T = len(self.rewards)
        for name in ("behaviour_logits", "target_logits", "actions", "dones", "values"):
            if len(getattr(self, name)) != T:
                raise DimensionError(
                    f"trajectory field {name} has length {len(getattr(self, name))}, expected {T}")
        A = self.behaviour_logits.shape[-1]
        if self.actions.size and (self.actions.min() < 0 or self.actions.max() >= A):
            raise ValueError(f"actions must lie in [0, {A})")

    def __len__(self):
        return len(self.rewards)


@dataclass
class VTraceOutput:
    vs: np.ndarray
    pg_advantages: np.ndarray


@dataclass
class Losses:
    loss_pg: Tensor
    loss_baseline: Tensor
    loss_entropy: Tensor
    total: Tensor


def action_log_probs(logits: np.ndarray, actions: np.ndarray) -> np.ndarray:
    lp = np_log_softmax(logits, axis=-1)
    return np.take_along_axis(lp, actions[..., None], axis=-1)[..., 0]


def truncated_is_weights(traj: Trajectory, rho_bar: float = 1.0, c_bar: float = 1.0):
    """``(rho, c)`` with ``rho = min(rho_bar, π/b)`` and ``c = min(c_bar, π/b)``."""
    if not (rho_bar >= c_bar > 0):
        raise ValueError(f"need rho_bar >= c_bar > 0, got rho_bar={rho_bar}, c_bar={c_bar}")
    log_ratio = (action_log_probs(traj.target_logits, traj.actions)
                 - action_log_probs(traj.behaviour_logits, traj.actions))
    ratio = np.exp(log_ratio)
    return np.minimum(rho_bar, ratio), np.minimum(c_bar, ratio)


def vtrace_targets(traj: Trajectory, gamma: float = 0.99, rho=None, c=None) -> VTraceOutput:
    """Backward recursion ``v_s = V_s + δ_s + γ_s c_s (v_{s+1} - V_{s+1})``."""
    if rho is None or c is None:
        rho, c = truncated_is_weights(traj)
    rho = np.asarray(rho, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    T = len(traj)
    if rho.shape != traj.rewards.shape or c.shape != traj.rewards.shape:
        raise DimensionError(f"weights {rho.shape}/{c.shape} do not match rewards "
                             f"{traj.rewards.shape}")
    discounts = gamma * (~traj.dones)
    values = traj.values
    next_values = np.concatenate([values[1:], traj.bootstrap_value[None]
                                  * np.ones_like(values[:1])], axis=0)
    deltas = rho * (traj.rewards + discounts * next_values - values)
    diff = np.zeros_like(values)          # v_s - V(x_s)
    acc = np.zeros_like(values[0]) if T else 0.0
    for s in range(T - 1, -1, -1):
        acc = deltas[s] + discounts[s] * c[s] * acc
        diff[s] = acc
    vs = values + diff
    next_vs = np.concatenate([vs[1:], traj.bootstrap_value[None]
                              * np.ones_like(values[:1])], axis=0)
    pg_adv = rho * (traj.rewards + discounts * next_vs - values)
    return VTraceOutput(vs, pg_adv)


def actor_critic_losses(out: VTraceOutput, traj: Trajectory, target_logits: Tensor,
                        values: Tensor, baseline_coef: float = 0.5,
                        entropy_coef: float = 0.01) -> Losses:
    """Policy-gradient, L2 baseline and entropy losses summed over all steps.

    Targets and advantages enter as plain arrays, so no gradient flows
    through them.
    """
    if target_logits.shape != traj.behaviour_logits.shape:
        raise DimensionError(f"target logits {target_logits.shape} != "
                             f"{traj.behaviour_logits.shape}")
    logp = log_softmax(target_logits, axis=-1)
    onehot = np.zeros(target_logits.shape)
    np.put_along_axis(onehot, traj.actions[..., None], 1.0, axis=-1)
    chosen = (logp * Tensor(onehot)).sum(axis=-1)
    loss_pg = -(chosen * Tensor(out.pg_advantages)).sum()
    err = Tensor(out.vs) - values
    loss_baseline = (err * err).sum() * 0.5
    probs = softmax(target_logits, axis=-1)
    loss_entropy = (probs * logp).sum()
    total = loss_pg + loss_baseline * baseline_coef + loss_entropy * entropy_coef
    return Losses(loss_pg, loss_baseline, loss_entropy, total)
