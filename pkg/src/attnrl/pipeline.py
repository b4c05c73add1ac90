"""Actor-learner training loop with shared rollout buffers.

Buffers are addressed by index and change hands through two FIFO queues:
actors take indices from ``free``, fill the buffer and put the index on
``full``; the learner takes ``batch_size`` indices from ``full``, trains on
them and hands them back to ``free``. Parameters travel the other way as
immutable versioned snapshots.

Every buffer has ``T + 1`` rows. Row 0 repeats the last row of the actor's
previous buffer so that the learner can bootstrap and pair each agent output
with the action that followed it. Row ``t`` holds the environment output
(observation, reward, done) together with the agent output computed on the
previous row's observation (action, policy logits, baseline).
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import backward, concat, no_grad, reset_tape
from .optim import clip_grad_norm
from .vtrace import Trajectory, actor_critic_losses, truncated_is_weights, vtrace_targets

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# buffers, queues and ownership
# ---------------------------------------------------------------------------

class OwnershipLedger:
    """Tracks who holds each buffer index and checks every transfer."""

    def __init__(self, num_buffers: int):
        self.owner = ["free"] * num_buffers
        self.transfers = 0
        self.log: list[tuple[int, str, str]] = []
        self.keep_log = True
        self._lock = threading.Lock()

    def transfer(self, idx: int, src: str, dst: str) -> None:
        with self._lock:
            if self.owner[idx] != src:
                raise RuntimeError(
                    f"buffer {idx} is owned by {self.owner[idx]!r}, not {src!r}")
            self.owner[idx] = dst
            self.transfers += 1
            if self.keep_log:
                self.log.append((idx, src, dst))

    def audit(self, free: "IndexQueue", full: "IndexQueue") -> bool:
        """True when every index sits in exactly one place."""
        with self._lock:
            in_free, in_full = free.snapshot(), full.snapshot()
            if len(set(in_free)) != len(in_free) or len(set(in_full)) != len(in_full):
                return False
            if set(in_free) & set(in_full):
                return False
            for idx, who in enumerate(self.owner):
                if (who == "free") != (idx in in_free) or (who == "full") != (idx in in_full):
                    return False
            return True


class IndexQueue:
    """FIFO of buffer indices."""

    def __init__(self, name: str):
        self.name = name
        self._q: queue.Queue = queue.Queue()

    def put(self, idx: int) -> None:
        self._q.put(int(idx))

    def get(self, timeout: float | None = None) -> int:
        return self._q.get(timeout=timeout)

    def qsize(self) -> int:
        return self._q.qsize()

    def snapshot(self) -> list[int]:
        with self._q.mutex:
            return list(self._q.queue)


@dataclass
class BufferPool:
    fields: dict
    initial_states: list
    versions: np.ndarray
    free: IndexQueue
    full: IndexQueue
    ledger: OwnershipLedger

    @property
    def num_buffers(self) -> int:
        return len(self.initial_states)

    @property
    def unroll_length(self) -> int:
        return self.fields["reward"].shape[1] - 1

    def take_free(self, owner: str, timeout=None) -> int:
        idx = self.free.get(timeout)
        self.ledger.transfer(idx, "free", owner)
        return idx

    def give_full(self, idx: int, owner: str) -> None:
        self.ledger.transfer(idx, owner, "full")
        self.full.put(idx)

    def take_full(self, owner: str, timeout=None) -> int:
        idx = self.full.get(timeout)
        self.ledger.transfer(idx, "full", owner)
        return idx

    def give_free(self, idx: int, owner: str) -> None:
        self.ledger.transfer(idx, owner, "free")
        self.free.put(idx)


def create_buffers(num_buffers: int, T: int, obs_shape, A: int, batch_size: int = 1,
                   num_actors: int = 1, extras: dict | None = None) -> BufferPool:
    """Allocate ``num_buffers`` rollouts of ``T + 1`` rows; all start free."""
    if num_buffers < batch_size + num_actors:
        raise ConfigError(
            f"num_buffers={num_buffers} must be at least batch_size + num_actors "
            f"= {batch_size + num_actors}")
    rows = (num_buffers, T + 1)
    fields = {
        "observation": np.zeros(rows + tuple(obs_shape)),
        "reward": np.zeros(rows),
        "done": np.zeros(rows, dtype=bool),
        "policy_logits": np.zeros(rows + (A,)),
        "baseline": np.zeros(rows),
        "actions": np.zeros(rows, dtype=np.int64),
        "episode_return": np.zeros(rows),
        "episode_step": np.zeros(rows, dtype=np.int64),
    }
    for name, shape in (extras or {}).items():
        fields[name] = np.zeros(rows + tuple(shape))
    free, full = IndexQueue("free"), IndexQueue("full")
    for i in range(num_buffers):
        free.put(i)
    return BufferPool(fields, [None] * num_buffers, np.zeros(num_buffers, dtype=np.int64),
                      free, full, OwnershipLedger(num_buffers))


# ---------------------------------------------------------------------------
# parameter snapshots
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSnapshot:
    version: int
    params: dict


class SnapshotSlot:
    """Holds the latest published snapshot; publishing swaps a whole object."""

    def __init__(self, params: dict):
        self._snap = ParameterSnapshot(0, {k: v.copy() for k, v in params.items()})
        self._lock = threading.Lock()

    def publish(self, params: dict) -> ParameterSnapshot:
        frozen = {k: v.copy() for k, v in params.items()}
        for v in frozen.values():
            v.setflags(write=False)
        with self._lock:
            self._snap = ParameterSnapshot(self._snap.version + 1, frozen)
            return self._snap

    def latest(self) -> ParameterSnapshot:
        with self._lock:
            return self._snap


# ---------------------------------------------------------------------------
# state helpers
# ---------------------------------------------------------------------------

def stack_states(states: list) -> dict:
    return {k: np.concatenate([s[k] for s in states], axis=0) for k in states[0]}


def split_state(state: dict, i: int) -> dict:
    return {k: v[i:i + 1].copy() for k, v in state.items()}


def copy_state(state: dict) -> dict:
    return {k: np.array(v, copy=True) for k, v in state.items()}


def sample_actions(logits: np.ndarray, rngs) -> np.ndarray:
    """Inverse-CDF sampling from softmax(logits), one generator per row."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p / p.sum(axis=-1, keepdims=True), axis=-1)
    u = np.array([rng.random() for rng in rngs])
    a = (u[:, None] > cdf).sum(axis=-1)
    return np.minimum(a, logits.shape[-1] - 1)


# ---------------------------------------------------------------------------
# actors
# ---------------------------------------------------------------------------

class Actor:
    """One environment plus the agent state that persists across buffers."""

    def __init__(self, actor_id: int, runner, core, seed: int):
        self.actor_id = actor_id
        self.name = f"actor:{actor_id}"
        self.runner = runner
        self.rng = np.random.default_rng(seed)
        self.state = core.initial_state(1)
        self.env_output = runner.initial()
        A = runner.num_actions
        self.agent_output = {"actions": 0, "policy_logits": np.zeros(A), "baseline": 0.0}
        for name, shape in getattr(core, "extra_fields", {}).items():
            self.agent_output[name] = np.zeros(shape)
        self.alive = True
        self.error: str | None = None


def _write_row(pool: BufferPool, idx: int, t: int, env_out: dict, agent_out: dict) -> None:
    f = pool.fields
    for k in ("observation", "reward", "done", "episode_return", "episode_step"):
        f[k][idx, t] = env_out[k]
    for k, v in agent_out.items():
        f[k][idx, t] = v


def _agent_forward(core, inputs, state):
    act = getattr(core, "act", None)
    return act(inputs, state) if act is not None else core(inputs, state)


def unroll_actors(actors: list, core, pool: BufferPool, indices: list, version: int,
                  timing: list | None = None) -> None:
    """Fill one buffer per actor, stepping all actors in lockstep with batched inference."""
    T = pool.unroll_length
    for a, idx in zip(actors, indices):
        _write_row(pool, idx, 0, a.env_output, a.agent_output)
        pool.initial_states[idx] = copy_state(a.state)
        pool.versions[idx] = version
    extras = [k for k in actors[0].agent_output if k not in ("actions", "policy_logits",
                                                             "baseline")]
    state = stack_states([a.state for a in actors])
    with no_grad():
        for t in range(1, T + 1):
            inputs = {
                "observation": np.stack([a.env_output["observation"] for a in actors])[None],
                "reward": np.array([[a.env_output["reward"] for a in actors]]),
                "done": np.array([[a.env_output["done"] for a in actors]]),
                "policy_logits": np.stack([a.agent_output["policy_logits"] for a in actors])[None],
            }
            for k in extras:
                inputs[k] = np.stack([a.agent_output[k] for a in actors])[None]
            start = time.perf_counter()
            out, state = _agent_forward(core, inputs, state)
            if timing is not None:
                timing.append(time.perf_counter() - start)
            logits = out["policy_logits"].data[0]
            actions = sample_actions(logits, [a.rng for a in actors])
            for i, (a, idx) in enumerate(zip(actors, indices)):
                a.agent_output = {"actions": int(actions[i]), "policy_logits": logits[i].copy(),
                                  "baseline": float(out["baseline"].data[0, i])}
                if "query_seed" in extras:
                    a.agent_output["query_seed"] = out["core_output"].data[0, i].copy()
                a.env_output = a.runner.step(actions[i])
                _write_row(pool, idx, t, a.env_output, a.agent_output)
    for i, a in enumerate(actors):
        a.state = split_state(state, i)


# ---------------------------------------------------------------------------
# learner
# ---------------------------------------------------------------------------

@dataclass
class LearnerStats:
    loss_pg: float
    loss_baseline: float
    loss_entropy: float
    total_loss: float
    grad_norm: float
    episode_returns: list
    episode_lengths: list
    buffer_versions: list
    steps: int


def get_batch(pool: BufferPool, indices: list) -> tuple[dict, dict]:
    """Time-major ``[T+1, B, ...]`` arrays and the stacked initial agent states."""
    batch = {k: np.swapaxes(v[indices], 0, 1).copy() for k, v in pool.fields.items()}
    state = stack_states([pool.initial_states[i] for i in indices])
    return batch, state


def forward_chunks(core, batch: dict, state: dict, chunk_size: int):
    """Run the core over ``T+1`` rows in chunks, carrying detached state."""
    rows = batch["reward"].shape[0]
    if rows % chunk_size:
        raise ConfigError(f"rollout rows {rows} not divisible by chunk_size {chunk_size}")
    logits, baselines = [], []
    for s in range(0, rows, chunk_size):
        chunk = {k: v[s:s + chunk_size] for k, v in batch.items()}
        out, state = core(chunk, state)
        logits.append(out["policy_logits"])
        baselines.append(out["baseline"])
    return concat(logits, axis=0), concat(baselines, axis=0), state


def compute_losses(core, batch: dict, state: dict, cfg):
    logits, baseline, _ = forward_chunks(core, batch, state, cfg.chunk_size)
    target_logits = logits[:-1]
    values = baseline[:-1]
    traj = Trajectory(
        behaviour_logits=batch["policy_logits"][1:],
        target_logits=target_logits.data,
        actions=batch["actions"][1:],
        rewards=np.clip(batch["reward"][1:], -1, 1),
        dones=batch["done"][1:],
        values=values.data,
        bootstrap_value=baseline.data[-1],
    )
    rho, c = truncated_is_weights(traj, cfg.rho_bar, cfg.c_bar)
    vt = vtrace_targets(traj, cfg.gamma, rho, c)
    return actor_critic_losses(vt, traj, target_logits, values, cfg.baseline_coef,
                               cfg.entropy_coef)


def learner_step(pool: BufferPool, core, optimizer, cfg, snapshots: SnapshotSlot | None = None,
                 indices: list | None = None, timeout: float | None = None) -> LearnerStats:
    """Dequeue a batch, update parameters once, recycle buffers, publish a snapshot."""
    if indices is None:
        indices = [pool.take_full("learner", timeout) for _ in range(cfg.batch_size)]
    batch, state = get_batch(pool, indices)
    versions = [int(pool.versions[i]) for i in indices]
    for idx in indices:
        pool.give_free(idx, "learner")

    reset_tape()
    optimizer.zero_grad()
    losses = compute_losses(core, batch, state, cfg)
    backward(losses.total)
    norm = clip_grad_norm(optimizer.params, cfg.grad_clip)
    optimizer.step()
    if snapshots is not None:
        snapshots.publish(core.state_dict())

    done = batch["done"][1:]
    T, B = done.shape
    return LearnerStats(
        losses.loss_pg.item(), losses.loss_baseline.item(), losses.loss_entropy.item(),
        losses.total.item(), norm,
        batch["episode_return"][1:][done].tolist(), batch["episode_step"][1:][done].tolist(),
        versions, T * B)


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    core: object
    rows: list
    learner_steps: int
    steps: int
    elapsed: float
    consumed: list = field(default_factory=list)     # (buffer_version, learner_version)
    actor_errors: list = field(default_factory=list)
    pool: BufferPool | None = None

    @property
    def sps(self) -> float:
        return self.steps / self.elapsed if self.elapsed > 0 else 0.0


def _make_actors(cfg, core, make_runner, n):
    return [Actor(i, make_runner(i), core, cfg.seed * 1000 + i + 1) for i in range(n)]


def run_training(cfg, make_core, make_runner, on_row=None) -> TrainResult:
    """Train until ``cfg.total_steps`` environment steps have been consumed.

    ``make_core(seed)`` builds a fresh core; ``make_runner(actor_id)`` builds
    an :class:`~attnrl.envs.EnvRunner`. ``on_row`` receives each metrics row;
    a true return value ends training after that update.
    """
    from .metrics import MetricsRow, MetricsWindow
    from .optim import make_optimizer

    learner_core = make_core(cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, learner_core.parameters(), cfg.learning_rate)
    snapshots = SnapshotSlot(learner_core.state_dict())
    obs_shape = learner_core.obs_shape
    pool = create_buffers(cfg.num_buffers, cfg.unroll_length, obs_shape,
                          learner_core.num_actions, cfg.batch_size, cfg.num_actors,
                          getattr(learner_core, "extra_fields", {}))
    window = MetricsWindow(cfg.metrics_window)
    n_params = learner_core.parameter_count()
    rows: list = []
    consumed: list = []
    timing: list = []
    counters = {"steps": 0, "learner_steps": 0, "episodes": 0, "stop": False}
    start = time.perf_counter()

    def record(stats: LearnerStats):
        counters["steps"] += stats.steps
        counters["learner_steps"] += 1
        version_now = snapshots.latest().version
        consumed.extend((v, version_now - 1) for v in stats.buffer_versions)
        for ret, length in zip(stats.episode_returns, stats.episode_lengths):
            window.update(ret, length)
            counters["episodes"] += 1
        elapsed = time.perf_counter() - start
        row = MetricsRow(
            step=counters["steps"], episodes=counters["episodes"],
            mean_return_100=window.mean_return, mean_length_100=window.mean_length,
            sps=counters["steps"] / elapsed if elapsed > 0 else 0.0,
            loss_pg=stats.loss_pg, loss_baseline=stats.loss_baseline,
            loss_entropy=stats.loss_entropy, parameter_count=n_params,
            inference_ms=1000.0 * float(np.mean(timing[-1000:])) if timing else 0.0)
        rows.append(row)
        if on_row is not None and on_row(row):
            counters["stop"] = True

    errors: list = []
    if cfg.mode == "sequential":
        actor_core = make_core(cfg.seed)
        actors = _make_actors(cfg, actor_core, make_runner, cfg.num_actors)
        pending: list = []
        while counters["steps"] < cfg.total_steps and not counters["stop"]:
            snap = snapshots.latest()
            actor_core.load_state_dict(snap.params)
            live = [a for a in actors if a.alive]
            if not live:
                raise RuntimeError("all actors failed: " + "; ".join(errors))
            idxs = [pool.take_free(a.name) for a in live]
            try:
                unroll_actors(live, actor_core, pool, idxs, snap.version, timing)
            except Exception as exc:  # an env fault takes its actors out
                for a, idx in zip(live, idxs):
                    a.alive, a.error = False, repr(exc)
                    pool.give_free(idx, a.name)
                errors.append(repr(exc))
                log.error("actor batch failed: %r", exc)
                continue
            for a, idx in zip(live, idxs):
                pool.give_full(idx, a.name)
                pending.append(idx)
            while (len(pending) >= cfg.batch_size and counters["steps"] < cfg.total_steps
                   and not counters["stop"]):
                batch_idx = [pool.take_full("learner") for _ in range(cfg.batch_size)]
                pending = pending[cfg.batch_size:]
                record(learner_step(pool, learner_core, optimizer, cfg, snapshots, batch_idx))
    elif cfg.mode == "threaded":
        stop = threading.Event()
        threads = []

        def actor_loop(actor_id: int):
            core = make_core(cfg.seed)
            actor = Actor(actor_id, make_runner(actor_id), core, cfg.seed * 1000 + actor_id + 1)
            version = -1
            while not stop.is_set():
                try:
                    idx = pool.take_free(actor.name, timeout=0.05)
                except queue.Empty:
                    continue
                try:
                    snap = snapshots.latest()
                    if snap.version != version:
                        core.load_state_dict(snap.params)
                        version = snap.version
                    unroll_actors([actor], core, pool, [idx], version, timing)
                except Exception as exc:
                    actor.alive, actor.error = False, repr(exc)
                    errors.append(f"{actor.name}: {exc!r}")
                    log.error("%s failed: %r", actor.name, exc)
                    pool.give_free(idx, actor.name)
                    return
                pool.give_full(idx, actor.name)

        for i in range(cfg.num_actors):
            th = threading.Thread(target=actor_loop, args=(i,), daemon=True, name=f"actor-{i}")
            th.start()
            threads.append(th)
        try:
            while counters["steps"] < cfg.total_steps and not counters["stop"]:
                batch_idx = []
                while len(batch_idx) < cfg.batch_size:
                    try:
                        batch_idx.append(pool.take_full("learner", timeout=0.1))
                    except queue.Empty:
                        if not any(th.is_alive() for th in threads):
                            raise RuntimeError("all actors failed: " + "; ".join(errors))
                record(learner_step(pool, learner_core, optimizer, cfg, snapshots, batch_idx))
        finally:
            stop.set()
            for th in threads:
                th.join(timeout=5.0)
    else:
        raise ConfigError(f"unknown mode {cfg.mode!r}")

    elapsed = time.perf_counter() - start
    return TrainResult(learner_core, rows, counters["learner_steps"], counters["steps"],
                       elapsed, consumed, errors, pool)
