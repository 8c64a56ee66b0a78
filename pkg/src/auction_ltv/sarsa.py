"""On-policy Q estimation with gamma**tau discounted SARSA targets.

The trainer samples uniformly from a replay buffer, builds targets from a
frozen target copy of the parameters, and takes semi-gradient steps on the
batch squared TD error.  Two approximators share the interface:
:class:`TabularQ` and the small ReLU network :class:`MLPQ`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

CHECKPOINT_VERSION = 1


class EmptyBufferError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransitionTuple:
    """(s, a, r, s', a', tau); terminal tuples have s' = a' = None and tau = 0."""

    s: object
    a: int
    r: int
    s_next: object = None
    a_next: Optional[int] = None
    tau: int = 0
    user_id: Optional[int] = None
    t: Optional[int] = None

    def __post_init__(self):
        if self.r not in (0, 1):
            raise ValueError(f"reward must be 0 or 1, got {self.r}")
        terminal = self.s_next is None
        if terminal != (self.a_next is None):
            raise ValueError("s_next and a_next must be both set or both None")
        if terminal and self.tau != 0:
            raise ValueError("terminal tuples carry tau = 0")
        if not terminal and self.tau < 1:
            raise ValueError("non-terminal tuples need tau >= 1")

    @property
    def terminal(self) -> bool:
        return self.s_next is None


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray
    tau: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return len(self.a)


class ReplayBuffer:
    """Fixed-capacity ring buffer of transition tuples, oldest evicted first.

    ``state_dim=None`` stores integer state indices, otherwise float vectors.
    """

    def __init__(self, capacity: int = 1_000_000, state_dim: Optional[int] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        shape = (self.capacity,) if state_dim is None else (self.capacity, state_dim)
        sdtype = np.int64 if state_dim is None else np.float64
        self.s = np.zeros(shape, dtype=sdtype)
        self.s_next = np.zeros(shape, dtype=sdtype)
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.a_next = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity)
        self.tau = np.zeros(self.capacity, dtype=np.int64)
        self.terminal = np.zeros(self.capacity, dtype=bool)
        self.pos = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, d: TransitionTuple) -> None:
        i = self.pos
        self.s[i] = d.s
        self.a[i] = d.a
        self.r[i] = d.r
        self.terminal[i] = d.terminal
        if d.terminal:
            self.s_next[i] = 0
            self.a_next[i] = 0
        else:
            self.s_next[i] = d.s_next
            self.a_next[i] = d.a_next
        self.tau[i] = d.tau
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, tuples: Iterable[TransitionTuple]) -> None:
        for d in tuples:
            self.add(d)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=n)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.a_next[idx],
                     self.tau[idx], self.terminal[idx])

    def contents(self) -> Batch:
        idx = np.arange(self.size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.a_next[idx],
                     self.tau[idx], self.terminal[idx])


@dataclass
class TrainerConfig:
    """Hyper-parameters of the SARSA loop.

    Step sizes follow ``step_size / (1 + k / step_decay)``.
    """

    batch_size: int = 32
    step_size: float = 0.5
    step_decay: float = 1000.0
    gamma: float = 0.8
    target_sync_k: int = 100
    total_steps: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.target_sync_k < 1:
            raise ValueError("target_sync_k must be >= 1")
        if self.batch_size < 1 or self.step_size <= 0 or self.step_decay <= 0:
            raise ValueError("batch_size, step_size and step_decay must be positive")

    def step_size_at(self, k: int) -> float:
        return self.step_size / (1.0 + k / self.step_decay)


# --------------------------------------------------------------------------
# Q-function approximators


class TabularQ:
    """Lookup table over (state key, action) with a frozen target copy.

    ``key_fn`` maps raw state indices to table rows (identity by default), so
    a table can be shared by states that differ only in Q-irrelevant parts.
    """

    def __init__(self, n_keys: int, n_actions: int, key_fn: Optional[Callable] = None, init: float = 0.0):
        self.theta = np.full((n_keys, n_actions), float(init))
        self.theta_target = self.theta.copy()
        self.key_fn = key_fn

    def _keys(self, states):
        states = np.asarray(states, dtype=np.int64)
        return states if self.key_fn is None else np.asarray(self.key_fn(states), dtype=np.int64)

    @property
    def n_actions(self) -> int:
        return self.theta.shape[1]

    def values(self, states, actions, target: bool = False) -> np.ndarray:
        table = self.theta_target if target else self.theta
        return table[self._keys(states), np.asarray(actions, dtype=np.int64)]

    def value(self, s, a, target: bool = False) -> float:
        if s is None:
            return 0.0
        return float(self.values(np.array([s]), np.array([a]), target)[0])

    def table(self, states, target: bool = False) -> np.ndarray:
        """``(n, n_actions)`` Q rows for a batch of states."""
        table = self.theta_target if target else self.theta
        return table[self._keys(states)]

    def loss_and_grad(self, states, actions, targets):
        """Sum of squared TD errors and its gradient w.r.t. the table."""
        keys = self._keys(states)
        actions = np.asarray(actions, dtype=np.int64)
        err = targets - self.theta[keys, actions]
        grad = np.zeros_like(self.theta)
        np.add.at(grad, (keys, actions), -2.0 * err)
        return float(err @ err), [grad]

    def params(self):
        return [self.theta]

    def target_params(self):
        return [self.theta_target]

    def sync_target(self) -> None:
        self.theta_target = self.theta.copy()


class MLPQ:
    """Fully connected ReLU network scoring concatenated (state, item) features."""

    def __init__(self, state_dim: int, item_features: np.ndarray, hidden=(64, 64), seed: int = 0):
        self.item_features = np.asarray(item_features, dtype=float)
        self.state_dim = state_dim
        rng = np.random.default_rng(seed)
        sizes = [state_dim + self.item_features.shape[1], *hidden, 1]
        self.weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            self.weights.append(rng.uniform(-lim, lim, size=fan_out))
        self.target_weights = [w.copy() for w in self.weights]

    @property
    def n_actions(self) -> int:
        return self.item_features.shape[0]

    def _inputs(self, states, actions):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        return np.hstack([states, self.item_features[np.asarray(actions, dtype=np.int64)]])

    @staticmethod
    def _forward(params, X, keep=False):
        acts = [X]
        h = X
        n_layers = len(params) // 2
        for k in range(n_layers):
            W, b = params[2 * k], params[2 * k + 1]
            h = h @ W + b
            if k < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h[:, 0], acts) if keep else h[:, 0]

    def values(self, states, actions, target: bool = False) -> np.ndarray:
        params = self.target_weights if target else self.weights
        return self._forward(params, self._inputs(states, actions))

    def value(self, s, a, target: bool = False) -> float:
        if s is None:
            return 0.0
        return float(self.values(np.asarray(s)[None], np.array([a]), target)[0])

    def table(self, states, target: bool = False) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        n, A = states.shape[0], self.n_actions
        rep = np.repeat(states, A, axis=0)
        acts = np.tile(np.arange(A), n)
        return self.values(rep, acts, target).reshape(n, A)

    def loss(self, states, actions, targets, params=None) -> float:
        q = self._forward(self.weights if params is None else params, self._inputs(states, actions))
        err = targets - q
        return float(err @ err)

    def loss_and_grad(self, states, actions, targets):
        q, acts = self._forward(self.weights, self._inputs(states, actions), keep=True)
        err = targets - q
        delta = (-2.0 * err)[:, None]  # d loss / d output
        grads = [None] * len(self.weights)
        n_layers = len(self.weights) // 2
        for k in reversed(range(n_layers)):
            grads[2 * k] = acts[k].T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[2 * k].T) * (acts[k] > 0)
        return float(err @ err), grads

    def params(self):
        return self.weights

    def target_params(self):
        return self.target_weights

    def sync_target(self) -> None:
        self.target_weights = [w.copy() for w in self.weights]


# --------------------------------------------------------------------------
# Algorithm steps


def compute_target(d: TransitionTuple, q_target, gamma: float) -> float:
    if d.terminal:
        return float(d.r)
    return float(d.r + gamma ** d.tau * q_target.value(d.s_next, d.a_next, target=True))


def compute_targets(batch: Batch, q, gamma: float) -> np.ndarray:
    boot = q.values(batch.s_next, batch.a_next, target=True)
    return batch.r + np.where(batch.terminal, 0.0, gamma ** batch.tau * boot)


def sync_target(q) -> None:
    q.sync_target()


def apply_gradient(q, grads, lr: float, n: int) -> None:
    # Step on the batch-mean half squared error: lr * grad(sum) / (2n).
    scale = lr / (2.0 * n)
    for p, g in zip(q.params(), grads):
        p -= scale * g


def train_step(buffer: ReplayBuffer, q, cfg: TrainerConfig, t: int, rng: np.random.Generator) -> float:
    """One SARSA iteration: sample, build targets from theta-, semi-gradient step, maybe sync.

    Returns the batch loss (sum of squared TD errors) before the step.  When
    ``t % target_sync_k == 0`` the target copy is set to the parameters as
    they were at the start of this iteration.
    """
    batch = buffer.sample(cfg.batch_size, rng)
    y = compute_targets(batch, q, cfg.gamma)
    sync_now = t % cfg.target_sync_k == 0
    before = [p.copy() for p in q.params()] if sync_now else None
    loss, grads = q.loss_and_grad(batch.s, batch.a, y)
    apply_gradient(q, grads, cfg.step_size_at(t), len(batch))
    if sync_now:
        for dst, src in zip(q.target_params(), before):
            dst[...] = src
    return loss


@dataclass
class FitResult:
    q: object
    curve: list  # (step, loss, eval_error)


def fit(stream: Iterable[Iterable[TransitionTuple]], q, cfg: TrainerConfig,
        buffer: Optional[ReplayBuffer] = None, steps_per_update: int = 1,
        eval_fn: Optional[Callable] = None, eval_every: int = 0) -> FitResult:
    """Interleave buffer updates from ``stream`` with training steps.

    Each element of ``stream`` is the batch of new tuples for one iteration
    of the outer loop; after adding it, ``steps_per_update`` train steps run.
    Stops after ``cfg.total_steps`` steps or when the stream is exhausted.
    """
    rng = np.random.default_rng(cfg.seed)
    buffer = buffer if buffer is not None else ReplayBuffer()
    curve = []
    t = 0
    for new in stream:
        buffer.extend(new)
        if len(buffer) == 0:
            continue
        for _ in range(steps_per_update):
            if t >= cfg.total_steps:
                break
            loss = train_step(buffer, q, cfg, t, rng)
            if eval_every and (t % eval_every == 0 or t == cfg.total_steps - 1):
                curve.append((t, loss, float(eval_fn(q)) if eval_fn else float("nan")))
            t += 1
        if t >= cfg.total_steps:
            break
    return FitResult(q, curve)


def write_curve(curve, path) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if fh.tell() == 0:
            w.writerow(["step", "loss", "eval_error"])
        for step, loss, err in curve:
            w.writerow([step, repr(float(loss)), repr(float(err))])


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(q, path) -> None:
    kind = "tabular" if isinstance(q, TabularQ) else "mlp"
    arrays = {f"theta_{k}": p for k, p in enumerate(q.params())}
    arrays.update({f"target_{k}": p for k, p in enumerate(q.target_params())})
    if kind == "mlp":
        arrays["item_features"] = q.item_features
    np.savez(path, version=CHECKPOINT_VERSION, kind=kind, n_params=len(q.params()),
             state_dim=getattr(q, "state_dim", -1), **arrays)


def load_checkpoint(path, key_fn: Optional[Callable] = None):
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
        kind = str(z["kind"])
        n = int(z["n_params"])
        theta = [z[f"theta_{k}"] for k in range(n)]
        target = [z[f"target_{k}"] for k in range(n)]
        if kind == "tabular":
            q = TabularQ(*theta[0].shape, key_fn=key_fn)
            q.theta, q.theta_target = theta[0].copy(), target[0].copy()
            return q
        hidden = tuple(w.shape[1] for w in theta[0:-2:2])
        q = MLPQ(int(z["state_dim"]), z["item_features"], hidden=hidden)
        q.weights = [w.copy() for w in theta]
        q.target_weights = [w.copy() for w in target]
        return q


# --------------------------------------------------------------------------
# Data regimes for tabular instances


def exploring_tuples(mdp, policy: np.ndarray, n: int, rng: np.random.Generator,
                     mask: Optional[np.ndarray] = None) -> list[TransitionTuple]:
    """i.i.d. tuples with uniform (s, a) heads and on-policy continuation a' = policy(s').

    The head action is uniform over eligible actions so every pair is visited;
    the bootstrap action always follows ``policy``, which is what makes the
    fixed point Q of that policy.
    """
    S, A = mdp.n_states, mdp.n_actions
    s = rng.integers(0, S, size=n)
    if mask is None:
        a = rng.integers(0, A, size=n)
    else:
        a = np.array([rng.choice(np.flatnonzero(mask[x])) for x in s])
    r = (rng.random(n) < mdp.r_bar[s, a]).astype(int)
    cum = np.cumsum(mdp.P[s, a], axis=1)
    s2 = np.minimum((cum <= rng.random(n)[:, None]).sum(axis=1), S - 1)
    a2 = policy[s2]
    return [TransitionTuple(int(s[k]), int(a[k]), int(r[k]), int(s2[k]), int(a2[k]), 1) for k in range(n)]
