"""Simulated marketplace of users whose states react to recommendations.

Two backends share one :class:`Environment` driver:

* tabular -- states are integer indices, dynamics are explicit kernels that can
  be exported exactly as a :class:`TabularMDP`;
* vector  -- states are ``(z, x, i)`` feature vectors with a parametric drift
  model (interest moves toward an item's direction on conversion, decays
  otherwise; side information follows an AR(1) process).

Randomness: every draw for user ``u`` at period ``t`` is element ``u`` of a
stream seeded by ``(seed, t, purpose)``.  A user's draws therefore never depend
on population size or on other users' actions.
"""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .auction import CallableScoring, Eligibility, TableScoring

_INTERACT, _CONVERT, _MOVE, _ARRIVE, _SIDE = range(5)


class InvalidConfigError(ValueError):
    pass


class MissingUserError(KeyError):
    pass


class UnsupportedModeError(RuntimeError):
    pass


@dataclass(frozen=True)
class UserState:
    """State of one user: interest z, context x, side information i.

    In tabular mode ``z`` holds the state index and ``x``/``i`` are ``None``.
    """

    user_id: int
    z: Union[int, np.ndarray]
    x: Optional[np.ndarray] = None
    i: Optional[np.ndarray] = None

    @property
    def key(self):
        if self.x is None:
            return int(self.z)
        return np.concatenate([self.z, self.x, self.i])


@dataclass(frozen=True)
class Item:
    item_id: int
    bidder_id: int
    end_behavior: str = "purchase"
    latent_params: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class Outcome:
    y: str
    converted: int


NO_OUTCOME = "none"


@dataclass
class TabularMDP:
    """Enumerable (P, r_bar, gamma); ``P`` is ``(S, A, S)``, ``r_bar`` is ``(S, A)``."""

    P: np.ndarray
    r_bar: np.ndarray
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.r_bar = np.asarray(self.r_bar, dtype=float)
        S, A, S2 = self.P.shape
        if S != S2 or self.r_bar.shape != (S, A):
            raise ValueError(f"inconsistent shapes P{self.P.shape} r_bar{self.r_bar.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("P rows must be nonnegative and sum to 1")
        if np.any((self.r_bar < 0) | (self.r_bar > 1)):
            raise ValueError("r_bar must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def to_csv(self, transitions_path, rewards_path) -> None:
        with open(transitions_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "a", "s_next", "prob"])
            for s, a, s2 in zip(*np.nonzero(self.P)):
                w.writerow([s, a, s2, repr(float(self.P[s, a, s2]))])
        with open(rewards_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "a", "r_bar"])
            for s in range(self.n_states):
                for a in range(self.n_actions):
                    w.writerow([s, a, repr(float(self.r_bar[s, a]))])

    @classmethod
    def from_csv(cls, transitions_path, rewards_path, gamma: float) -> "TabularMDP":
        with open(rewards_path, newline="") as fh:
            rows = [(int(r["s"]), int(r["a"]), float(r["r_bar"])) for r in csv.DictReader(fh)]
        S = max(r[0] for r in rows) + 1
        A = max(r[1] for r in rows) + 1
        r_bar = np.zeros((S, A))
        for s, a, v in rows:
            r_bar[s, a] = v
        P = np.zeros((S, A, S))
        with open(transitions_path, newline="") as fh:
            for r in csv.DictReader(fh):
                P[int(r["s"]), int(r["a"]), int(r["s_next"])] = float(r["prob"])
        return cls(P, r_bar, gamma)


@dataclass(frozen=True)
class PopulationConfig:
    """Who is around and who shows up.

    ``arrival_prob`` is the per-period chance that a not-yet-arrived user
    arrives (1.0: everyone is present from period 0).  ``interaction_prob`` is
    a scalar, a per-state sequence (tabular mode) or ``None`` for the vector
    model's interest-dependent propensity; churn emerges from low values.
    """

    n_users: int
    arrival_prob: float = 1.0
    interaction_prob: Union[float, Sequence[float], None] = 1.0
    seed: int = 0

    def validate(self, mode: str = "tabular", n_states: Optional[int] = None) -> None:
        if int(self.n_users) <= 0:
            raise InvalidConfigError("n_users must be positive")
        if not 0.0 <= self.arrival_prob <= 1.0:
            raise InvalidConfigError(f"arrival_prob out of range: {self.arrival_prob}")
        if self.interaction_prob is None:
            if mode != "vector":
                raise InvalidConfigError("state-dependent model interaction is only defined in vector mode")
            return
        p = np.atleast_1d(np.asarray(self.interaction_prob, dtype=float))
        if np.any(np.isnan(p)) or np.any((p < 0) | (p > 1)):
            raise InvalidConfigError("interaction_prob entries must lie in [0, 1]")
        if p.size > 1 and (mode != "tabular" or p.size != n_states):
            raise InvalidConfigError(f"per-state interaction_prob needs tabular mode and {n_states} entries")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# --------------------------------------------------------------------------
# Backends


@dataclass
class TabularModel:
    """Explicit per-state dynamics.

    ``conv[s, a]`` is the conversion probability (null column is 0);
    ``P_conv``/``P_none`` are the successor kernels after a conversion / no
    conversion; ``init`` is the distribution of a newly arrived user's state.
    """

    conv: np.ndarray
    P_conv: np.ndarray
    P_none: np.ndarray
    init: np.ndarray
    items: list
    gamma: float = 0.8
    context_size: int = 1  # states are laid out as z * context_size + context

    def __post_init__(self):
        self.conv = np.asarray(self.conv, dtype=float)
        S, A = self.conv.shape
        for name in ("P_conv", "P_none"):
            P = np.asarray(getattr(self, name), dtype=float)
            if P.shape != (S, A, S):
                raise InvalidConfigError(f"{name} must be {(S, A, S)}, got {P.shape}")
            if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1)) > 1e-12:
                raise InvalidConfigError(f"{name} rows must be probability vectors")
            setattr(self, name, P)
        if np.any(self.conv[:, -1] != 0):
            raise InvalidConfigError("the null recommendation cannot convert")
        self.init = np.asarray(self.init, dtype=float)
        self._cum = {True: np.cumsum(self.P_conv, axis=2), False: np.cumsum(self.P_none, axis=2)}

    @property
    def n_states(self) -> int:
        return self.conv.shape[0]

    @property
    def n_actions(self) -> int:
        return self.conv.shape[1]

    def kernel(self) -> np.ndarray:
        c = self.conv[..., None]
        P = c * self.P_conv + (1 - c) * self.P_none
        return P / P.sum(axis=2, keepdims=True)

    def next_states(self, s, a, converted, u) -> np.ndarray:
        cum = np.where(converted[:, None], self._cum[True][s, a], self._cum[False][s, a])
        return np.minimum((cum <= u[:, None]).sum(axis=1), self.n_states - 1)

    # -- stock instances ------------------------------------------------

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_items: int, gamma: float = 0.8,
               concentration: float = 1.0) -> "TabularModel":
        A = n_items + 1
        conv = np.hstack([rng.uniform(0.02, 0.6, size=(n_states, n_items)), np.zeros((n_states, 1))])
        P_conv = rng.dirichlet(np.full(n_states, concentration), size=(n_states, A))
        P_none = rng.dirichlet(np.full(n_states, concentration), size=(n_states, A))
        items = [Item(a, bidder_id=a) for a in range(n_items)]
        return cls(conv, P_conv, P_none, np.full(n_states, 1.0 / n_states), items, gamma)

    @classmethod
    def myopic_trap(cls, n_levels: int = 5, n_contexts: int = 8, n_bait: int = 2, n_nurture: int = 2,
                    bait_conv: float = 0.55, nurture_conv: float = 0.35, floor: float = 0.25,
                    bait_drop: float = 0.6, nurture_lift: float = 0.5, gamma: float = 0.8) -> "TabularModel":
        """Engagement levels x exogenous contexts.

        "Bait" items convert more now but push the user's engagement level
        down; "nurture" items convert less now but raise it.  Conversion
        probability scales with engagement, so the greedy bid-eCVR policy
        erodes long-run conversions.  Contexts are redrawn uniformly at every
        interaction and only matter through bids.
        """
        n_items = n_bait + n_nurture
        A = n_items + 1
        S = n_levels * n_contexts
        level = np.repeat(np.arange(n_levels), n_contexts)
        scale = floor + (1 - floor) * level / max(n_levels - 1, 1)
        base = np.array([bait_conv] * n_bait + [nurture_conv] * n_nurture)
        conv = np.zeros((S, A))
        conv[:, :n_items] = scale[:, None] * base[None, :]

        ctx = np.full(n_contexts, 1.0 / n_contexts)
        P = np.zeros((S, A, S))
        for s in range(S):
            z = level[s]
            for a in range(A):
                moves = [(z, 1.0)]
                if a < n_bait:
                    moves = [(max(z - 1, 0), bait_drop), (z, 1 - bait_drop)]
                elif a < n_items:
                    moves = [(min(z + 1, n_levels - 1), nurture_lift), (z, 1 - nurture_lift)]
                for z2, pz in moves:
                    P[s, a, z2 * n_contexts:(z2 + 1) * n_contexts] += pz * ctx
        items = [Item(a, bidder_id=a, end_behavior="purchase",
                      latent_params={"kind": "bait" if a < n_bait else "nurture"}) for a in range(n_items)]
        init = np.zeros(S)
        mid = n_levels // 2
        init[mid * n_contexts:(mid + 1) * n_contexts] = ctx
        return cls(conv, P, P.copy(), init, items, gamma, context_size=n_contexts)

    @classmethod
    def flat(cls, n_levels: int = 5, n_contexts: int = 8, n_items: int = 4, conv: float = 0.4,
             gamma: float = 0.8) -> "TabularModel":
        """Same layout as :meth:`myopic_trap` but every item converts at one fixed rate."""
        m = cls.myopic_trap(n_levels, n_contexts, n_bait=n_items // 2, n_nurture=n_items - n_items // 2,
                            gamma=gamma)
        c = np.zeros_like(m.conv)
        c[:, :n_items] = conv
        return cls(c, m.P_conv, m.P_none, m.init, m.items, gamma, context_size=n_contexts)


@dataclass
class VectorModel:
    """Parametric drift model over ``(z, x, i)`` feature vectors."""

    item_dirs: np.ndarray       # (n_items, z_dim) unit interest directions
    item_bias: np.ndarray       # (n_items,) conversion logit offsets
    item_x: np.ndarray          # (n_items, x_dim)
    item_i: np.ndarray          # (n_items, i_dim)
    interact_w: np.ndarray      # (z_dim,)
    interact_bias: float = 0.0
    drift: float = 0.3
    decay: float = 0.1
    side_rho: float = 0.9
    side_noise: float = 0.3
    items: list = field(default_factory=list)

    @property
    def n_items(self) -> int:
        return len(self.item_bias)

    @property
    def n_actions(self) -> int:
        return self.n_items + 1

    @property
    def z_dim(self) -> int:
        return self.item_dirs.shape[1]

    @property
    def x_dim(self) -> int:
        return self.item_x.shape[1]

    @property
    def i_dim(self) -> int:
        return self.item_i.shape[1]

    @property
    def state_dim(self) -> int:
        return self.z_dim + self.x_dim + self.i_dim

    @classmethod
    def random(cls, rng: np.random.Generator, n_items: int = 6, z_dim: int = 4, x_dim: int = 3,
               i_dim: int = 2) -> "VectorModel":
        dirs = rng.normal(size=(n_items, z_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        interact_w = rng.normal(size=z_dim)
        interact_w /= np.linalg.norm(interact_w)
        # Items aligned against the engagement direction get the larger
        # immediate conversion offset: high eCVR now, fewer interactions later.
        bias = -1.0 - 0.8 * dirs @ interact_w + rng.normal(scale=0.2, size=n_items)
        items = [Item(a, bidder_id=a) for a in range(n_items)]
        return cls(dirs, bias, rng.normal(scale=0.3, size=(n_items, x_dim)),
                   rng.normal(scale=0.3, size=(n_items, i_dim)), interact_w, 0.0, items=items)

    def split(self, states: np.ndarray):
        z = states[:, : self.z_dim]
        x = states[:, self.z_dim: self.z_dim + self.x_dim]
        i = states[:, self.z_dim + self.x_dim:]
        return z, x, i

    def conversion_probs(self, states: np.ndarray) -> np.ndarray:
        """``(n, n_items)`` conversion probabilities (null column excluded)."""
        z, x, i = self.split(np.atleast_2d(states))
        return _sigmoid(self.item_bias + z @ self.item_dirs.T + x @ self.item_x.T + i @ self.item_i.T)

    def interaction_probs(self, states: np.ndarray) -> np.ndarray:
        z, _, _ = self.split(np.atleast_2d(states))
        return _sigmoid(self.interact_bias + z @ self.interact_w)

    def item_features(self) -> np.ndarray:
        """Per-action features for Q-networks; the null row is a pure indicator."""
        feats = np.zeros((self.n_actions, self.z_dim + 2))
        feats[: self.n_items, : self.z_dim] = self.item_dirs
        feats[: self.n_items, self.z_dim] = self.item_bias
        feats[-1, -1] = 1.0
        return feats


# --------------------------------------------------------------------------
# Driver


class Environment:
    """A user population evolving under externally chosen recommendations.

    Periods must be simulated in order: ask :meth:`active_users` for period
    ``t``, then call :meth:`step` with one action per active user.
    """

    def __init__(self, config: PopulationConfig, model: Union[TabularModel, VectorModel],
                 interaction_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 record_log: bool = False):
        self.mode = "tabular" if isinstance(model, TabularModel) else "vector"
        config.validate(self.mode, model.n_states if self.mode == "tabular" else None)
        self.config = config
        self.model = model
        self.seed = int(config.seed)
        self.user_ids = np.arange(config.n_users)
        self._pool = int(config.n_users)
        self._interaction_fn = interaction_fn
        self.period = 0
        self._active_cache: Optional[np.ndarray] = None
        self._history: list[np.ndarray] = []
        self.log: Optional[list] = [] if record_log else None

        n = self._pool
        arrive = self._rng(0, _ARRIVE)
        p = float(config.arrival_prob)
        self.arrival = np.zeros(n, dtype=np.int64) if p >= 1.0 else (
            np.full(n, np.iinfo(np.int64).max) if p <= 0.0 else arrive.geometric(p, size=n) - 1)
        if self.mode == "tabular":
            u = arrive.random(n)
            self.states = np.minimum(np.searchsorted(np.cumsum(model.init), u, side="right"),
                                     model.n_states - 1).astype(np.int64)
        else:
            m = model
            self.states = np.hstack([
                0.1 * arrive.standard_normal((n, m.z_dim)),
                arrive.standard_normal((n, m.x_dim)),
                arrive.standard_normal((n, m.i_dim)),
            ])

    # -- randomness ----------------------------------------------------

    def _rng(self, t: int, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, int(t), purpose])

    def _uniforms(self, t: int, purpose: int) -> np.ndarray:
        return self._rng(t + 1, purpose).random(self._pool)

    # -- population ----------------------------------------------------

    @property
    def n_actions(self) -> int:
        return self.model.n_actions

    def interaction_probs(self, user_ids) -> np.ndarray:
        states = self.states[user_ids]
        if self._interaction_fn is not None:
            return np.broadcast_to(self._interaction_fn(states), (len(user_ids),)).astype(float)
        p = self.config.interaction_prob
        if p is None:
            return self.model.interaction_probs(states)
        p = np.asarray(p, dtype=float)
        if p.ndim == 0:
            return np.full(len(user_ids), float(p))
        return p[states]

    def alive(self, t: int) -> np.ndarray:
        return self.user_ids[self.arrival[self.user_ids] <= t]

    def active_users(self, t: int) -> np.ndarray:
        """Sorted ids of users interacting at period ``t``."""
        if t < self.period:
            return self._history[t]
        if t > self.period:
            raise ValueError(f"period {t} is ahead of the simulation (next period is {self.period})")
        if self._active_cache is None:
            alive = self.alive(t)
            u = self._uniforms(t, _INTERACT)[alive]
            self._active_cache = alive[u < self.interaction_probs(alive)]
        return self._active_cache

    def user_state(self, user_id: int) -> UserState:
        if self.mode == "tabular":
            return UserState(int(user_id), int(self.states[user_id]))
        z, x, i = self.model.split(self.states[user_id][None])
        return UserState(int(user_id), z[0].copy(), x[0].copy(), i[0].copy())

    def state_keys(self, user_ids) -> np.ndarray:
        return self.states[np.asarray(user_ids, dtype=np.int64)].copy()

    # -- scoring / eligibility matching this environment ---------------

    def conversion_table(self, states) -> np.ndarray:
        """``(n, n_actions)`` true conversion probabilities."""
        if self.mode == "tabular":
            return self.model.conv[np.asarray(states, dtype=np.int64)]
        p = self.model.conversion_probs(states)
        return np.hstack([p, np.zeros((p.shape[0], 1))])

    # -- dynamics ------------------------------------------------------

    def step(self, t: int, actions: Mapping[int, int]) -> dict:
        """Serve one action per active user; returns ``{user_id: (Outcome, UserState)}``."""
        active = self.active_users(t)
        keys = set(int(u) for u in actions)
        missing = set(int(u) for u in active) - keys
        if missing:
            raise MissingUserError(f"no action for active users {sorted(missing)[:5]}")
        extra = keys - set(int(u) for u in active)
        if extra:
            raise MissingUserError(f"actions given for inactive users {sorted(extra)[:5]}")
        acts = np.array([actions[int(u)] for u in active], dtype=np.int64)
        converted = self.step_arrays(t, acts)
        out = {}
        for u, a, c in zip(active, acts, converted):
            y = self._item_behavior(int(a)) if c else NO_OUTCOME
            out[int(u)] = (Outcome(y, int(c)), self.user_state(int(u)))
        return out

    def _item_behavior(self, a: int) -> str:
        items = self.model.items
        return items[a].end_behavior if a < len(items) else NO_OUTCOME

    def step_arrays(self, t: int, actions: np.ndarray) -> np.ndarray:
        """Vectorized step: ``actions[k]`` is served to ``active_users(t)[k]``.

        Returns the 0/1 conversion indicators in the same order.
        """
        active = self.active_users(t)
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != active.shape:
            raise MissingUserError(f"expected {len(active)} actions, got {actions.shape}")
        if np.any((actions < 0) | (actions >= self.n_actions)):
            raise ValueError("action index out of range")
        s = self.states[active]
        u_conv = self._uniforms(t, _CONVERT)[active]
        u_move = self._uniforms(t, _MOVE)[active]
        if self.mode == "tabular":
            p = self.model.conv[s, actions]
            converted = u_conv < p
            self.states[active] = self.model.next_states(s, actions, converted, u_move)
        else:
            converted = self._vector_step(t, active, s, actions, u_conv)
        if self.log is not None:
            reprs = [state_repr(x) for x in s] if self.mode == "vector" else s.tolist()
            for u, sr, a, c in zip(active.tolist(), reprs, actions.tolist(), converted.tolist()):
                self.log.append((t, u, sr, a, int(c)))
        self._history.append(active)
        self.period = t + 1
        self._active_cache = None
        return converted.astype(np.int64)

    def _vector_step(self, t, active, s, actions, u_conv):
        m = self.model
        probs = self.conversion_table(s)
        p = probs[np.arange(len(active)), actions]
        converted = u_conv < p
        z, x, i = m.split(s)
        null = actions == m.n_items
        target = np.zeros_like(z)
        target[~null] = m.item_dirs[actions[~null]]
        z_new = np.where(converted[:, None], (1 - m.drift) * z + m.drift * target, (1 - m.decay) * z)
        self.states[active, : m.z_dim] = z_new
        # side information evolves for every present user, interacting or not
        alive = self.alive(t)
        noise = self._rng(t + 1, _SIDE).standard_normal((self._pool, m.i_dim))[alive]
        off = m.z_dim + m.x_dim
        self.states[alive, off:] = m.side_rho * self.states[alive, off:] + m.side_noise * noise
        return converted

    # -- exports -------------------------------------------------------

    def as_tabular(self, gamma: Optional[float] = None) -> TabularMDP:
        if self.mode != "tabular":
            raise UnsupportedModeError("as_tabular is only available in tabular mode")
        g = self.model.gamma if gamma is None else gamma
        return TabularMDP(self.model.kernel(), self.model.conv.copy(), g)

    def clone(self, user_ids: Optional[Sequence[int]] = None) -> "Environment":
        """Independent copy; with ``user_ids`` the copy only simulates that subset."""
        other = copy.copy(self)
        other.states = self.states.copy()
        other._history = list(self._history)
        other._active_cache = None
        other.log = None if self.log is None else []
        if user_ids is not None:
            other.user_ids = np.array(sorted(int(u) for u in user_ids), dtype=np.int64)
        return other

    def dump_log(self, path) -> None:
        if self.log is None:
            raise RuntimeError("environment was created without record_log=True")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "user_id", "state_repr", "item_id", "converted"])
            w.writerows(self.log)


def state_repr(state) -> str:
    if np.ndim(state) == 0:
        return str(int(state))
    return ";".join(repr(float(v)) for v in state)


def spawn(config: PopulationConfig, mode: str = "tabular", model=None, rng_seed: Optional[int] = None,
          record_log: bool = False, **model_kwargs) -> Environment:
    """Create an environment; builds a random model of the requested mode if none is given."""
    if mode not in ("tabular", "vector"):
        raise InvalidConfigError(f"unknown mode {mode!r}")
    if model is None:
        rng = np.random.default_rng(config.seed if rng_seed is None else rng_seed)
        if mode == "tabular":
            model_kwargs.setdefault("n_states", 8)
            model_kwargs.setdefault("n_items", 3)
            model = TabularModel.random(rng, **model_kwargs)
        else:
            model = VectorModel.random(rng, **model_kwargs)
    elif (mode == "tabular") != isinstance(model, TabularModel):
        raise InvalidConfigError(f"model {type(model).__name__} does not match mode {mode!r}")
    return Environment(config, model, record_log=record_log)


def trap_scoring(model: TabularModel, rng: np.random.Generator, bid_scale: float = 1.0,
                 bid_sigma: float = 0.5) -> TableScoring:
    """Bids vary by context only; eCVR is the true immediate conversion rate."""
    n_ctx = model.context_size
    n_items = model.n_actions - 1
    ctx_bids = bid_scale * rng.lognormal(0.0, bid_sigma, size=(n_ctx, n_items))
    bids = np.tile(ctx_bids, (model.n_states // n_ctx, 1))
    return TableScoring(bids, model.conv[:, :n_items])


def vector_scoring(model: VectorModel, rng: np.random.Generator, bid_scale: float = 1.0) -> CallableScoring:
    return CallableScoring(bid_scale * rng.lognormal(0.0, 0.5, size=model.n_items), model.conversion_probs)


def full_eligibility(n_items: int) -> Eligibility:
    return Eligibility(n_items)
