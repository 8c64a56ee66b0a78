"""Bid-eCVR scoring, eligibility constraints and single-slot second-price allocation.

Actions are integer column indices into per-state tables.  The last column of
every action table is the null candidate ("no recommendation"): it is always
eligible, scores exactly 0 and never converts.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable, Mapping, Optional

import numpy as np


class IneligibleItemError(ValueError):
    pass


def no_rec_index(n_actions: int) -> int:
    return n_actions - 1


@dataclass(frozen=True)
class Eligibility:
    """Constraint function c(s): which items may be shown in each state.

    ``allowed`` is a boolean ``(n_states, n_items)`` table (tabular states) or
    ``None`` for "full catalog in every state".  The null candidate is appended
    automatically and is never maskable.
    """

    n_items: int
    allowed: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.allowed is not None:
            allowed = np.asarray(self.allowed, dtype=bool)
            if allowed.ndim != 2 or allowed.shape[1] != self.n_items:
                raise ValueError(f"allowed table must be (n_states, {self.n_items}), got {allowed.shape}")
            allowed.setflags(write=False)
            object.__setattr__(self, "allowed", allowed)

    @property
    def n_actions(self) -> int:
        return self.n_items + 1

    @property
    def no_rec(self) -> int:
        return self.n_items

    @classmethod
    def from_table(cls, n_states: int, n_items: int, table: Mapping[int, list]) -> "Eligibility":
        """Build from a sparse ``{state: [items]}`` table; absent states get no items."""
        allowed = np.zeros((n_states, n_items), dtype=bool)
        for s, items in table.items():
            allowed[s, list(items)] = True
        return cls(n_items, allowed)

    def mask(self, states) -> np.ndarray:
        """Boolean ``(n, n_actions)`` eligibility rows for a batch of states."""
        states = np.asarray(states)
        n = 1 if states.ndim == 0 else len(states)
        out = np.ones((n, self.n_actions), dtype=bool)
        if self.allowed is not None:
            out[:, : self.n_items] = self.allowed[np.atleast_1d(states).astype(np.int64)]
        return out

    def members(self, state) -> list[int]:
        return [int(a) for a in np.flatnonzero(self.mask(state)[0])]


class ScoringModel:
    """Black-box f(s, a) = Bid(s, a) * eCVR(s, a) over a batch of states.

    Subclasses return ``(n, n_items)`` bid and eCVR arrays; the null column is
    appended here.
    """

    n_items: int

    def bids(self, states) -> np.ndarray:
        raise NotImplementedError

    def ecvr(self, states) -> np.ndarray:
        raise NotImplementedError

    @property
    def n_actions(self) -> int:
        return self.n_items + 1

    def scores(self, states) -> np.ndarray:
        f = np.asarray(self.bids(states), dtype=float) * np.asarray(self.ecvr(states), dtype=float)
        return np.hstack([f, np.zeros((f.shape[0], 1))])


class TableScoring(ScoringModel):
    """Tabular scoring: bid and eCVR tables indexed by integer state."""

    def __init__(self, bid: np.ndarray, ecvr: np.ndarray):
        bid = np.asarray(bid, dtype=float)
        ecvr = np.asarray(ecvr, dtype=float)
        if bid.shape != ecvr.shape or bid.ndim != 2:
            raise ValueError("bid and ecvr must be equal-shape (n_states, n_items) tables")
        if np.any(bid <= 0):
            raise ValueError("bids must be positive")
        if np.any((ecvr < 0) | (ecvr > 1)):
            raise ValueError("ecvr must lie in [0, 1]")
        self.bid_table = bid
        self.ecvr_table = ecvr
        self.n_items = bid.shape[1]

    @property
    def n_states(self) -> int:
        return self.bid_table.shape[0]

    def bids(self, states):
        return self.bid_table[np.atleast_1d(np.asarray(states, dtype=np.int64))]

    def ecvr(self, states):
        return self.ecvr_table[np.atleast_1d(np.asarray(states, dtype=np.int64))]

    def table(self) -> np.ndarray:
        """Full ``(n_states, n_actions)`` score table."""
        return self.scores(np.arange(self.n_states))

    @classmethod
    def from_csv(cls, path, n_states: int, n_items: int) -> "TableScoring":
        """Load ``state_id,item_id,bid,ecvr`` rows; every (state, item) pair must be present."""
        import csv

        bid = np.full((n_states, n_items), np.nan)
        ecvr = np.full((n_states, n_items), np.nan)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                s, a = int(row["state_id"]), int(row["item_id"])
                bid[s, a] = float(row["bid"])
                ecvr[s, a] = float(row["ecvr"])
        if np.isnan(bid).any():
            raise ValueError(f"{path}: scoring table is missing (state, item) rows")
        return cls(bid, ecvr)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state_id", "item_id", "bid", "ecvr"])
            for s in range(self.n_states):
                for a in range(self.n_items):
                    w.writerow([s, a, repr(float(self.bid_table[s, a])), repr(float(self.ecvr_table[s, a]))])


class CallableScoring(ScoringModel):
    """Scoring for feature-vector states: per-item bids, eCVR from a callable."""

    def __init__(self, item_bids, ecvr_fn: Callable[[np.ndarray], np.ndarray]):
        self.item_bids = np.asarray(item_bids, dtype=float)
        if np.any(self.item_bids <= 0):
            raise ValueError("bids must be positive")
        self.ecvr_fn = ecvr_fn
        self.n_items = len(self.item_bids)

    def bids(self, states):
        states = np.atleast_2d(states)
        return np.broadcast_to(self.item_bids, (states.shape[0], self.n_items))

    def ecvr(self, states):
        return self.ecvr_fn(np.atleast_2d(states))


def score(scoring: ScoringModel, eligibility: Eligibility, state, action: int) -> float:
    if action not in eligibility.members(state):
        raise IneligibleItemError(f"item {action} is not eligible in state {state!r}")
    return float(scoring.scores(_batch1(state))[0, action])


def _batch1(state):
    state = np.asarray(state)
    return state[None] if state.ndim >= 1 else state.reshape(1)


def second_price(candidates: Mapping[Hashable, float]) -> tuple[Hashable, float]:
    """Winner and price of a single-slot second-price auction.

    Ties go to the lowest candidate key.  With a single candidate the price is 0.
    """
    if not candidates:
        raise ValueError("auction needs at least one candidate")
    ordered = sorted(candidates.items(), key=lambda kv: (-kv[1], kv[0]))
    winner, _ = ordered[0]
    price = ordered[1][1] if len(ordered) > 1 else 0.0
    return winner, float(price)


def run_auction(state, score_fn: Callable[[object, int], float], eligibility: Eligibility) -> tuple[int, float]:
    """Allocate the slot for one state among its eligible candidates."""
    return second_price({a: float(score_fn(state, a)) for a in eligibility.members(state)})


def run_auction_batch(scores: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`run_auction` over rows of a score matrix.

    Returns the winning column per row (lowest index on ties) and the
    second-highest eligible score (0 when only one candidate is eligible).
    """
    masked = np.where(mask, scores, -np.inf)
    winners = np.argmax(masked, axis=1)
    rows = np.arange(len(winners))
    rest = masked.copy()
    rest[rows, winners] = -np.inf
    price = rest.max(axis=1)
    price[~np.isfinite(price)] = 0.0
    return winners, price
