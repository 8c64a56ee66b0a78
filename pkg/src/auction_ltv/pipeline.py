"""Streaming conversion of per-period interaction logs into SARSA tuples.

A :class:`BufferTable` keeps the last ``h + 1`` periods of interactions.
Each new period is split into new / active / inactive interactions:

* active: the user's previous interaction is at most ``h`` periods old; emit
  the tuple pairing that interaction with the current one;
* new: no interaction in the last ``h`` periods; nothing is emitted yet;
* inactive: the user's latest interaction just became ``h + 1`` periods old
  with nothing since; emit a terminal tuple for it.

:func:`reference_scan` builds the same tuples from complete logs and serves as
the oracle for the streaming path.
"""
from __future__ import annotations

import csv
import enum
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Iterable, Optional

from .sarsa import TransitionTuple


class OutOfOrderPeriodError(ValueError):
    pass


class Interaction(enum.Enum):
    NEW = "new"
    ACTIVE = "active"
    INACTIVE = "inactive"
    CARRYOVER = "carryover"


@dataclass(frozen=True)
class InteractionRecord:
    t: int
    user_id: int
    s: object
    a: int
    r: int

    def __post_init__(self):
        if self.r not in (0, 1):
            raise ValueError(f"reward must be 0 or 1, got {self.r}")


class BufferTable:
    """Sliding window of the last ``h + 1`` periods of interactions."""

    def __init__(self, h: int = 15):
        if h < 1:
            raise ValueError("h must be >= 1")
        self.h = int(h)
        self.t: Optional[int] = None
        self.periods: deque = deque()      # (t, {user_id: record})
        self.latest: dict = {}             # user_id -> most recent record in the window

    def window(self) -> list[int]:
        return [t for t, _ in self.periods]

    def members(self) -> set:
        """Users with at least one interaction in the window."""
        return set(self.latest)

    def __contains__(self, user_id) -> bool:
        return user_id in self.latest

    def pending(self) -> int:
        return len(self.latest)


def classify(user_id, t_next: int, table: BufferTable, interacted_now: bool) -> Interaction:
    """Category of ``user_id`` when period ``t_next`` is processed.

    A user whose only window record is about to expire and who interacts at
    ``t_next`` is NEW: the expiring record is terminated separately, since a
    gap of ``h + 1`` periods exceeds the horizon.
    """
    last = table.latest.get(user_id)
    if interacted_now:
        if last is not None and t_next - last.t <= table.h:
            return Interaction.ACTIVE
        return Interaction.NEW
    if last is not None and t_next - last.t == table.h + 1:
        return Interaction.INACTIVE
    return Interaction.CARRYOVER


def _terminal(rec: InteractionRecord) -> TransitionTuple:
    return TransitionTuple(rec.s, rec.a, rec.r, None, None, 0, user_id=rec.user_id, t=rec.t)


def _pair(prev: InteractionRecord, cur: InteractionRecord) -> TransitionTuple:
    return TransitionTuple(prev.s, prev.a, prev.r, cur.s, cur.a, cur.t - prev.t, user_id=prev.user_id, t=prev.t)


def ingest(period_data: Iterable[InteractionRecord], table: BufferTable,
           t: Optional[int] = None) -> tuple[list[TransitionTuple], BufferTable]:
    """Process one period of interactions; mutates and returns ``table``.

    ``t`` defaults to the period after the last processed one (or the
    records' period on a fresh table).
    """
    records = list(period_data)
    if t is None:
        if table.t is not None:
            t = table.t + 1
        elif records:
            t = records[0].t
        else:
            raise OutOfOrderPeriodError("cannot infer the period of an empty batch on a fresh table")
    if table.t is not None and t != table.t + 1:
        raise OutOfOrderPeriodError(f"expected period {table.t + 1}, got {t}")
    by_user = {}
    for rec in records:
        if rec.t != t:
            raise OutOfOrderPeriodError(f"record stamped {rec.t} in batch for period {t}")
        if rec.user_id in by_user:
            raise ValueError(f"user {rec.user_id} interacts twice in period {t}")
        by_user[rec.user_id] = rec

    emitted: list[TransitionTuple] = []
    # expire the oldest period first so its pending interactions terminate
    expired = t - table.h - 1
    while table.periods and table.periods[0][0] <= expired:
        old_t, old = table.periods.popleft()
        for u, rec in old.items():
            if table.latest.get(u) is rec:
                emitted.append(_terminal(rec))
                del table.latest[u]

    for u in sorted(by_user):
        rec = by_user[u]
        prev = table.latest.get(u)
        if prev is not None:
            emitted.append(_pair(prev, rec))
        table.latest[u] = rec
    table.periods.append((t, by_user))
    table.t = t
    return emitted, table


def flush(table: BufferTable) -> list[TransitionTuple]:
    """Append empty periods until every pending interaction has resolved."""
    out: list[TransitionTuple] = []
    if table.t is None:
        return out
    for _ in range(table.h + 1):
        emitted, _ = ingest([], table)
        out.extend(emitted)
    return out


def stream(log: Iterable[InteractionRecord], h: int = 15, start: Optional[int] = None,
           end: Optional[int] = None, final_flush: bool = True) -> list[TransitionTuple]:
    """Run :func:`ingest` over a whole log period by period (empty periods included)."""
    by_t = defaultdict(list)
    for rec in log:
        by_t[rec.t].append(rec)
    if not by_t and start is None:
        return []
    lo = min(by_t) if start is None else start
    hi = max(by_t) if end is None else end
    table = BufferTable(h)
    out: list[TransitionTuple] = []
    for t in range(lo, hi + 1):
        emitted, _ = ingest(by_t.get(t, []), table, t)
        out.extend(emitted)
    if final_flush:
        out.extend(flush(table))
    return out


def reference_scan(log: Iterable[InteractionRecord], h: int = 15) -> list[TransitionTuple]:
    """Offline tuple construction from complete per-user trajectories."""
    per_user = defaultdict(list)
    for rec in log:
        per_user[rec.user_id].append(rec)
    out: list[TransitionTuple] = []
    for u in sorted(per_user):
        recs = sorted(per_user[u], key=lambda r: r.t)
        for prev, cur in zip(recs, recs[1:] + [None]):
            if cur is not None and cur.t - prev.t <= h:
                out.append(_pair(prev, cur))
            else:
                out.append(_terminal(prev))
    return out


def read_log_csv(path) -> list[InteractionRecord]:
    """Read ``t,user_id,state_repr,item_id,reward`` rows (``converted`` accepted for reward)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r = row.get("reward", row.get("converted"))
            s = row["state_repr"]
            try:
                s = int(s)
            except ValueError:
                pass
            out.append(InteractionRecord(int(row["t"]), int(row["user_id"]), s, int(row["item_id"]), int(r)))
    return out


def write_tuples_csv(tuples: Iterable[TransitionTuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "t", "s", "a", "r", "s_next", "a_next", "tau", "terminal"])
        for d in tuples:
            w.writerow([d.user_id, d.t, d.s, d.a, d.r, "" if d.terminal else d.s_next,
                        "" if d.terminal else d.a_next, d.tau, int(d.terminal)])
