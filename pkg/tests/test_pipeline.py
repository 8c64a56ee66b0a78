from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from auction_ltv.pipeline import (
    BufferTable,
    Interaction,
    InteractionRecord,
    OutOfOrderPeriodError,
    classify,
    flush,
    ingest,
    read_log_csv,
    reference_scan,
    stream,
    write_tuples_csv,
)

H = 15


def rec(t, u=0, s=0, a=0, r=0):
    return InteractionRecord(t, u, s, a, r)


def key(d):
    return (d.user_id, d.t, d.s, d.a, d.r, d.s_next, d.a_next, d.tau)


def multiset(tuples):
    return Counter(key(d) for d in tuples)


def random_log(rng, n_users, n_periods, p=None):
    log = []
    # heterogeneous activity so that short and long gaps both occur
    p = rng.uniform(0.01, 0.6, n_users) if p is None else np.full(n_users, p)
    for t in range(n_periods):
        for u in np.flatnonzero(rng.random(n_users) < p):
            log.append(rec(t, int(u), int(rng.integers(0, 20)), int(rng.integers(0, 5)), int(rng.random() < 0.3)))
    return log


def test_classification_examples():
    table = BufferTable(H)
    t = 20
    assert classify(7, t + 1, table, True) is Interaction.NEW
    for p in range(t - 2, t + 1):
        ingest([rec(p, 7)] if p == t - 2 else [], table, p)
    assert classify(7, t + 1, table, True) is Interaction.ACTIVE
    assert table.latest[7].t == t - 2

    table = BufferTable(H)
    for p in range(t - H, t + 1):
        ingest([rec(p, 3)] if p == t - H else [], table, p)
    assert classify(3, t + 1, table, False) is Interaction.INACTIVE
    assert classify(3, t, table, False) is Interaction.CARRYOVER


def test_empty_period_on_empty_window():
    table = BufferTable(H)
    emitted, _ = ingest([], table, 0)
    assert emitted == []


def test_every_period_user():
    log = [rec(t, 1, s=t) for t in range(H + 2)]
    out = stream(log, H, final_flush=False)
    assert len(out) == H + 1
    assert all(not d.terminal and d.tau == 1 for d in out)
    assert multiset(stream(log, H)) == multiset(reference_scan(log, H))


def test_single_interaction_terminates_at_age_h_plus_one():
    table = BufferTable(H)
    ingest([rec(0, 5, r=1)], table, 0)
    for t in range(1, H + 1):
        emitted, _ = ingest([], table, t)
        assert emitted == []
    emitted, _ = ingest([], table, H + 1)
    assert len(emitted) == 1 and emitted[0].terminal and emitted[0].r == 1
    assert multiset(emitted) == multiset(reference_scan([rec(0, 5, r=1)], H))


def test_gap_boundaries():
    # gap h pairs, gap h + 1 terminates and restarts
    log = [rec(0, 1), rec(H, 1), rec(2 * H + 1, 1)]
    out = stream(log, H)
    taus = sorted(d.tau for d in out)
    assert taus == [0, 0, H]
    assert multiset(out) == multiset(reference_scan(log, H))


def test_out_of_order_periods():
    table = BufferTable(H)
    ingest([rec(3)], table, 3)
    with pytest.raises(OutOfOrderPeriodError):
        ingest([rec(5)], table, 5)
    with pytest.raises(OutOfOrderPeriodError):
        ingest([rec(3)], table, 4)


def test_duplicate_user_in_period():
    with pytest.raises(ValueError):
        ingest([rec(0, 1), rec(0, 1)], BufferTable(H), 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_stream_matches_reference(seed, h):
    rng = np.random.default_rng(seed)
    log = random_log(rng, 30, 25)
    assert multiset(stream(log, h)) == multiset(reference_scan(log, h))


def test_random_stream_bounds_and_conservation():
    rng = np.random.default_rng(1)
    log = random_log(rng, 300, 60)
    out = stream(log, H)
    assert all(1 <= d.tau <= H for d in out if not d.terminal)
    # every interaction heads exactly one tuple
    heads = Counter((d.user_id, d.t) for d in out)
    assert heads == Counter((r.user_id, r.t) for r in log)
    # one terminal per run that ends in more than h silent periods
    runs = 0
    by_user = {}
    for r in log:
        by_user.setdefault(r.user_id, []).append(r.t)
    for ts in by_user.values():
        ts.sort()
        runs += 1 + sum(b - a > H for a, b in zip(ts, ts[1:]))
    assert sum(d.terminal for d in out) == runs


def test_truncated_stream_is_prefix_consistent():
    rng = np.random.default_rng(2)
    log = random_log(rng, 200, 60)
    full = multiset(stream(log, H))
    cut = stream([r for r in log if r.t < 40], H, end=39, final_flush=False)
    assert not (multiset(cut) - full)
    # what is still pending is exactly what the cut withheld
    table = BufferTable(H)
    for t in range(40):
        ingest([r for r in log if r.t == t], table, t)
    assert len(cut) + table.pending() == sum(r.t < 40 for r in log)


def test_flush_empties_the_table():
    table = BufferTable(H)
    ingest([rec(0, u) for u in range(5)], table, 0)
    out = flush(table)
    assert len(out) == 5 and all(d.terminal for d in out)
    assert table.pending() == 0


def test_csv_io(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text("t,user_id,state_repr,item_id,converted\n0,1,4,2,1\n2,1,5,0,0\n")
    log = read_log_csv(path)
    assert log == [rec(0, 1, 4, 2, 1), rec(2, 1, 5, 0, 0)]
    write_tuples_csv(stream(log, H), tmp_path / "tuples.csv")
    lines = (tmp_path / "tuples.csv").read_text().splitlines()
    assert lines[0] == "user_id,t,s,a,r,s_next,a_next,tau,terminal"
    assert len(lines) == 3
