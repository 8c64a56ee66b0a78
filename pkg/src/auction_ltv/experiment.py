"""Seeded A/B simulations of the blended policy against the bid-eCVR base policy.

Design of one seeded run
------------------------
A population of ``n_users`` is simulated under the base policy for
``warmup_periods`` periods while Q-hat is trained online.  The first
``round(split * n_users)`` users then form the test cohort: a copy of the
environment restricted to them is served by the blended policy, while in the
original environment the same users keep receiving the base policy and form
the control arm.  Both copies draw from the same per-user random streams, so
identical policies give identical trajectories and exactly zero lift.

Q-hat is refreshed every period from the pipeline's tuples.  With
``train_on="base"`` it only sees base-policy traffic (control arm plus the
remaining users); ``"served"`` instead trains on what was actually served,
the test arm included.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from scipy import stats

from . import env as envmod
from .auction import Eligibility
from .pipeline import BufferTable, InteractionRecord, ingest
from .policy import PolicyConfig, _safe_fraction, base_select, select, tune_alpha
from .sarsa import MLPQ, ReplayBuffer, TabularQ, TrainerConfig, train_step

CONTRIBUTION_CAP = 0.08
DAYS_PER_WEEK = 7


@dataclass
class EnvSpec:
    """Which marketplace to simulate.

    ``kind`` is one of ``myopic_trap``, ``flat`` (no long-term structure),
    ``random`` (random tabular kernels) or ``vector``.  ``params`` are passed
    to the model constructor.  The model and bids are fixed by
    ``model_seed``; run seeds only change the population draws.
    """

    kind: str = "myopic_trap"
    params: dict = field(default_factory=dict)
    n_users: int = 4000
    arrival_prob: float = 1.0
    interaction_prob: Optional[float] = 0.5
    bid_scale: float = 25.0
    bid_sigma: float = 0.5
    model_seed: int = 0

    def build(self):
        """Return (model, scoring, eligibility)."""
        rng = np.random.default_rng(self.model_seed)
        if self.kind == "myopic_trap":
            model = envmod.TabularModel.myopic_trap(**self.params)
        elif self.kind == "flat":
            model = envmod.TabularModel.flat(**self.params)
        elif self.kind == "random":
            params = {"n_states": 8, "n_items": 3, **self.params}
            model = envmod.TabularModel.random(rng, **params)
        elif self.kind == "vector":
            model = envmod.VectorModel.random(rng, **self.params)
        else:
            raise envmod.InvalidConfigError(f"unknown environment kind {self.kind!r}")
        if isinstance(model, envmod.TabularModel):
            scoring = envmod.trap_scoring(model, rng, self.bid_scale, self.bid_sigma)
        else:
            scoring = envmod.vector_scoring(model, rng, self.bid_scale)
        return model, scoring, Eligibility(model.n_actions - 1)

    def population(self, seed: int) -> envmod.PopulationConfig:
        return envmod.PopulationConfig(self.n_users, self.arrival_prob, self.interaction_prob, seed)


@dataclass
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(step_size=1.0, total_steps=10**9))
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    alpha_cap: Optional[float] = None
    n_seeds: int = 30
    n_periods: int = 42
    warmup_periods: int = 14
    split: float = 0.5
    h: int = 15
    train_steps_per_period: int = 100
    buffer_capacity: int = 1_000_000
    impression_neutral: bool = True
    train_on: str = "base"
    group_by_bidder: bool = False
    base_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split must be in (0, 1), got {self.split}")
        if self.n_seeds < 1 or self.n_periods < 1 or self.warmup_periods < 0:
            raise ValueError("n_seeds and n_periods must be >= 1, warmup_periods >= 0")
        if self.train_on not in ("base", "served"):
            raise ValueError(f"train_on must be 'base' or 'served', got {self.train_on!r}")
        if self.impression_neutral and self.env.interaction_prob is None:
            raise ValueError("impression-neutral runs need a state-independent interaction_prob")
        if self.alpha_cap is not None and not 0.0 < self.alpha_cap <= 1.0:
            raise ValueError("alpha_cap must be in (0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        env = EnvSpec(**raw.pop("env", {}))
        trainer = TrainerConfig(**{"step_size": 1.0, "total_steps": 10**9, **raw.pop("trainer", {})})
        policy = PolicyConfig(**raw.pop("policy", {}))
        return cls(env=env, trainer=trainer, policy=policy, **raw)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh) or {})


# --------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsRow:
    seed: int
    period: int
    arm: str
    bidder: str
    conversions: int
    impressions: int
    conversion_rate: float
    lift_conversions: Optional[float] = None
    lift_rate: Optional[float] = None

    COLUMNS = ("seed", "period", "arm", "bidder", "conversions", "impressions", "conversion_rate",
               "lift_conversions", "lift_rate")

    def as_list(self):
        def fmt(v):
            if v is None:
                return ""
            return repr(float(v)) if isinstance(v, float) else v
        return [fmt(getattr(self, c)) for c in self.COLUMNS]


def _rate(conv: int, imp: int) -> float:
    return conv / imp if imp > 0 else 0.0


def _lift(test: float, control: float) -> Optional[float]:
    return (test - control) / control if control > 0 else None


def _rows_from_counts(seed: int, counts: dict) -> list[MetricsRow]:
    """``counts[(period, arm, bidder)] = [conversions, impressions]`` -> rows with lifts."""
    rows = []
    for (period, arm, bidder) in sorted(counts):
        conv, imp = counts[(period, arm, bidder)]
        row = MetricsRow(seed, period, arm, bidder, int(conv), int(imp), _rate(conv, imp))
        if arm == "test":
            c_conv, c_imp = counts.get((period, "control", bidder), (0, 0))
            row.lift_conversions = _lift(conv, c_conv)
            row.lift_rate = _lift(row.conversion_rate, _rate(c_conv, c_imp)) if c_imp > 0 else None
        rows.append(row)
    return rows


@dataclass
class SeedResult:
    seed: int
    alpha: float
    daily: list
    weekly: list
    lift_conversions: float
    lift_rate: float
    lift_impressions: float
    contribution: float


@dataclass
class ABResult:
    config: ExperimentConfig
    seeds: list

    @property
    def daily(self) -> list:
        return [r for s in self.seeds for r in s.daily]

    @property
    def weekly(self) -> list:
        return [r for s in self.seeds for r in s.weekly]

    def lifts(self, metric: str = "conversions") -> np.ndarray:
        return np.array([getattr(s, f"lift_{metric}") for s in self.seeds])

    def summary(self, metric: str = "conversions", level: float = 0.95) -> dict:
        return mean_ci(self.lifts(metric), level)

    @property
    def mean_contribution(self) -> float:
        return float(np.mean([s.contribution for s in self.seeds]))


def mean_ci(x, level: float = 0.95) -> dict:
    """Mean and Student-t confidence interval of the mean."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    m = float(x.mean())
    if n < 2:
        return {"n": n, "mean": m, "se": float("nan"), "ci_low": m, "ci_high": m}
    se = float(x.std(ddof=1) / math.sqrt(n))
    half = float(stats.t.ppf(0.5 + level / 2, n - 1)) * se
    return {"n": n, "mean": m, "se": se, "ci_low": m - half, "ci_high": m + half}


# --------------------------------------------------------------------------
# Runner


def _make_q(model, cfg: ExperimentConfig):
    if isinstance(model, envmod.TabularModel):
        ctx = model.context_size
        n_keys = model.n_states // ctx
        key_fn = None if ctx == 1 else (lambda s, c=ctx: s // c)
        return TabularQ(n_keys, model.n_actions, key_fn=key_fn), None
    q = MLPQ(model.state_dim, model.item_features(), seed=cfg.trainer.seed)
    return q, model.state_dim


def _bidder_of(model) -> np.ndarray:
    n_items = model.n_actions - 1
    return np.array([model.items[a].bidder_id if a < len(model.items) else a for a in range(n_items)])


def run_seed(config: ExperimentConfig, seed: int, alpha: Optional[float] = None) -> SeedResult:
    model, scoring, elig = config.env.build()
    base_env = envmod.Environment(config.env.population(seed), model)
    n = config.env.n_users
    m = max(1, int(round(config.split * n)))
    null = model.n_actions - 1
    bidders = _bidder_of(model) if config.group_by_bidder else None

    q, state_dim = _make_q(model, config)
    tcfg = config.trainer
    buffer = ReplayBuffer(config.buffer_capacity, state_dim)
    table = BufferTable(config.h)
    rng = np.random.default_rng([tcfg.seed, seed])
    step = 0

    alpha = config.policy.effective_alpha if alpha is None else alpha
    test_env = None
    counts: dict = {}
    contrib_sum = 0.0
    contrib_n = 0

    def tally(period, arm, actions, conv):
        shown = actions != null
        key = (period, arm, "all")
        c = counts.setdefault(key, [0, 0])
        c[0] += int(conv.sum())
        c[1] += int(shown.sum())
        if bidders is not None:
            for b in np.unique(bidders):
                sel = shown & np.isin(actions, np.flatnonzero(bidders == b))
                cb = counts.setdefault((period, arm, str(b)), [0, 0])
                cb[0] += int(conv[sel].sum())
                cb[1] += int(sel.sum())

    def records(t, users, states, actions, conv):
        return [InteractionRecord(t, int(u), s, int(a), int(r))
                for u, s, a, r in zip(users, _state_list(states), actions, conv)]

    for t in range(config.warmup_periods + config.n_periods):
        in_ab = t >= config.warmup_periods
        if in_ab and test_env is None:
            test_env = base_env.clone(user_ids=range(m))
            if config.alpha_cap is not None:
                sample = base_env.state_keys(base_env.alive(t))
                alpha = tune_alpha(scoring.scores(sample), q.table(sample), config.alpha_cap, elig.mask(sample))

        # base policy traffic (control arm + remaining users)
        users_b = base_env.active_users(t)
        s_b = base_env.state_keys(users_b)
        f_b = scoring.scores(s_b)
        a_b = base_select(f_b, elig.mask(s_b))
        conv_b = base_env.step_arrays(t, a_b)
        if in_ab:
            ctrl = users_b < m
            tally(t - config.warmup_periods, "control", a_b[ctrl], conv_b[ctrl])
            keep = np.ones(len(users_b), bool) if config.train_on == "base" else ~ctrl
        else:
            keep = np.ones(len(users_b), bool)
        new = records(t, users_b[keep], s_b[keep], a_b[keep], conv_b[keep])

        if in_ab:
            users_t = test_env.active_users(t)
            s_t = test_env.state_keys(users_t)
            f_t = scoring.scores(s_t)
            mask = elig.mask(s_t)
            if config.impression_neutral:
                mask[mask[:, :-1].any(axis=1), -1] = False
            q_t = q.table(s_t)
            a_t = select(f_t, q_t, alpha, mask)
            conv_t = test_env.step_arrays(t, a_t)
            tally(t - config.warmup_periods, "test", a_t, conv_t)
            rows = np.arange(len(a_t))
            fr = _safe_fraction(f_t[rows, a_t], q_t[rows, a_t], alpha)
            contrib_sum += float(fr.sum())
            contrib_n += len(fr)
            if config.train_on == "served":
                new += records(t, users_t, s_t, a_t, conv_t)

        emitted, _ = ingest(new, table, t)
        buffer.extend(emitted)
        if len(buffer):
            for _ in range(config.train_steps_per_period):
                train_step(buffer, q, tcfg, step, rng)
                step += 1

    daily = _rows_from_counts(seed, counts)
    weekly_counts: dict = {}
    for (period, arm, bidder), (c, i) in counts.items():
        w = weekly_counts.setdefault((period // DAYS_PER_WEEK, arm, bidder), [0, 0])
        w[0] += c
        w[1] += i
    weekly = _rows_from_counts(seed, weekly_counts)

    tot = {arm: np.sum([v for (p, a, b), v in counts.items() if a == arm and b == "all"], axis=0)
           for arm in ("control", "test")}
    (cc, ci), (tc, ti) = tot["control"], tot["test"]
    return SeedResult(
        seed=seed, alpha=float(alpha), daily=daily, weekly=weekly,
        lift_conversions=_lift(tc, cc) or 0.0,
        lift_rate=_lift(_rate(tc, ti), _rate(cc, ci)) or 0.0,
        lift_impressions=_lift(ti, ci) or 0.0,
        contribution=contrib_sum / contrib_n if contrib_n else 0.0,
    )


def train_online(config: ExperimentConfig, seed: int, periods: Optional[int] = None,
                 eval_every: int = 0) -> tuple[object, list]:
    """Fit Q-hat on base-policy traffic only, as in the warm-up phase of :func:`run_seed`.

    Returns the Q-function and a ``(step, loss, eval_error)`` curve.  For
    tabular models the evaluation error is the max-norm gap to the exact
    base-policy Q over the (state key, action) pairs present in the buffer;
    vector models report NaN.
    """
    model, scoring, elig = config.env.build()
    env = envmod.Environment(config.env.population(seed), model)
    q, state_dim = _make_q(model, config)
    tcfg = config.trainer
    buffer = ReplayBuffer(config.buffer_capacity, state_dim)
    table = BufferTable(config.h)
    rng = np.random.default_rng([tcfg.seed, seed])

    exact = None
    if isinstance(model, envmod.TabularModel):
        from .dp_oracle import evaluate_linear, q_from_v

        mdp = env.as_tabular(gamma=tcfg.gamma)
        all_states = np.arange(model.n_states)
        base = base_select(scoring.scores(all_states), elig.mask(all_states))
        exact = q_from_v(mdp, evaluate_linear(mdp, base))

    def eval_error():
        if exact is None or len(buffer) == 0:
            return float("nan")
        data = buffer.contents()
        return float(np.max(np.abs(q.values(data.s, data.a) - exact[data.s, data.a])))

    curve = []
    step = 0
    periods = config.warmup_periods + config.n_periods if periods is None else periods
    for t in range(periods):
        users = env.active_users(t)
        s = env.state_keys(users)
        a = base_select(scoring.scores(s), elig.mask(s))
        conv = env.step_arrays(t, a)
        recs = [InteractionRecord(t, int(u), x, int(b), int(r))
                for u, x, b, r in zip(users, _state_list(s), a, conv)]
        emitted, _ = ingest(recs, table, t)
        buffer.extend(emitted)
        if not len(buffer):
            continue
        for _ in range(config.train_steps_per_period):
            loss = train_step(buffer, q, tcfg, step, rng)
            if eval_every and step % eval_every == 0:
                curve.append((step, loss, eval_error()))
            step += 1
    return q, curve


def _state_list(states: np.ndarray) -> list:
    return states.tolist() if states.ndim == 1 else list(states)


def _run_seed_args(args):
    return run_seed(*args)


def run_ab(config: ExperimentConfig, alpha: Optional[float] = None, workers: int = 1) -> ABResult:
    """Run ``config.n_seeds`` seeded A/B simulations; results are ordered by seed."""
    seeds = [config.base_seed + k for k in range(config.n_seeds)]
    jobs = [(config, s, alpha) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_seed_args, jobs))
    else:
        results = [run_seed(*j) for j in jobs]
    return ABResult(config, sorted(results, key=lambda r: r.seed))


@dataclass
class SweepRow:
    alpha: float
    mean_lift_conversions: float
    ci_low: float
    ci_high: float
    mean_lift_rate: float
    mean_contribution: float
    within_cap: bool

    COLUMNS = ("alpha", "mean_lift_conversions", "ci_low", "ci_high", "mean_lift_rate", "mean_contribution",
               "within_cap")


def sweep_alpha(config: ExperimentConfig, alphas: Sequence[float], workers: int = 1,
                cap: float = CONTRIBUTION_CAP) -> list[SweepRow]:
    rows = []
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
        res = run_ab(config, alpha=a, workers=workers)
        conv = res.summary("conversions")
        rows.append(SweepRow(float(a), conv["mean"], conv["ci_low"], conv["ci_high"],
                             float(res.lifts("rate").mean()), res.mean_contribution,
                             res.mean_contribution <= cap))
    return rows


# --------------------------------------------------------------------------
# Output


def report(result: ABResult, out_dir) -> tuple[Path, Path]:
    """Write ``daily.csv`` and ``weekly.csv`` (one row per seed, period, arm, bidder)."""
    daily, weekly = result.daily, result.weekly
    if not daily:
        raise ValueError("empty metrics table; nothing written")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = (out / "daily.csv", out / "weekly.csv")
    for path, rows in zip(paths, (daily, weekly)):
        rows = sorted(rows, key=lambda r: (r.seed, r.period, r.arm, r.bidder))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["week" if path.name == "weekly.csv" and c == "period" else c for c in MetricsRow.COLUMNS])
            w.writerows(r.as_list() for r in rows)
    return paths


def write_sweep(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SweepRow.COLUMNS)
        for r in rows:
            w.writerow([repr(float(getattr(r, c))) if c != "within_cap" else int(r.within_cap)
                        for c in SweepRow.COLUMNS])
