"""Exact dynamic programming on tabular MDPs.

Policies are integer arrays ``mu[s]``; value functions are float arrays over
states; Q tables are ``(n_states, n_actions)``.  The immediate reward of a
pair is its expected conversion probability ``r_bar[s, a]``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .env import TabularMDP
from .policy import base_select, select


class ShapeMismatchError(ValueError):
    pass


class NonUniqueScoresError(ValueError):
    pass


def _check_policy(mdp: TabularMDP, mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.int64)
    if mu.shape != (mdp.n_states,):
        raise ShapeMismatchError(f"policy shape {mu.shape} != ({mdp.n_states},)")
    if np.any((mu < 0) | (mu >= mdp.n_actions)):
        raise ShapeMismatchError("policy selects an action outside the action set")
    return mu


def policy_kernel(mdp: TabularMDP, mu) -> tuple[np.ndarray, np.ndarray]:
    """(P_mu, r_mu): the Markov chain and reward vector induced by ``mu``."""
    mu = _check_policy(mdp, mu)
    idx = np.arange(mdp.n_states)
    return mdp.P[idx, mu], mdp.r_bar[idx, mu]


def bellman_apply(mdp: TabularMDP, mu, V) -> np.ndarray:
    """T_mu V = r_mu + gamma P_mu V."""
    V = np.asarray(V, dtype=float)
    if V.shape != (mdp.n_states,):
        raise ShapeMismatchError(f"value shape {V.shape} != ({mdp.n_states},)")
    P_mu, r_mu = policy_kernel(mdp, mu)
    return r_mu + mdp.gamma * P_mu @ V


def evaluate_linear(mdp: TabularMDP, mu) -> np.ndarray:
    """V_mu from the linear system (I - gamma P_mu) V = r_mu."""
    P_mu, r_mu = policy_kernel(mdp, mu)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_mu, r_mu)


def evaluate(mdp: TabularMDP, mu, tol: float = 1e-9, method: str = "iterative") -> np.ndarray:
    """Value of a deterministic policy to sup-norm accuracy ``tol``.

    The iterative method applies T_mu from V = 0 and stops once the sup-norm
    change is at most ``tol * (1 - gamma) / gamma``; contraction then bounds
    the distance to V_mu by ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if method == "linear":
        return evaluate_linear(mdp, mu)
    if method != "iterative":
        raise ValueError(f"unknown method {method!r}")
    P_mu, r_mu = policy_kernel(mdp, mu)
    g = mdp.gamma
    if g == 0.0:
        return r_mu.copy()
    stop = tol * (1.0 - g) / g
    V = np.zeros(mdp.n_states)
    while True:
        V_new = r_mu + g * P_mu @ V
        if np.max(np.abs(V_new - V)) <= stop:
            return V_new
        V = V_new


def q_from_v(mdp: TabularMDP, V) -> np.ndarray:
    """Q(s, a) = r_bar(s, a) + gamma sum_s' P(s'|s, a) V(s')."""
    V = np.asarray(V, dtype=float)
    if V.shape != (mdp.n_states,):
        raise ShapeMismatchError(f"value shape {V.shape} != ({mdp.n_states},)")
    return mdp.r_bar + mdp.gamma * mdp.P @ V


def greedy(Q: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    return base_select(Q, mask)


def policy_iteration(mdp: TabularMDP, mask: Optional[np.ndarray] = None, mu0=None,
                     max_iter: int = 10_000) -> tuple[np.ndarray, np.ndarray, int]:
    """Howard policy iteration; returns (optimal policy, V*, improvement steps).

    Stops when greedy improvement no longer changes the policy.  Improvements
    smaller than 1e-12 are ignored so that floating-point noise cannot cycle.
    """
    mu = greedy(mdp.r_bar, mask) if mu0 is None else _check_policy(mdp, mu0).copy()
    rows = np.arange(mdp.n_states)
    for it in range(1, max_iter + 1):
        V = evaluate_linear(mdp, mu)
        Q = q_from_v(mdp, V)
        cand = greedy(Q, mask)
        better = Q[rows, cand] > Q[rows, mu] + 1e-12
        if not better.any():
            return mu, V, it
        mu = np.where(better, cand, mu)
    raise RuntimeError("policy iteration did not converge")


def scores_unique(f: np.ndarray, mask: Optional[np.ndarray] = None) -> bool:
    """True when f takes distinct values over the eligible actions of every state."""
    for s in range(f.shape[0]):
        vals = f[s] if mask is None else f[s][mask[s]]
        if len(np.unique(vals)) != len(vals):
            return False
    return True


@dataclass
class ImprovementReport:
    alpha: float
    base_actions: np.ndarray
    mod_actions: np.ndarray
    v_base: np.ndarray
    v_mod: np.ndarray
    q_base: np.ndarray
    step_margin: np.ndarray     # Q_base(s, mod(s)) - V_base(s)
    value_margin: np.ndarray     # V_mod(s) - V_base(s)
    tol: float
    strict_tol: float
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def changed(self) -> np.ndarray:
        return self.mod_actions != self.base_actions

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state", "base_action", "mod_action", "v_base", "v_mod", "step_margin", "value_margin"])
            for s in range(len(self.v_base)):
                w.writerow([s, int(self.base_actions[s]), int(self.mod_actions[s]), repr(float(self.v_base[s])),
                            repr(float(self.v_mod[s])), repr(float(self.step_margin[s])),
                            repr(float(self.value_margin[s]))])


def verify_improvement(mdp: TabularMDP, f: np.ndarray, alpha: float, tol: float = 1e-9,
                       mask: Optional[np.ndarray] = None, strict_tol: Optional[float] = None,
                       q_perturbation: float = 0.0, rng: Optional[np.random.Generator] = None,
                       method: str = "linear") -> ImprovementReport:
    """Check the one-step improvement guarantee of the blended policy.

    Computes the greedy bid-eCVR policy, its exact Q, the blended policy and
    its value, then records violations of

    * Q_base(s, mod(s)) >= V_base(s) - tol,
    * V_mod(s) >= V_base(s) - tol,
    * both margins > strict_tol wherever the two policies disagree.

    ``q_perturbation`` adds N(0, sigma^2) noise to Q_base before selecting
    the blended action, to measure (not prove) robustness to estimation error.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeMismatchError(f"score table shape {f.shape} != {(mdp.n_states, mdp.n_actions)}")
    if not scores_unique(f, mask):
        raise NonUniqueScoresError("f must take distinct values over each state's eligible actions")
    strict_tol = tol if strict_tol is None else strict_tol

    base = base_select(f, mask)
    v_base = evaluate(mdp, base, tol=min(tol, 1e-10), method=method)
    q_base = q_from_v(mdp, v_base)
    q_hat = q_base
    if q_perturbation > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        q_hat = q_base + rng.normal(scale=q_perturbation, size=q_base.shape)
    mod = select(f, q_hat, alpha, mask)
    v_mod = evaluate(mdp, mod, tol=min(tol, 1e-10), method=method)

    rows = np.arange(mdp.n_states)
    step_gain = q_base[rows, mod] - v_base
    value = v_mod - v_base
    report = ImprovementReport(alpha, base, mod, v_base, v_mod, q_base, step_gain, value, tol, strict_tol)
    for s in rows:
        if step_gain[s] < -tol:
            report.violations.append((int(s), "one-step", float(step_gain[s])))
        if value[s] < -tol:
            report.violations.append((int(s), "value", float(value[s])))
        if mod[s] != base[s]:
            if step_gain[s] <= strict_tol:
                report.violations.append((int(s), "one-step-strict", float(step_gain[s])))
            if value[s] <= strict_tol:
                report.violations.append((int(s), "value-strict", float(value[s])))
    return report


# --------------------------------------------------------------------------
# Random instance suites


@dataclass
class Instance:
    mdp: TabularMDP
    f: np.ndarray
    mask: np.ndarray


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float = 0.8,
               null_last: bool = True) -> TabularMDP:
    """Dirichlet kernels and uniform rewards; the last action never converts when ``null_last``."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    if null_last:
        r[:, -1] = 0.0
    return TabularMDP(P, r, gamma)


def random_instance(rng: np.random.Generator, n_states: Optional[int] = None, n_actions: Optional[int] = None,
                    gamma: float = 0.8, states_range: Sequence[int] = (5, 20),
                    actions_range: Sequence[int] = (2, 10), eligible_prob: float = 0.7) -> Instance:
    """Random MDP with continuous bid x eCVR scores and a random eligibility mask.

    eCVR is the true conversion rate; bids are lognormal.  The last action is
    the always-eligible null recommendation with score 0.
    """
    S = int(rng.integers(states_range[0], states_range[1] + 1)) if n_states is None else n_states
    A = int(rng.integers(actions_range[0], actions_range[1] + 1)) if n_actions is None else n_actions
    mdp = random_mdp(rng, S, A, gamma)
    bids = rng.lognormal(0.0, 1.0, size=(S, A))
    f = bids * mdp.r_bar
    f[:, -1] = 0.0
    mask = rng.random((S, A)) < eligible_prob
    mask[:, -1] = True
    return Instance(mdp, f, mask)


@dataclass
class SuiteSummary:
    n_instances: int
    n_checks: int
    n_changed_states: int
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def improvement_suite(n_instances: int = 200, alphas: Iterable[float] = (0.25, 0.5, 0.96), seed: int = 0,
                      tol: float = 1e-9, strict_tol: float = 1e-12, gamma: float = 0.8) -> SuiteSummary:
    rng = np.random.default_rng(seed)
    checks = changed = 0
    violations = []
    for k in range(n_instances):
        inst = random_instance(rng, gamma=gamma)
        for alpha in alphas:
            rep = verify_improvement(inst.mdp, inst.f, alpha, tol=tol, mask=inst.mask, strict_tol=strict_tol)
            checks += 1
            changed += int(rep.changed.sum())
            violations.extend((k, alpha) + v for v in rep.violations)
    return SuiteSummary(n_instances, checks, changed, violations)


def endpoint_suite(n_instances: int = 200, seed: int = 0, gamma: float = 0.8) -> list:
    """Mismatches of the alpha = 0 / alpha = 1 endpoint identities on random instances."""
    rng = np.random.default_rng(seed)
    bad = []
    for k in range(n_instances):
        inst = random_instance(rng, gamma=gamma)
        base = base_select(inst.f, inst.mask)
        q = q_from_v(inst.mdp, evaluate_linear(inst.mdp, base))
        if not np.array_equal(select(inst.f, q, 0.0, inst.mask), base):
            bad.append((k, 0.0))
        if not np.array_equal(select(inst.f, q, 1.0, inst.mask), greedy(q, inst.mask)):
            bad.append((k, 1.0))
    return bad


def evaluation_suite(n_instances: int = 50, max_states: int = 200, seed: int = 0, tol: float = 1e-9) -> float:
    """Largest sup-norm gap between iterative and linear-solve evaluation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        S = int(rng.integers(2, max_states + 1))
        A = int(rng.integers(2, 10))
        mdp = random_mdp(rng, S, A, gamma=float(rng.uniform(0.0, 0.95)))
        mu = rng.integers(0, A, size=S)
        worst = max(worst, float(np.max(np.abs(evaluate(mdp, mu, tol) - evaluate_linear(mdp, mu)))))
    return worst


def operator_suite(n_pairs: int = 1000, seed: int = 0) -> dict:
    """Contraction and monotonicity checks of T_mu on random value pairs."""
    rng = np.random.default_rng(seed)
    contraction = monotone = 0
    for _ in range(n_pairs):
        S = int(rng.integers(2, 30))
        A = int(rng.integers(2, 8))
        mdp = random_mdp(rng, S, A, gamma=float(rng.uniform(0.0, 0.99)))
        mu = rng.integers(0, A, size=S)
        V1 = rng.uniform(-5, 5, size=S)
        V2 = rng.uniform(-5, 5, size=S)
        lhs = np.max(np.abs(bellman_apply(mdp, mu, V1) - bellman_apply(mdp, mu, V2)))
        if lhs > mdp.gamma * np.max(np.abs(V1 - V2)) + 1e-12:
            contraction += 1
        hi = V2 + rng.uniform(0, 3, size=S)
        if np.any(bellman_apply(mdp, mu, hi) < bellman_apply(mdp, mu, V2) - 1e-12):
            monotone += 1
    return {"pairs": n_pairs, "contraction_failures": contraction, "monotonicity_failures": monotone}
