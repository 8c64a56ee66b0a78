"""Action selection: the bid-eCVR greedy base policy and the alpha-blended policy.

All selectors work on ``(n, n_actions)`` score / Q arrays together with an
eligibility mask of the same shape.  Ties go to the lowest action index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

ALPHA_GRID: tuple[float, ...] = tuple(
    [round(0.05 * k, 2) for k in range(20)] + [0.96, 0.97, 0.98, 0.99, 1.0]
)


class UndefinedQError(ValueError):
    pass


class ZeroDenominatorError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    kind: Literal["base", "modified", "greedy_q"] = "modified"
    alpha: float = 0.96

    def __post_init__(self):
        if self.kind not in ("base", "modified", "greedy_q"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")

    @property
    def effective_alpha(self) -> float:
        if self.kind == "base":
            return 0.0
        if self.kind == "greedy_q":
            return 1.0
        return self.alpha


def _masked_argmax(values: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    values = np.atleast_2d(values)
    if mask is not None:
        values = np.where(mask, values, -np.inf)
    return np.argmax(values, axis=1)


def base_select(scores: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """argmax of f over the eligible set, per row."""
    return _masked_argmax(scores, mask)


def blended_scores(scores: np.ndarray, q_values: np.ndarray, alpha: float) -> np.ndarray:
    return (1.0 - alpha) * np.asarray(scores, dtype=float) + alpha * np.asarray(q_values, dtype=float)


def select(scores: np.ndarray, q_values: np.ndarray, alpha: float, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """argmax over eligible actions of (1 - alpha) f + alpha Q-hat, per row."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    q_values = np.atleast_2d(q_values)
    if alpha > 0.0:
        eligible_q = q_values if mask is None else q_values[np.atleast_2d(mask)]
        if not np.all(np.isfinite(eligible_q)):
            raise UndefinedQError("Q-hat is not finite on an eligible (state, action) pair")
    return _masked_argmax(blended_scores(scores, q_values, alpha), mask)


def contribution_fraction(f, q, alpha: float):
    """Share of the blended score contributed by the long-run term, alpha Q / blend.

    Raises :class:`ZeroDenominatorError` when the blended score is 0.
    """
    f = np.asarray(f, dtype=float)
    q = np.asarray(q, dtype=float)
    num = alpha * q
    den = (1.0 - alpha) * f + num
    if np.any(den == 0):
        raise ZeroDenominatorError("blended score is zero")
    out = num / den
    return float(out) if out.ndim == 0 else out


def _safe_fraction(f: np.ndarray, q: np.ndarray, alpha: float) -> np.ndarray:
    # A zero blended score means neither term contributes; count it as 0.
    num = alpha * q
    den = (1.0 - alpha) * f + num
    out = np.zeros_like(den, dtype=float)
    nz = den != 0
    out[nz] = num[nz] / den[nz]
    return out


def induced_contribution(scores: np.ndarray, q_values: np.ndarray, alpha: float,
                         mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Contribution fraction of the action each row's blended policy would pick."""
    actions = select(scores, q_values, alpha, mask)
    rows = np.arange(len(actions))
    return _safe_fraction(np.atleast_2d(scores)[rows, actions], np.atleast_2d(q_values)[rows, actions], alpha)


def tune_alpha(scores: np.ndarray, q_values: np.ndarray, cap: float,
               mask: Optional[np.ndarray] = None, grid: Sequence[float] = ALPHA_GRID) -> float:
    """Largest grid alpha whose mean induced contribution fraction is <= cap.

    ``scores``/``q_values`` are evaluated on a sample of states.  Returns 0.0
    when no grid point is feasible.
    """
    if not 0.0 < cap <= 1.0:
        raise ValueError(f"cap must be in (0, 1], got {cap}")
    scores = np.atleast_2d(scores)
    if scores.shape[0] == 0:
        raise ValueError("empty state sample")
    best = 0.0
    for alpha in sorted(grid):
        if induced_contribution(scores, q_values, alpha, mask).mean() <= cap:
            best = alpha
    return float(best)
