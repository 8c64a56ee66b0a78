"""Long-term-value optimization for auction-based recommenders.

One-step policy improvement over a bid-eCVR second-price auction policy,
SARSA estimation of the base policy's Q-function over irregular interaction
gaps, and exact dynamic-programming checks of the improvement guarantee.
"""
from .auction import Eligibility, TableScoring, run_auction, second_price
from .dp_oracle import evaluate, policy_iteration, q_from_v, verify_improvement
from .env import PopulationConfig, TabularMDP, spawn
from .policy import PolicyConfig, base_select, contribution_fraction, select, tune_alpha
from .sarsa import ReplayBuffer, TrainerConfig, TransitionTuple, compute_target, fit, train_step

__version__ = "0.1.0"
