"""Batched assignment policies: epsilon-greedy, Bernoulli Thompson sampling, fixed share.

Every unit in a batch is randomized independently given the state at the
start of the batch, so the treated count of a batch is random.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .stats import beta_sample, prob_beta_greater

EPS_GREEDY = "eps-greedy"
THOMPSON = "thompson"
FIXED = "fixed"

# greedy_arm() result when no arm is strictly better (or one is unobserved)
TIE = -1


@dataclass(frozen=True)
class PolicyConfig:
    kind: str
    epsilon: Optional[float] = None
    prior_alpha: float = 1.0
    prior_beta: float = 1.0
    fixed_share: Optional[float] = None
    clip: Optional[float] = None

    def __post_init__(self):
        if self.clip is not None:
            if self.kind != THOMPSON:
                raise ValueError("probability clipping applies to Thompson sampling only")
            if not 0.0 < self.clip < 0.5:
                raise ValueError("clip must lie in (0, 0.5)")
        if self.kind == EPS_GREEDY:
            if self.epsilon is None or not 0.0 <= self.epsilon <= 1.0:
                raise ValueError("epsilon-greedy needs epsilon in [0, 1]")
        elif self.kind == THOMPSON:
            if not (self.prior_alpha > 0 and self.prior_beta > 0):
                raise ValueError("Beta prior parameters must be positive")
        elif self.kind == FIXED:
            if self.fixed_share is None or not 0.0 < self.fixed_share < 1.0:
                raise ValueError("fixed share must lie in (0, 1)")
        else:
            raise ValueError(f"unknown policy {self.kind!r}")

    @classmethod
    def epsilon_greedy(cls, epsilon: float = 0.2) -> "PolicyConfig":
        return cls(EPS_GREEDY, epsilon=float(epsilon))

    @classmethod
    def thompson(cls, prior_alpha: float = 1.0, prior_beta: float = 1.0,
                 clip: Optional[float] = None) -> "PolicyConfig":
        return cls(THOMPSON, prior_alpha=float(prior_alpha), prior_beta=float(prior_beta),
                   clip=None if clip is None else float(clip))

    @classmethod
    def fixed(cls, share: float = 0.5) -> "PolicyConfig":
        return cls(FIXED, fixed_share=float(share))

    @property
    def name(self) -> str:
        if self.kind == EPS_GREEDY:
            return f"eps-greedy(eps={self.epsilon:g})"
        if self.kind == THOMPSON:
            clip = f",clip={self.clip:g}" if self.clip is not None else ""
            return f"thompson(prior=Beta({self.prior_alpha:g},{self.prior_beta:g}){clip})"
        return f"fixed(pi={self.fixed_share:g})"

    @property
    def state_free_draws(self) -> bool:
        """True when a batch consumes exactly one uniform per unit whatever the state."""
        return self.kind in (EPS_GREEDY, FIXED) or self.clip is not None


@dataclass(frozen=True)
class PolicyState:
    """Cumulative history, indexed by arm (control first)."""

    counts: tuple = (0, 0)
    sums: tuple = (0.0, 0.0)
    alpha: tuple = (1.0, 1.0)
    beta: tuple = (1.0, 1.0)

    @classmethod
    def initial(cls, cfg: PolicyConfig) -> "PolicyState":
        a, b = cfg.prior_alpha, cfg.prior_beta
        return cls((0, 0), (0.0, 0.0), (a, a), (b, b))

    def mean(self, arm: int) -> Optional[float]:
        return self.sums[arm] / self.counts[arm] if self.counts[arm] else None


def greedy_arm(state: PolicyState) -> int:
    """Arm with the strictly higher historical mean, or ``TIE``."""
    m0, m1 = state.mean(0), state.mean(1)
    if m0 is None or m1 is None or m0 == m1:
        return TIE
    return 1 if m1 > m0 else 0


def assign_from_uniform(cfg: PolicyConfig, greedy, u: np.ndarray) -> np.ndarray:
    """Arms for state-free policies from one uniform per unit.

    Epsilon-greedy explores when ``u < eps`` and then reuses ``u/eps`` as the
    coin for a uniform arm, so the non-greedy arm has probability ``eps/2``.
    ``greedy`` may be an array broadcasting against ``u`` (one entry per
    replication) and ``TIE`` means uniform assignment.
    """
    if cfg.kind == FIXED:
        return (u < cfg.fixed_share).astype(np.int8)
    eps = cfg.epsilon
    greedy = np.asarray(greedy)
    uniform_coin = (u < 0.5).astype(np.int8)
    explore_coin = (u < 0.5 * eps).astype(np.int8)
    return np.where(greedy == TIE, uniform_coin, np.where(u < eps, explore_coin, greedy)).astype(np.int8)


def thompson_probability(cfg: PolicyConfig, alpha, beta):
    """Probability that a unit is treated under (clipped) Thompson sampling.

    ``alpha``/``beta`` have the arm on the last axis, control first.  The
    posterior probability that the treated arm is better is clipped to
    ``[clip, 1 - clip]`` when the policy has a clip.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    q = prob_beta_greater(alpha[..., 1], beta[..., 1], alpha[..., 0], beta[..., 0])
    if cfg.clip is not None:
        q = np.clip(q, cfg.clip, 1.0 - cfg.clip)
    return q


def assign_batch(cfg: PolicyConfig, state: PolicyState, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Assign ``batch_size`` units; returns an int8 array of arms."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if cfg.kind == THOMPSON and cfg.clip is not None:
        p = thompson_probability(cfg, state.alpha, state.beta)
        return (rng.random(batch_size) < p).astype(np.int8)
    if cfg.kind == THOMPSON:
        theta1 = beta_sample(state.alpha[1], state.beta[1], rng, batch_size)
        theta0 = beta_sample(state.alpha[0], state.beta[0], rng, batch_size)
        return (theta1 > theta0).astype(np.int8)
    greedy = greedy_arm(state) if cfg.kind == EPS_GREEDY else TIE
    return assign_from_uniform(cfg, greedy, rng.random(batch_size))


def update_state(cfg: PolicyConfig, state: PolicyState, batch_outcomes: Iterable) -> PolicyState:
    """Fold a batch of ``(arm, value)`` pairs into the state."""
    pairs = list(batch_outcomes)
    if pairs:
        arms = np.asarray([a for a, _ in pairs], dtype=np.int64)
        values = np.asarray([v for _, v in pairs], dtype=float)
    else:
        arms = np.zeros(0, dtype=np.int64)
        values = np.zeros(0)
    return update_state_arrays(cfg, state, arms, values)


def update_state_arrays(cfg: PolicyConfig, state: PolicyState, arms: np.ndarray, values: np.ndarray) -> PolicyState:
    if np.any((arms != 0) & (arms != 1)):
        raise ValueError("arms must be 0 or 1")
    treated = arms == 1
    n1 = int(np.count_nonzero(treated))
    n0 = len(arms) - n1
    # masked sums in this form match the vectorized Monte Carlo path bit for bit
    s1 = float(np.where(treated, values, 0.0).sum())
    s0 = float(np.where(treated, 0.0, values).sum())
    new = replace(state, counts=(state.counts[0] + n0, state.counts[1] + n1),
                  sums=(state.sums[0] + s0, state.sums[1] + s1))
    if cfg.kind == THOMPSON:
        if np.any((values != 0.0) & (values != 1.0)):
            raise ValueError("Thompson sampling needs binary outcomes")
        succ1, succ0 = s1, s0
        new = replace(new, alpha=(state.alpha[0] + succ0, state.alpha[1] + succ1),
                      beta=(state.beta[0] + n0 - succ0, state.beta[1] + n1 - succ1))
    return new
