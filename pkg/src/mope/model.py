"""Factored seller-and-advisor selection POMDP.

State factors are one quality bit per seller (high/low), one trust bit per
advisor (trustworthy/untrustworthy) and a single transaction status.  Quality
and trust never change; only the status moves, and only under Buy/DNB.

Enumerated quality states use a bit layout shared by the solver and the belief
code: factor ``f`` lives at bit ``f`` of the state index, sellers first
(``0..n_sellers-1``) then advisors.  A set bit means high / trustworthy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property, lru_cache
from typing import NamedTuple, Sequence

import numpy as np

SELLER = "seller"
ADVISOR = "advisor"

SQ = "SQ"
AQ = "AQ"
BUY = "BUY"
DNB = "DNB"

# Transaction status values (the ``sat`` factor).
NOT_STARTED = "not_started"
SATISFACTORY = "satisfactory"
UNSATISFACTORY = "unsatisfactory"
GAVE_UP = "gave_up"
FINISHED = "finished"
SAT_VALUES = (NOT_STARTED, SATISFACTORY, UNSATISFACTORY, GAVE_UP, FINISHED)
TERMINAL_SAT = frozenset(SAT_VALUES[1:])

# Observation symbols.
GOOD = "good"
BAD = "bad"
TRUSTWORTHY = "trustworthy"
UNTRUSTWORTHY = "untrustworthy"
NONE = "none"
OBSERVATIONS = (GOOD, BAD, TRUSTWORTHY, UNTRUSTWORTHY, SATISFACTORY, UNSATISFACTORY, NONE)

LEGAL_OBSERVATIONS = {
    SQ: (GOOD, BAD),
    AQ: (TRUSTWORTHY, UNTRUSTWORTHY),
    BUY: (SATISFACTORY, UNSATISFACTORY),
    DNB: (NONE,),
}


class AgentId(NamedTuple):
    role: str
    index: int


class Action(NamedTuple):
    """A SALE action.

    ``i`` is the asked advisor for queries, ``j`` the queried seller (SQ), the
    queried advisor (AQ) or the bought seller (BUY).  Unused slots are -1.
    """

    kind: str
    i: int = -1
    j: int = -1

    def __str__(self):
        if self.kind == SQ:
            return f"SQ(a{self.i},s{self.j})"
        if self.kind == AQ:
            return f"AQ(a{self.i},a{self.j})"
        if self.kind == BUY:
            return f"BUY(s{self.j})"
        return "DNB"

    @property
    def is_query(self) -> bool:
        return self.kind in (SQ, AQ)

    @property
    def is_terminal(self) -> bool:
        return self.kind in (BUY, DNB)

    def agents(self) -> tuple[AgentId, ...]:
        """Agents the action refers to."""
        if self.kind == SQ:
            return (AgentId(ADVISOR, self.i), AgentId(SELLER, self.j))
        if self.kind == AQ:
            return (AgentId(ADVISOR, self.i), AgentId(ADVISOR, self.j))
        if self.kind == BUY:
            return (AgentId(SELLER, self.j),)
        return ()


DO_NOT_BUY = Action(DNB)


class ModelError(ValueError):
    """Raised when a model operation gets an input outside its domain."""


@dataclass(frozen=True)
class ObservationParams:
    p_true_report_trustworthy: float = 0.8
    p_true_report_untrustworthy: float = 0.3
    p_buy_obs_correct: float = 0.95

    def __post_init__(self):
        if not 0.5 < self.p_true_report_trustworthy <= 1.0:
            raise ModelError("p_true_report_trustworthy must lie in (0.5, 1]")
        if not 0.0 <= self.p_true_report_untrustworthy < 1.0:
            raise ModelError("p_true_report_untrustworthy must lie in [0, 1)")
        if not 0.5 < self.p_buy_obs_correct <= 1.0:
            raise ModelError("p_buy_obs_correct must lie in (0.5, 1]")
        if self.p_true_report_trustworthy <= self.p_true_report_untrustworthy:
            raise ModelError("trustworthy advisors must report truthfully more often")


@dataclass(frozen=True)
class RewardParams:
    cost_advisor_query: float = 1.0
    cost_seller_query: float = 10.0
    reward_success: float = 100.0
    penalty_failure: float = -100.0
    discount: float = 0.95

    def __post_init__(self):
        if self.cost_advisor_query < 0 or self.cost_seller_query < 0:
            raise ModelError("query costs must be non-negative")
        if not 0.0 < self.discount < 1.0:
            raise ModelError("discount must lie in (0, 1)")


@dataclass(frozen=True)
class MarketState:
    """A full assignment of the state factors."""

    seller_high: tuple[bool, ...]
    advisor_trust: tuple[bool, ...]
    sat: str = NOT_STARTED

    @property
    def is_terminal(self) -> bool:
        return self.sat in TERMINAL_SAT


def n_sellers_for(W: int) -> int:
    """Number of sellers in a population of ``W`` agents (20%, half rounded up)."""
    return int(np.floor(0.2 * W + 0.5))


def enumerate_actions(n_sellers: int, n_advisors: int) -> list[Action]:
    """All actions in canonical order: SQ by (i, j), AQ by (i, i'), BUY by j, DNB."""
    if n_sellers < 0 or n_advisors < 0:
        raise ModelError("agent counts must be non-negative")
    actions = [Action(SQ, i, j) for i in range(n_advisors) for j in range(n_sellers)]
    actions += [
        Action(AQ, i, k) for i in range(n_advisors) for k in range(n_advisors) if i != k
    ]
    actions += [Action(BUY, -1, j) for j in range(n_sellers)]
    actions.append(DO_NOT_BUY)
    return actions


def action_count(n_sellers: int, n_advisors: int) -> int:
    return n_advisors * n_sellers + n_advisors * (n_advisors - 1) + n_sellers + 1


@lru_cache(maxsize=64)
def quality_bits(n_factors: int) -> np.ndarray:
    """Boolean matrix ``(2**n, n)``; row ``s`` holds the factor values of state ``s``."""
    idx = np.arange(2**n_factors)[:, None]
    bits = (idx >> np.arange(n_factors)[None, :]) & 1
    bits = bits.astype(bool)
    bits.setflags(write=False)
    return bits


@dataclass(frozen=True)
class MarketModel:
    n_sellers: int
    n_advisors: int
    obs: ObservationParams = field(default_factory=ObservationParams)
    rew: RewardParams = field(default_factory=RewardParams)

    def __post_init__(self):
        if self.n_sellers < 0 or self.n_advisors < 0:
            raise ModelError("agent counts must be non-negative")

    @property
    def n_factors(self) -> int:
        return self.n_sellers + self.n_advisors

    @property
    def discount(self) -> float:
        return self.rew.discount

    @cached_property
    def actions(self) -> tuple[Action, ...]:
        return tuple(enumerate_actions(self.n_sellers, self.n_advisors))

    @cached_property
    def action_index(self) -> dict[Action, int]:
        return {a: k for k, a in enumerate(self.actions)}

    def seller_factor(self, j: int) -> int:
        return j

    def advisor_factor(self, i: int) -> int:
        return self.n_sellers + i

    def factor_of(self, agent: AgentId) -> int:
        if agent.role == SELLER:
            return self.seller_factor(agent.index)
        return self.advisor_factor(agent.index)

    def params_dict(self) -> dict:
        return {"obs": asdict(self.obs), "rew": asdict(self.rew)}

    def params_hash(self) -> str:
        payload = json.dumps(self.params_dict(), sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()[:12]

    def check_action(self, action: Action) -> None:
        if action.kind == SQ:
            ok = 0 <= action.i < self.n_advisors and 0 <= action.j < self.n_sellers
        elif action.kind == AQ:
            ok = (
                0 <= action.i < self.n_advisors
                and 0 <= action.j < self.n_advisors
                and action.i != action.j
            )
        elif action.kind == BUY:
            ok = 0 <= action.j < self.n_sellers
        elif action.kind == DNB:
            ok = True
        else:
            ok = False
        if not ok:
            raise ModelError(f"action {action} is not legal in this model")

    def states(self) -> list[MarketState]:
        """Active states in enumeration order (only sensible for small models)."""
        bits = quality_bits(self.n_factors)
        ns = self.n_sellers
        return [MarketState(tuple(row[:ns]), tuple(row[ns:])) for row in bits.tolist()]

    # -- pointwise model functions ------------------------------------------------

    def transition(self, state: MarketState, action: Action) -> dict[MarketState, float]:
        if state.is_terminal:
            raise ModelError("transition from a terminal state; terminal states are absorbing")
        self.check_action(action)
        if action.is_query:
            return {state: 1.0}
        if action.kind == BUY:
            sat = SATISFACTORY if state.seller_high[action.j] else UNSATISFACTORY
        else:
            sat = GAVE_UP
        return {MarketState(state.seller_high, state.advisor_trust, sat): 1.0}

    def p_true_report(self, trustworthy: bool) -> float:
        if trustworthy:
            return self.obs.p_true_report_trustworthy
        return self.obs.p_true_report_untrustworthy

    def observation_prob(self, action: Action, next_state: MarketState, obs: str) -> float:
        self.check_action(action)
        legal = LEGAL_OBSERVATIONS[action.kind]
        if obs not in legal:
            raise ModelError(f"observation {obs!r} is illegal after {action}")
        if action.kind == DNB:
            return 1.0
        if action.kind == SQ:
            p = self.p_true_report(next_state.advisor_trust[action.i])
            truthful = (obs == GOOD) == next_state.seller_high[action.j]
        elif action.kind == AQ:
            p = self.p_true_report(next_state.advisor_trust[action.i])
            truthful = (obs == TRUSTWORTHY) == next_state.advisor_trust[action.j]
        else:
            p = self.obs.p_buy_obs_correct
            truthful = (obs == SATISFACTORY) == next_state.seller_high[action.j]
        return p if truthful else 1.0 - p

    def reward(self, state: MarketState, action: Action) -> float:
        """Immediate reward; sellers outside the model are not considered."""
        if state.is_terminal:
            return 0.0
        self.check_action(action)
        rew = self.rew
        if action.kind == AQ:
            return -rew.cost_advisor_query
        if action.kind == SQ:
            return -rew.cost_seller_query
        if action.kind == BUY:
            good = state.seller_high[action.j]
        else:
            good = not any(state.seller_high)
        return rew.reward_success if good else rew.penalty_failure

    # -- vectorised helpers over enumerated quality states -------------------------

    def likelihood(self, action: Action, obs: str, bits: np.ndarray | None = None) -> np.ndarray:
        """``P(obs | action, s)`` for every enumerated quality state ``s``.

        For BUY the likelihood is over the pre-purchase quality assignment, which
        fixes the post-purchase status deterministically.
        """
        if bits is None:
            bits = quality_bits(self.n_factors)
        return factor_likelihood(self, action, obs, bits, self.n_sellers)

    def reward_vector(self, action: Action, bits: np.ndarray | None = None) -> np.ndarray:
        if bits is None:
            bits = quality_bits(self.n_factors)
        rew = self.rew
        n = bits.shape[0]
        if action.kind == AQ:
            return np.full(n, -rew.cost_advisor_query)
        if action.kind == SQ:
            return np.full(n, -rew.cost_seller_query)
        if action.kind == BUY:
            good = bits[:, self.seller_factor(action.j)]
        else:
            good = ~bits[:, : self.n_sellers].any(axis=1)
        return np.where(good, rew.reward_success, rew.penalty_failure)


def factor_likelihood(
    model: MarketModel, action: Action, obs: str, bits: np.ndarray, n_sellers: int
) -> np.ndarray:
    """Observation likelihood over rows of ``bits`` laid out sellers-then-advisors."""
    legal = LEGAL_OBSERVATIONS[action.kind]
    if obs not in legal:
        raise ModelError(f"observation {obs!r} is illegal after {action}")
    n = bits.shape[0]
    if action.kind == DNB:
        return np.ones(n)
    if action.kind == BUY:
        p = model.obs.p_buy_obs_correct
        truthful = bits[:, action.j] == (obs == SATISFACTORY)
        return np.where(truthful, p, 1.0 - p)
    trust = bits[:, n_sellers + action.i]
    p = np.where(trust, model.obs.p_true_report_trustworthy, model.obs.p_true_report_untrustworthy)
    if action.kind == SQ:
        truthful = bits[:, action.j] == (obs == GOOD)
    else:
        truthful = bits[:, n_sellers + action.j] == (obs == TRUSTWORTHY)
    return np.where(truthful, p, 1.0 - p)


def relabel(action: Action, sellers: Sequence[int], advisors: Sequence[int]) -> Action:
    """Map an action over local agent indices onto the given global indices."""
    if action.kind == SQ:
        return Action(SQ, advisors[action.i], sellers[action.j])
    if action.kind == AQ:
        return Action(AQ, advisors[action.i], advisors[action.j])
    if action.kind == BUY:
        return Action(BUY, -1, sellers[action.j])
    return action
