"""Random splitting of a market into uniformly composed sub-POMDPs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from sklearn.utils import check_random_state

from .model import ADVISOR, SELLER, Action, AgentId, MarketModel, relabel
from .solver import DEFAULT_STATE_CAP, EnumeratedPomdp, build_pomdp


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class DecompositionConfig:
    spa: int = 4
    aps: int = 5
    sellers_per_sp: int = 1
    advisors_per_sp: int = 4
    seed: int | None = None

    def __post_init__(self):
        if self.sellers_per_sp + self.advisors_per_sp != self.aps:
            raise DecompositionError("sellers_per_sp + advisors_per_sp must equal aps")
        if self.spa < 1:
            raise DecompositionError("spa must be at least 1")
        if self.aps < 2:
            raise DecompositionError("aps must be at least 2")
        if self.sellers_per_sp < 0 or self.advisors_per_sp < 0:
            raise DecompositionError("composition counts must be non-negative")

    @classmethod
    def for_aps(cls, aps: int, spa: int = 4, seed=None) -> "DecompositionConfig":
        """Composition keeping the population's 1:4 seller/advisor ratio."""
        n_s = max(1, int(math.floor(0.2 * aps + 0.5)))
        return cls(spa=spa, aps=aps, sellers_per_sp=n_s, advisors_per_sp=aps - n_s, seed=seed)


@dataclass(frozen=True, eq=False)
class SubPomdp:
    """One SP: its member agents (sorted) and the local-to-global maps."""

    index: int
    sellers: tuple[int, ...]
    advisors: tuple[int, ...]

    @property
    def members(self) -> tuple[AgentId, ...]:
        return tuple(AgentId(SELLER, j) for j in self.sellers) + tuple(
            AgentId(ADVISOR, i) for i in self.advisors
        )

    @property
    def composition(self) -> tuple[int, int]:
        return len(self.sellers), len(self.advisors)

    def local_model(self, model: MarketModel) -> MarketModel:
        return MarketModel(len(self.sellers), len(self.advisors), model.obs, model.rew)

    def factors(self, model: MarketModel) -> np.ndarray:
        """Global factor index of each local factor (sellers first, then advisors)."""
        return np.array(
            [model.seller_factor(j) for j in self.sellers]
            + [model.advisor_factor(i) for i in self.advisors],
            dtype=np.intp,
        )

    @cached_property
    def global_actions(self) -> tuple[Action, ...]:
        local = MarketModel(len(self.sellers), len(self.advisors)).actions
        return tuple(relabel(a, self.sellers, self.advisors) for a in local)

    @cached_property
    def local_action_index(self) -> dict[Action, int]:
        return {a: k for k, a in enumerate(self.global_actions)}

    def contains(self, action: Action) -> bool:
        return action in self.local_action_index

    def to_dict(self) -> dict:
        return {"index": self.index, "sellers": list(self.sellers), "advisors": list(self.advisors)}


@dataclass(frozen=True, eq=False)
class Decomposition:
    sps: tuple[SubPomdp, ...]
    config: DecompositionConfig

    def __len__(self):
        return len(self.sps)

    def __iter__(self):
        return iter(self.sps)

    def __getitem__(self, k):
        return self.sps[k]

    def membership_counts(self, model: MarketModel) -> tuple[np.ndarray, np.ndarray]:
        sellers = np.zeros(model.n_sellers, dtype=int)
        advisors = np.zeros(model.n_advisors, dtype=int)
        for sp in self.sps:
            sellers[list(sp.sellers)] += 1
            advisors[list(sp.advisors)] += 1
        return sellers, advisors

    def is_partition(self) -> bool:
        seen: set[AgentId] = set()
        for sp in self.sps:
            members = set(sp.members)
            if seen & members:
                return False
            seen |= members
        return True

    def to_json(self) -> str:
        cfg = self.config
        return json.dumps(
            {
                "spa": cfg.spa,
                "aps": cfg.aps,
                "sellers_per_sp": cfg.sellers_per_sp,
                "advisors_per_sp": cfg.advisors_per_sp,
                "seed": cfg.seed,
                "sps": [sp.to_dict() for sp in self.sps],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "Decomposition":
        data = json.loads(text)
        cfg = DecompositionConfig(
            data["spa"], data["aps"], data["sellers_per_sp"], data["advisors_per_sp"], data["seed"]
        )
        sps = tuple(
            SubPomdp(d["index"], tuple(d["sellers"]), tuple(d["advisors"])) for d in data["sps"]
        )
        return cls(sps, cfg)


def n_subpomdps(W: int, spa: int, aps: int) -> int:
    return -(-W * spa // aps)


def _deal(n_agents: int, per_sp: int, K: int, rng) -> list[list[int]]:
    """Fill ``K`` groups of ``per_sp`` distinct agents, appearances as even as possible.

    Agents are laid out in a random order, each repeated ``floor`` or ``ceil`` of
    the mean appearance count, and the resulting token stream is dealt
    round-robin; consecutive tokens of one agent land in distinct groups
    because no agent appears more than ``K`` times.
    """
    groups: list[list[int]] = [[] for _ in range(K)]
    slots = K * per_sp
    if slots == 0:
        return groups
    base, extra = divmod(slots, n_agents)
    counts = np.full(n_agents, base)
    counts[rng.permutation(n_agents)[:extra]] += 1
    order = rng.permutation(n_agents)
    tokens = np.repeat(order, counts[order])
    sp_order = rng.permutation(K)
    for t, agent in enumerate(tokens):
        groups[sp_order[t % K]].append(int(agent))
    return groups


def build_decomposition(model: MarketModel, cfg: DecompositionConfig) -> Decomposition:
    """``ceil(W * spa / aps)`` uniformly composed SPs drawn at random (seeded)."""
    n_s, n_a = cfg.sellers_per_sp, cfg.advisors_per_sp
    if n_s > model.n_sellers or n_a > model.n_advisors:
        raise DecompositionError(
            f"composition {n_s}s/{n_a}a does not fit {model.n_sellers}s/{model.n_advisors}a"
        )
    if n_s == 0 and n_a == 0:
        raise DecompositionError("empty composition")
    W = model.n_factors
    K = n_subpomdps(W, cfg.spa, cfg.aps)
    rng = check_random_state(cfg.seed)
    seller_groups = _deal(model.n_sellers, n_s, K, rng)
    advisor_groups = _deal(model.n_advisors, n_a, K, rng)
    sps = tuple(
        SubPomdp(k, tuple(sorted(seller_groups[k])), tuple(sorted(advisor_groups[k])))
        for k in range(K)
    )
    return Decomposition(sps, cfg)


def single_sp(model: MarketModel, sellers, advisors, index: int = 0) -> SubPomdp:
    return SubPomdp(index, tuple(sorted(sellers)), tuple(sorted(advisors)))


def project_subpomdp(model: MarketModel, sp: SubPomdp,
                     state_cap: int = DEFAULT_STATE_CAP) -> EnumeratedPomdp:
    """Flat sub-POMDP over the SP's own factors, actions and observations.

    DNB is rewarded against the SP's own sellers only.  Local action ``k``
    corresponds to ``sp.global_actions[k]``.
    """
    for j in sp.sellers:
        if not 0 <= j < model.n_sellers:
            raise DecompositionError(f"seller {j} not in model")
    for i in sp.advisors:
        if not 0 <= i < model.n_advisors:
            raise DecompositionError(f"advisor {i} not in model")
    return build_pomdp(sp.local_model(model), state_cap)


def policy_cache_key(sp: SubPomdp | tuple[int, int], model: MarketModel) -> str:
    """SPs with equal composition and model parameters share one value function."""
    n_s, n_a = sp.composition if isinstance(sp, SubPomdp) else sp
    return f"s{n_s}a{n_a}-{model.params_hash()}"
