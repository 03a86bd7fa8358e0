"""MOPE and SingleExpert policies as scikit-learn style estimators.

``fit(model)`` builds the decomposition and fetches (or solves) the shared SP
value function.  An episode then alternates ``predict()`` (action for the
current belief) and ``update(action, observation)``; ``reset()`` restores the
uniform initial belief.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state

from . import belief as bel
from .aggregation import (
    AGGREGATORS,
    HIERARCHIES,
    aggregate_majority,
    aggregate_maxq,
    aggregate_parallel_maxq,
    votes_from_sps,
)
from .decomposition import (
    Decomposition,
    DecompositionConfig,
    SubPomdp,
    build_decomposition,
    policy_cache_key,
)
from .model import Action, MarketModel
from .solver import PolicyCache

logger = logging.getLogger(__name__)

BELIEF_MODES = ("exact", "ff", "parallel")


class NotFittedError(RuntimeError):
    pass


class _SharedPolicyMixin:
    def _fetch_policy(self, model: MarketModel, composition: tuple[int, int]):
        cache = self.cache if self.cache is not None else PolicyCache()
        local = MarketModel(*composition, model.obs, model.rew)
        self.pomdp_, self.vf_ = cache.get(policy_cache_key(composition, model), local)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted; call fit(model) first")


class MOPEPolicy(_SharedPolicyMixin, BaseEstimator):
    """Mixture of POMDP experts.

    Parameters
    ----------
    aggregator : {"majority", "maxq", "parallel_maxq"}
    hierarchy : {"H1", "H2", "H3"}
        Used by majority voting only.
    spa, aps : int
        SPs per agent and agents per SP.
    belief_mode : {"exact", "ff", "parallel"} or None
        Global exact joint, Factored Frontier, or per-SP local beliefs.  The
        default is "parallel" for Parallel Max-Q and "ff" otherwise.
    cache : PolicyCache or None
    decomposition_seed : int, Generator-compatible seed or None
    random_state : seed for the Max-Q tie-break
    """

    def __init__(self, aggregator="majority", hierarchy="H3", spa=4, aps=5, belief_mode=None,
                 cache=None, decomposition_seed=None, random_state=None):
        self.aggregator = aggregator
        self.hierarchy = hierarchy
        self.spa = spa
        self.aps = aps
        self.belief_mode = belief_mode
        self.cache = cache
        self.decomposition_seed = decomposition_seed
        self.random_state = random_state

    def _validate(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.hierarchy not in HIERARCHIES:
            raise ValueError(f"hierarchy must be one of {sorted(HIERARCHIES)}")
        mode = self.belief_mode
        if mode is None:
            mode = "parallel" if self.aggregator == "parallel_maxq" else "ff"
        if mode not in BELIEF_MODES:
            raise ValueError(f"belief_mode must be one of {BELIEF_MODES}, got {mode!r}")
        if (self.aggregator == "parallel_maxq") != (mode == "parallel"):
            raise ValueError("parallel_maxq goes with parallel beliefs and only with them")
        return mode

    def fit(self, model: MarketModel, decomposition: Decomposition | None = None):
        self.belief_mode_ = self._validate()
        if decomposition is None:
            cfg = DecompositionConfig.for_aps(self.aps, self.spa, self.decomposition_seed)
            decomposition = build_decomposition(model, cfg)
        comps = {sp.composition for sp in decomposition}
        if len(comps) != 1:
            raise ValueError("decomposition must be uniformly composed")
        self.model_ = model
        self.decomposition_ = decomposition
        self._fetch_policy(model, comps.pop())
        self.reset()
        return self

    def reset(self, random_state=None):
        self._check_fitted()
        if random_state is not None:
            self.random_state = random_state
        self.rng_ = check_random_state(self.random_state)
        mode = self.belief_mode_
        if mode == "exact":
            self.belief_ = bel.uniform_joint(self.model_)
        elif mode == "ff":
            self.belief_ = bel.uniform_factored(self.model_)
        else:
            self.belief_ = bel.uniform_local_set(self.decomposition_)
        self._locals = None
        self._votes = None
        self.last_trace_ = None
        return self

    def local_beliefs(self) -> np.ndarray:
        if self.belief_mode_ == "parallel":
            return self.belief_
        return bel.extract_local_all(self.belief_, self.decomposition_, self.model_)

    def votes(self):
        """Current votes; only SPs whose local belief changed are re-evaluated."""
        self._check_fitted()
        B = self.local_beliefs()
        if self._votes is None:
            votes = votes_from_sps(self.decomposition_.sps, B, self.pomdp_, self.vf_)
        else:
            changed = np.flatnonzero(np.any(B != self._locals, axis=1))
            votes = list(self._votes)
            if len(changed):
                fresh = votes_from_sps([self.decomposition_[k] for k in changed], B[changed],
                                       self.pomdp_, self.vf_)
                for k, v in zip(changed, fresh):
                    votes[k] = v
        self._locals, self._votes = B, votes
        return votes

    def predict(self, X=None) -> Action:
        """Action for the current belief (``X`` is ignored; kept for API symmetry)."""
        votes = self.votes()
        if self.aggregator == "majority":
            trace: dict = {}
            action = aggregate_majority(votes, self.hierarchy, self.model_.action_index, trace)
            self.last_trace_ = trace
        elif self.aggregator == "maxq":
            action = aggregate_maxq(votes, self.rng_)
        else:
            action = aggregate_parallel_maxq(votes, self.belief_, self.rng_)
        return action

    def update(self, action: Action, obs: str):
        mode = self.belief_mode_
        if mode == "exact":
            self.belief_ = bel.exact_update(self.belief_, action, obs, self.model_)
        elif mode == "ff":
            self.belief_ = bel.ff_update(self.belief_, action, obs, self.model_)
        else:
            self.belief_ = bel.parallel_update(self.belief_, action, obs, self.decomposition_,
                                               self.model_)
        return self

    def expert_values(self) -> np.ndarray:
        """``V_k*`` at each SP's current local belief."""
        from .solver import value

        return value(self.vf_, self.local_beliefs())


class SingleExpertPolicy(_SharedPolicyMixin, BaseEstimator):
    """Follow the policy of one randomly selected SP of ``aps`` agents."""

    def __init__(self, aps=5, cache=None, random_state=None):
        self.aps = aps
        self.cache = cache
        self.random_state = random_state

    def fit(self, model: MarketModel, sp: SubPomdp | None = None):
        if sp is None:
            cfg = DecompositionConfig.for_aps(self.aps)
            n_s, n_a = cfg.sellers_per_sp, cfg.advisors_per_sp
            if n_s > model.n_sellers or n_a > model.n_advisors:
                raise ValueError(f"an SP of {n_s}s/{n_a}a does not fit the model")
            rng = check_random_state(self.random_state)
            sellers = rng.choice(model.n_sellers, n_s, replace=False)
            advisors = rng.choice(model.n_advisors, n_a, replace=False)
            sp = SubPomdp(0, tuple(sorted(int(j) for j in sellers)),
                          tuple(sorted(int(i) for i in advisors)))
        self.model_ = model
        self.sp_ = sp
        self._fetch_policy(model, sp.composition)
        self.reset()
        return self

    def reset(self, random_state=None):
        self._check_fitted()
        self.belief_ = bel.uniform_local(self.sp_)
        return self

    def predict(self, X=None) -> Action:
        return votes_from_sps([self.sp_], self.belief_[None, :], self.pomdp_, self.vf_)[0].action

    def update(self, action: Action, obs: str):
        if self.sp_.contains(action):
            self.belief_ = bel.local_update(self.belief_, self.sp_, action, obs, self.model_)
        return self
