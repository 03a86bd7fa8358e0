"""Beliefs over the market: exact joint, Factored Frontier, and per-SP locals.

A :class:`JointBelief` stores ``probs[sat, s]`` over the status values
(:data:`mope.model.SAT_VALUES`) and the enumerated quality states ``s``.  A
:class:`FactoredBelief` keeps one marginal per factor: ``quality[f]`` is the
probability that factor ``f`` is high / trustworthy, ``sat`` the status
marginal.  Local beliefs handed to an SP use the solver layout: ``2**m`` active
states followed by one terminal state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decomposition import Decomposition, SubPomdp
from .model import (
    AQ,
    BUY,
    DNB,
    SAT_VALUES,
    SQ,
    Action,
    MarketModel,
    ModelError,
    factor_likelihood,
    quality_bits,
)

# row indices into SAT_VALUES
I_ACTIVE, I_SATISFACTORY, I_UNSATISFACTORY, I_GAVE_UP = 0, 1, 2, 3
IMPOSSIBLE = 1e-12
JOINT_STATE_CAP = 2**16


class ImpossibleEvidence(ModelError):
    """The observation has (numerically) zero probability under the belief."""


@dataclass
class JointBelief:
    probs: np.ndarray  # (len(SAT_VALUES), 2**n)

    @property
    def n_factors(self) -> int:
        return int(np.log2(self.probs.shape[1]))

    def quality_joint(self) -> np.ndarray:
        """Distribution over quality states with the status summed out."""
        return self.probs.sum(axis=0)

    def marginals(self) -> np.ndarray:
        bits = quality_bits(self.n_factors)
        return self.quality_joint() @ bits

    def sat_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    def copy(self) -> "JointBelief":
        return JointBelief(self.probs.copy())


@dataclass
class FactoredBelief:
    quality: np.ndarray  # (n,) P(high) for sellers, P(trustworthy) for advisors
    sat: np.ndarray  # (len(SAT_VALUES),)

    def marginals(self) -> np.ndarray:
        return self.quality

    def sat_marginal(self) -> np.ndarray:
        return self.sat

    def copy(self) -> "FactoredBelief":
        return FactoredBelief(self.quality.copy(), self.sat.copy())

    def joint(self) -> JointBelief:
        """Product-of-marginals joint (small models only)."""
        n = len(self.quality)
        active = product_states(self.quality[None, :], quality_bits(n))[0]
        return JointBelief(self.sat[:, None] * active[None, :])


def product_states(marginals: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """``out[k, s] = prod_f P(factor f of row k takes bit value bits[s, f])``."""
    m = marginals[:, None, :]
    return np.where(bits[None], m, 1.0 - m).prod(axis=2)


def uniform_joint(model: MarketModel) -> JointBelief:
    N = 2**model.n_factors
    if N > JOINT_STATE_CAP:
        raise ModelError(f"exact joint belief over {N} states exceeds cap {JOINT_STATE_CAP}")
    probs = np.zeros((len(SAT_VALUES), N))
    probs[I_ACTIVE] = 1.0 / N
    return JointBelief(probs)


def uniform_factored(model: MarketModel) -> FactoredBelief:
    sat = np.zeros(len(SAT_VALUES))
    sat[I_ACTIVE] = 1.0
    return FactoredBelief(np.full(model.n_factors, 0.5), sat)


def exact_update(b: JointBelief, a: Action, o: str, model: MarketModel) -> JointBelief:
    """Bayes posterior of ``b`` after action ``a`` and observation ``o``."""
    model.check_action(a)
    bits = quality_bits(model.n_factors)
    probs = b.probs.copy()
    active = probs[I_ACTIVE].copy()
    if a.kind == BUY:
        high = bits[:, model.seller_factor(a.j)]
        probs[I_ACTIVE] = 0.0
        probs[I_SATISFACTORY] += np.where(high, active, 0.0)
        probs[I_UNSATISFACTORY] += np.where(high, 0.0, active)
    elif a.kind == DNB:
        probs[I_ACTIVE] = 0.0
        probs[I_GAVE_UP] += active
    probs *= model.likelihood(a, o, bits)[None, :]
    z = probs.sum()
    if z < IMPOSSIBLE:
        raise ImpossibleEvidence(f"p({o} | b, {a}) is zero")
    return JointBelief(probs / z)


def _pair_posterior(p_x: float, p_y: float, lik: np.ndarray) -> tuple[float, float, float]:
    """Project the posterior of two independent binary factors back to marginals.

    ``lik[x, y]`` is the observation likelihood with index 1 meaning the factor
    is set.  Returns the two posterior marginals and the evidence.
    """
    prior = np.outer([1.0 - p_x, p_x], [1.0 - p_y, p_y])
    post = prior * lik
    z = post.sum()
    if z < IMPOSSIBLE:
        raise ImpossibleEvidence("observation impossible under the factored belief")
    post /= z
    return post[1, :].sum(), post[:, 1].sum(), z


def ff_update(fb: FactoredBelief, a: Action, o: str, model: MarketModel) -> FactoredBelief:
    """Factored Frontier step.

    Every SALE observation depends on at most two quality factors, so the step
    forms the exact posterior over that pair from the product of their current
    marginals and projects it back; all other marginals are untouched.
    """
    model.check_action(a)
    q = fb.quality.copy()
    sat = fb.sat.copy()
    if a.kind in (SQ, AQ):
        fi = model.advisor_factor(a.i)
        fx = model.seller_factor(a.j) if a.kind == SQ else model.advisor_factor(a.j)
        # pair layout: column 0 is the queried factor, column 1 the asked advisor
        pair = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=bool)
        if a.kind == SQ:
            lik = factor_likelihood(model, Action(SQ, 0, 0), o, pair, n_sellers=1)
        else:
            lik = factor_likelihood(model, Action(AQ, 1, 0), o, pair, n_sellers=0)
        q[fx], q[fi], _ = _pair_posterior(q[fx], q[fi], lik.reshape(2, 2))
    elif a.kind == BUY:
        f = model.seller_factor(a.j)
        lik = factor_likelihood(model, Action(BUY, -1, 0), o, np.array([[False], [True]]), 1)
        # the status becomes a deterministic function of q_f, so the (q_f, sat)
        # posterior is the q_f posterior copied onto the two purchase outcomes
        post = np.array([1.0 - q[f], q[f]]) * lik
        z = post.sum()
        if z < IMPOSSIBLE:
            raise ImpossibleEvidence(f"p({o} | fb, {a}) is zero")
        post /= z
        q[f] = post[1]
        active = sat[I_ACTIVE]
        sat[I_ACTIVE] = 0.0
        sat[I_SATISFACTORY] += active * post[1]
        sat[I_UNSATISFACTORY] += active * post[0]
        sat /= sat.sum()
    else:
        factor_likelihood(model, a, o, np.zeros((1, 0), dtype=bool), 0)  # legality check
        sat[I_GAVE_UP] += sat[I_ACTIVE]
        sat[I_ACTIVE] = 0.0
    return FactoredBelief(q, sat)


def _local_index(sp: SubPomdp, model: MarketModel) -> np.ndarray:
    bits = quality_bits(model.n_factors)
    F = sp.factors(model)
    return (bits[:, F].astype(np.intp) << np.arange(len(F))).sum(axis=1)


def extract_local(belief, sp: SubPomdp, model: MarketModel) -> np.ndarray:
    """Local belief of ``sp`` in the solver layout (active states, then terminal)."""
    F = sp.factors(model)
    m = len(F)
    out = np.zeros(2**m + 1)
    if isinstance(belief, FactoredBelief):
        active = belief.sat[I_ACTIVE]
        out[:-1] = active * product_states(belief.quality[F][None, :], quality_bits(m))[0]
        out[-1] = 1.0 - active
        return out
    if isinstance(belief, JointBelief):
        out[:-1] = np.bincount(
            _local_index(sp, model), weights=belief.probs[I_ACTIVE], minlength=2**m
        )
        out[-1] = belief.probs[1:].sum()
        return out
    raise TypeError(f"cannot extract a local belief from {type(belief).__name__}")


def extract_local_all(belief, decomposition: Decomposition, model: MarketModel) -> np.ndarray:
    """Stack of local beliefs, one row per SP (uniform composition required)."""
    if isinstance(belief, FactoredBelief):
        F = np.array([sp.factors(model) for sp in decomposition])
        m = F.shape[1]
        active = belief.sat[I_ACTIVE]
        out = np.empty((len(F), 2**m + 1))
        out[:, :-1] = active * product_states(belief.quality[F], quality_bits(m))
        out[:, -1] = 1.0 - active
        return out
    return np.array([extract_local(belief, sp, model) for sp in decomposition])


def uniform_local(sp: SubPomdp) -> np.ndarray:
    m = len(sp.sellers) + len(sp.advisors)
    b = np.zeros(2**m + 1)
    b[:-1] = 1.0 / 2**m
    return b


def local_update(b: np.ndarray, sp: SubPomdp, a: Action, o: str, model: MarketModel) -> np.ndarray:
    """Exact Bayes update of a local SP belief; ``a`` must belong to the SP."""
    k = sp.local_action_index[a]
    local_model = sp.local_model(model)
    la = local_model.actions[k]
    if la.is_terminal:
        # terminal statuses are collapsed, so the purchase outcome carries no information
        out = np.zeros_like(b)
        out[-1] = 1.0
        return out
    m = local_model.n_factors
    lik = factor_likelihood(local_model, la, o, quality_bits(m), local_model.n_sellers)
    post = b.copy()
    post[:-1] *= lik
    z = post.sum()
    if z < IMPOSSIBLE:
        raise ImpossibleEvidence(f"p({o} | b_{sp.index}, {a}) is zero")
    return post / z


def parallel_update(B, a: Action, o: str, decomposition: Decomposition, model: MarketModel):
    """Update each SP's local belief that contains ``a``; leave the others as they are."""
    out = []
    for b, sp in zip(B, decomposition):
        out.append(local_update(b, sp, a, o, model) if sp.contains(a) else b)
    return np.array(out)


def uniform_local_set(decomposition: Decomposition) -> np.ndarray:
    return np.array([uniform_local(sp) for sp in decomposition])
