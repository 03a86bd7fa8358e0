"""Property suites run by ``mope verify`` (each returns a result dict with ``passed``)."""

from __future__ import annotations

import time

import numpy as np

from . import belief as bel
from .aggregation import votes_from_sps, winning_vote
from .decomposition import DecompositionConfig, build_decomposition, policy_cache_key
from .model import (
    LEGAL_OBSERVATIONS,
    MarketModel,
    action_count,
    enumerate_actions,
    n_sellers_for,
    quality_bits,
)
from .simulator import Z95, sample_observation, GroundTruth
from .solver import PolicyCache, value

TABLE1 = {6: 27, 7: 38, 8: 45, 9: 59, 10: 75, 25: 486, 50: 1971, 75: 4456, 100: 7941}


def table1() -> dict:
    rows = []
    for W, expected in TABLE1.items():
        n_s = n_sellers_for(W)
        got = len(enumerate_actions(n_s, W - n_s))
        rows.append({"W": W, "n_sellers": n_s, "actions": got, "expected": expected,
                     "formula": action_count(n_s, W - n_s)})
    passed = all(r["actions"] == r["expected"] == r["formula"] for r in rows)
    return {"suite": "table1", "passed": passed, "rows": rows}


def ff_onestep(max_W: int = 8, priors_per_split: int = 3, seed: int = 0, tol: float = 1e-9) -> dict:
    """FF marginals vs. marginals of the exact posterior, one step from random product priors."""
    rng = np.random.default_rng(seed)
    worst, worst_case, checked = 0.0, None, 0
    for W in range(1, max_W + 1):
        for n_s in range(W + 1):
            model = MarketModel(n_s, W - n_s)
            for _ in range(priors_per_split):
                fb = bel.uniform_factored(model)
                fb.quality[:] = rng.uniform(0.02, 0.98, W)
                joint = fb.joint()
                for a in model.actions:
                    for o in LEGAL_OBSERVATIONS[a.kind]:
                        e = bel.exact_update(joint, a, o, model)
                        f = bel.ff_update(fb, a, o, model)
                        dev = max(np.abs(e.marginals() - f.marginals()).max(initial=0.0),
                                  np.abs(e.sat_marginal() - f.sat_marginal()).max())
                        checked += 1
                        if dev > worst:
                            worst = dev
                            worst_case = {"n_sellers": n_s, "n_advisors": W - n_s,
                                          "action": str(a), "obs": o,
                                          "prior": fb.quality.tolist()}
    return {"suite": "ff_onestep", "passed": worst <= tol, "max_deviation": worst,
            "cases": checked, "worst_case": worst_case}


def disjoint_setting(W: int = 10, seed: int = 0):
    """Market of ``W`` agents split into disjoint 5-agent SPs (1 seller, 4 advisors)."""
    n_s = n_sellers_for(W)
    model = MarketModel(n_s, W - n_s)
    dec = build_decomposition(model, DecompositionConfig(spa=1, aps=5, seed=seed))
    if not dec.is_partition():
        raise AssertionError("expected a partition")
    return model, dec


def product_of_locals(B: np.ndarray, dec, model: MarketModel) -> np.ndarray:
    """``prod_k b_k(s_k)`` over the active global quality states."""
    bits = quality_bits(model.n_factors)
    out = np.ones(len(bits))
    for b, sp in zip(B, dec):
        F = sp.factors(model)
        idx = (bits[:, F].astype(np.intp) << np.arange(len(F))).sum(axis=1)
        out *= b[:-1][idx]
    return out


def lemma_beliefs(n_sequences: int = 1000, max_len: int = 10, seed: int = 0,
                  tol: float = 1e-8) -> dict:
    """Parallel local beliefs vs. the exact joint posterior on a disjoint decomposition."""
    model, dec = disjoint_setting(10, seed)
    rng = np.random.default_rng(seed)
    queries = [a for sp in dec for a in sp.global_actions if a.is_query]
    worst, worst_case = 0.0, None
    for n in range(n_sequences):
        joint = bel.uniform_joint(model)
        B = bel.uniform_local_set(dec)
        history = []
        for _ in range(rng.integers(1, max_len + 1)):
            a = queries[rng.integers(len(queries))]
            o = LEGAL_OBSERVATIONS[a.kind][rng.integers(2)]
            joint = bel.exact_update(joint, a, o, model)
            B = bel.parallel_update(B, a, o, dec, model)
            history.append((str(a), o))
            dev = np.abs(product_of_locals(B, dec, model) - joint.probs[0]).max()
            if dev > worst:
                worst, worst_case = dev, {"sequence": n, "history": list(history)}
    return {"suite": "lemma_beliefs", "passed": worst <= tol, "max_deviation": worst,
            "sequences": n_sequences, "worst_case": worst_case}


def theorem_lowerbound(episodes: int = 5000, seed: int = 0, cache: PolicyCache | None = None,
                       max_steps: int = 100) -> dict:
    """Monte-Carlo value of Parallel Max-Q vs. the best single expert's value.

    Ground truth is drawn from the uniform factored prior.  As in the bound,
    every reward is the winning SP's own reward, so DNB pays off when that
    SP's sellers are all low.
    """
    cache = cache if cache is not None else PolicyCache()
    model, dec = disjoint_setting(10, seed)
    comp = dec[0].composition
    pomdp, vf = cache.get(policy_cache_key(comp, model), MarketModel(*comp, model.obs, model.rew))
    bound = float(value(vf, bel.uniform_local_set(dec)).max())
    rng = np.random.default_rng(seed)
    ties = np.random.RandomState(seed)
    t0 = time.perf_counter()
    values = np.empty(episodes)
    for e in range(episodes):
        flags = rng.random(model.n_factors) < 0.5
        gt = GroundTruth(tuple(flags[:model.n_sellers]), tuple(flags[model.n_sellers:]))
        B = bel.uniform_local_set(dec)
        total, g = 0.0, 1.0
        for t in range(max_steps + 1):
            votes = votes_from_sps(dec.sps, B, pomdp, vf)
            winner = winning_vote(votes, ties)
            a = winner.action
            sp = dec[winner.sp_index]
            local = sp.local_model(model)
            state = GroundTruth(tuple(gt.seller_high[j] for j in sp.sellers),
                                tuple(gt.advisor_trust[i] for i in sp.advisors)).state()
            la = local.actions[sp.local_action_index[a]]
            total += g * local.reward(state, la)
            g *= model.discount
            if a.is_terminal or t == max_steps:
                break
            o = sample_observation(model, gt, a, rng)
            B = bel.parallel_update(B, a, o, dec, model)
        values[e] = total
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(episodes))
    return {"suite": "theorem_lowerbound", "passed": mean >= bound - 2 * se,
            "v_pmq": mean, "se": se, "ci95": Z95 * se, "best_single_expert": bound,
            "episodes": episodes, "seconds": time.perf_counter() - t0}


SUITES = {
    "table1": table1,
    "ff_onestep": ff_onestep,
    "lemma_beliefs": lemma_beliefs,
    "theorem_lowerbound": theorem_lowerbound,
}
