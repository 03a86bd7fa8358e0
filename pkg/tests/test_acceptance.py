"""One test per acceptance criterion; each prints a single PASS/FAIL line.

Monte-Carlo cells are memoised per session so criteria that look at the same
configuration share one run.  All cells use master seed 0 and 500 episodes.
"""

import time

import numpy as np
import pytest
from joblib import cpu_count
from scipy import stats

from mope import verify
from mope.decomposition import DecompositionConfig, build_decomposition
from mope.model import MarketModel, n_sellers_for
from mope.simulator import (
    MethodSpec,
    compute_v_maxv,
    compute_v_qmdp,
    run_cell,
    run_one,
)
from mope.solver import PolicyCache, qmdp_value, value

from oracles import all_states, expectimax

EPISODES = 500
SEED = 0
SMALL_W = (6, 7, 8, 9, 10)
GRID_W = (10, 25, 50, 100)
WORKERS = cpu_count()

SE5 = MethodSpec("single_expert")
H1 = MethodSpec("mope", "majority", "H1")
H2 = MethodSpec("mope", "majority", "H2")
H3 = MethodSpec("mope", "majority", "H3")
H3_EXACT = MethodSpec("mope", "majority", "H3", belief_mode="exact")
H3S2 = MethodSpec("mope", "majority", "H3", spa=2)
H3S8 = MethodSpec("mope", "majority", "H3", spa=8)
MAXQ = MethodSpec("mope", "maxq")
PMQ = MethodSpec("mope", "parallel_maxq")

_cells: dict = {}


def cell(spec, W, cache):
    key = (spec, W)
    if key not in _cells:
        _cells[key] = run_cell(spec, W, EPISODES, SEED, cache, workers=WORKERS)
    return _cells[key]


def vmaxv(W, cache):
    key = ("vmaxv", W)
    if key not in _cells:
        _cells[key] = compute_v_maxv(W, EPISODES, SEED, cache, workers=WORKERS)
    return _cells[key]


def report(n, ok, detail):
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def fmt(c):
    return f"{c.mean_value:.2f}±{c.ci_value:.2f}"


def test_criterion_01_table1_action_counts():
    t0 = time.perf_counter()
    r = verify.table1()
    dt = time.perf_counter() - t0
    got = {row["W"]: row["actions"] for row in r["rows"]}
    ok = r["passed"] and got == verify.TABLE1 and dt < 1.0
    assert report(1, ok, f"|A| by W {got} in {dt:.3f}s")


def test_criterion_02_lemma_belief_equivalence():
    t0 = time.perf_counter()
    r = verify.lemma_beliefs(n_sequences=1000, max_len=10, seed=SEED)
    dt = time.perf_counter() - t0
    ok = r["max_deviation"] <= 1e-8 and dt < 60
    assert report(2, ok, f"max deviation {r['max_deviation']:.2e} over 1000 sequences, {dt:.1f}s")


def test_criterion_03_theorem_lower_bound(cache):
    t0 = time.perf_counter()
    r = verify.theorem_lowerbound(episodes=5000, seed=SEED, cache=cache)
    dt = time.perf_counter() - t0
    ok = r["v_pmq"] >= r["best_single_expert"] - 2 * r["se"] and dt < 300
    assert report(3, ok, f"V_pmq {r['v_pmq']:.2f} (SE {r['se']:.2f}) vs "
                         f"max_k V_k* {r['best_single_expert']:.2f}, {dt:.0f}s")


def test_criterion_04_maxq_vs_parallel_maxq(cache):
    parts, significant, never_below = [], 0, True
    for W in SMALL_W:
        a, b = cell(MAXQ, W, cache), cell(PMQ, W, cache)
        assert np.array_equal(a.ids, b.ids)
        d = a.values - b.values
        p = stats.ttest_rel(a.values, b.values, alternative="greater").pvalue if d.any() else 1.0
        never_below &= a.mean_value >= b.mean_value
        significant += p < 0.05
        parts.append(f"W={W}: {a.mean_value:.2f} vs {b.mean_value:.2f} (p={p:.3f})")
    ok = never_below and significant >= 3
    assert report(4, ok, f"{significant}/5 significant; " + "; ".join(parts))


def test_criterion_05_ff_fidelity(cache):
    parts, ok = [], True
    for W in SMALL_W:
        ff, ex = cell(H3, W, cache), cell(H3_EXACT, W, cache)
        gap = abs(ff.mean_value - ex.mean_value)
        tol = max(10.0, 0.15 * abs(ex.mean_value))
        ok &= gap <= tol
        parts.append(f"W={W}: |{ff.mean_value:.2f} - {ex.mean_value:.2f}| = {gap:.2f} (tol {tol:.1f})")
    assert report(5, ok, "; ".join(parts))


def test_criterion_06_hierarchy_spa_and_scaling_trends(cache):
    h3_wins = sum(cell(H3, W, cache).mean_value >= cell(H1, W, cache).mean_value
                  and cell(H3, W, cache).mean_value >= cell(H2, W, cache).mean_value
                  for W in GRID_W)
    ok_a = h3_wins >= 4
    ok_b = True
    for W in (50, 100):
        s2, s4, s8 = cell(H3S2, W, cache), cell(H3, W, cache), cell(H3S8, W, cache)
        ok_b &= s2.mean_value < s4.mean_value < s8.mean_value
        ok_b &= s8.mean_value - s8.ci_value > s2.mean_value + s2.ci_value
    se = [cell(SE5, W, cache).mean_value for W in GRID_W]
    lo, hi = cell(H3, 10, cache), cell(H3, 100, cache)
    ok_c = (max(se) - min(se) < 10.0) and (hi.mean_value - hi.ci_value > lo.mean_value + lo.ci_value)
    detail = (
        f"(a) H3>=H1,H2 in {h3_wins}/4 "
        + " ".join(f"W={W}:H1 {cell(H1, W, cache).mean_value:.1f}/H2 {cell(H2, W, cache).mean_value:.1f}"
                   f"/H3 {cell(H3, W, cache).mean_value:.1f}" for W in GRID_W)
        + f" [{'ok' if ok_a else 'no'}]; (b) SPA 2/4/8 "
        + " ".join(f"W={W}: {fmt(cell(H3S2, W, cache))} {fmt(cell(H3, W, cache))} "
                   f"{fmt(cell(H3S8, W, cache))}" for W in (50, 100))
        + f" [{'ok' if ok_b else 'no'}]; (c) SE range {max(se) - min(se):.1f} "
        f"({', '.join(f'{v:.1f}' for v in se)}), H3 W=10 {fmt(lo)} W=100 {fmt(hi)} "
        f"[{'ok' if ok_c else 'no'}]"
    )
    assert report(6, ok_a and ok_b and ok_c, detail)


def test_criterion_07_value_envelope(cache):
    parts, ok = [], True
    for W in GRID_W:
        se, h3s8, mv = cell(SE5, W, cache), cell(H3S8, W, cache), vmaxv(W, cache)
        n_s = n_sellers_for(W)
        v_qmdp = compute_v_qmdp(MarketModel(n_s, W - n_s))
        chain = (se.mean_value <= h3s8.mean_value <= mv.mean_value
                 <= v_qmdp + mv.ci_value)
        zero_error = mv.mean_error == 0.0
        ok &= chain and zero_error
        parts.append(f"W={W}: SE {se.mean_value:.1f} <= H3S8 {h3s8.mean_value:.1f} <= "
                     f"Vmaxv {mv.mean_value:.1f} <= Vqmdp {v_qmdp:.0f}+{mv.ci_value:.1f} "
                     f"[{'ok' if chain else 'no'}], Vmaxv error {mv.mean_error:.3f}")
    assert report(7, ok, "; ".join(parts))


def test_criterion_08_solver_oracle(cache):
    from mope.decomposition import policy_cache_key

    gamma = 0.95
    tol = gamma**4 * 100
    worst, ok = 0.0, True
    rng = np.random.default_rng(SEED)
    comps = [(0, 1), (1, 0), (2, 0), (0, 2), (1, 1)]  # every SP of one or two agents
    for comp in comps:
        model = MarketModel(*comp)
        pomdp, vf = cache.get(policy_cache_key(comp, model), model)
        states = all_states(model)
        weights = [np.ones(len(states))] + [rng.dirichlet(np.ones(len(states))) for _ in range(5)]
        for w in weights:
            w = w / w.sum()
            b = np.zeros(pomdp.n_states)
            for st, p in zip(states, w):
                flags = st.seller_high + st.advisor_trust
                b[sum(int(x) << f for f, x in enumerate(flags))] = p
            dev = abs(value(vf, b) - expectimax(model, dict(zip(states, w)), 4))
            worst = max(worst, dev)
            ok &= dev <= tol
        B = rng.dirichlet(np.ones(pomdp.n_states), size=1000)
        ok &= bool(np.all(qmdp_value(pomdp, B) >= value(vf, B) - 1e-9))
    assert report(8, ok, f"max |Perseus - 4-step expectimax| {worst:.3f} (tol {tol:.2f}); "
                         f"QMDP >= Perseus on 1000 random beliefs per SP")


def test_criterion_09_ff_one_step_exactness():
    r = verify.ff_onestep(max_W=8, priors_per_split=3, seed=SEED, tol=1e-9)
    assert report(9, r["passed"], f"max deviation {r['max_deviation']:.2e} over {r['cases']} cases")


def test_criterion_10_scale_smoke(tmp_path):
    fresh = PolicyCache(tmp_path)
    model = MarketModel(20, 80)
    dec = build_decomposition(model, DecompositionConfig(seed=SEED))
    c = run_cell(H3, 100, EPISODES, SEED, fresh, workers=WORKERS)
    repeat = [run_one(H3, 100, e, SEED, fresh, {}).discounted_value for e in range(10)]
    ok = (len(dec) == 80 and fresh.solves == 1 and c.episodes == EPISODES
          and c.wallclock_s < 600 and np.allclose(repeat, c.values[:10], rtol=0, atol=0))
    _cells.setdefault((H3, 100), c)
    assert report(10, ok, f"K={len(dec)}, {fresh.solves} solve(s), {c.episodes} episodes in "
                          f"{c.wallclock_s:.0f}s on {WORKERS} worker(s), rerun identical "
                          f"{np.array_equal(repeat, c.values[:10])}")
