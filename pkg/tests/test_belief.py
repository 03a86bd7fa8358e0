import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mope import belief as bel
from mope.decomposition import DecompositionConfig, build_decomposition, single_sp
from mope.model import (
    AQ,
    BAD,
    BUY,
    DNB,
    DO_NOT_BUY,
    GOOD,
    LEGAL_OBSERVATIONS,
    NONE,
    SAT_VALUES,
    SQ,
    TRUSTWORTHY,
    Action,
    MarketModel,
    ModelError,
    ObservationParams,
)
from mope.verify import ff_onestep

from oracles import all_states, posterior


def joint_from_dict(model, d):
    probs = np.zeros((len(SAT_VALUES), 2**model.n_factors))
    for s, p in d.items():
        bits = list(s.seller_high) + list(s.advisor_trust)
        probs[SAT_VALUES.index(s.sat), sum(int(x) << f for f, x in enumerate(bits))] += p
    return bel.JointBelief(probs)


def test_sq_worked_example():
    m = MarketModel(1, 1)
    post = bel.exact_update(bel.uniform_joint(m), Action(SQ, 0, 0), GOOD, m)
    # index = q + 2 u
    np.testing.assert_allclose(post.probs[0], [0.35, 0.15, 0.1, 0.4], atol=1e-12)
    ff = bel.ff_update(bel.uniform_factored(m), Action(SQ, 0, 0), GOOD, m)
    np.testing.assert_allclose(ff.quality, [0.55, 0.50], atol=1e-12)


def test_symmetric_params_shift_toward_report():
    obs = ObservationParams(0.8, 0.2, 0.95)
    m = MarketModel(1, 1, obs)
    fb = bel.uniform_factored(m)
    fb.quality[1] = 0.7  # advisor more likely trustworthy than not
    for o, sign in [(GOOD, 1), (BAD, -1)]:
        post = bel.exact_update(fb.joint(), Action(SQ, 0, 0), o, m)
        assert sign * (post.marginals()[0] - 0.5) > 0
    # with a uniform trust prior a symmetric report is uninformative
    post = bel.exact_update(bel.uniform_joint(m), Action(SQ, 0, 0), GOOD, m)
    assert post.marginals()[0] == pytest.approx(0.5)


def test_dnb_moves_status_only():
    m = MarketModel(2, 2)
    rng = np.random.default_rng(0)
    fb = bel.uniform_factored(m)
    fb.quality[:] = rng.uniform(0.1, 0.9, 4)
    jb = fb.joint()
    e = bel.exact_update(jb, DO_NOT_BUY, NONE, m)
    np.testing.assert_allclose(e.marginals(), jb.marginals())
    assert e.sat_marginal()[bel.I_GAVE_UP] == pytest.approx(1.0)
    f = bel.ff_update(fb, DO_NOT_BUY, NONE, m)
    np.testing.assert_array_equal(f.quality, fb.quality)
    assert f.sat[bel.I_GAVE_UP] == pytest.approx(1.0)


def test_queries_keep_status():
    m = MarketModel(1, 2)
    b = bel.exact_update(bel.uniform_joint(m), Action(AQ, 0, 1), TRUSTWORTHY, m)
    np.testing.assert_array_equal(b.sat_marginal(), bel.uniform_joint(m).sat_marginal())


def test_buy_outcome():
    m = MarketModel(2, 1)
    fb = bel.uniform_factored(m)
    f = bel.ff_update(fb, Action(BUY, -1, 1), "satisfactory", m)
    e = bel.exact_update(fb.joint(), Action(BUY, -1, 1), "satisfactory", m)
    np.testing.assert_allclose(f.quality, e.marginals(), atol=1e-12)
    np.testing.assert_allclose(f.sat, e.sat_marginal(), atol=1e-12)
    assert f.quality[1] == pytest.approx(0.95)


def test_impossible_evidence():
    m = MarketModel(1, 1)
    with pytest.raises(ModelError):  # illegal symbol
        bel.exact_update(bel.uniform_joint(m), DO_NOT_BUY, GOOD, m)
    fb = bel.uniform_factored(m)
    fb.quality[:] = [0.0, 1.0]
    certain = ObservationParams(1.0, 0.3, 0.95)
    mc = MarketModel(1, 1, certain)
    with pytest.raises(bel.ImpossibleEvidence):
        bel.ff_update(fb, Action(SQ, 0, 0), GOOD, mc)


def test_joint_cap():
    with pytest.raises(Exception):
        bel.uniform_joint(MarketModel(4, 16))


def test_exact_update_matches_dictionary_oracle():
    # dual route: vectorised update vs. per-state Bayes through transition/observation_prob
    m = MarketModel(1, 2)
    rng = np.random.default_rng(2)
    states = all_states(m)
    for a in m.actions:
        for o in LEGAL_OBSERVATIONS[a.kind]:
            w = rng.dirichlet(np.ones(len(states)))
            d = dict(zip(states, w))
            ref, z = posterior(m, d, a, o)
            if z == 0:
                continue
            got = bel.exact_update(joint_from_dict(m, d), a, o, m)
            np.testing.assert_allclose(got.probs, joint_from_dict(m, ref).probs, atol=1e-12)


def test_ff_one_step_exactness():
    r = ff_onestep(max_W=6, priors_per_split=2, seed=1)
    assert r["passed"], r


def test_extract_uniform_and_certain():
    m = MarketModel(2, 8)
    sp = single_sp(m, [1], [0, 2, 4, 6])
    fb = bel.uniform_factored(m)
    np.testing.assert_allclose(bel.extract_local(fb, sp, m), bel.uniform_local(sp))
    fb.quality[m.seller_factor(1)] = 1.0
    loc = bel.extract_local(fb, sp, m)
    active = np.arange(32)
    assert loc[:-1][active & 1 == 0].sum() == 0.0
    assert loc.sum() == pytest.approx(1.0)


def test_extract_joint_equals_factored_on_product_beliefs():
    rng = np.random.default_rng(4)
    for W in range(5, 9):
        m = MarketModel(1, W - 1)
        dec = build_decomposition(m, DecompositionConfig(spa=2, seed=W))
        fb = bel.uniform_factored(m)
        fb.quality[:] = rng.uniform(0.05, 0.95, W)
        fb.sat[:] = [0.7, 0.1, 0.1, 0.1, 0.0]
        jb = fb.joint()
        np.testing.assert_allclose(bel.extract_local_all(jb, dec, m),
                                   bel.extract_local_all(fb, dec, m), atol=1e-12)
        for sp in dec:
            np.testing.assert_allclose(bel.extract_local(jb, sp, m),
                                       bel.extract_local(fb, sp, m), atol=1e-12)
    with pytest.raises(TypeError):
        bel.extract_local(np.ones(4), dec[0], m)


def test_parallel_update_touches_only_containing_sps():
    m = MarketModel(2, 8)
    dec = build_decomposition(m, DecompositionConfig(spa=2, seed=0))
    B = bel.uniform_local_set(dec)
    sp = dec[0]
    a = Action(SQ, sp.advisors[0], sp.sellers[0])
    B2 = bel.parallel_update(B, a, GOOD, dec, m)
    changed = [k for k in range(len(dec)) if not np.array_equal(B[k], B2[k])]
    assert changed == [k for k, s in enumerate(dec) if s.contains(a)]
    outsider = next(i for i in range(m.n_advisors) if i not in sp.advisors)
    a = Action(SQ, outsider, sp.sellers[0])
    B3 = bel.parallel_update(B, a, GOOD, dec, m)
    np.testing.assert_array_equal(B3[0], B[0])


def test_parallel_update_in_one_sp():
    m = MarketModel(2, 8)
    dec = build_decomposition(m, DecompositionConfig(spa=1, seed=0))
    B = bel.uniform_local_set(dec)
    sp = dec[1]
    B2 = bel.parallel_update(B, Action(AQ, sp.advisors[0], sp.advisors[1]), TRUSTWORTHY, dec, m)
    assert sum(not np.array_equal(x, y) for x, y in zip(B, B2)) == 1
    B3 = bel.parallel_update(B2, DO_NOT_BUY, NONE, dec, m)
    assert np.all(B3[:, -1] == 1.0)


def test_lemma_short_run():
    from mope.verify import lemma_beliefs

    r = lemma_beliefs(n_sequences=100, seed=5)
    assert r["passed"], r


@settings(max_examples=60, deadline=None)
@given(
    prior=st.lists(st.floats(0.01, 0.99), min_size=4, max_size=4),
    steps=st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 1)), min_size=1, max_size=6),
)
def test_updates_stay_normalised(prior, steps):
    m = MarketModel(1, 3)
    fb = bel.uniform_factored(m)
    fb.quality[:] = prior
    jb = fb.joint()
    queries = [a for a in m.actions if a.is_query]
    for k, o in steps:
        a = queries[k % len(queries)]
        sym = LEGAL_OBSERVATIONS[a.kind][o]
        jb = bel.exact_update(jb, a, sym, m)
        fb = bel.ff_update(fb, a, sym, m)
        assert jb.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(jb.probs >= 0)
        assert np.all((fb.quality >= 0) & (fb.quality <= 1))
        assert fb.sat.sum() == pytest.approx(1.0, abs=1e-9)
