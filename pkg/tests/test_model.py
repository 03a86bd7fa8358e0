import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mope.model import (
    AQ,
    BUY,
    DNB,
    DO_NOT_BUY,
    GAVE_UP,
    LEGAL_OBSERVATIONS,
    SATISFACTORY,
    SQ,
    UNSATISFACTORY,
    Action,
    MarketModel,
    MarketState,
    ModelError,
    ObservationParams,
    RewardParams,
    action_count,
    enumerate_actions,
    n_sellers_for,
    quality_bits,
)

from oracles import all_states

TABLE1 = {6: 27, 7: 38, 8: 45, 9: 59, 10: 75, 25: 486, 50: 1971, 75: 4456, 100: 7941}


@pytest.mark.parametrize("W,expected", sorted(TABLE1.items()))
def test_table1_action_counts(W, expected):
    n_s = n_sellers_for(W)
    assert len(enumerate_actions(n_s, W - n_s)) == expected
    assert action_count(n_s, W - n_s) == expected


def test_small_action_counts():
    assert len(enumerate_actions(2, 8)) == 75
    assert len(enumerate_actions(1, 5)) == 27
    assert enumerate_actions(1, 0) == [Action(BUY, -1, 0), DO_NOT_BUY]


def test_action_order_is_canonical():
    acts = enumerate_actions(2, 3)
    kinds = [a.kind for a in acts]
    assert kinds == sorted(kinds, key=[SQ, AQ, BUY, DNB].index)
    sq = [(a.i, a.j) for a in acts if a.kind == SQ]
    aq = [(a.i, a.j) for a in acts if a.kind == AQ]
    assert sq == sorted(sq) and aq == sorted(aq)
    assert all(i != k for i, k in aq)
    assert acts[-1] == DO_NOT_BUY


def test_negative_counts_rejected():
    with pytest.raises(ModelError):
        enumerate_actions(-1, 2)


def test_parameter_validation():
    with pytest.raises(ModelError):
        ObservationParams(0.6, 0.7)
    with pytest.raises(ModelError):
        ObservationParams(p_buy_obs_correct=0.4)
    with pytest.raises(ModelError):
        RewardParams(discount=1.0)
    with pytest.raises(ModelError):
        RewardParams(cost_seller_query=-1)


def test_transitions():
    m = MarketModel(2, 2)
    s = MarketState((False, True), (True, False))
    assert m.transition(s, Action(SQ, 0, 1)) == {s: 1.0}
    assert m.transition(s, Action(AQ, 0, 1)) == {s: 1.0}
    (nxt, p), = m.transition(s, Action(BUY, -1, 1)).items()
    assert p == 1.0 and nxt.sat == SATISFACTORY
    (nxt, _), = m.transition(s, Action(BUY, -1, 0)).items()
    assert nxt.sat == UNSATISFACTORY
    (nxt, _), = m.transition(s, DO_NOT_BUY).items()
    assert nxt.sat == GAVE_UP
    with pytest.raises(ModelError):
        m.transition(nxt, DO_NOT_BUY)


def test_observation_examples():
    m = MarketModel(1, 1)
    s = MarketState((True,), (True,))
    assert m.observation_prob(Action(SQ, 0, 0), s, "good") == pytest.approx(0.8)
    assert m.observation_prob(Action(SQ, 0, 0), s, "bad") == pytest.approx(0.2)
    assert m.observation_prob(DO_NOT_BUY, s, "none") == 1.0
    with pytest.raises(ModelError):
        m.observation_prob(Action(SQ, 0, 0), s, "trustworthy")


def test_reward_examples():
    m = MarketModel(2, 2)
    s = MarketState((False, True), (True, True))
    assert m.reward(s, Action(AQ, 0, 1)) == -1
    assert m.reward(s, Action(SQ, 0, 1)) == -10
    assert m.reward(s, Action(BUY, -1, 0)) == -100
    assert m.reward(s, Action(BUY, -1, 1)) == 100
    assert m.reward(s, DO_NOT_BUY) == -100
    assert m.reward(MarketState((False, False), (True, True)), DO_NOT_BUY) == 100
    assert m.reward(MarketState((True, True), (True, True), GAVE_UP), DO_NOT_BUY) == 0


@pytest.mark.parametrize("n_s,n_a", [(1, 2), (2, 2), (2, 1)])
def test_exhaustive_invariants(n_s, n_a):
    m = MarketModel(n_s, n_a, ObservationParams(0.9, 0.2, 0.7))
    for s, a in itertools.product(all_states(m), m.actions):
        dist = m.transition(s, a)
        assert sum(dist.values()) == pytest.approx(1.0)
        for s2 in dist:
            assert s2.seller_high == s.seller_high and s2.advisor_trust == s.advisor_trust
            total = sum(m.observation_prob(a, s2, o) for o in LEGAL_OBSERVATIONS[a.kind])
            assert total == pytest.approx(1.0)
        if a.is_query:
            assert dist == {s: 1.0}


def test_vectorised_helpers_match_pointwise():
    m = MarketModel(2, 2)
    bits = quality_bits(m.n_factors)
    states = m.states()
    for a in m.actions:
        np.testing.assert_allclose(m.reward_vector(a, bits), [m.reward(s, a) for s in states])
        for o in LEGAL_OBSERVATIONS[a.kind]:
            expected = []
            for s in states:
                (s2, _), = m.transition(s, a).items()
                expected.append(m.observation_prob(a, s2, o))
            np.testing.assert_allclose(m.likelihood(a, o, bits), expected)


def test_params_hash_depends_on_parameters():
    assert MarketModel(1, 4).params_hash() == MarketModel(3, 9).params_hash()
    assert MarketModel(1, 4).params_hash() != MarketModel(1, 4, rew=RewardParams(reward_success=50)).params_hash()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 6), st.integers(0, 8))
def test_action_count_formula(n_s, n_a):
    acts = enumerate_actions(n_s, n_a)
    assert len(acts) == action_count(n_s, n_a) == len(set(acts))
    m = MarketModel(n_s, n_a)
    for a in acts:
        m.check_action(a)
