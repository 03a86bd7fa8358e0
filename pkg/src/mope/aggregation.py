"""Turning per-SP recommendations into one global action.

Every SP votes ``(action, q)`` from its own belief and value function.  The
Max-Q rules follow the single best vote; majority voting tallies the votes over
abstract action patterns and refines a chosen pattern down to a concrete
action (hierarchies H1, H2, H3).
"""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.utils import check_random_state

from .model import AQ, BUY, DNB, DO_NOT_BUY, SQ, Action
from .solver import TIE_TOL, EnumeratedPomdp, ValueFunction, first_argmax, q_values

logger = logging.getLogger(__name__)

L1, L2, L3 = "L1", "L2", "L3"
OTHERS = "OTHERS"
HIERARCHIES = {"H1": (L1,), "H2": (L2, L1), "H3": (L3, L2, L1)}
TERMINAL_MASS = 1.0 - 1e-12

_KIND_ORDER = {SQ: 0, AQ: 1, BUY: 2, OTHERS: 3, DNB: 4}


class Vote(NamedTuple):
    action: Action
    q: float
    sp_index: int


class AbstractAction(NamedTuple):
    """An action pattern; ``None`` arguments are unbound (X for advisors, Y otherwise)."""

    level: str
    kind: str
    i: int | None = None
    j: int | None = None

    def __str__(self):
        if self.kind in (DNB, OTHERS):
            return self.kind
        if self.kind == BUY:
            return "BUY(Y)"
        x = "X" if self.i is None else f"a{self.i}"
        if self.kind == SQ:
            y = "Y" if self.j is None else f"s{self.j}"
        else:
            y = "Y" if self.j is None else f"a{self.j}"
        return f"{self.kind}({x},{y})"

    def sort_key(self):
        return (_KIND_ORDER[self.kind], -1 if self.i is None else self.i,
                -1 if self.j is None else self.j)


def abstract_actions(a: Action) -> dict[str, list[AbstractAction]]:
    """The patterns consistent with ``a`` at each abstraction level."""
    if a.kind == DNB:
        return {lvl: [AbstractAction(lvl, DNB)] for lvl in (L1, L2, L3)}
    if a.kind == BUY:
        l1 = [AbstractAction(L1, BUY)]
    else:
        l1 = [AbstractAction(L1, a.kind, None, a.j), AbstractAction(L1, a.kind, a.i, None)]
    return {L1: l1, L2: [AbstractAction(L2, a.kind)], L3: [AbstractAction(L3, OTHERS)]}


def parent_of(x: AbstractAction) -> AbstractAction | None:
    """The unique pattern one level up that ``x`` refines."""
    if x.level == L1:
        return AbstractAction(L2, x.kind)
    if x.level == L2:
        return AbstractAction(L3, DNB if x.kind == DNB else OTHERS)
    return None


# -- votes --------------------------------------------------------------------------


def vote_from_sp(sp, local_belief, pomdp: EnumeratedPomdp, vf: ValueFunction) -> Vote:
    """Greedy one-step lookahead vote of one SP, in global action ids."""
    return votes_from_sps([sp], np.asarray(local_belief)[None, :], pomdp, vf)[0]


def votes_from_sps(sps: Sequence, B: np.ndarray, pomdp: EnumeratedPomdp,
                   vf: ValueFunction) -> list[Vote]:
    """Votes for a stack of local beliefs ``B`` sharing one solved policy.

    A belief with all its mass on the terminal state votes DNB with q = 0.
    Ties go to the lowest local action index, which is also the lowest global
    index because SP members are sorted.
    """
    B = np.asarray(B, dtype=float)
    Q = q_values(pomdp, vf, B)
    best = first_argmax(Q)
    votes = []
    for row, sp in enumerate(sps):
        if B[row, -1] >= TERMINAL_MASS:
            votes.append(Vote(DO_NOT_BUY, 0.0, sp.index))
            continue
        k = int(best[row])
        votes.append(Vote(sp.global_actions[k], float(Q[row, k]), sp.index))
    return votes


# -- Max-Q ---------------------------------------------------------------------------


def winning_vote(votes: Sequence[Vote], random_state=None) -> Vote:
    """Vote with the highest q; exact ties are drawn uniformly at random."""
    if not votes:
        raise ValueError("no votes to aggregate")
    q = np.array([v.q for v in votes])
    ties = np.flatnonzero(q >= q.max() - TIE_TOL)
    if len(ties) == 1:
        return votes[ties[0]]
    rng = check_random_state(random_state)
    return votes[ties[rng.randint(len(ties))]]


def aggregate_parallel_maxq(votes: Sequence[Vote], local_belief_set=None,
                            random_state=None) -> Action:
    """Action of the winning SP (highest q, ties drawn uniformly at random).

    The caller keeps ``local_belief_set`` up to date with
    :func:`mope.belief.parallel_update`; it is accepted here only so the call
    mirrors the parallel scheme.
    """
    return winning_vote(votes, random_state).action


def aggregate_maxq(votes: Sequence[Vote], random_state=None) -> Action:
    """Same selection as Parallel Max-Q; callers feed it votes from the global belief."""
    return winning_vote(votes, random_state).action


# -- majority voting -------------------------------------------------------------------


class VoteTally:
    """Vote counts and summed Q over concrete actions and their abstractions."""

    def __init__(self, votes: Sequence[Vote]):
        self.counts: dict = defaultdict(int)
        self.qvalsum: dict = defaultdict(float)
        for v in votes:
            keys = [v.action]
            for patterns in abstract_actions(v.action).values():
                keys.extend(patterns)
            for key in keys:
                self.counts[key] += 1
                self.qvalsum[key] += v.q
        self.counts = dict(self.counts)
        self.qvalsum = dict(self.qvalsum)

    def mean_q(self, key) -> float:
        return self.qvalsum[key] / self.counts[key]

    def score(self, key) -> float:
        return self.counts[key] * self.mean_q(key)

    def represented(self, level: str | None) -> list:
        """Keys with votes at ``level`` (``None`` selects concrete actions)."""
        if level is None:
            return [k for k in self.counts if isinstance(k, Action)]
        return [k for k in self.counts if isinstance(k, AbstractAction) and k.level == level]

    def as_dict(self) -> dict:
        return {str(k): (self.counts[k], self.qvalsum[k]) for k in self.counts}


def _pick(tally: VoteTally, candidates: list, order) -> object:
    candidates = sorted(candidates, key=order)
    scores = np.array([tally.score(c) for c in candidates])
    return candidates[int(first_argmax(scores))]


def aggregate_majority(votes: Sequence[Vote], hierarchy: str = "H3", action_index=None,
                       trace: dict | None = None) -> Action:
    """Pick the best-scoring pattern at the hierarchy's top level and refine it.

    Scores are ``counts * meanQs`` (equal to the summed Q).  ``action_index``
    maps concrete actions to their global enumeration index for tie-breaks;
    without it ties fall back to the lexicographic order of the actions.
    If ``trace`` is given it is filled with the tally and the chosen path.
    """
    if not votes:
        raise ValueError("no votes to aggregate")
    if hierarchy not in HIERARCHIES:
        raise ValueError(f"unknown hierarchy {hierarchy!r}; expected one of {sorted(HIERARCHIES)}")
    tally = VoteTally(votes)

    def concrete_order(a: Action):
        if action_index is not None:
            return action_index[a]
        return (_KIND_ORDER[a.kind], a.i, a.j)

    path: list = []
    parent = None
    fallback = False
    for level in HIERARCHIES[hierarchy]:
        cands = tally.represented(level)
        if parent is not None:
            cands = [c for c in cands if parent_of(c) == parent]
        if not cands:
            fallback = True
            break
        parent = _pick(tally, cands, AbstractAction.sort_key)
        path.append(parent)
    concrete = tally.represented(None)
    if not fallback:
        cands = [a for a in concrete if parent in abstract_actions(a)[L1]]
        if not cands:
            fallback = True
    if fallback:
        logger.warning("pattern %s has no voted refinement; using the best concrete vote",
                       parent)
        cands = concrete
    action = _pick(tally, cands, concrete_order)
    if trace is not None:
        trace.update(
            votes=[(str(v.action), v.q, v.sp_index) for v in votes],
            tally=tally.as_dict(),
            path=[str(p) for p in path],
            action=str(action),
            fallback=fallback,
        )
    logger.debug("majority %s path=%s action=%s", hierarchy, [str(p) for p in path], action)
    return action


AGGREGATORS = ("majority", "maxq", "parallel_maxq")
