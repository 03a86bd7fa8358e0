"""Point-based value iteration (Perseus) for small enumerated SALE POMDPs.

Enumerated models collapse every terminal status into one absorbing state with
zero reward, so an SP over ``n`` agents has ``2**n + 1`` states: the active
quality assignments (see :func:`mope.model.quality_bits`) followed by the
terminal state.  Every action has at most two observation symbols, stored by
their position in :data:`mope.model.LEGAL_OBSERVATIONS`.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.utils import check_random_state

from .model import LEGAL_OBSERVATIONS, Action, MarketModel, ModelError, quality_bits

logger = logging.getLogger(__name__)

DEFAULT_STATE_CAP = 2**13
TIE_TOL = 1e-9


def first_argmax(values, tol=TIE_TOL, axis=-1):
    """Argmax that treats entries within ``tol`` of the maximum as ties (lowest index wins)."""
    values = np.asarray(values)
    best = values.max(axis=axis, keepdims=True)
    return np.argmax(values >= best - tol, axis=axis)


@dataclass(eq=False)
class EnumeratedPomdp:
    model: MarketModel
    actions: tuple[Action, ...]
    next_state: np.ndarray  # (A, S) deterministic successor
    obs_prob: np.ndarray  # (A, S, 2) P(o | a, s') indexed by successor s'
    rewards: np.ndarray  # (S, A)
    discount: float

    @property
    def n_states(self) -> int:
        return self.next_state.shape[1]

    @property
    def n_active(self) -> int:
        return self.n_states - 1

    @property
    def terminal(self) -> int:
        return self.n_states - 1

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def obs_symbols(self, a: int) -> tuple[str, ...]:
        return LEGAL_OBSERVATIONS[self.actions[a].kind]

    def obs_code(self, a: int, symbol: str) -> int:
        try:
            return self.obs_symbols(a).index(symbol)
        except ValueError:
            raise ModelError(f"observation {symbol!r} is illegal after {self.actions[a]}") from None

    def uniform_belief(self) -> np.ndarray:
        b = np.zeros(self.n_states)
        b[: self.n_active] = 1.0 / self.n_active
        return b

    def terminal_belief(self) -> np.ndarray:
        b = np.zeros(self.n_states)
        b[self.terminal] = 1.0
        return b

    def successor_obs(self) -> np.ndarray:
        """``O[a, s, o] = P(o | a, next(s, a))``, the observation table seen from ``s``."""
        rows = np.arange(self.n_actions)[:, None]
        return self.obs_prob[rows, self.next_state]

    def observation_distribution(self, b: np.ndarray, a: int) -> np.ndarray:
        pred = np.zeros(self.n_states)
        np.add.at(pred, self.next_state[a], b)
        return pred @ self.obs_prob[a]

    def update(self, b: np.ndarray, a: int, o: int) -> np.ndarray:
        """Bayes update of a belief over the enumerated states."""
        pred = np.zeros(self.n_states)
        np.add.at(pred, self.next_state[a], b)
        post = pred * self.obs_prob[a, :, o]
        z = post.sum()
        if z <= 1e-12:
            raise ModelError(f"impossible observation {o} after {self.actions[a]}")
        return post / z


def build_pomdp(model: MarketModel, state_cap: int = DEFAULT_STATE_CAP) -> EnumeratedPomdp:
    """Dense tables for ``model`` with terminal statuses collapsed into one state."""
    n = model.n_factors
    n_active = 2**n
    if n_active > state_cap:
        raise ModelError(f"{n_active} active states exceed the cap of {state_cap}")
    bits = quality_bits(n)
    actions = model.actions
    A, S = len(actions), n_active + 1
    next_state = np.empty((A, S), dtype=np.intp)
    obs_prob = np.zeros((A, S, 2))
    rewards = np.zeros((S, A))
    active = np.arange(n_active)
    for k, a in enumerate(actions):
        rewards[:n_active, k] = model.reward_vector(a, bits)
        next_state[k, -1] = S - 1
        if a.is_query:
            next_state[k, :n_active] = active
            for o, symbol in enumerate(LEGAL_OBSERVATIONS[a.kind]):
                obs_prob[k, :n_active, o] = model.likelihood(a, symbol, bits)
        else:
            next_state[k, :n_active] = S - 1
        # Observations after entering the terminal state carry no information.
        obs_prob[k, -1, 0] = 1.0
    return EnumeratedPomdp(model, actions, next_state, obs_prob, rewards, model.discount)


class AlphaVector(NamedTuple):
    values: np.ndarray
    action: int


@dataclass(eq=False)
class ValueFunction:
    """Piecewise-linear convex value function: ``V(b) = max_i alphas[i] . b``."""

    alphas: np.ndarray  # (m, S)
    actions: np.ndarray  # (m,) local action index backing each vector
    iterations: int = 0
    residual: float = float("nan")
    converged: bool = False
    metadata: dict = field(default_factory=dict)
    _proj: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.alphas = np.atleast_2d(np.asarray(self.alphas, dtype=float))
        self.actions = np.asarray(self.actions, dtype=np.intp).reshape(-1)
        if self.alphas.shape[0] == 0:
            raise ValueError("a value function needs at least one alpha vector")
        if not np.all(np.isfinite(self.alphas)):
            raise ValueError("alpha vectors must be finite")

    @property
    def vectors(self) -> list[AlphaVector]:
        return [AlphaVector(v, int(a)) for v, a in zip(self.alphas, self.actions)]

    @property
    def n_states(self) -> int:
        return self.alphas.shape[1]

    def projections(self, pomdp: EnumeratedPomdp) -> np.ndarray:
        """``G[s, a, o, m] = alpha_m(next(s, a)) * P(o | a, next(s, a))``."""
        key = id(pomdp)
        if key not in self._proj:
            self._proj[key] = _project(self.alphas, pomdp)
        return self._proj[key]

    def save(self, path) -> None:
        meta = dict(self.metadata, iterations=self.iterations, residual=self.residual,
                    converged=self.converged)
        np.savez(path, alphas=self.alphas, actions=self.actions, meta=json.dumps(meta))

    @classmethod
    def load(cls, path) -> "ValueFunction":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            iterations = meta.pop("iterations", 0)
            residual = meta.pop("residual", float("nan"))
            converged = meta.pop("converged", False)
            return cls(data["alphas"], data["actions"], iterations, residual, converged, meta)


def _project(alphas: np.ndarray, pomdp: EnumeratedPomdp) -> np.ndarray:
    succ = alphas.T[pomdp.next_state]  # (A, S, m)
    G = succ[:, :, None, :] * pomdp.successor_obs()[..., None]  # (A, S, O, m)
    return np.ascontiguousarray(G.transpose(1, 0, 2, 3))


def _scores(B: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``B @ G`` reshaped to ``(..., A, O, m)``."""
    S = G.shape[0]
    out = B.reshape(-1, S) @ G.reshape(S, -1)
    return out.reshape(B.shape[:-1] + G.shape[1:])


def value(vf: ValueFunction, b) -> float | np.ndarray:
    """``max_i alpha_i . b``; accepts a single belief or a stack of beliefs."""
    b = np.asarray(b, dtype=float)
    if b.shape[-1] != vf.n_states:
        raise ValueError(f"belief has dimension {b.shape[-1]}, value function {vf.n_states}")
    return (b @ vf.alphas.T).max(axis=-1)


def q_values(pomdp: EnumeratedPomdp, vf: ValueFunction, b) -> np.ndarray:
    """One-step lookahead Q-values for every action; shape ``(..., A)``.

    ``Q(b, a) = b . R[:, a] + discount * sum_o max_i b . G[i, a, :, o]``, which
    equals ``sum_s b(s) R(s, a) + discount * sum_o p(o|b,a) V(b^a_o)``.
    """
    b = np.asarray(b, dtype=float)
    scores = _scores(b, vf.projections(pomdp))
    return b @ pomdp.rewards + pomdp.discount * scores.max(axis=-1).sum(axis=-1)


def q_value(pomdp: EnumeratedPomdp, vf: ValueFunction, b, a: int) -> float:
    return float(q_values(pomdp, vf, b)[a])


def greedy_action(pomdp: EnumeratedPomdp, vf: ValueFunction, b) -> tuple[int, float]:
    q = q_values(pomdp, vf, b)
    a = int(first_argmax(q))
    return a, float(q[a])


def sample_beliefs(pomdp: EnumeratedPomdp, n: int, seed=None, max_depth: int = 30) -> np.ndarray:
    """``n`` beliefs reached by random query rollouts from the uniform belief.

    The uniform belief is always the first row.  Rollouts restart from uniform
    after a random depth; terminal actions are not sampled because the single
    terminal belief has value zero under every alpha vector.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = check_random_state(seed)
    queries = [k for k, a in enumerate(pomdp.actions) if a.is_query]
    uniform = pomdp.uniform_belief()
    out = [uniform]
    b, depth, limit = uniform, 0, rng.randint(1, max_depth + 1)
    while len(out) < n:
        if not queries:
            out.append(uniform)
            continue
        a = queries[rng.randint(len(queries))]
        p = pomdp.observation_distribution(b, a)
        o = rng.choice(len(p), p=p / p.sum())
        b = pomdp.update(b, a, o)
        out.append(b)
        depth += 1
        if depth >= limit:
            b, depth, limit = uniform, 0, rng.randint(1, max_depth + 1)
    return np.array(out)


def initial_value_function(pomdp: EnumeratedPomdp) -> ValueFunction:
    """Alpha vectors of the one-step plans 'take terminal action a now'.

    These are values of real policies, hence a valid lower bound to start from.
    """
    terminal = [k for k, a in enumerate(pomdp.actions) if a.is_terminal]
    alphas = pomdp.rewards[:, terminal].T.copy()
    return ValueFunction(alphas, terminal)


def prune_pointwise(alphas: np.ndarray, actions: np.ndarray, tol: float = 1e-12):
    """Drop vectors pointwise dominated by another vector (first of duplicates kept)."""
    m = len(alphas)
    if m <= 1:
        return alphas, actions
    keep = np.ones(m, dtype=bool)
    for start in range(0, m, 256):
        block = alphas[start : start + 256]
        # dom[i, j]: vector j >= vector i everywhere
        dom = np.all(alphas[None, :, :] >= block[:, None, :] - tol, axis=2)
        rows = np.arange(len(block)) + start
        dom[np.arange(len(block)), rows] = False
        equal = dom & np.all(block[:, None, :] >= alphas[None, :, :] - tol, axis=2)
        # among identical vectors only the lowest index survives
        later = np.arange(m)[None, :] > rows[:, None]
        keep[rows] = ~np.any(dom & ~(equal & later), axis=1)
    return alphas[keep], actions[keep]


def _backup(pomdp: EnumeratedPomdp, G: np.ndarray, B: np.ndarray):
    """Point-based backups of all beliefs in ``B`` against projections ``G``.

    Returns the backed-up vectors, their actions and their values at ``B``.
    """
    scores = _scores(B, G)  # (n, A, O, m)
    best = scores.argmax(axis=-1)
    q = B @ pomdp.rewards + pomdp.discount * np.take_along_axis(
        scores, best[..., None], axis=-1
    )[..., 0].sum(axis=-1)
    a_star = first_argmax(q)
    rows = np.arange(B.shape[0])
    chosen = best[rows, a_star]  # (n, O)
    vecs = pomdp.rewards[:, a_star].T.copy()
    for o in range(G.shape[2]):
        vecs += pomdp.discount * G[:, a_star, o, chosen[:, o]].T
    return vecs, a_star, q[rows, a_star]


def successor_beliefs(pomdp: EnumeratedPomdp, B: np.ndarray) -> np.ndarray:
    """Every reachable one-step successor ``b^a_o`` of the beliefs in ``B``."""
    out = [pomdp.terminal_belief()[None]]
    for a, act in enumerate(pomdp.actions):
        if not act.is_query:
            continue
        for o in range(len(pomdp.obs_symbols(a))):
            post = B * pomdp.obs_prob[a, :, o][None]  # queries keep the state
            z = post.sum(axis=1)
            keep = z > 1e-12
            out.append(post[keep] / z[keep, None])
    return np.vstack(out)


def _support_prune(alphas, actions, tracked):
    """Keep vectors that are maximal at some tracked belief, then pointwise-prune."""
    vals = tracked @ alphas.T
    used = np.unique(first_argmax(vals))
    return prune_pointwise(alphas[used], actions[used])


def bellman_residual(pomdp: EnumeratedPomdp, vf: ValueFunction, beliefs: np.ndarray) -> float:
    """``max_b |max_a Q(b, a) - V(b)|`` over the given beliefs."""
    hv = q_values(pomdp, vf, beliefs).max(axis=-1)
    return float(np.max(np.abs(hv - value(vf, beliefs))))


def perseus_solve(
    pomdp: EnumeratedPomdp,
    beliefs: np.ndarray,
    epsilon: float = 1e-3,
    max_iter: int = 500,
    seed=None,
) -> ValueFunction:
    """Randomised point-based value iteration over a fixed belief set.

    Each sweep backs up randomly chosen beliefs until every belief has improved
    (Perseus).  Old vectors are kept unless they are maximal at no tracked belief
    (the sample set plus its one-step successors, which is all a backup at the
    sample set reads), so values never decrease anywhere that matters.  Beliefs
    whose Bellman residual still exceeds ``epsilon`` after a sweep get a direct
    backup.  Stops when the residual at every sampled belief is ``<= epsilon``;
    otherwise returns the last iterate with ``converged=False``.
    """
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
    if beliefs.shape[0] == 0:
        raise ValueError("belief set is empty")
    if not 0.0 < pomdp.discount < 1.0:
        raise ValueError("discount must lie in (0, 1)")
    rng = check_random_state(seed)
    t0 = time.perf_counter()
    tracked = np.vstack([beliefs, successor_beliefs(pomdp, beliefs)])
    vf = initial_value_function(pomdp)
    alphas, acts = vf.alphas, vf.actions
    old_vals = (beliefs @ alphas.T).max(axis=1)
    min_improvement = np.inf
    residual = np.inf
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        G = _project(alphas, pomdp)
        new_alphas, new_acts = [alphas], [acts]
        new_vals = np.full(len(beliefs), -np.inf)
        todo = np.arange(len(beliefs))
        while todo.size:
            pick = todo[rng.randint(todo.size)]
            vec, act, val = _backup(pomdp, G, beliefs[pick : pick + 1])
            if val[0] < old_vals[pick] - TIE_TOL:
                best = int(first_argmax(alphas @ beliefs[pick]))
                vec, act = alphas[best : best + 1], acts[best : best + 1]
            new_alphas.append(vec)
            new_acts.append(act)
            new_vals = np.maximum(new_vals, beliefs @ vec[0])
            todo = todo[new_vals[todo] < old_vals[todo] - TIE_TOL]
        alphas = np.vstack(new_alphas)
        acts = np.concatenate(new_acts)
        G = _project(alphas, pomdp)
        vecs, vacts, hv = _backup(pomdp, G, beliefs)
        vals = (beliefs @ alphas.T).max(axis=1)
        gap = hv - vals
        residual = float(np.max(np.abs(gap)))
        min_improvement = min(min_improvement, float((vals - old_vals).min()))
        if residual <= epsilon:
            converged = True
        else:
            bad = gap > epsilon
            alphas = np.vstack([alphas, vecs[bad]])
            acts = np.concatenate([acts, vacts[bad]])
        alphas, acts = _support_prune(alphas, acts, tracked)
        # the one-step terminal plans stay in so no belief falls below them
        alphas, acts = prune_pointwise(np.vstack([alphas, vf.alphas]),
                                       np.concatenate([acts, vf.actions]))
        vals_after = (beliefs @ alphas.T).max(axis=1)
        min_improvement = min(min_improvement, float((vals_after - vals).min()))
        old_vals = vals_after
        if converged:
            break
    if not converged:
        logger.warning("Perseus hit max_iter=%d with residual %.3g", max_iter, residual)
    meta = {
        "n_beliefs": int(len(beliefs)),
        "n_vectors": int(len(alphas)),
        "min_improvement": min_improvement,
        "epsilon": epsilon,
        "seconds": time.perf_counter() - t0,
    }
    return ValueFunction(alphas, acts, it, residual, converged, meta)


def solve(model: MarketModel, n_beliefs: int = 500, epsilon: float = 1e-3, max_iter: int = 500,
          seed=0, state_cap: int = DEFAULT_STATE_CAP) -> tuple[EnumeratedPomdp, ValueFunction]:
    """Enumerate ``model``, sample beliefs and run Perseus."""
    pomdp = build_pomdp(model, state_cap)
    rng = check_random_state(seed)
    beliefs = sample_beliefs(pomdp, n_beliefs, rng)
    return pomdp, perseus_solve(pomdp, beliefs, epsilon, max_iter, rng)


def qmdp_table(pomdp: EnumeratedPomdp, tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Optimal Q-table ``(S, A)`` of the fully observable underlying MDP."""
    V = np.zeros(pomdp.n_states)
    for _ in range(max_iter):
        Q = pomdp.rewards + pomdp.discount * V[pomdp.next_state].T
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    return pomdp.rewards + pomdp.discount * V[pomdp.next_state].T


def qmdp_value(pomdp: EnumeratedPomdp, b, table: np.ndarray | None = None):
    """QMDP upper bound ``max_a sum_s b(s) Q_MDP(s, a)``."""
    if table is None:
        table = qmdp_table(pomdp)
    return (np.asarray(b, dtype=float) @ table).max(axis=-1)


class PolicyCache:
    """Value functions keyed by SP composition and model parameters.

    Entries live in memory and, when ``directory`` is given, as ``<key>.npz``
    files so later runs skip the solve.
    """

    def __init__(self, directory=None, n_beliefs=500, epsilon=1e-3, max_iter=500, seed=0):
        if directory is None:
            directory = os.environ.get("MOPE_CACHE_DIR")
        self.directory = Path(directory) if directory else None
        self.n_beliefs = n_beliefs
        self.epsilon = epsilon
        self.max_iter = max_iter
        self.seed = seed
        self._mem: dict[str, tuple[EnumeratedPomdp, ValueFunction]] = {}
        self.solves = 0

    def solver_tag(self) -> str:
        return f"v2-nb{self.n_beliefs}-eps{self.epsilon:g}-it{self.max_iter}-seed{self.seed}"

    def get(self, key: str, model: MarketModel) -> tuple[EnumeratedPomdp, ValueFunction]:
        """Enumerated local model and its value function; solves on a miss."""
        full_key = f"{key}-{self.solver_tag()}"
        if full_key in self._mem:
            return self._mem[full_key]
        pomdp = build_pomdp(model)
        vf = None
        path = self.directory / f"{full_key}.npz" if self.directory else None
        if path is not None and path.exists():
            vf = ValueFunction.load(path)
            if vf.n_states != pomdp.n_states:
                vf = None
        if vf is None:
            rng = check_random_state(self.seed)
            beliefs = sample_beliefs(pomdp, self.n_beliefs, rng)
            vf = perseus_solve(pomdp, beliefs, self.epsilon, self.max_iter, rng)
            self.solves += 1
            logger.info("solved %s: %d vectors, residual %.2e, %d iterations",
                        full_key, len(vf.alphas), vf.residual, vf.iterations)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                vf.save(path)
        self._mem[full_key] = (pomdp, vf)
        return pomdp, vf
