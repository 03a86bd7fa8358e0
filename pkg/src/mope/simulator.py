"""Simulated e-marketplace: ground truth, episodes, and experiment cells."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .belief import ImpossibleEvidence
from .model import (
    AQ,
    BAD,
    BUY,
    DNB,
    DO_NOT_BUY,
    GOOD,
    NONE,
    SATISFACTORY,
    SQ,
    TRUSTWORTHY,
    UNSATISFACTORY,
    UNTRUSTWORTHY,
    Action,
    MarketModel,
    MarketState,
    ModelError,
    ObservationParams,
    RewardParams,
    n_sellers_for,
)

logger = logging.getLogger(__name__)

Z95 = 1.959963984540054
SAMPLING = ("exact", "bernoulli")


@dataclass(frozen=True)
class GroundTruth:
    seller_high: tuple[bool, ...]
    advisor_trust: tuple[bool, ...]

    def state(self) -> MarketState:
        return MarketState(self.seller_high, self.advisor_trust)

    @property
    def any_high(self) -> bool:
        return any(self.seller_high)


def _draw_flags(n: int, p: float, rng, sampling: str) -> tuple[bool, ...]:
    if sampling == "bernoulli":
        return tuple(bool(x) for x in rng.random(n) < p)
    # the expected count, stochastically rounded, placed uniformly at random
    target = p * n
    k = int(np.floor(target)) + int(rng.random() < target - np.floor(target))
    flags = np.zeros(n, dtype=bool)
    flags[rng.permutation(n)[:k]] = True
    return tuple(bool(x) for x in flags)


def generate_market(W: int, pct_sellers: float = 0.2, pct_untrustworthy: float = 0.2,
                    pct_good_sellers: float = 0.5, seed=None, sampling: str = "exact",
                    obs: ObservationParams | None = None,
                    rew: RewardParams | None = None) -> tuple[MarketModel, GroundTruth]:
    """Population of ``W`` agents and its hidden qualities.

    ``sampling="exact"`` fixes the number of untrustworthy advisors and good
    sellers to the stochastically rounded expected count; ``"bernoulli"`` draws
    every agent independently.
    """
    if W < 2:
        raise ModelError("a market needs at least two agents")
    if sampling not in SAMPLING:
        raise ModelError(f"sampling must be one of {SAMPLING}")
    if pct_sellers == 0.2:
        n_s = n_sellers_for(W)
    else:
        n_s = int(np.floor(pct_sellers * W + 0.5))
    n_s = min(max(n_s, 1), W - 1)
    model = MarketModel(n_s, W - n_s, obs or ObservationParams(), rew or RewardParams())
    rng = np.random.default_rng(seed)
    sellers = _draw_flags(n_s, pct_good_sellers, rng, sampling)
    untrust = _draw_flags(W - n_s, pct_untrustworthy, rng, sampling)
    return model, GroundTruth(sellers, tuple(not u for u in untrust))


def sample_observation(model: MarketModel, gt: GroundTruth, action: Action, rng) -> str:
    model.check_action(action)
    if action.kind == DNB:
        return NONE
    if action.kind == BUY:
        truth = gt.seller_high[action.j]
        correct = rng.random() < model.obs.p_buy_obs_correct
        return SATISFACTORY if truth == correct else UNSATISFACTORY
    p = model.p_true_report(gt.advisor_trust[action.i])
    truthful = rng.random() < p
    if action.kind == SQ:
        truth = gt.seller_high[action.j]
        return GOOD if truth == truthful else BAD
    truth = gt.advisor_trust[action.j]
    return TRUSTWORTHY if truth == truthful else UNTRUSTWORTHY


@dataclass
class EpisodeResult:
    discounted_value: float
    error_flag: bool
    steps: list = field(default_factory=list)  # (action, observation, reward)
    terminal_action: Action | None = None
    aborted: bool = False
    forced_stop: bool = False

    def recompute_value(self, discount: float) -> float:
        total, g = 0.0, 1.0
        for _, _, r in self.steps:
            total += g * r
            g *= discount
        return total


def is_error(gt: GroundTruth, action: Action) -> bool:
    if action.kind == BUY:
        return not gt.seller_high[action.j]
    return gt.any_high


def run_episode(policy, model: MarketModel, gt: GroundTruth, max_steps: int = 100,
                rng=None, trace_beliefs: bool = False) -> EpisodeResult:
    """Run ``policy`` (already fitted and reset) until Buy/DNB or the step cap.

    Rewards are scored against the ground truth over all sellers in the market.
    At the cap the episode is closed with a forced DNB.
    """
    rng = np.random.default_rng(rng)
    state = gt.state()
    result = EpisodeResult(0.0, False)
    g = 1.0
    for t in range(max_steps + 1):
        if t == max_steps:
            action = DO_NOT_BUY
            result.forced_stop = True
            logger.info("step cap %d reached; forcing DNB", max_steps)
        else:
            action = policy.predict()
        r = model.reward(state, action)
        o = sample_observation(model, gt, action, rng)
        result.steps.append((action, o, r))
        result.discounted_value += g * r
        g *= model.discount
        if action.is_terminal:
            result.terminal_action = action
            result.error_flag = is_error(gt, action)
            break
        try:
            policy.update(action, o)
        except ImpossibleEvidence as exc:
            logger.warning("episode aborted: %s", exc)
            result.aborted = True
            break
        if trace_beliefs and logger.isEnabledFor(logging.DEBUG):
            b = getattr(policy, "belief_", None)
            if hasattr(b, "marginals"):
                logger.debug("t=%d %s %s marginals=%s", t, action, o,
                             np.round(b.marginals(), 4).tolist())
    return result


# -- experiments ---------------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    """One policy configuration evaluated in a cell."""

    name: str  # "mope" or "single_expert"
    aggregator: str = "majority"
    hierarchy: str = "H3"
    spa: int = 4
    aps: int = 5
    belief_mode: str | None = None

    def label(self) -> str:
        if self.name == "single_expert":
            return f"SingleExpert({self.aps})"
        if self.aggregator == "majority":
            return f"MOPE-{self.hierarchy}S{self.spa}A{self.aps}-{self.resolved_belief()}"
        return f"MOPE-{self.aggregator}S{self.spa}A{self.aps}-{self.resolved_belief()}"

    def resolved_belief(self) -> str:
        if self.name == "single_expert":
            return "local"
        if self.belief_mode is not None:
            return self.belief_mode
        return "parallel" if self.aggregator == "parallel_maxq" else "ff"


@dataclass
class CellResult:
    W: int
    method: MethodSpec
    values: np.ndarray
    errors: np.ndarray
    aborted: int = 0
    forced: int = 0
    seed: int = 0
    wallclock_s: float = 0.0
    skipped: str | None = None
    ids: np.ndarray | None = None  # episode number of each kept value, for pairing

    @property
    def episodes(self) -> int:
        return len(self.values)

    @property
    def mean_value(self) -> float:
        return float(np.mean(self.values)) if len(self.values) else float("nan")

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors)) if len(self.errors) else float("nan")

    @property
    def se_value(self) -> float:
        n = len(self.values)
        return float(np.std(self.values, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")

    @property
    def ci_value(self) -> float:
        return Z95 * self.se_value

    @property
    def ci_error(self) -> float:
        n = len(self.errors)
        return float(Z95 * np.std(self.errors, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")

    def row(self) -> dict:
        m = self.method
        return {
            "W": self.W,
            "method": m.name if m.name == "single_expert" else "mope",
            "aggregator": "" if m.name == "single_expert" else m.aggregator,
            "hierarchy": m.hierarchy if m.name != "single_expert" and m.aggregator == "majority" else "",
            "spa": "" if m.name == "single_expert" else m.spa,
            "aps": m.aps,
            "belief_mode": m.resolved_belief(),
            "mean_error": self.mean_error,
            "mean_value": self.mean_value,
            "ci_error": self.ci_error,
            "ci_value": self.ci_value,
            "episodes": self.episodes,
            "seed": self.seed,
            "wallclock_s": round(self.wallclock_s, 3),
        }


CSV_COLUMNS = ("W", "method", "aggregator", "hierarchy", "spa", "aps", "belief_mode",
               "mean_error", "mean_value", "ci_error", "ci_value", "episodes", "seed",
               "wallclock_s")


def episode_seeds(seed: int, W: int, episode: int) -> list[np.random.SeedSequence]:
    """Independent streams for (population, decomposition, observations, tie-breaks).

    They depend on the master seed, W and the episode number only, so every
    method in a cell sees the same populations (paired comparisons).
    """
    return np.random.SeedSequence([seed, W, episode]).spawn(4)


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def make_policy(spec: MethodSpec, cache, decomposition_seed=None, random_state=None):
    from .policy import MOPEPolicy, SingleExpertPolicy

    if spec.name == "single_expert":
        return SingleExpertPolicy(aps=spec.aps, cache=cache, random_state=decomposition_seed)
    if spec.name == "mope":
        return MOPEPolicy(spec.aggregator, spec.hierarchy, spec.spa, spec.aps, spec.belief_mode,
                          cache=cache, decomposition_seed=decomposition_seed,
                          random_state=random_state)
    raise ValueError(f"unknown method {spec.name!r}")


def run_one(spec: MethodSpec, W: int, episode: int, seed: int, cache, market_kw: dict,
            max_steps: int = 100) -> EpisodeResult:
    pop_ss, dec_ss, obs_ss, tie_ss = episode_seeds(seed, W, episode)
    model, gt = generate_market(W, seed=pop_ss, **market_kw)
    policy = make_policy(spec, cache, _seed_int(dec_ss), _seed_int(tie_ss)).fit(model)
    return run_episode(policy, model, gt, max_steps, np.random.default_rng(obs_ss))


def _run_chunk(spec, W, episodes, seed, cache, market_kw, max_steps):
    out = []
    for e in episodes:
        r = run_one(spec, W, e, seed, cache, market_kw, max_steps)
        out.append((r.discounted_value, r.error_flag, r.aborted, r.forced_stop))
    return out


def check_feasible(spec: MethodSpec, W: int) -> str | None:
    """Reason the cell cannot run, or ``None``."""
    from .belief import JOINT_STATE_CAP
    from .decomposition import DecompositionConfig

    n_s = n_sellers_for(W)
    n_a = W - n_s
    if spec.resolved_belief() == "exact" and 2**W > JOINT_STATE_CAP:
        return f"exact beliefs need 2^{W} joint states (cap {JOINT_STATE_CAP})"
    cfg = DecompositionConfig.for_aps(spec.aps, spec.spa)
    if cfg.sellers_per_sp > n_s or cfg.advisors_per_sp > n_a:
        return f"SP composition {cfg.sellers_per_sp}s/{cfg.advisors_per_sp}a exceeds {n_s}s/{n_a}a"
    return None


def run_cell(spec: MethodSpec, W: int, episodes: int = 500, seed: int = 0, cache=None,
             market_kw: dict | None = None, max_steps: int = 100, workers: int = 1) -> CellResult:
    """``episodes`` seeded episodes of one method at one population size."""
    from .solver import PolicyCache

    market_kw = dict(market_kw or {})
    reason = check_feasible(spec, W)
    if reason is not None:
        logger.warning("skipping W=%d %s: %s", W, spec.label(), reason)
        return CellResult(W, spec, np.array([]), np.array([]), seed=seed, skipped=reason)
    cache = cache if cache is not None else PolicyCache()
    t0 = time.perf_counter()
    ids = list(range(episodes))
    if workers == 1:
        rows = _run_chunk(spec, W, ids, seed, cache, market_kw, max_steps)
    else:
        # solve once up front so workers only read the cache
        make_policy(spec, cache).fit(generate_market(W, **market_kw)[0])
        chunks = [ids[k::workers] for k in range(workers)]
        parts = Parallel(n_jobs=workers)(
            delayed(_run_chunk)(spec, W, c, seed, cache, market_kw, max_steps) for c in chunks
        )
        by_id = {}
        for c, part in zip(chunks, parts):
            by_id.update(zip(c, part))
        rows = [by_id[e] for e in ids]
    kept = [(e, r) for e, r in zip(ids, rows) if not r[2]]
    values = np.array([r[0] for _, r in kept], dtype=float)
    errors = np.array([r[1] for _, r in kept], dtype=float)
    return CellResult(W, spec, values, errors, aborted=sum(r[2] for r in rows),
                      forced=sum(r[3] for r in rows), seed=seed,
                      wallclock_s=time.perf_counter() - t0,
                      ids=np.array([e for e, _ in kept], dtype=int))


@dataclass
class ExperimentReport:
    cells: list
    config: dict
    wallclock_s: float = 0.0

    def rows(self) -> list[dict]:
        return [c.row() for c in self.cells if c.skipped is None]

    def skipped(self) -> list[tuple[int, str, str]]:
        return [(c.W, c.method.label(), c.skipped) for c in self.cells if c.skipped]

    def cell(self, W: int, label: str) -> CellResult:
        for c in self.cells:
            if c.W == W and c.method.label() == label:
                return c
        raise KeyError((W, label))


def run_experiment(config, sweep: bool = False) -> ExperimentReport:
    """Every (W, method) cell of ``config`` (an :class:`mope.config.ExperimentConfig`).

    With ``sweep`` the MOPE methods are crossed with the config's sweep grid.
    """
    from .solver import PolicyCache

    config.validate()
    cache = PolicyCache(config.cache_dir, **config.solver)
    t0 = time.perf_counter()
    cells = []
    for W in config.W:
        specs = config.sweep_specs() if sweep and config.sweep else config.method_specs()
        for spec in specs:
            cells.append(run_cell(spec, W, config.episodes, config.seed, cache,
                                  config.market_kwargs(), config.max_steps, config.workers))
    return ExperimentReport(cells, config.to_dict(), time.perf_counter() - t0)


# -- envelope values -------------------------------------------------------------------


def compute_v_maxv(W: int, episodes: int = 500, seed: int = 0, cache=None, aps: int = 5,
                   spa: int = 8, obs: ObservationParams | None = None,
                   rew: RewardParams | None = None, workers: int = 1) -> CellResult:
    """MOPE (majority voting, H3, SPA=8) on ideal populations: good sellers, honest advisors."""
    spec = MethodSpec("mope", "majority", "H3", spa, aps)
    kw = {"pct_good_sellers": 1.0, "pct_untrustworthy": 0.0, "obs": obs, "rew": rew}
    return run_cell(spec, W, episodes, seed, cache, kw, workers=workers)


def compute_v_qmdp(model: MarketModel, p_high=None) -> float:
    """QMDP value of a product belief (uniform by default) over the market.

    Quality and trust never change, so with full observability every active
    state is worth the success reward: buy a good seller, or abstain when all
    are bad.  Hence ``Q(query) = -cost + discount * success`` and the terminal
    actions are valued by their expected immediate reward.
    """
    rew = model.rew
    p = np.full(model.n_sellers, 0.5) if p_high is None else np.asarray(p_high, dtype=float)
    v_state = max(rew.reward_success, rew.penalty_failure)
    q = []
    if model.n_sellers and model.n_advisors:
        q.append(-rew.cost_seller_query + rew.discount * v_state)
    if model.n_advisors >= 2:
        q.append(-rew.cost_advisor_query + rew.discount * v_state)
    for pj in p:
        q.append(pj * rew.reward_success + (1 - pj) * rew.penalty_failure)
    p_none = float(np.prod(1 - p))
    q.append(p_none * rew.reward_success + (1 - p_none) * rew.penalty_failure)
    return float(max(q))
