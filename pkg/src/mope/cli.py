"""``mope`` command line: solve, run, sweep, verify."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from joblib import cpu_count

from .config import ConfigError, ExperimentConfig, write_manifest
from .decomposition import DecompositionConfig, policy_cache_key
from .model import MarketModel, ModelError, ObservationParams, RewardParams

EXIT_OK, EXIT_RUN_FAILURE, EXIT_PROPERTY, EXIT_CONFIG = 0, 1, 2, 3

logger = logging.getLogger("mope")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (or a JSON run manifest)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--episodes", type=int, help="episodes per cell")
    common.add_argument("--out-dir", help="directory for CSV and manifest")
    common.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    common.add_argument("--cache-dir", help="policy cache directory (env MOPE_CACHE_DIR)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="mope", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve and cache SP policies")
    sub.add_parser("run", parents=[common], help="run the configured cells")
    sw = sub.add_parser("sweep", parents=[common], help="run the config's sweep grid")
    sw.add_argument("--W", type=lambda s: [int(x) for x in s.split(",")],
                    help="comma-separated population sizes")
    ver = sub.add_parser("verify", parents=[common], help="run a property suite")
    ver.add_argument("suite", choices=["lemma_beliefs", "theorem_lowerbound", "ff_onestep",
                                       "table1"])
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    workers = args.workers
    if workers is None and not args.config:
        workers = cpu_count()
    kw = dict(seed=args.seed, episodes=args.episodes, out_dir=args.out_dir, workers=workers,
              cache_dir=args.cache_dir)
    if getattr(args, "W", None):
        kw["W"] = args.W
    return cfg.override(**kw)


def _cache(cfg: ExperimentConfig):
    from .solver import PolicyCache

    return PolicyCache(cfg.cache_dir, **cfg.solver)


def cmd_solve(cfg: ExperimentConfig) -> int:
    cache = _cache(cfg)
    obs, rew = ObservationParams(**cfg.obs), RewardParams(**cfg.rew)
    model = MarketModel(1, 1, obs, rew)  # only the parameters enter the key
    comps = []
    for spec in cfg.method_specs() + cfg.sweep_specs():
        c = DecompositionConfig.for_aps(spec.aps)
        comp = (c.sellers_per_sp, c.advisors_per_sp)
        if comp not in comps:
            comps.append(comp)
    flagged = 0
    for comp in comps:
        t0 = time.perf_counter()
        _, vf = cache.get(policy_cache_key(comp, model), MarketModel(*comp, obs, rew))
        flagged += not vf.converged
        status = "converged" if vf.converged else "NOT CONVERGED"
        print(f"{comp[0]}s/{comp[1]}a: {len(vf.alphas)} vectors, residual {vf.residual:.2e}, "
              f"{vf.iterations} iterations, {time.perf_counter() - t0:.1f}s, {status}")
    print(f"{len(comps)} composition(s), {cache.solves} solve(s)")
    if flagged:
        logger.warning("%d value function(s) did not reach the residual tolerance", flagged)
    return EXIT_OK


def write_results(report, cfg: ExperimentConfig, name: str = "results") -> Path:
    from .simulator import CSV_COLUMNS

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in report.rows():
            writer.writerow(row)
    write_manifest(out / f"{name}.manifest.json", cfg, {
        "skipped": [list(s) for s in report.skipped()],
        "wallclock_s": round(report.wallclock_s, 3),
    })
    return path


def cmd_run(cfg: ExperimentConfig, sweep: bool = False) -> int:
    from .simulator import run_experiment

    report = run_experiment(cfg, sweep=sweep)
    for W, label, reason in report.skipped():
        print(f"skipped W={W} {label}: {reason}")
    for c in report.cells:
        if c.skipped is None:
            print(f"W={c.W:<4d} {c.method.label():<36s} value {c.mean_value:8.2f} "
                  f"±{c.ci_value:5.2f}  error {c.mean_error:.3f}  ({c.episodes} episodes)")
    path = write_results(report, cfg, "sweep" if sweep else "results")
    print(f"wrote {path}")
    if not report.rows():
        return EXIT_RUN_FAILURE
    return EXIT_OK


def cmd_verify(suite: str, cfg: ExperimentConfig) -> int:
    from . import verify

    kw = {}
    if suite == "theorem_lowerbound":
        kw = {"cache": _cache(cfg), "seed": cfg.seed}
        if cfg.episodes != ExperimentConfig().episodes:
            kw["episodes"] = cfg.episodes
    result = verify.SUITES[suite](**kw)
    print(json.dumps(result, indent=2, default=float))
    print(f"{suite}: {'PASS' if result['passed'] else 'FAIL'}")
    return EXIT_OK if result["passed"] else EXIT_PROPERTY


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_run(cfg, sweep=True)
        return cmd_verify(args.suite, cfg)
    except (ModelError, ValueError) as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
