"""Experiment configuration: YAML file, validation, and run manifest."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .aggregation import AGGREGATORS, HIERARCHIES
from .model import ModelError, ObservationParams, RewardParams
from .policy import BELIEF_MODES
from .simulator import SAMPLING, MethodSpec


class ConfigError(ValueError):
    pass


METHOD_NAMES = ("mope", "single_expert")
SWEEP_KEYS = ("spa", "aps", "hierarchy", "aggregator", "belief_mode")


@dataclass
class ExperimentConfig:
    """Every knob of a run.

    ``methods`` entries are mappings with a ``name`` ("mope" or
    "single_expert") and optional ``aggregator``, ``hierarchy``, ``spa``,
    ``aps``, ``belief_mode``; missing keys take the top-level defaults.
    """

    W: list = field(default_factory=lambda: [10])
    methods: list = field(default_factory=lambda: [{"name": "mope"}])
    spa: int = 4
    aps: int = 5
    hierarchy: str = "H3"
    aggregator: str = "majority"
    belief_mode: str | None = None
    episodes: int = 500
    seed: int = 0
    max_steps: int = 100
    workers: int = 1
    cache_dir: str | None = None
    out_dir: str = "results"
    market: dict = field(default_factory=lambda: {
        "pct_sellers": 0.2, "pct_untrustworthy": 0.2, "pct_good_sellers": 0.5,
        "sampling": "exact"})
    obs: dict = field(default_factory=lambda: asdict(ObservationParams()))
    rew: dict = field(default_factory=lambda: asdict(RewardParams()))
    solver: dict = field(default_factory=lambda: {
        "n_beliefs": 500, "epsilon": 1e-3, "max_iter": 500, "seed": 0})
    sweep: dict = field(default_factory=dict)

    # -- construction ------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        for key in ("market", "obs", "rew", "solver"):
            if key in data:
                if not isinstance(data[key], dict):
                    raise ConfigError(f"{key} must be a mapping")
                extra = set(data[key]) - set(getattr(base, key))
                if extra:
                    raise ConfigError(f"unknown {key} keys: {sorted(extra)}")
                data[key] = {**getattr(base, key), **data[key]}
        if "W" in data and isinstance(data["W"], int):
            data["W"] = [data["W"]]
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if isinstance(data, dict) and "config" in data and "format" in data:
            data = data["config"]  # a run manifest
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(data or {})

    def override(self, **kw) -> "ExperimentConfig":
        """Copy with the non-None keyword values replaced (command-line flags)."""
        data = self.to_dict()
        data.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_dict(data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    # -- validation ------------------------------------------------------------------

    def validate(self) -> None:
        if not self.W or any(not isinstance(w, int) or w < 2 for w in self.W):
            raise ConfigError("W must be a non-empty list of integers >= 2")
        for name in ("episodes", "max_steps", "workers", "spa", "aps"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.methods:
            raise ConfigError("at least one method is required")
        try:
            ObservationParams(**self.obs)
            RewardParams(**self.rew)
        except (TypeError, ModelError) as exc:
            raise ConfigError(f"bad model parameters: {exc}") from exc
        m = self.market
        for key in ("pct_sellers", "pct_untrustworthy", "pct_good_sellers"):
            if not 0.0 <= float(m[key]) <= 1.0:
                raise ConfigError(f"market.{key} must lie in [0, 1]")
        if m["sampling"] not in SAMPLING:
            raise ConfigError(f"market.sampling must be one of {SAMPLING}")
        if not isinstance(self.sweep, dict):
            raise ConfigError("sweep must be a mapping of method keys to lists")
        for key, vals in self.sweep.items():
            if key not in SWEEP_KEYS:
                raise ConfigError(f"sweep key {key!r} not one of {SWEEP_KEYS}")
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"sweep.{key} must be a non-empty list")
        for spec in self.method_specs() + self.sweep_specs():
            if spec.name not in METHOD_NAMES:
                raise ConfigError(f"unknown method {spec.name!r}; expected {METHOD_NAMES}")
            if spec.aggregator not in AGGREGATORS:
                raise ConfigError(f"unknown aggregator {spec.aggregator!r}")
            if spec.hierarchy not in HIERARCHIES:
                raise ConfigError(f"unknown hierarchy {spec.hierarchy!r}")
            if spec.belief_mode is not None and spec.belief_mode not in BELIEF_MODES:
                raise ConfigError(f"unknown belief_mode {spec.belief_mode!r}")
            if spec.name == "mope" and (spec.aggregator == "parallel_maxq") != (
                    spec.resolved_belief() == "parallel"):
                raise ConfigError("parallel_maxq requires belief_mode 'parallel' and vice versa")
            if spec.aps < 2 or spec.spa < 1:
                raise ConfigError("aps must be >= 2 and spa >= 1")

    # -- views -----------------------------------------------------------------------

    def method_specs(self) -> list[MethodSpec]:
        specs = []
        for entry in self.methods:
            if isinstance(entry, str):
                entry = {"name": entry}
            if not isinstance(entry, dict) or "name" not in entry:
                raise ConfigError(f"bad method entry {entry!r}")
            extra = set(entry) - {"name", "aggregator", "hierarchy", "spa", "aps", "belief_mode"}
            if extra:
                raise ConfigError(f"unknown method keys: {sorted(extra)}")
            specs.append(MethodSpec(
                name=entry["name"],
                aggregator=entry.get("aggregator", self.aggregator),
                hierarchy=entry.get("hierarchy", self.hierarchy),
                spa=int(entry.get("spa", self.spa)),
                aps=int(entry.get("aps", self.aps)),
                belief_mode=entry.get("belief_mode", self.belief_mode),
            ))
        return specs

    def sweep_specs(self) -> list[MethodSpec]:
        """MOPE methods crossed with every combination of the ``sweep`` lists."""
        if not self.sweep:
            return []
        keys = list(self.sweep)
        out = []
        for spec in self.method_specs():
            if spec.name != "mope":
                out.append(spec)
                continue
            for combo in itertools.product(*(self.sweep[k] for k in keys)):
                out.append(replace(spec, **dict(zip(keys, combo))))
        seen, unique = set(), []
        for s in out:
            if s not in seen:
                seen.add(s)
                unique.append(s)
        return unique

    def market_kwargs(self) -> dict:
        return {**self.market, "obs": ObservationParams(**self.obs),
                "rew": RewardParams(**self.rew)}


def write_manifest(path, config: ExperimentConfig, extra: dict | None = None) -> None:
    payload = {"format": "mope-run-manifest/1", "config": config.to_dict()}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
