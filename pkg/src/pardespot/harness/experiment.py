"""Multi-episode experiments, planning benchmarks and parameter sweeps."""
from __future__ import annotations

import dataclasses
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from pardespot.harness.episode import (
    VARIANTS,
    EpisodeRecord,
    EpisodeSettings,
    normalized_nodes,
    plan,
    run_episode,
    variant_config,
)
from pardespot.model import make_model
from pardespot.rng import derive_seed
from pardespot.tree import SearchConfig


@dataclass
class ExperimentConfig:
    domain: str = "navigation"
    domain_params: dict = field(default_factory=dict)
    search: SearchConfig = field(default_factory=SearchConfig)
    episodes: int = 10
    variants: list = field(default_factory=lambda: ["serial", "hybrid"])
    particles: int = 10_000
    step_limit: int | None = None
    seed: int = 0
    output: str | None = None

    def __post_init__(self):
        if isinstance(self.search, dict):
            self.search = SearchConfig(**self.search)
        if self.episodes < 1:
            raise ValueError("episode count must be >= 1")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ValueError(f"unknown variants {bad}; choose from {VARIANTS}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def episode_seed(self, i: int) -> int:
        # shared by all variants: paired comparisons on identical worlds
        return derive_seed(self.seed, i)


def mean_se(values) -> tuple[float, float]:
    values = list(values)
    if not values:
        return 0.0, 0.0
    m = math.fsum(values) / len(values)
    se = statistics.stdev(values) / math.sqrt(len(values)) if len(values) > 1 else 0.0
    return m, se


def aggregate(records: list[EpisodeRecord]) -> dict:
    ret_m, ret_se = mean_se(r.discounted_return for r in records)
    nodes_m, nodes_se = mean_se(r.mean_of("nodes_normalized") for r in records)
    raw_m, _ = mean_se(r.mean_of("nodes") for r in records)
    depth_m, depth_se = mean_se(r.mean_of("max_depth") for r in records)
    succ = [r.success for r in records if r.success is not None]
    return {
        "episodes": len(records),
        "aborted": sum(r.aborted for r in records),
        "return_mean": ret_m,
        "return_se": ret_se,
        "nodes_mean": nodes_m,
        "nodes_se": nodes_se,
        "nodes_raw_mean": raw_m,
        "depth_mean": depth_m,
        "depth_se": depth_se,
        "success_rate": (sum(succ) / len(succ)) if succ else None,
        "steps_mean": mean_se(r.step_count for r in records)[0],
    }


@dataclass
class ExperimentReport:
    config: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def aborted(self) -> int:
        return sum(r.aborted for r in self.records)


def speedups(per_variant: dict, key: str = "nodes_mean") -> dict:
    if "serial" not in per_variant or not per_variant["serial"][key]:
        return {}
    base = per_variant["serial"][key]
    return {v: agg[key] / base for v, agg in per_variant.items()}


def run_experiment(config: ExperimentConfig, progress=None) -> ExperimentReport:
    """Run every variant on the same episode seeds and aggregate."""
    model = make_model(config.domain, **config.domain_params)
    report = ExperimentReport(config.to_dict())
    per_variant = {}
    for variant in config.variants:
        settings = EpisodeSettings(config.domain, config.domain_params, config.search, variant,
                                   config.particles, config.step_limit)
        recs = []
        for i in range(config.episodes):
            rec = run_episode(settings, config.episode_seed(i), i, model)
            recs.append(rec)
            if progress:
                progress(rec)
        report.records.extend(recs)
        per_variant[variant] = aggregate(recs)
    report.summary = {
        "config": report.config,
        "variants": per_variant,
        "speedup": speedups(per_variant),
    }
    return report


def run_planning_benchmark(config: ExperimentConfig, runs: int | None = None) -> dict:
    """Tree size built by single planning calls from initial beliefs.

    Run ``i`` samples a world and its initial belief from seed ``i`` and
    plans once per variant; the budget overrun normalisation applies.
    """
    model = make_model(config.domain, **config.domain_params)
    runs = config.episodes if runs is None else runs
    raw: dict[str, dict[str, list]] = {v: {"nodes": [], "nodes_raw": [], "depth": [], "elapsed": [], "trials": []}
                                       for v in config.variants}
    for i in range(runs):
        seed = config.episode_seed(i)
        rng = np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, 3])
        world = model.sample_initial_state(rng)
        belief = model.initial_belief_for(world, config.particles, rng)
        for v in config.variants:
            cfg = dataclasses.replace(variant_config(config.search, v), seed=seed)
            stats, _ = plan(belief, model, cfg)
            raw[v]["nodes"].append(normalized_nodes(stats.node_count, stats.elapsed, cfg.time_budget))
            raw[v]["nodes_raw"].append(stats.node_count)
            raw[v]["depth"].append(stats.max_depth)
            raw[v]["elapsed"].append(stats.elapsed)
            raw[v]["trials"].append(stats.trials)
    per_variant = {}
    for v, d in raw.items():
        m, se = mean_se(d["nodes"])
        dm, dse = mean_se(d["depth"])
        per_variant[v] = {"runs": runs, "nodes_mean": m, "nodes_se": se, "depth_mean": dm, "depth_se": dse,
                          "elapsed_mean": mean_se(d["elapsed"])[0], "raw": d}
    return {"config": config.to_dict(), "variants": per_variant, "speedup": speedups(per_variant)}


def _apply(config: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param.startswith("domain."):
        params = dict(config.domain_params)
        params[param.split(".", 1)[1]] = value
        return dataclasses.replace(config, domain_params=params)
    if param in {f.name for f in dataclasses.fields(SearchConfig)}:
        return dataclasses.replace(config, search=dataclasses.replace(config.search, **{param: value}))
    if param in {f.name for f in dataclasses.fields(ExperimentConfig)}:
        return dataclasses.replace(config, **{param: value})
    raise ValueError(f"cannot sweep unknown parameter {param!r}")


def run_sweep(config: ExperimentConfig, param: str, values, mode: str = "plan", runs: int | None = None) -> dict:
    """Repeat a benchmark (``mode='plan'``) or an experiment per parameter value."""
    points = []
    for value in values:
        cfg = _apply(config, param, value)
        t0 = time.perf_counter()
        if mode == "plan":
            res = run_planning_benchmark(cfg, runs)
        elif mode == "experiment":
            res = run_experiment(cfg).summary
        else:
            raise ValueError("mode must be 'plan' or 'experiment'")
        points.append({"value": value, "seconds": time.perf_counter() - t0,
                       "variants": res["variants"], "speedup": res["speedup"]})
    return {"param": param, "mode": mode, "config": config.to_dict(), "points": points}
