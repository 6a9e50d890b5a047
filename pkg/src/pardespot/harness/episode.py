"""Closed-loop episodes: plan, act in a simulated world, observe, update."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from pardespot.backend import Backend, make_backend
from pardespot.harness.belief import belief_update
from pardespot.model import Model, make_model
from pardespot.parallel import parallel_search
from pardespot.rng import derive_seed
from pardespot.tree import SearchConfig, serial_search

log = logging.getLogger(__name__)

VARIANTS = ("serial", "parallel-tree-only", "parallel-backend-only", "hybrid")

# navigation success means reaching the goal within 60 steps
DEFAULT_STEP_LIMITS = {"navigation": 60, "tiger": 30, "chain": 30, "mars": 60, "driving": 120}
OVERRUN_TOLERANCE = 0.05


def variant_config(search: SearchConfig, variant: str) -> SearchConfig:
    """Search settings a planner variant actually runs with."""
    if variant == "serial":
        return dataclasses.replace(search, workers=1, backend="serial")
    if variant == "parallel-tree-only":
        return dataclasses.replace(search, backend="serial")
    if variant == "parallel-backend-only":
        return dataclasses.replace(search, workers=1, backend="parallel")
    if variant == "hybrid":
        return dataclasses.replace(search, backend="parallel")
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def plan(belief, model: Model, search: SearchConfig, backend: Backend | None = None):
    """One planning call: the serial search for a single worker, the shared-tree search otherwise."""
    if search.workers == 1 and (search.time_budget is None or search.time_budget > 0):
        return serial_search(belief, model, search, backend)
    return parallel_search(belief, model, search, backend)


def normalized_nodes(nodes: int, elapsed: float, budget: float | None) -> float:
    """Tree size scaled back to the budget when the planner overran it by more than 5%."""
    if budget and elapsed > budget * (1.0 + OVERRUN_TOLERANCE):
        return nodes * budget / elapsed
    return float(nodes)


@dataclass
class StepRecord:
    t: int
    action: int
    observation: list
    reward: float
    nodes: int
    nodes_normalized: float
    trials: int
    max_depth: int
    elapsed: float
    root_upper: float
    root_lower: float


@dataclass
class EpisodeRecord:
    domain: str
    variant: str
    episode: int
    seed: int
    discount: float
    steps: list = field(default_factory=list)
    discounted_return: float = 0.0
    undiscounted_return: float = 0.0
    success: bool | None = None
    terminal: bool = False
    aborted: bool = False
    error: str = ""

    @property
    def step_count(self) -> int:
        return len(self.steps)

    def recompute_return(self) -> float:
        return math.fsum(self.discount ** s.t * s.reward for s in self.steps)

    def mean_of(self, attr: str) -> float:
        if not self.steps:
            return 0.0
        return math.fsum(getattr(s, attr) for s in self.steps) / len(self.steps)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["step_count"] = self.step_count
        return d


@dataclass
class EpisodeSettings:
    domain: str
    domain_params: dict
    search: SearchConfig
    variant: str = "hybrid"
    particles: int = 10_000
    step_limit: int | None = None


def run_episode(settings: EpisodeSettings, seed: int, episode: int = 0, model: Model | None = None) -> EpisodeRecord:
    """Run one closed-loop episode; planner failures abort it with the partial log kept."""
    model = model or make_model(settings.domain, **settings.domain_params)
    search = variant_config(settings.search, settings.variant)
    limit = settings.step_limit
    if limit is None:
        limit = DEFAULT_STEP_LIMITS.get(settings.domain, 60)
    gamma = model.spec.discount
    rec = EpisodeRecord(settings.domain, settings.variant, episode, seed, gamma)
    world_rng = np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, 1])
    belief_rng = np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, 2])
    world = model.sample_initial_state(world_rng)
    if limit <= 0:
        rec.success = model.success(world)
        return rec
    backend = make_backend(search.backend, model, search.max_depth)
    try:
        belief = model.initial_belief_for(world, settings.particles, belief_rng)
        for t in range(limit):
            if model.is_terminal(world):
                break
            cfg = dataclasses.replace(search, seed=derive_seed(seed, t))
            stats, tree = plan(belief, model, cfg, backend)
            action = stats.root_action
            if action is None:
                action = model.default_policy_action(world, 0)
            out = model.step(world, action, int(world_rng.integers(0, 1 << 63)), 1)
            rec.steps.append(StepRecord(
                t=t,
                action=int(action),
                observation=[int(v) for v in out.observation],
                reward=float(out.reward),
                nodes=stats.node_count,
                nodes_normalized=normalized_nodes(stats.node_count, stats.elapsed, cfg.time_budget),
                trials=stats.trials,
                max_depth=stats.max_depth,
                elapsed=stats.elapsed,
                root_upper=stats.root_upper,
                root_lower=stats.root_lower,
            ))
            rec.discounted_return += gamma ** t * out.reward
            rec.undiscounted_return += out.reward
            world = out.next_state
            if out.terminal:
                break
            belief = belief_update(belief, action, out.observation, model, belief_rng, settings.particles)
    except Exception as exc:
        rec.aborted = True
        rec.error = f"{type(exc).__name__}: {exc}"
        log.warning("episode %d (%s) aborted: %s", episode, settings.variant, rec.error)
        log.debug("%s", traceback.format_exc())
    finally:
        backend.shutdown()
    rec.terminal = model.is_terminal(world)
    rec.success = model.success(world)
    return rec
