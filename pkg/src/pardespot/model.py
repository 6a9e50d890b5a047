"""Deterministic-scenario POMDP model abstraction and scenario sampling.

A model exposes two faces of the same dynamics:

* a scalar face (``step``, ``upper_bound_heuristic`` ...) operating on one
  immutable state at a time, used by the serial reference backend, the world
  simulator and the tests;
* a batch face (``step_batch`` ...) operating on a *state batch*, a dict of
  equally long numpy arrays, used by the data-parallel backend and the
  particle filter.

Both faces must agree bit for bit. Observations are tuples of ints on the
scalar face and rows of an ``(n, width)`` int64 array on the batch face.
"""
from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from typing import Any, Callable, Hashable, NamedTuple, Sequence

import numpy as np

from pardespot import rng as _rng

Batch = dict[str, np.ndarray]


class ContractViolation(ValueError):
    """A model operation was called outside its precondition."""


class EmptyBeliefError(ValueError):
    pass


class BeliefDegeneracyError(ValueError):
    """No particle explains the observation."""


@dataclass(frozen=True)
class ModelSpec:
    action_count: int
    discount: float
    max_rollout_depth: int
    factored_element_count: int = 1

    def __post_init__(self):
        if self.action_count < 1:
            raise ContractViolation("action_count must be >= 1")
        if not 0.0 < self.discount < 1.0:
            raise ContractViolation("discount must lie in (0, 1)")
        if self.max_rollout_depth < 1:
            raise ContractViolation("max_rollout_depth must be >= 1")
        if self.factored_element_count < 1:
            raise ContractViolation("factored_element_count must be >= 1")


@dataclass(frozen=True)
class Scenario:
    id: int
    initial_state: Any
    stream_seed: int


class StepOutcome(NamedTuple):
    next_state: Any
    observation: Hashable
    reward: float
    terminal: bool


class BatchStep(NamedTuple):
    next_states: Batch
    observations: np.ndarray  # (n, width) int64
    rewards: np.ndarray  # (n,) float64
    terminal: np.ndarray  # (n,) bool


def batch_len(batch: Batch) -> int:
    return len(next(iter(batch.values())))


def batch_take(batch: Batch, index) -> Batch:
    return {k: v[index] for k, v in batch.items()}


def batch_concat(batches: Sequence[Batch]) -> Batch:
    if len(batches) == 1:
        return batches[0]
    return {k: np.concatenate([b[k] for b in batches]) for k in batches[0]}


def batch_where(mask: np.ndarray, a: Batch, b: Batch) -> Batch:
    """Row-wise select: rows of ``a`` where ``mask`` holds, else rows of ``b``."""
    out = {}
    for k, x in a.items():
        m = mask.reshape((-1,) + (1,) * (x.ndim - 1))
        out[k] = np.where(m, x, b[k])
    return out


def batch_equal(a: Batch, b: Batch) -> bool:
    """Bit-level equality of two state batches."""
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = a[k], b[k]
        if x.shape != y.shape or x.dtype != y.dtype:
            return False
        if x.dtype.kind == "f":
            if not np.array_equal(x.view(np.uint64), y.view(np.uint64)):
                return False
        elif not np.array_equal(x, y):
            return False
    return True


def _seed_of(scenario) -> int:
    return scenario.stream_seed if isinstance(scenario, Scenario) else int(scenario)


class Model(abc.ABC):
    """Base class every domain derives from.

    Subclasses implement ``_step`` and the batch face. States are immutable
    and models never change after construction, so every method may be
    called concurrently.
    """

    name = "model"
    spec: ModelSpec

    # -- scalar face ---------------------------------------------------------

    def check_action(self, action: int) -> None:
        if not 0 <= action < self.spec.action_count:
            raise ContractViolation(
                f"action {action} outside [0, {self.spec.action_count})"
            )

    def step(self, state, action: int, scenario, depth: int) -> StepOutcome:
        """Deterministic step driven by the scenario's draws at ``depth``.

        ``scenario`` may be a :class:`Scenario` or a bare stream seed.
        """
        self.check_action(action)
        if depth < 1:
            raise ContractViolation("depth must be >= 1")
        return self._step(state, int(action), _seed_of(scenario), depth)

    @abc.abstractmethod
    def _step(self, state, action: int, seed: int, depth: int) -> StepOutcome:
        ...

    def step_factored(self, state, action: int, scenario, depth: int, element_index: int):
        """Partial outcome of one factored element.

        The default model has a single element whose partial outcome is the
        full step.
        """
        if not 0 <= element_index < self.spec.factored_element_count:
            raise ContractViolation(f"element index {element_index} out of range")
        return self.step(state, action, scenario, depth)

    def compose_factored(self, state, action: int, scenario, depth: int, partials: Sequence) -> StepOutcome:
        """Combine partial outcomes (ascending element order) into a step."""
        if len(partials) != self.spec.factored_element_count:
            raise ContractViolation("one partial outcome per element required")
        return partials[0]

    def step_via_factors(self, state, action: int, scenario, depth: int) -> StepOutcome:
        parts = [
            self.step_factored(state, action, scenario, depth, e)
            for e in range(self.spec.factored_element_count)
        ]
        return self.compose_factored(state, action, scenario, depth, parts)

    def rollout_step(self, state, action: int, seed: int, depth: int):
        """``(next_state, reward, terminal)`` of :meth:`step`, observation unused.

        Domains with expensive observations override this; the result must
        match ``step`` exactly.
        """
        out = self._step(state, action, seed, depth)
        return out.next_state, out.reward, out.terminal

    @abc.abstractmethod
    def is_terminal(self, state) -> bool:
        ...

    @abc.abstractmethod
    def upper_bound_heuristic(self, state) -> float:
        ...

    @abc.abstractmethod
    def lower_bound_heuristic(self, state) -> float:
        """Value estimate of the tail beyond the rollout depth."""

    @abc.abstractmethod
    def default_policy_action(self, state, depth: int) -> int:
        ...

    @abc.abstractmethod
    def observation_likelihood(self, next_state, action: int, observation) -> float:
        ...

    def success(self, state) -> bool | None:
        """Task-specific success flag; ``None`` where the metric is undefined."""
        return None

    # -- initial beliefs and the world ----------------------------------------

    @abc.abstractmethod
    def sample_initial_state(self, rng: np.random.Generator):
        ...

    def initial_belief(self, n_particles: int, rng: np.random.Generator) -> "ParticleBelief":
        states = [self.sample_initial_state(rng) for _ in range(n_particles)]
        return ParticleBelief(states, np.full(n_particles, 1.0 / n_particles))

    def initial_belief_for(self, world_state, n_particles: int, rng: np.random.Generator) -> "ParticleBelief":
        """Initial belief given the (hidden) world; most domains ignore it."""
        return self.initial_belief(n_particles, rng)

    def belief_update(self, belief, action, observation, rng):
        """Hook for structured updates; ``None`` selects the generic filter."""
        return None

    # -- batch face -----------------------------------------------------------

    @abc.abstractmethod
    def pack(self, states: Sequence) -> Batch:
        ...

    @abc.abstractmethod
    def unpack(self, batch: Batch) -> list:
        ...

    @abc.abstractmethod
    def step_batch(self, batch: Batch, actions: np.ndarray, seeds: np.ndarray, depth: int) -> BatchStep:
        ...

    def rollout_step_batch(self, batch: Batch, actions: np.ndarray, seeds: np.ndarray, depth: int):
        """Batch counterpart of :meth:`rollout_step`."""
        out = self.step_batch(batch, actions, seeds, depth)
        return out.next_states, out.rewards, out.terminal

    @abc.abstractmethod
    def terminal_batch(self, batch: Batch) -> np.ndarray:
        ...

    @abc.abstractmethod
    def upper_bound_batch(self, batch: Batch) -> np.ndarray:
        ...

    @abc.abstractmethod
    def lower_bound_batch(self, batch: Batch) -> np.ndarray:
        ...

    @abc.abstractmethod
    def default_policy_batch(self, batch: Batch, depth: int) -> np.ndarray:
        ...

    def likelihood_batch(self, batch: Batch, action: int, observation) -> np.ndarray:
        states = self.unpack(batch)
        return np.array(
            [self.observation_likelihood(s, action, observation) for s in states],
            dtype=np.float64,
        )

    # -- serialisation ----------------------------------------------------------

    def state_to_json(self, state):
        return state

    def state_from_json(self, data):
        return data

    def describe(self) -> dict:
        return {"name": self.name, **vars(self.spec)}


class ParticleBelief:
    """Weighted particle set over scalar states."""

    def __init__(self, states: Sequence, weights=None, aux: dict | None = None):
        self.states = list(states)
        # domain-specific sufficient statistics carried alongside the particles
        self.aux = dict(aux or {})
        n = len(self.states)
        if weights is None:
            weights = np.full(n, 1.0 / n) if n else np.zeros(0)
        self.weights = np.asarray(weights, dtype=np.float64)
        if len(self.weights) != n:
            raise ValueError("one weight per particle required")

    def __len__(self):
        return len(self.states)

    def to_json(self, model: Model) -> dict:
        out = {
            "states": [model.state_to_json(s) for s in self.states],
            "weights": self.weights.tolist(),
        }
        if self.aux:
            out["aux"] = {k: np.asarray(v).tolist() for k, v in self.aux.items()}
        return out

    @classmethod
    def from_json(cls, data: dict, model: Model) -> "ParticleBelief":
        aux = {k: np.asarray(v) for k, v in data.get("aux", {}).items()}
        return cls([model.state_from_json(s) for s in data["states"]], data["weights"], aux)


def systematic_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` particles drawn by systematic resampling (weights sum to 1).

    The particles are visited in a random order; a periodic order (say
    alternating states) can otherwise alias with the even pointer stride.
    """
    perm = rng.permutation(len(weights))
    cdf = np.cumsum(np.asarray(weights)[perm])
    cdf[-1] = 1.0
    positions = (rng.random() + np.arange(n)) / n
    return perm[np.minimum(np.searchsorted(cdf, positions, side="right"), len(weights) - 1)]


def sample_scenarios(belief: ParticleBelief, K: int, seed: int) -> list[Scenario]:
    """Draw ``K`` scenarios i.i.d. from the belief's weighted particles."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(belief) == 0:
        raise EmptyBeliefError("cannot sample scenarios from an empty belief")
    w = belief.weights
    total = float(w.sum())
    if not total > 0.0:
        raise EmptyBeliefError("belief weights sum to zero")
    gen = np.random.default_rng(_rng.derive_seed(seed, 0x5CE7A210))
    idx = gen.choice(len(belief), size=K, p=w / total)
    return [
        Scenario(i, belief.states[j], _rng.derive_seed(seed, i + 1))
        for i, j in enumerate(idx.tolist())
    ]


# -- domain registry ---------------------------------------------------------

_REGISTRY: dict[str, Callable[..., Model]] = {}


def register(name: str):
    def deco(factory):
        _REGISTRY[name] = factory
        return factory

    return deco


def make_model(name: str, **params) -> Model:
    import pardespot.domains  # noqa: F401  (populates the registry)

    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown domain {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(**params)


def domain_names() -> list[str]:
    import pardespot.domains  # noqa: F401

    return sorted(_REGISTRY)


def geometric_tail(value_per_step: float, discount: float) -> float:
    return value_per_step / (1.0 - discount)


def fmean(values) -> float:
    """Mean with an exactly rounded sum, independent of summation order."""
    values = list(values)
    return math.fsum(values) / len(values)
