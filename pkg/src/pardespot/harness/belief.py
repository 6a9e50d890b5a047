"""Particle-filter belief tracking between planning steps."""
from __future__ import annotations

import numpy as np

from pardespot.model import (  # noqa: F401  (re-exported)
    BeliefDegeneracyError,
    EmptyBeliefError,
    Model,
    ParticleBelief,
    batch_take,
    systematic_resample,
)

_SEED_HIGH = 1 << 63


def belief_update(belief: ParticleBelief, action: int, observation, model: Model,
                  rng: np.random.Generator, n_particles: int | None = None) -> ParticleBelief:
    """Bayes update of a particle belief after ``action`` produced ``observation``.

    Domains providing a structured update are honoured; otherwise particles
    are propagated through fresh random transitions, weighted by the
    observation likelihood, normalised and resampled.
    """
    if len(belief) == 0:
        raise EmptyBeliefError("cannot update an empty belief")
    custom = model.belief_update(belief, action, observation, rng)
    if custom is not None:
        return custom
    model.check_action(action)
    n = len(belief)
    n_out = n if n_particles is None else n_particles
    seeds = rng.integers(0, _SEED_HIGH, size=n, dtype=np.int64).astype(np.uint64)
    out = model.step_batch(model.pack(belief.states), np.full(n, action, dtype=np.int64), seeds, 1)
    lik = model.likelihood_batch(out.next_states, action, tuple(observation))
    w = belief.weights * lik
    total = float(w.sum())
    if not total > 0.0:
        raise BeliefDegeneracyError(
            f"observation {tuple(observation)} after action {action} has zero likelihood under all "
            f"{n} particles; the belief no longer supports the true state"
        )
    w = w / total
    idx = systematic_resample(w, n_out, rng)
    states = model.unpack(batch_take(out.next_states, idx))
    return ParticleBelief(states, np.full(n_out, 1.0 / n_out))


def belief_histogram(belief: ParticleBelief, key=lambda s: s) -> dict:
    """Normalised weight per ``key(state)``."""
    hist: dict = {}
    total = float(belief.weights.sum())
    for s, w in zip(belief.states, belief.weights.tolist()):
        k = key(s)
        hist[k] = hist.get(k, 0.0) + w / total
    return hist
