"""Leaf expansion and bound initialisation behind interchangeable backends.

One expansion request carries the parent's states for the leaf's scenarios.
Executing it performs three tasks:

1. *update*: replay the leaf's incoming action on the gathered parent states;
2. *expansion*: step every (action, scenario) pair once;
3. *roll-out*: initialise each new child's bounds, the upper bound as the
   scenario mean of the model heuristic and the lower bound as the scenario
   mean of default-policy roll-outs.

The serial backend runs all of this one scalar step at a time; the parallel
backend vectorises over (action x scenario) rows and serves many requests
concurrently. Reductions go through :func:`pardespot.model.fmean`, whose
exactly rounded sum makes both backends agree bit for bit.
"""
from __future__ import annotations

import logging
import os
import queue
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pardespot.model import Batch, Model, batch_concat, batch_equal, batch_len, batch_take, batch_where, fmean

log = logging.getLogger(__name__)


class BackendShutdown(RuntimeError):
    pass


@dataclass
class ExpansionRequest:
    node_id: int
    parent_states: Batch
    scenario_ids: np.ndarray
    stream_seeds: np.ndarray
    depth: int
    last_action: int | None = None

    def __post_init__(self):
        self.scenario_ids = np.asarray(self.scenario_ids, dtype=np.int64)
        self.stream_seeds = np.asarray(self.stream_seeds, dtype=np.uint64)
        n = len(self.scenario_ids)
        if n < 1:
            raise ValueError("an expansion request needs at least one scenario")
        if batch_len(self.parent_states) != n or len(self.stream_seeds) != n:
            raise ValueError("parent_states, scenario_ids and stream_seeds must align")


@dataclass
class ChildInit:
    action: int
    observation: tuple
    scenario_ids: np.ndarray
    upper: float
    lower: float


@dataclass
class ExpansionResult:
    node_id: int
    depth: int
    node_states: Batch
    node_terminal: np.ndarray
    observations: np.ndarray  # (A, n, width)
    rewards: np.ndarray  # (A, n)
    terminal: np.ndarray  # (A, n)
    next_states: Batch  # A * n rows, action-major
    mean_step_reward: list[float]
    children: list[ChildInit]
    timings: dict = field(default_factory=dict, compare=False)

    def identical(self, other: "ExpansionResult") -> bool:
        """Bit-level equality, ignoring timings."""
        if (self.node_id, self.depth) != (other.node_id, other.depth):
            return False
        if not (batch_equal(self.node_states, other.node_states)
                and batch_equal(self.next_states, other.next_states)):
            return False
        if not (np.array_equal(self.node_terminal, other.node_terminal)
                and np.array_equal(self.observations, other.observations)
                and np.array_equal(self.terminal, other.terminal)
                and np.array_equal(self.rewards.view(np.uint64), other.rewards.view(np.uint64))):
            return False
        if self.mean_step_reward != other.mean_step_reward or len(self.children) != len(other.children):
            return False
        for a, b in zip(self.children, other.children):
            if (a.action, a.observation, a.upper, a.lower) != (b.action, b.observation, b.upper, b.lower):
                return False
            if not np.array_equal(a.scenario_ids, b.scenario_ids):
                return False
        return True


# -- scalar reference ----------------------------------------------------------


def rollout(state, scenario, start_depth: int, model: Model, max_depth: int | None = None) -> float:
    """Discounted default-policy return from ``start_depth`` up to ``max_depth``,
    with the model's tail heuristic standing in for everything beyond."""
    D = model.spec.max_rollout_depth if max_depth is None else max_depth
    if start_depth > D:
        raise ValueError("start_depth exceeds the maximum depth")
    if model.is_terminal(state):
        return 0.0
    gamma = model.spec.discount
    total, disc = 0.0, 1.0
    t = start_depth
    seed = scenario.stream_seed if hasattr(scenario, "stream_seed") else int(scenario)
    while t < D:
        action = model.default_policy_action(state, t)
        model.check_action(action)
        state, reward, terminal = model.rollout_step(state, action, seed, t + 1)
        total += disc * reward
        disc *= gamma
        t += 1
        if terminal:
            return total
    return total + disc * model.lower_bound_heuristic(state)


def _group_children(action, obs_keys, scenario_ids, ub, lb) -> list[ChildInit]:
    groups: dict[tuple, list[int]] = {}
    for i, key in enumerate(obs_keys):
        groups.setdefault(key, []).append(i)
    children = []
    for key in sorted(groups):
        members = groups[key]
        upper = fmean(ub[i] for i in members)
        lower = fmean(lb[i] for i in members)
        children.append(ChildInit(action, key, scenario_ids[members], max(upper, lower), lower))
    return children


def expand_serial(request: ExpansionRequest, model: Model, max_depth: int) -> ExpansionResult:
    """Reference expansion, one scalar step at a time."""
    t0 = time.perf_counter()
    seeds = [int(s) for s in request.stream_seeds]
    states = model.unpack(request.parent_states)
    d = request.depth
    if request.last_action is not None:
        states = [model.step(s, request.last_action, sd, d).next_state for s, sd in zip(states, seeds)]
    t1 = time.perf_counter()
    A, n = model.spec.action_count, len(states)
    obs_rows, rewards, terms, nexts = [], [], [], []
    means, children = [], []
    rollout_time = 0.0
    for a in range(A):
        outs = [model.step(s, a, sd, d + 1) for s, sd in zip(states, seeds)]
        keys = [o.observation for o in outs]
        ub = [0.0 if o.terminal else model.upper_bound_heuristic(o.next_state) for o in outs]
        r0 = time.perf_counter()
        lb = [0.0 if o.terminal else rollout(o.next_state, sd, d + 1, model, max_depth)
              for o, sd in zip(outs, seeds)]
        rollout_time += time.perf_counter() - r0
        obs_rows.append(keys)
        rewards.append([o.reward for o in outs])
        terms.append([o.terminal for o in outs])
        nexts.extend(o.next_state for o in outs)
        means.append(fmean(rewards[-1]))
        children.extend(_group_children(a, keys, request.scenario_ids, ub, lb))
    t2 = time.perf_counter()
    return ExpansionResult(
        node_id=request.node_id,
        depth=d,
        node_states=model.pack(states),
        node_terminal=np.array([model.is_terminal(s) for s in states], dtype=bool),
        observations=np.array(obs_rows, dtype=np.int64).reshape(A, n, -1),
        rewards=np.array(rewards, dtype=np.float64),
        terminal=np.array(terms, dtype=bool),
        next_states=model.pack(nexts),
        mean_step_reward=means,
        children=children,
        timings={"update": t1 - t0, "expansion": t2 - t1 - rollout_time,
                 "rollout": rollout_time, "total": t2 - t0, "coalesced": 1},
    )


def initial_bounds_serial(model: Model, states: list, seeds, depth: int, max_depth: int) -> tuple[float, float]:
    ub = [0.0 if model.is_terminal(s) else model.upper_bound_heuristic(s) for s in states]
    lb = [rollout(s, int(sd), depth, model, max_depth) for s, sd in zip(states, seeds)]
    return max(fmean(ub), fmean(lb)), fmean(lb)


# -- vectorised implementation -------------------------------------------------


def rollout_batch(model: Model, batch: Batch, seeds: np.ndarray, start_depth, max_depth: int) -> np.ndarray:
    """Vectorised :func:`rollout`; identical arithmetic row by row.

    ``start_depth`` may differ per row. Every row starts with discount 1 and
    advances one step per iteration, so the discount stays shared.
    """
    n = batch_len(batch)
    total = np.zeros(n)
    t = np.broadcast_to(np.asarray(start_depth, dtype=np.int64), (n,))
    if (t > max_depth).any():
        raise ValueError("start_depth exceeds the maximum depth")
    rows = np.flatnonzero(~model.terminal_batch(batch))
    cur = batch_take(batch, rows)
    cur_seeds = seeds[rows]
    t = t[rows]
    gamma = model.spec.discount
    disc = 1.0
    while len(rows):
        capped = t >= max_depth
        if capped.any():
            done = rows[capped]
            total[done] = total[done] + disc * model.lower_bound_batch(batch_take(cur, capped))
            keep = ~capped
            rows, t, cur_seeds = rows[keep], t[keep], cur_seeds[keep]
            cur = batch_take(cur, keep)
            if not len(rows):
                break
        acts = model.default_policy_batch(cur, t)
        nxt, rewards, terminal = model.rollout_step_batch(cur, acts, cur_seeds, t + 1)
        total[rows] = total[rows] + disc * rewards
        disc *= gamma
        keep = ~terminal
        rows, t, cur_seeds = rows[keep], t[keep] + 1, cur_seeds[keep]
        cur = batch_take(nxt, keep)
    return total


def _group_children_batch(action, obs, scenario_ids, ub, lb) -> list[ChildInit]:
    keys, inverse = np.unique(obs, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(np.bincount(inverse, minlength=len(keys)))[:-1]
    children = []
    for key, members in zip(keys.tolist(), np.split(order, bounds)):
        upper = fmean(ub[members].tolist())
        lower = fmean(lb[members].tolist())
        children.append(ChildInit(action, tuple(key), scenario_ids[members], max(upper, lower), lower))
    return children


def expand_many(requests: list[ExpansionRequest], model: Model, max_depth: int,
                rollout_fn=None) -> list[ExpansionResult]:
    """Expand several leaves in one vectorised pass.

    Rows of all requests are stacked (request, action, scenario) and stepped
    together; each row only ever sees its own state, seed and depth, so every
    result equals the one from expanding its request alone.
    """
    t0 = time.perf_counter()
    for r in requests:
        if r.last_action is not None:
            model.check_action(r.last_action)
    rollout_fn = rollout_fn or (lambda b, s, d: rollout_batch(model, b, s, d, max_depth))
    sizes = [len(r.stream_seeds) for r in requests]
    seeds = np.concatenate([r.stream_seeds for r in requests])
    states = batch_concat([r.parent_states for r in requests])
    depth = np.repeat(np.array([r.depth for r in requests], dtype=np.int64), sizes)
    replay = np.repeat(np.array([r.last_action is not None for r in requests]), sizes)
    if replay.any():
        last = np.repeat(np.array([r.last_action or 0 for r in requests], dtype=np.int64), sizes)
        stepped = model.step_batch(states, last, seeds, np.maximum(depth, 1)).next_states
        states = stepped if replay.all() else batch_where(replay, stepped, states)
    t1 = time.perf_counter()
    A = model.spec.action_count
    starts = np.concatenate([[0], np.cumsum(sizes)])
    idx = np.concatenate([np.tile(np.arange(starts[i], starts[i + 1]), A) for i in range(len(requests))])
    acts = np.concatenate([np.repeat(np.arange(A, dtype=np.int64), n) for n in sizes])
    row_seeds, row_depth = seeds[idx], depth[idx] + 1
    out = model.step_batch(batch_take(states, idx), acts, row_seeds, row_depth)
    ub = np.where(out.terminal, 0.0, model.upper_bound_batch(out.next_states))
    r0 = time.perf_counter()
    lb = rollout_fn(out.next_states, row_seeds, row_depth)
    r1 = time.perf_counter()
    node_terminal = model.terminal_batch(states)
    results = []
    base = 0
    for i, req in enumerate(requests):
        n = sizes[i]
        rs = slice(starts[i], starts[i + 1])
        block = slice(base, base + A * n)
        base += A * n
        obs = out.observations[block].reshape(A, n, -1)
        rewards = out.rewards[block].reshape(A, n)
        ub_i, lb_i = ub[block], lb[block]
        means, children = [], []
        for a in range(A):
            sl = slice(a * n, (a + 1) * n)
            means.append(fmean(rewards[a].tolist()))
            children.extend(_group_children_batch(a, obs[a], req.scenario_ids, ub_i[sl], lb_i[sl]))
        results.append(ExpansionResult(
            node_id=req.node_id,
            depth=req.depth,
            node_states=batch_take(states, rs),
            node_terminal=node_terminal[rs],
            observations=obs,
            rewards=rewards,
            terminal=out.terminal[block].reshape(A, n),
            next_states=batch_take(out.next_states, block),
            mean_step_reward=means,
            children=children,
        ))
    t2 = time.perf_counter()
    share = 1.0 / len(requests)
    for res in results:
        res.timings = {"update": (t1 - t0) * share, "expansion": (t2 - t1 - (r1 - r0)) * share,
                       "rollout": (r1 - r0) * share, "total": (t2 - t0) * share,
                       "coalesced": len(requests)}
    return results


def expand_batch(request: ExpansionRequest, model: Model, max_depth: int, rollout_fn=None) -> ExpansionResult:
    return expand_many([request], model, max_depth, rollout_fn)[0]


def initial_bounds_batch(model: Model, batch: Batch, seeds, depth: int, max_depth: int) -> tuple[float, float]:
    seeds = np.asarray(seeds, dtype=np.uint64)
    ub = np.where(model.terminal_batch(batch), 0.0, model.upper_bound_batch(batch))
    lb = rollout_batch(model, batch, seeds, depth, max_depth)
    upper, lower = fmean(ub.tolist()), fmean(lb.tolist())
    return max(upper, lower), lower


# -- backends ------------------------------------------------------------------


class Backend:
    """Thread-safe expansion service.

    ``submit`` may be called from any number of tree workers; each request's
    result is delivered exactly once through its future.
    """

    name = "base"

    def __init__(self, model: Model, max_depth: int | None = None):
        if model.spec.action_count < 1:
            raise ValueError("model must have at least one action")
        self.model = model
        self.max_depth = model.spec.max_rollout_depth if max_depth is None else max_depth
        self._lock = threading.Lock()
        self._closed = False
        self.counters = {"requests": 0, "batches": 0, "update": 0.0, "expansion": 0.0,
                         "rollout": 0.0, "total": 0.0}

    def _record(self, results: list[ExpansionResult]) -> list[ExpansionResult]:
        with self._lock:
            self.counters["requests"] += len(results)
            self.counters["batches"] += 1
            for res in results:
                for k in ("update", "expansion", "rollout", "total"):
                    self.counters[k] += res.timings.get(k, 0.0)
        return results

    def expand(self, request: ExpansionRequest) -> ExpansionResult:
        raise NotImplementedError

    def submit(self, request: ExpansionRequest) -> Future:
        if self._closed:
            raise BackendShutdown(f"{self.name} backend is shut down")
        fut: Future = Future()
        try:
            fut.set_result(self.expand(request))
        except BaseException as exc:  # delivered through the future
            fut.set_exception(exc)
        return fut

    def initial_bounds(self, batch: Batch, seeds, depth: int = 0) -> tuple[float, float]:
        raise NotImplementedError

    def shutdown(self):
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


class SerialBackend(Backend):
    """Reference backend: one scalar step at a time in the caller's thread."""

    name = "serial"

    def expand(self, request):
        return self._record([expand_serial(request, self.model, self.max_depth)])[0]

    def initial_bounds(self, batch, seeds, depth=0):
        return initial_bounds_serial(self.model, self.model.unpack(batch), seeds, depth, self.max_depth)


class ParallelBackend(Backend):
    """Data-parallel backend.

    Submitted requests queue up for a dispatcher, which expands everything
    pending as one vectorised pass: the leaves (node level), their
    (action x scenario) rows and factored elements all become array lanes.
    With more than one hardware thread, large roll-out batches are further
    split into chunks evaluated concurrently.
    """

    name = "parallel"

    def __init__(self, model: Model, max_depth: int | None = None, threads: int | None = None,
                 chunk_rows: int = 8192, max_batch_rows: int = 200_000):
        super().__init__(model, max_depth)
        self.threads = threads or os.cpu_count() or 1
        self.chunk_rows = chunk_rows
        self.max_batch_rows = max_batch_rows
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._inner = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        self._dispatcher = threading.Thread(target=self._loop, name="expand-dispatch", daemon=True)
        self._dispatcher.start()

    def _rollouts(self, batch, seeds, depth):
        n = len(seeds)
        if self._inner is None or n < 2 * self.chunk_rows:
            return rollout_batch(self.model, batch, seeds, depth, self.max_depth)
        depth = np.broadcast_to(np.asarray(depth, dtype=np.int64), (n,))
        parts = np.array_split(np.arange(n), self.threads)
        futs = [self._inner.submit(rollout_batch, self.model, batch_take(batch, p), seeds[p], depth[p],
                                   self.max_depth) for p in parts]
        return np.concatenate([f.result() for f in futs])

    def expand_many(self, requests):
        return self._record(expand_many(requests, self.model, self.max_depth, self._rollouts))

    def expand(self, request):
        return self.expand_many([request])[0]

    def _loop(self):
        rows_per = self.model.spec.action_count
        while True:
            item = self._queue.get()
            if item is None:
                return
            pending = [item]
            rows = len(item[0].stream_seeds) * rows_per
            while rows < self.max_batch_rows:
                try:
                    nxt = self._queue.get_nowait()
                except queue.Empty:
                    break
                if nxt is None:
                    self._queue.put(None)
                    break
                pending.append(nxt)
                rows += len(nxt[0].stream_seeds) * rows_per
            live = [(r, f) for r, f in pending if f.set_running_or_notify_cancel()]
            if not live:
                continue
            try:
                results = self.expand_many([r for r, _ in live])
            except BaseException:
                # isolate the failing request; the others still get results
                for r, f in live:
                    try:
                        f.set_result(self.expand(r))
                    except BaseException as exc:
                        f.set_exception(exc)
                continue
            for (_, f), res in zip(live, results):
                f.set_result(res)

    def submit(self, request):
        if self._closed:
            raise BackendShutdown("parallel backend is shut down")
        fut: Future = Future()
        self._queue.put((request, fut))
        return fut

    def initial_bounds(self, batch, seeds, depth=0):
        return initial_bounds_batch(self.model, batch, seeds, depth, self.max_depth)

    def shutdown(self):
        if self._closed:
            return
        super().shutdown()
        self._queue.put(None)
        self._dispatcher.join()
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                break
            if item is not None:
                item[1].set_exception(BackendShutdown("parallel backend is shut down"))
        if self._inner is not None:
            self._inner.shutdown(wait=True)


BACKENDS = {"serial": SerialBackend, "parallel": ParallelBackend}


def make_backend(name: str, model: Model, max_depth: int | None = None, **kwargs) -> Backend:
    try:
        cls = BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(BACKENDS)}") from None
    return cls(model, max_depth, **kwargs)
