"""Sparse belief tree, bound bookkeeping and the serial anytime search."""
from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from pardespot.backend import Backend, ExpansionRequest, ExpansionResult, make_backend
from pardespot.model import Model, ParticleBelief, Scenario, batch_take, sample_scenarios

log = logging.getLogger(__name__)

BOUND_TOL = 1e-9


class UnexpandedNodeError(RuntimeError):
    pass


class NodeLock:
    """Per-node mutex that remembers its holder.

    The ownership record backs the lock audit: mutators call
    :meth:`assert_held` so a write outside the node's critical section is
    caught instead of silently racing.
    """

    __slots__ = ("_lock", "owner")

    def __init__(self):
        self._lock = threading.Lock()
        self.owner: int | None = None

    def __enter__(self):
        self._lock.acquire()
        self.owner = threading.get_ident()
        return self

    def __exit__(self, *exc):
        self.owner = None
        self._lock.release()

    def held(self) -> bool:
        return self.owner == threading.get_ident()


@dataclass
class Bounds:
    upper: float
    lower: float

    @property
    def gap(self) -> float:
        return self.upper - self.lower


@dataclass
class SearchConfig:
    K: int = 500
    gamma: float | None = None  # None: use the model's discount
    xi: float = 0.95
    c_a: float = 1.0
    c_o: float = 0.1
    max_depth: int | None = None  # None: the model's rollout depth
    time_budget: float | None = 1.0
    max_trials: int | None = None
    workers: int = 1
    seed: int = 0
    backend: str = "serial"
    eps_target: float = 0.0
    clamp: bool = True
    record_bounds: bool = False
    trace: bool = False
    audit: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0.0 < self.xi < 1.0:
            raise ValueError("xi must lie in (0, 1)")
        if self.c_a < 0 or self.c_o < 0:
            raise ValueError("c_a and c_o must be non-negative")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.max_trials is not None and self.max_trials < 0:
            raise ValueError("max_trials must be >= 0")
        if self.time_budget is None and self.max_trials is None:
            raise ValueError("need a time_budget or max_trials")

    def to_dict(self) -> dict:
        return asdict(self)


class ActionBranch:
    __slots__ = ("action", "mean_step_reward", "children", "upper", "lower", "visit_count")

    def __init__(self, action: int, mean_step_reward: float):
        self.action = action
        self.mean_step_reward = mean_step_reward
        self.children: dict[tuple, BeliefNode] = {}
        self.upper = -math.inf
        self.lower = -math.inf
        self.visit_count = 0

    @property
    def bounds(self) -> Bounds:
        return Bounds(self.upper, self.lower)


class BeliefNode:
    __slots__ = (
        "id", "scenario_ids", "parent_rows", "depth", "parent", "incoming_edge",
        "pending_last_action", "states", "upper", "lower", "init_upper", "init_lower",
        "visit_count", "children", "closed", "all_terminal", "active_threads",
        "claimed", "ready", "lock",
    )

    def __init__(self, node_id, scenario_ids, depth, upper, lower, parent=None,
                 incoming_edge=None, pending_last_action=None, parent_rows=None):
        self.id = node_id
        self.scenario_ids = scenario_ids
        self.parent_rows = parent_rows
        self.depth = depth
        self.parent = parent
        self.incoming_edge = incoming_edge
        self.pending_last_action = pending_last_action
        self.states = None
        self.upper = self.init_upper = upper
        self.lower = self.init_lower = lower
        self.visit_count = 0
        self.children: dict[int, ActionBranch] | None = None
        self.closed = False
        self.all_terminal = False
        self.active_threads = 0
        self.claimed = False
        self.ready = threading.Event()
        self.lock = NodeLock()

    @property
    def expanded(self) -> bool:
        return self.children is not None

    @property
    def gap(self) -> float:
        return self.upper - self.lower

    @property
    def bounds(self) -> Bounds:
        return Bounds(self.upper, self.lower)

    def __len__(self):
        return len(self.scenario_ids)

    def __repr__(self):
        return f"BeliefNode(id={self.id}, depth={self.depth}, n={len(self)}, u={self.upper:.4g}, l={self.lower:.4g})"


def iter_nodes(root: BeliefNode) -> Iterator[BeliefNode]:
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        if node.children:
            for branch in reversed(list(node.children.values())):
                stack.extend(reversed(list(branch.children.values())))


# -- selection rules -----------------------------------------------------------


def select_action_serial(node: BeliefNode) -> int:
    """Branch with the largest upper bound, lowest index on ties."""
    if not node.expanded:
        raise UnexpandedNodeError(f"node {node.id} is not expanded")
    best, best_u = -1, -math.inf
    for a, branch in node.children.items():
        if branch.upper > best_u or best < 0:
            best, best_u = a, branch.upper
    return best


def weu(node: BeliefNode, root_gap: float, K: int, xi: float) -> float:
    return node.gap - (len(node) / K) * xi * root_gap


def select_obs_serial(node: BeliefNode, action: int, root_gap: float, K: int, xi: float) -> BeliefNode | None:
    """Child of maximal excess uncertainty, or ``None`` when none is positive."""
    best, best_v = None, 0.0
    for child in node.children[action].children.values():  # ascending key order
        v = weu(child, root_gap, K, xi)
        if v > best_v:
            best, best_v = child, v
    return best


def root_action(root: BeliefNode) -> int:
    """Branch with the largest lower bound, lowest index on ties."""
    if not root.expanded:
        raise UnexpandedNodeError("root is not expanded")
    best, best_l = -1, -math.inf
    for a, branch in root.children.items():
        if branch.lower > best_l or best < 0:
            best, best_l = a, branch.lower
    return best


# -- backup --------------------------------------------------------------------


def recompute(node: BeliefNode, gamma: float, clamp: bool = True) -> None:
    """Refresh the node's branch and node bounds from its children's."""
    n = len(node)
    best_u = best_l = -math.inf
    for branch in node.children.values():
        kids = branch.children.values()
        branch.upper = branch.mean_step_reward + gamma * (math.fsum(len(c) * c.upper for c in kids) / n)
        branch.lower = branch.mean_step_reward + gamma * (math.fsum(len(c) * c.lower for c in kids) / n)
        if branch.upper > best_u:
            best_u = branch.upper
        if branch.lower > best_l:
            best_l = branch.lower
    if clamp:
        best_u = min(best_u, node.init_upper)
        best_l = max(best_l, node.init_lower)
    if best_l > best_u:
        # only reachable with a heuristic that is not an upper bound
        best_u = best_l
    node.upper, node.lower = best_u, best_l


def backup(path: Sequence[BeliefNode], gamma: float, clamp: bool = True, locked: bool = False) -> None:
    """Update bounds from the deepest node on ``path`` back to the root."""
    for node in reversed(path):
        if not node.expanded:
            continue
        if locked:
            with node.lock:
                recompute(node, gamma, clamp)
        else:
            recompute(node, gamma, clamp)


def evaluate_tree(node: BeliefNode, gamma: float, clamp: bool = True) -> tuple[float, float]:
    """Whole-subtree recursive evaluation from leaf bounds (audit oracle)."""
    if not node.expanded:
        return node.upper, node.lower
    n = len(node)
    us, ls = [], []
    for branch in node.children.values():
        vals = [(len(c), evaluate_tree(c, gamma, clamp)) for c in branch.children.values()]
        us.append(branch.mean_step_reward + gamma * (math.fsum(k * v[0] for k, v in vals) / n))
        ls.append(branch.mean_step_reward + gamma * (math.fsum(k * v[1] for k, v in vals) / n))
    u, l = max(us), max(ls)
    if clamp:
        u, l = min(u, node.init_upper), max(l, node.init_lower)
    return max(u, l), l


# -- the tree ------------------------------------------------------------------


@dataclass
class SearchStats:
    node_count: int = 1
    max_depth: int = 0
    trials: int = 0
    expansions: int = 0
    elapsed: float = 0.0
    root_upper: float = 0.0
    root_lower: float = 0.0
    root_action: int | None = None
    workers: int = 1
    stop_reason: str = ""
    backend: dict = field(default_factory=dict)
    bound_trace: list = field(default_factory=list)
    trial_log: list = field(default_factory=list)
    audit: list = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("bound_trace")
        d.pop("trial_log")
        return d


class BeliefTree:
    """Shared tree state: scenarios, root and node bookkeeping."""

    def __init__(self, scenarios: Sequence[Scenario], model: Model, config: SearchConfig, backend: Backend):
        self.model = model
        self.config = config
        self.backend = backend
        self.K = len(scenarios)
        self.gamma = model.spec.discount if config.gamma is None else config.gamma
        self.max_depth = model.spec.max_rollout_depth if config.max_depth is None else config.max_depth
        self.seeds = np.array([s.stream_seed for s in scenarios], dtype=np.uint64)
        self._ids = 0
        self._count_lock = threading.Lock()
        self.node_count = 0
        self.deepest = 0
        ids = np.arange(self.K, dtype=np.int64)
        states = model.pack([s.initial_state for s in scenarios])
        upper, lower = backend.initial_bounds(states, self.seeds, 0)
        self.root = BeliefNode(self._next_id(), ids, 0, upper, lower)
        self.root.states = states
        self.root.all_terminal = bool(model.terminal_batch(states).all())
        self.bound_trace: list[tuple[float, float]] = []

    def _next_id(self) -> int:
        with self._count_lock:
            i = self._ids
            self._ids += 1
            self.node_count += 1
            return i

    def _note_depth(self, depth):
        with self._count_lock:
            if depth > self.deepest:
                self.deepest = depth

    def request_for(self, node: BeliefNode) -> ExpansionRequest:
        if node.parent is None:
            parent_states = node.states
            last = None
        else:
            parent_states = batch_take(node.parent.states, node.parent_rows)
            last = node.pending_last_action
        return ExpansionRequest(node.id, parent_states, node.scenario_ids, self.seeds[node.scenario_ids],
                                node.depth, last)

    def attach(self, node: BeliefNode, result: ExpansionResult) -> int:
        """Create the children described by ``result``; returns how many."""
        node.states = result.node_states
        node.all_terminal = bool(result.node_terminal.all())
        branches = {a: ActionBranch(a, r) for a, r in enumerate(result.mean_step_reward)}
        for ch in result.children:
            rows = np.searchsorted(node.scenario_ids, ch.scenario_ids)
            child = BeliefNode(self._next_id(), ch.scenario_ids, node.depth + 1, ch.upper, ch.lower,
                               parent=node, incoming_edge=(ch.action, ch.observation),
                               pending_last_action=ch.action, parent_rows=rows)
            branches[ch.action].children[ch.observation] = child
        self._note_depth(node.depth + 1)
        node.children = branches
        return len(result.children)

    def close(self, node: BeliefNode) -> None:
        """Depth cap: the node's value is its default-policy estimate."""
        node.closed = True
        node.upper = node.init_upper = node.lower

    def record(self):
        if self.config.record_bounds:
            self.bound_trace.append((self.root.upper, self.root.lower))

    def to_json(self) -> dict:
        nodes = []
        for node in iter_nodes(self.root):
            entry = {
                "id": node.id,
                "depth": node.depth,
                "scenarios": len(node),
                "upper": node.upper,
                "lower": node.lower,
                "visits": node.visit_count,
                "edge": None if node.incoming_edge is None else [node.incoming_edge[0], list(node.incoming_edge[1])],
                "closed": node.closed,
            }
            if node.expanded:
                entry["branches"] = [
                    {"action": b.action, "reward": b.mean_step_reward, "upper": b.upper, "lower": b.lower,
                     "visits": b.visit_count, "children": [c.id for c in b.children.values()]}
                    for b in node.children.values()
                ]
            nodes.append(entry)
        return {"K": self.K, "gamma": self.gamma, "node_count": self.node_count, "nodes": nodes}

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    def stats(self, elapsed: float, trials: int, expansions: int, reason: str, workers: int = 1,
              trial_log=None) -> SearchStats:
        return SearchStats(
            node_count=self.node_count,
            max_depth=self.deepest,
            trials=trials,
            expansions=expansions,
            elapsed=elapsed,
            root_upper=self.root.upper,
            root_lower=self.root.lower,
            root_action=root_action(self.root) if self.root.expanded else None,
            workers=workers,
            stop_reason=reason,
            backend=dict(self.backend.counters),
            bound_trace=list(self.bound_trace),
            trial_log=trial_log or [],
        )


def audit_tree(tree: BeliefTree, tol: float = BOUND_TOL) -> list[str]:
    """Invariant checks on a quiescent tree; returns human-readable findings."""
    findings = []
    for node in iter_nodes(tree.root):
        if node.lower > node.upper + tol:
            findings.append(f"node {node.id}: lower {node.lower} > upper {node.upper}")
        if node.active_threads != 0:
            findings.append(f"node {node.id}: active_threads={node.active_threads}")
        if node.lock.owner is not None:
            findings.append(f"node {node.id}: lock still held by {node.lock.owner}")
        if not node.expanded:
            continue
        if sum(b.visit_count for b in node.children.values()) != node.visit_count:
            findings.append(f"node {node.id}: sum N(b,a) != N(b)={node.visit_count}")
        for b in node.children.values():
            ids = np.sort(np.concatenate([c.scenario_ids for c in b.children.values()]))
            if not np.array_equal(ids, node.scenario_ids):
                findings.append(f"node {node.id} action {b.action}: children do not partition scenarios")
            for c in b.children.values():
                if c.depth != node.depth + 1:
                    findings.append(f"node {c.id}: depth {c.depth} under parent depth {node.depth}")
    return findings


def max_backup_error(tree: BeliefTree) -> float:
    """Largest deviation between stored bounds and a full recursive re-evaluation."""
    worst = 0.0
    for node in iter_nodes(tree.root):
        if node.expanded:
            u, l = evaluate_tree(node, tree.gamma, tree.config.clamp)
            worst = max(worst, abs(u - node.upper), abs(l - node.lower))
    return worst


# -- serial search ---------------------------------------------------------------


def _scenarios(root_belief, config: SearchConfig) -> list[Scenario]:
    if isinstance(root_belief, ParticleBelief):
        return sample_scenarios(root_belief, config.K, config.seed)
    return list(root_belief)


def _budget_left(config, start, trials) -> bool:
    if config.max_trials is not None and trials >= config.max_trials:
        return False
    if config.time_budget is not None and trials > 0 and time.perf_counter() - start >= config.time_budget:
        return False
    return True


def serial_trial(tree: BeliefTree, selections: list | None = None) -> tuple[bool, list[BeliefNode]]:
    """One forward search, leaf initialisation and backup.

    Returns whether the tree changed, plus the visited path.
    """
    cfg = tree.config
    node = tree.root
    path = [node]
    while node.expanded:
        a = select_action_serial(node)
        node.visit_count += 1
        node.children[a].visit_count += 1
        if selections is not None:
            selections.append((node.id, a))
        child = select_obs_serial(node, a, tree.root.gap, tree.K, cfg.xi)
        if child is None:
            break
        node = child
        path.append(node)
    changed = False
    if not node.expanded and not node.closed:
        if node.depth >= tree.max_depth:
            tree.close(node)
        else:
            result = tree.backend.submit(tree.request_for(node)).result()
            tree.attach(node, result)
        changed = True
    if changed:
        backup(path, tree.gamma, cfg.clamp)
        tree.record()
    return changed, path


def serial_search(root_belief, model: Model, config: SearchConfig, backend: Backend | None = None):
    """Anytime single-worker search; returns ``(SearchStats, BeliefTree)``."""
    if config.time_budget is not None and config.time_budget <= 0:
        raise ValueError("time_budget must be positive for the serial search")
    own = backend is None
    backend = backend or make_backend(config.backend, model, config.max_depth)
    start = time.perf_counter()
    try:
        tree = BeliefTree(_scenarios(root_belief, config), model, config, backend)
        tree.record()
        trials = expansions = 0
        reason = "budget"
        log_lines = []
        while True:
            root = tree.root
            if root.all_terminal and not root.expanded:
                reason = "terminal"
                break
            if root.expanded and (root.gap <= config.eps_target or root.gap <= 0.0):
                reason = "converged"
                break
            if not _budget_left(config, start, trials):
                break
            t0 = time.perf_counter()
            selections = [] if config.trace else None
            changed, path = serial_trial(tree, selections)
            trials += 1
            if config.trace:
                log_lines.append({"worker": 0, "path": [n.id for n in path], "selections": selections,
                                  "changed": changed, "expanded": changed and path[-1].expanded,
                                  "seconds": time.perf_counter() - t0})
                log.debug("trial %s", log_lines[-1])
            if not changed:
                reason = "exhausted"
                break
            expansions += int(path[-1].expanded)
        return tree.stats(time.perf_counter() - start, trials, expansions, reason, 1, log_lines), tree
    finally:
        if own:
            backend.shutdown()
