"""Multi-worker search over one shared tree.

Workers pick action branches by a scenario-weighted PO-UCT score and
observation branches by excess uncertainty minus a virtual loss that grows
with the number of workers currently below the branch. Each node carries its
own lock, held only for count bumps and bound writes, never across a backend
call. A leaf is claimed by exactly one worker; peers arriving at a claimed
leaf wait for it to be expanded and then carry on below it.
"""
from __future__ import annotations

import logging
import math
import threading
import time

from pardespot.backend import Backend, make_backend
from pardespot.model import Model
from pardespot.tree import (
    BeliefNode,
    BeliefTree,
    SearchConfig,
    _scenarios,
    recompute,
    weu,
)

log = logging.getLogger(__name__)


def augmented_upper(node: BeliefNode, action: int, c_a: float) -> float:
    branch = node.children[action]
    if c_a == 0.0 or node.visit_count == 0:
        return branch.upper
    if branch.visit_count == 0:
        return math.inf
    n = len(node)
    return branch.upper + c_a * math.sqrt(math.log(n * node.visit_count) / (n * branch.visit_count))


def augmented_weu(child: BeliefNode, root_gap: float, K: int, xi: float, c_o: float,
                  loss_gap: float | None = None) -> float:
    """Excess uncertainty minus the virtual loss of the workers inside ``child``.

    ``loss_gap`` scales the loss; the search passes the root's initial gap.
    """
    base = weu(child, root_gap, K, xi)
    if child.active_threads == 0:
        return base
    return base - child.active_threads * c_o * (root_gap if loss_gap is None else loss_gap)


def select_action_parallel(node: BeliefNode, c_a: float) -> int:
    best, best_v = -1, -math.inf
    for a in node.children:
        v = augmented_upper(node, a, c_a)
        if v > best_v or best < 0:
            best, best_v = a, v
    return best


def select_obs_parallel(node: BeliefNode, action: int, root_gap: float, K: int, xi: float,
                        c_o: float, loss_gap: float) -> BeliefNode | None:
    best, best_v = None, 0.0
    for child in node.children[action].children.values():
        v = augmented_weu(child, root_gap, K, xi, c_o, loss_gap)
        if v > best_v:
            best, best_v = child, v
    return best


class LockAudit:
    """Records mutations performed without holding the node's lock."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.findings: list[str] = []
        self._lock = threading.Lock()

    def check(self, node: BeliefNode, what: str):
        if self.enabled and not node.lock.held():
            with self._lock:
                self.findings.append(f"{what} on node {node.id} without its lock")


class _Shared:
    """Run-wide coordination between workers."""

    def __init__(self, config: SearchConfig):
        self.cv = threading.Condition()
        self.started = 0
        self.in_flight = 0
        self.progress = 0
        self.expansions = 0
        self.stop = False
        self.reason = "budget"
        self.errors: list[BaseException] = []
        self.trial_log: list[dict] = []
        self.config = config


def worker_trial(tree: BeliefTree, worker_id: int, loss_gap: float, audit: LockAudit) -> dict:
    """One forward search, leaf initialisation and backup by one worker."""
    cfg = tree.config
    node = tree.root
    path = [node]
    entered: list[BeliefNode] = []
    selections = []
    changed = expanded = False
    t0 = time.perf_counter()
    try:
        while True:
            if not node.expanded:
                with node.lock:
                    state = "go" if node.expanded else "done" if node.closed else "wait" if node.claimed else "mine"
                    if state == "mine":
                        node.claimed = True
                if state == "mine":
                    try:
                        if node.depth >= tree.max_depth:
                            with node.lock:
                                audit.check(node, "close")
                                tree.close(node)
                        else:
                            result = tree.backend.submit(tree.request_for(node)).result()
                            with node.lock:
                                audit.check(node, "attach")
                                tree.attach(node, result)
                            expanded = True
                        changed = True
                    except BaseException:
                        with node.lock:
                            node.claimed = False
                        raise
                    finally:
                        node.ready.set()
                    break
                if state == "wait":
                    node.ready.wait()
                    if not node.expanded:
                        break
                elif state == "done":
                    break
            with node.lock:
                a = select_action_parallel(node, cfg.c_a)
                audit.check(node, "count")
                node.visit_count += 1
                node.children[a].visit_count += 1
            selections.append((node.id, a))
            child = select_obs_parallel(node, a, tree.root.gap, tree.K, cfg.xi, cfg.c_o, loss_gap)
            if child is None:
                break
            with child.lock:
                audit.check(child, "enter")
                child.active_threads += 1
            entered.append(child)
            path.append(child)
            node = child
        if changed:
            for n in reversed(path):
                if n.expanded:
                    with n.lock:
                        audit.check(n, "backup")
                        recompute(n, tree.gamma, cfg.clamp)
            if cfg.record_bounds:
                with tree.root.lock:
                    tree.record()
    finally:
        for n in entered:
            with n.lock:
                audit.check(n, "release")
                n.active_threads -= 1
    return {
        "worker": worker_id,
        "path": [n.id for n in path],
        "selections": selections,
        "changed": changed,
        "expanded": expanded,
        "seconds": time.perf_counter() - t0,
    }


def _may_start(shared: _Shared, start: float) -> bool:
    cfg = shared.config
    if shared.stop:
        return False
    if cfg.max_trials is not None and shared.started >= cfg.max_trials:
        return False
    if cfg.time_budget is not None:
        if cfg.time_budget <= 0:
            return False
        if shared.started > 0 and time.perf_counter() - start >= cfg.time_budget:
            return False
    return True


def _worker(tree: BeliefTree, wid: int, shared: _Shared, start: float, loss_gap: float, audit: LockAudit):
    cfg = tree.config
    while True:
        with shared.cv:
            root = tree.root
            if root.expanded and (root.gap <= cfg.eps_target or root.gap <= 0.0):
                shared.stop, shared.reason = True, "converged"
            if not _may_start(shared, start):
                shared.cv.notify_all()
                return
            shared.started += 1
            shared.in_flight += 1
            gen = shared.progress
        try:
            entry = worker_trial(tree, wid, loss_gap, audit)
        except BaseException as exc:
            with shared.cv:
                shared.in_flight -= 1
                shared.errors.append(exc)
                shared.stop, shared.reason = True, "error"
                shared.cv.notify_all()
            return
        with shared.cv:
            shared.in_flight -= 1
            if cfg.trace:
                shared.trial_log.append(entry)
                log.debug("trial %s", entry)
            if entry["changed"]:
                shared.progress += 1
                shared.expansions += int(entry["expanded"])
                shared.cv.notify_all()
                continue
            # nothing left for this worker; stop once nobody else can change the tree
            while not shared.stop and shared.progress == gen:
                if shared.in_flight == 0:
                    shared.stop, shared.reason = True, "exhausted"
                    shared.cv.notify_all()
                    break
                if cfg.time_budget is not None and time.perf_counter() - start >= cfg.time_budget:
                    break
                shared.cv.wait(0.01)


def parallel_search(root_belief, model: Model, config: SearchConfig, backend: Backend | None = None):
    """Shared-tree search with ``config.workers`` threads; returns ``(SearchStats, BeliefTree)``."""
    own = backend is None
    backend = backend or make_backend(config.backend, model, config.max_depth)
    start = time.perf_counter()
    try:
        tree = BeliefTree(_scenarios(root_belief, config), model, config, backend)
        tree.record()
        shared = _Shared(config)
        audit = LockAudit(config.audit)
        if tree.root.all_terminal:
            shared.stop, shared.reason = True, "terminal"
        loss_gap = tree.root.init_upper - tree.root.init_lower
        threads = [
            threading.Thread(target=_worker, args=(tree, w, shared, start, loss_gap, audit),
                             name=f"search-{w}", daemon=True)
            for w in range(config.workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if shared.errors:
            raise shared.errors[0]
        reason = shared.reason
        if config.time_budget is not None and config.time_budget <= 0:
            reason = "budget"
        stats = tree.stats(time.perf_counter() - start, shared.started, shared.expansions, reason,
                           config.workers, shared.trial_log)
        stats.audit = audit.findings
        return stats, tree
    finally:
        if own:
            backend.shutdown()

