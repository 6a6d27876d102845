"""Exact best-first branch and bound over declared binary variables.

Node relaxations reuse one :class:`~mgfall.qp.QpSolver` instance; children
only tighten the box of the branched variable, so the KKT factorization is
shared across the whole tree and nodes are warm-started from their parent.
Search order and tie-breaking are deterministic (bound, then node creation
index) so single-worker runs are exactly reproducible.
"""
from __future__ import annotations

import heapq
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .qp import QpSettings, QpSolver, QpStatus, QuadraticProgram, _stack


class BnbStatus(Enum):
    OPTIMAL = "optimal"
    GAP_REACHED = "gap_reached"
    NODE_LIMIT = "node_limit"
    INFEASIBLE = "infeasible"


@dataclass
class MixedBinaryQp:
    base: QuadraticProgram
    binary_indices: list[int]

    def __post_init__(self):
        self.binary_indices = sorted(int(i) for i in self.binary_indices)
        n = self.base.n
        for i in self.binary_indices:
            if not 0 <= i < n:
                raise ValueError(f"binary index {i} out of range")
            self.base.lb[i] = max(self.base.lb[i], 0.0)
            self.base.ub[i] = min(self.base.ub[i], 1.0)


@dataclass
class BnbConfig:
    abs_gap: float = 1e-6
    rel_gap: float = 0.0
    node_limit: int = 100_000
    integrality_tol: float = 1e-6
    branching: str = "most_fractional"
    workers: int = 1
    qp_settings: QpSettings | None = None
    # polish node relaxations; incumbent re-solves are always polished
    node_polish: bool = True
    # optional starting assignments tried as incumbents before the search
    incumbent_hints: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.abs_gap < 0 or self.rel_gap < 0:
            raise ValueError("gap tolerances must be nonnegative")
        if self.node_limit < 1:
            raise ValueError("node limit must be at least 1")


@dataclass
class BnbSolution:
    x: np.ndarray | None
    objective: float
    bound: float
    gap: float
    nodes: int
    status: BnbStatus
    y: np.ndarray | None = None


def branch_select(fractional_values: dict[int, float],
                  tol: float = 1e-6) -> int:
    """Most-fractional branching; ties broken by lowest variable index."""
    cand = [(abs(v - 0.5), i) for i, v in sorted(fractional_values.items())
            if min(v, 1.0 - v) > tol]
    if not cand:
        raise ValueError("branch_select called with an integral solution")
    return min(cand)[1]


@dataclass(order=True)
class _Node:
    bound: float
    node_id: int
    l: np.ndarray = field(compare=False)
    u: np.ndarray = field(compare=False)
    warm_x: np.ndarray | None = field(compare=False, default=None)
    warm_y: np.ndarray | None = field(compare=False, default=None)


def _default_settings() -> QpSettings:
    # node relaxations only need bounds good to ~1e-8; polish supplies that
    return QpSettings(eps_prim=1e-7, eps_dual=1e-7, max_iter=20_000)


def solve_miqp(p: MixedBinaryQp, cfg: BnbConfig | None = None,
               solver: QpSolver | None = None) -> BnbSolution:
    """Solve to global optimality within the configured gap.

    ``solver`` may be a prebuilt :class:`QpSolver` whose constraint matrices
    match ``p.base`` (receding-horizon reuse); bounds and linear term are
    taken from ``p.base`` itself.
    """
    cfg = cfg or BnbConfig()
    if solver is None:
        solver = QpSolver(p.base, cfg.qp_settings or _default_settings())
    solver.settings.polish = cfg.node_polish
    q0 = p.base.q
    _, l_base, u_base = _stack(p.base)
    if l_base.shape[0] != solver.m:
        raise ValueError("prebuilt solver does not match problem structure")
    bins = np.array(p.binary_indices, dtype=int)
    tol = cfg.integrality_tol

    best_obj = np.inf
    best_x = None
    best_y = None
    nodes = 0

    def fix_assignment(l, u, assignment):
        for i, v in zip(bins, assignment):
            solver.bounds_for_var(int(i), float(v), float(v), l, u)

    def try_incumbent(assignment, warm_x=None, warm_y=None):
        nonlocal best_obj, best_x, best_y
        l, u = l_base.copy(), u_base.copy()
        fix_assignment(l, u, assignment)
        prev_polish = solver.settings.polish
        solver.settings.polish = True
        try:
            sol = solver.solve(q=q0, l=l, u=u, warm_x=warm_x, warm_y=warm_y)
        finally:
            solver.settings.polish = prev_polish
        if sol.status is QpStatus.OPTIMAL and sol.objective < best_obj - 1e-12:
            best_obj, best_x, best_y = sol.objective, sol.x.copy(), sol.y.copy()

    for hint in cfg.incumbent_hints:
        try_incumbent(np.round(np.asarray(hint, dtype=float)))

    root = _Node(-np.inf, 0, l_base.copy(), u_base.copy())
    heap = [root]
    next_id = 1
    best_bound = -np.inf
    status = BnbStatus.OPTIMAL
    workers = max(1, cfg.workers)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    try:
        while heap:
            if nodes >= cfg.node_limit:
                status = BnbStatus.NODE_LIMIT
                break
            best_bound = heap[0].bound
            if _gap_met(best_bound, best_obj, cfg):
                status = BnbStatus.GAP_REACHED
                break

            batch = []
            while heap and len(batch) < workers:
                node = heapq.heappop(heap)
                if node.bound > best_obj - _prune_margin(cfg):
                    continue
                batch.append(node)
            if not batch:
                continue

            if pool is None:
                results = [(node, solver.solve(q=q0, l=node.l, u=node.u,
                                               warm_x=node.warm_x, warm_y=node.warm_y))
                           for node in batch]
            else:
                futs = [pool.submit(solver.solve, q=q0, l=node.l, u=node.u,
                                    warm_x=node.warm_x, warm_y=node.warm_y)
                        for node in batch]
                results = list(zip(batch, (f.result() for f in futs)))

            # commit in node creation order so incumbents are deterministic
            for node, sol in sorted(results, key=lambda t: t[0].node_id):
                nodes += 1
                if sol.status is QpStatus.PRIMAL_INFEASIBLE:
                    continue
                if sol.status is QpStatus.DUAL_INFEASIBLE:
                    raise ValueError("relaxation is unbounded; MIQP must be convex and bounded")
                converged = sol.status is QpStatus.OPTIMAL
                bound = sol.objective if converged else node.bound
                bound = max(bound, node.bound)  # bounds grow down a branch
                if bound > best_obj - _prune_margin(cfg):
                    continue
                vals = sol.x[bins]
                frac = {int(i): float(v) for i, v in zip(bins, vals)}
                integral = all(min(v, 1.0 - v) <= tol for v in vals)
                if integral and converged:
                    # re-solve with exact integer fixings for a clean incumbent
                    try_incumbent(np.round(vals), warm_x=sol.x, warm_y=sol.y)
                    continue
                var = branch_select(frac, tol) if not integral else int(bins[0])
                for fix in (0.0, 1.0):
                    l, u = node.l.copy(), node.u.copy()
                    solver.bounds_for_var(var, fix, fix, l, u)
                    heapq.heappush(heap, _Node(bound, next_id, l, u,
                                               sol.x.copy(), sol.y.copy()))
                    next_id += 1
        else:
            best_bound = best_obj if np.isfinite(best_obj) else -np.inf
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    if best_x is None:
        if status in (BnbStatus.OPTIMAL, BnbStatus.GAP_REACHED):
            return BnbSolution(None, np.inf, best_bound, np.inf, nodes,
                               BnbStatus.INFEASIBLE)
        return BnbSolution(None, np.inf, best_bound, np.inf, nodes, status)

    if status in (BnbStatus.OPTIMAL, BnbStatus.GAP_REACHED):
        gap = max(best_obj - best_bound, 0.0)
    else:
        gap = np.inf if not np.isfinite(best_bound) else max(best_obj - best_bound, 0.0)
    if status is BnbStatus.GAP_REACHED and gap <= 1e-12:
        status = BnbStatus.OPTIMAL
    return BnbSolution(best_x, best_obj, min(best_bound, best_obj), gap,
                       nodes, status, y=best_y)


def _prune_margin(cfg: BnbConfig) -> float:
    return max(cfg.abs_gap, 1e-9)


def _gap_met(bound: float, incumbent: float, cfg: BnbConfig) -> bool:
    if not np.isfinite(incumbent):
        return False
    if incumbent - bound <= cfg.abs_gap:
        return True
    if cfg.rel_gap > 0 and incumbent - bound <= cfg.rel_gap * abs(incumbent):
        return True
    return False


def enumerate_oracle(p: MixedBinaryQp,
                     settings: QpSettings | None = None) -> BnbSolution:
    """Exhaustive reference: one QP per binary assignment (<= 20 binaries).

    Ties within 1e-9 keep the lexicographically smaller assignment.
    """
    k = len(p.binary_indices)
    if k > 20:
        raise ValueError(f"enumerate_oracle limited to 20 binaries, got {k}")
    solver = QpSolver(p.base, settings or _default_settings())
    bins = p.binary_indices
    best_obj = np.inf
    best_x = None
    count = 0
    for assignment in itertools.product((0.0, 1.0), repeat=k):
        l, u = solver.l0.copy(), solver.u0.copy()
        for i, v in zip(bins, assignment):
            solver.bounds_for_var(i, v, v, l, u)
        sol = solver.solve(l=l, u=u)
        count += 1
        if sol.status is QpStatus.OPTIMAL and sol.objective < best_obj - 1e-9:
            best_obj, best_x = sol.objective, sol.x.copy()
    if best_x is None:
        return BnbSolution(None, np.inf, np.inf, np.inf, count, BnbStatus.INFEASIBLE)
    return BnbSolution(best_x, best_obj, best_obj, 0.0, count, BnbStatus.OPTIMAL)
