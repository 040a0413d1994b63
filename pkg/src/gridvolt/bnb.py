"""Best-first branch and bound over the conic subproblem.

Nodes tighten variable bounds on the flagged integer columns; the continuous
relaxation at every node is solved by :class:`gridvolt.conic.ConicSolver`.
Everything is deterministic: nodes pop in (bound, insertion id) order and
branching always picks the most fractional variable with the lowest column
index as tie break.

Incumbents come from three places: relaxations that happen to be integral,
caller-supplied integer assignments (warm hints), and a rounding dive that
fixes all integers at rounded values and re-solves the continuous problem.
A caller-supplied ``rounder`` can override plain nearest-integer rounding
with problem-aware logic.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .conic import CompiledProblem, ConicResult, ConicSolver

INT_TOL = 1e-6


@dataclass
class MipResult:
    status: str                 # optimal | max-nodes | infeasible
    x: np.ndarray | None
    obj: float
    bound: float
    gap: float
    nodes: int
    iterations_log: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.x is not None


def _fractionality(x, integer_idx):
    xi = x[integer_idx]
    return np.abs(xi - np.round(xi))


def solve_mip(prob: CompiledProblem, gap: float = 1e-4, max_nodes: int = 2000,
              backend: str | None = None, rounder=None,
              hints: list[dict[str, float]] | None = None,
              priority: dict[int, float] | None = None) -> MipResult:
    """Minimize the compiled problem with its integrality flags enforced.

    ``gap`` is the relative optimality gap on termination.  ``rounder`` maps
    a relaxation vector to {column index: integer value} used by the dive
    heuristic; ``hints`` are full integer assignments tried as incumbent
    candidates before branching (e.g. the previous outer iteration).
    ``priority`` weights the branching score per column so economically
    heavy integers (tap positions) are resolved before indicator binaries.
    """
    solver = ConicSolver(prob, backend=backend)
    integer_idx = prob.integer_idx
    weights = np.ones(len(integer_idx))
    if priority:
        for k, i in enumerate(integer_idx):
            weights[k] = priority.get(int(i), 1.0)
    nodes_solved = 0

    def gap_of(inc, bound):
        if inc >= float("inf"):
            return float("inf")
        return (inc - bound) / max(1.0, abs(inc))

    root = solver.solve()
    nodes_solved += 1
    if root.status in ("infeasible", "error"):
        return MipResult("infeasible", None, float("inf"), float("inf"),
                         float("inf"), nodes_solved)
    if len(integer_idx) == 0:
        return MipResult("optimal", root.x, root.obj, root.obj, 0.0, nodes_solved)

    incumbent_x = None
    incumbent_obj = float("inf")

    def try_fixing(assignment: dict[int, float]) -> ConicResult | None:
        """Solve with every integer pinned; returns the polished result."""
        nonlocal nodes_solved
        lb = prob.lb.copy()
        ub = prob.ub.copy()
        for i in integer_idx:
            v = float(np.round(assignment[int(i)]))
            v = min(max(v, prob.lb[i]), prob.ub[i])
            lb[i] = ub[i] = v
        res = solver.solve(lb=lb, ub=ub)
        nodes_solved += 1
        return res if res.x is not None and res.status in ("optimal", "inaccurate") else None

    def consider(res: ConicResult):
        nonlocal incumbent_x, incumbent_obj
        if res is not None and res.obj < incumbent_obj - 1e-12:
            incumbent_obj = res.obj
            incumbent_x = res.x

    # warm hints first: they often carry the previous outer iteration
    for hint in hints or []:
        assignment = {prob.index[k]: v for k, v in hint.items() if k in prob.index}
        if set(assignment) >= set(integer_idx.tolist()):
            consider(try_fixing(assignment))

    frac = _fractionality(root.x, integer_idx)
    if np.max(frac) <= INT_TOL:
        # root already integral: polish to exact integers and finish
        res = try_fixing({int(i): root.x[i] for i in integer_idx})
        consider(res)
        if incumbent_x is not None and gap_of(incumbent_obj, root.obj) <= gap:
            return MipResult("optimal", incumbent_x, incumbent_obj, root.obj,
                             gap_of(incumbent_obj, root.obj), nodes_solved)

    def dive(x):
        if rounder is not None:
            assignment = rounder(x)
        else:
            assignment = {int(i): float(np.round(x[i])) for i in integer_idx}
        consider(try_fixing(assignment))

    dive(root.x)

    # best-first queue of (parent bound, id, lb, ub); solve on pop
    counter = 0
    heap: list = []
    heapq.heappush(heap, (root.obj, counter, prob.lb.copy(), prob.ub.copy()))
    pruned_min = float("inf")  # tightest bound discarded under the gap rule

    while heap:
        if nodes_solved >= max_nodes:
            best_bound = heap[0][0] if heap else pruned_min
            return MipResult("max-nodes", incumbent_x, incumbent_obj,
                             best_bound, gap_of(incumbent_obj, best_bound), nodes_solved)
        parent_bound, _, lb, ub = heapq.heappop(heap)
        if gap_of(incumbent_obj, parent_bound) <= gap:
            # every open node is within tolerance of the incumbent
            return MipResult("optimal", incumbent_x, incumbent_obj, parent_bound,
                             gap_of(incumbent_obj, parent_bound), nodes_solved)

        res = solver.solve(lb=lb, ub=ub)
        nodes_solved += 1
        if res.x is None:
            continue
        if res.obj >= incumbent_obj - gap * max(1.0, abs(incumbent_obj)):
            pruned_min = min(pruned_min, res.obj)
            continue

        frac = _fractionality(res.x, integer_idx)
        if np.max(frac) <= INT_TOL:
            consider(try_fixing({int(i): res.x[i] for i in integer_idx}))
            continue

        # highest weighted fractionality, lowest column index on ties
        order = np.lexsort((integer_idx, -frac * weights))
        branch_col = int(integer_idx[order[0]])
        val = res.x[branch_col]
        lo = np.floor(val + INT_TOL)

        lb_left, ub_left = lb.copy(), ub.copy()
        ub_left[branch_col] = min(ub_left[branch_col], lo)
        lb_right, ub_right = lb.copy(), ub.copy()
        lb_right[branch_col] = max(lb_right[branch_col], lo + 1.0)

        for child_lb, child_ub in ((lb_left, ub_left), (lb_right, ub_right)):
            if child_lb[branch_col] <= child_ub[branch_col]:
                counter += 1
                heapq.heappush(heap, (res.obj, counter, child_lb, child_ub))

    if incumbent_x is None:
        return MipResult("infeasible", None, float("inf"), float("inf"),
                         float("inf"), nodes_solved)
    final_bound = min(pruned_min, incumbent_obj)
    return MipResult("optimal", incumbent_x, incumbent_obj, final_bound,
                     max(0.0, gap_of(incumbent_obj, final_bound)), nodes_solved)
