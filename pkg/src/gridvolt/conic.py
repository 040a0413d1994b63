"""Conic subproblem layer: model building, standard form, solver backends.

The optimization problems assembled here are linear programs extended with
second-order cones (all convex quadratic terms enter through cone epigraphs,
so the objective itself stays linear):

    minimize    q' x + const
    subject to  A_eq x == b_eq
                A_le x <= b_le          (plus finite variable bounds)
                ||vector_k(x)|| <= bound_k(x)       for each cone k
                x_i integer             for flagged variables

Variables are referenced by string names while building; compilation fixes a
deterministic column order.  Branch and bound re-solves the same compiled
structure with tightened variable bounds, which only touches the right-hand
side of the bound rows.

The backend is selected by the ``GRIDVOLT_SOLVER`` environment variable
(``clarabel`` by default, ``scs`` as fallback); both are deterministic for
fixed inputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class SolverError(RuntimeError):
    pass


INF = float("inf")

# affine expression: (terms, const) with terms = ((name, coef), ...)
Expr = tuple[tuple[tuple[str, float], ...], float]


def ex(*terms, const=0.0) -> Expr:
    """Build an affine expression from (name, coef) pairs and a constant."""
    return tuple((n, float(c)) for n, c in terms), float(const)


@dataclass
class VarDef:
    name: str
    lb: float = -INF
    ub: float = INF
    integer: bool = False


@dataclass
class ConstraintBlock:
    """A self-contained group of variables, rows, cones and cost terms that
    builders merge into the master problem."""

    vars: list[VarDef] = field(default_factory=list)
    eq_rows: list[tuple[Expr, float, str]] = field(default_factory=list)
    le_rows: list[tuple[Expr, float, str]] = field(default_factory=list)
    socs: list[tuple[Expr, list[Expr], str]] = field(default_factory=list)
    cost: list[tuple[str, float]] = field(default_factory=list)
    cost_const: float = 0.0

    def var(self, name, lb=-INF, ub=INF, integer=False) -> str:
        self.vars.append(VarDef(name, lb, ub, integer))
        return name

    def eq(self, expr: Expr, rhs: float, name=""):
        self.eq_rows.append((expr, float(rhs), name))

    def le(self, expr: Expr, rhs: float, name=""):
        self.le_rows.append((expr, float(rhs), name))

    def ge(self, expr: Expr, rhs: float, name=""):
        terms, const = expr
        self.le_rows.append(((tuple((n, -c) for n, c in terms), -const), -float(rhs), name))

    def soc(self, bound: Expr, vector: list[Expr], name=""):
        """||vector|| <= bound, every entry affine."""
        self.socs.append((bound, list(vector), name))

    def add_cost(self, name: str, coef: float):
        self.cost.append((name, float(coef)))

    def merge(self, other: "ConstraintBlock"):
        self.vars.extend(other.vars)
        self.eq_rows.extend(other.eq_rows)
        self.le_rows.extend(other.le_rows)
        self.socs.extend(other.socs)
        self.cost.extend(other.cost)
        self.cost_const += other.cost_const


@dataclass
class CompiledProblem:
    """Standard-form problem with a frozen, deterministic column order."""

    names: list[str]
    index: dict[str, int]
    lb: np.ndarray
    ub: np.ndarray
    integer_idx: np.ndarray
    q: np.ndarray
    cost_const: float
    a_eq: sp.csc_matrix
    b_eq: np.ndarray
    a_le: sp.csc_matrix
    b_le: np.ndarray
    # cone k occupies rows soc_ptr[k]:soc_ptr[k+1]; the first row of each
    # block is the bound expression, the rest the norm vector
    a_soc: sp.csc_matrix
    b_soc: np.ndarray
    soc_dims: list[int]
    row_names: dict[str, list[str]]

    @property
    def n(self) -> int:
        return len(self.names)

    def value(self, x: np.ndarray, name: str) -> float:
        return float(x[self.index[name]])

    def export_text(self, path) -> None:
        """Plain-text listing (variables, bounds, rows, cones, objective)
        for inspection and external-solver cross-checks."""
        integer = set(self.integer_idx.tolist())
        with open(path, "w") as fh:
            fh.write(f"# conic problem: {self.n} variables\n")
            fh.write("[VARS] name lb ub integer\n")
            for i, name in enumerate(self.names):
                fh.write(f"{name} {self.lb[i]:.12g} {self.ub[i]:.12g} {int(i in integer)}\n")
            fh.write("[OBJECTIVE] const + sum coef*var\n")
            fh.write(f"const {self.cost_const:.12g}\n")
            for i in np.nonzero(self.q)[0]:
                fh.write(f"{self.names[i]} {self.q[i]:.12g}\n")

            def write_rows(mat, rhs, tag, op):
                coo = mat.tocoo()
                by_row: dict[int, list[str]] = {}
                for r, c, v in zip(coo.row, coo.col, coo.data):
                    by_row.setdefault(int(r), []).append(f"{v:+.12g}*{self.names[c]}")
                for r in range(mat.shape[0]):
                    lhs = " ".join(by_row.get(r, ["0"]))
                    fh.write(f"{tag} {lhs} {op} {rhs[r]:.12g}\n")

            fh.write(f"[EQ] {self.a_eq.shape[0]} rows\n")
            write_rows(self.a_eq, self.b_eq, "eq", "==")
            fh.write(f"[LE] {self.a_le.shape[0]} rows\n")
            write_rows(self.a_le, self.b_le, "le", "<=")
            fh.write(f"[SOC] {len(self.soc_dims)} cones"
                     " (first row bounds the norm of the rest)\n")
            coo = self.a_soc.tocoo()
            by_row: dict[int, list[str]] = {}
            for r, c, v in zip(coo.row, coo.col, coo.data):
                by_row.setdefault(int(r), []).append(f"{v:+.12g}*{self.names[c]}")
            ptr = 0
            for k, d in enumerate(self.soc_dims):
                for r in range(ptr, ptr + d):
                    lhs = " ".join(by_row.get(r, ["0"]))
                    kind = "bound" if r == ptr else "vec"
                    fh.write(f"soc{k} {kind} {lhs} {self.b_soc[r]:+.12g}\n")
                ptr += d


def compile_block(block: ConstraintBlock) -> CompiledProblem:
    names: list[str] = []
    index: dict[str, int] = {}
    lb, ub, integer = [], [], []
    for vd in block.vars:
        if vd.name in index:
            raise SolverError(f"duplicate variable {vd.name!r}")
        index[vd.name] = len(names)
        names.append(vd.name)
        lb.append(vd.lb)
        ub.append(vd.ub)
        integer.append(vd.integer)
    n = len(names)

    q = np.zeros(n)
    for name, coef in block.cost:
        q[index[name]] += coef

    def build(rows):
        data, ri, ci, rhs, rnames = [], [], [], [], []
        for r, (expr, b, nm) in enumerate(rows):
            terms, const = expr
            for nmv, coef in terms:
                ri.append(r)
                ci.append(index[nmv])
                data.append(coef)
            rhs.append(b - const)
            rnames.append(nm)
        mat = sp.csc_matrix(sp.coo_matrix((data, (ri, ci)), shape=(len(rows), n)))
        return mat, np.array(rhs, dtype=float), rnames

    a_eq, b_eq, eq_names = build(block.eq_rows)
    a_le, b_le, le_names = build(block.le_rows)

    soc_rows = []
    soc_dims = []
    for bound, vector, nm in block.socs:
        soc_rows.append((bound, 0.0, nm))
        soc_rows.extend((v, 0.0, nm) for v in vector)
        soc_dims.append(1 + len(vector))
    a_soc, _, _ = build(soc_rows)
    b_soc = np.array([expr[1] for expr, _, _ in soc_rows], dtype=float)

    return CompiledProblem(
        names=names, index=index,
        lb=np.array(lb, dtype=float), ub=np.array(ub, dtype=float),
        integer_idx=np.array([i for i, f in enumerate(integer) if f], dtype=int),
        q=q, cost_const=block.cost_const,
        a_eq=a_eq, b_eq=b_eq, a_le=a_le, b_le=b_le,
        a_soc=a_soc, b_soc=b_soc, soc_dims=soc_dims,
        row_names={"eq": eq_names, "le": le_names},
    )


@dataclass
class ConicResult:
    status: str          # optimal | inaccurate | infeasible | unbounded | error
    x: np.ndarray | None
    obj: float

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class _BoundRows:
    """Row layout for variable bounds, so per-node bound tightening only
    rewrites right-hand-side entries.  Integers always get both rows."""

    def __init__(self, prob: CompiledProblem):
        integer = set(prob.integer_idx.tolist())
        self.ub_vars = np.array(
            [i for i in range(prob.n) if np.isfinite(prob.ub[i]) or i in integer],
            dtype=int)
        self.lb_vars = np.array(
            [i for i in range(prob.n) if np.isfinite(prob.lb[i]) or i in integer],
            dtype=int)
        nrows = len(self.ub_vars) + len(self.lb_vars)
        data = np.concatenate([np.ones(len(self.ub_vars)), -np.ones(len(self.lb_vars))])
        rows = np.arange(nrows)
        cols = np.concatenate([self.ub_vars, self.lb_vars])
        self.mat = sp.csc_matrix(sp.coo_matrix((data, (rows, cols)), shape=(nrows, prob.n)))

    def rhs(self, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
        up = np.where(np.isfinite(ub[self.ub_vars]), ub[self.ub_vars], 1e12)
        lo = np.where(np.isfinite(lb[self.lb_vars]), -lb[self.lb_vars], 1e12)
        return np.concatenate([up, lo])


class ConicSolver:
    """Continuous solver for a compiled problem under varying variable
    bounds.  The full constraint matrix is assembled once.

    Both backends use the ``Ax + s = b, s in K`` convention: equality and
    <= sections pass through unchanged, SOC rows enter negated so that
    s = b_soc + terms(x) reproduces ``||vector|| <= bound``.
    """

    def __init__(self, prob: CompiledProblem, backend: str | None = None,
                 tol: float = 1e-8):
        self.prob = prob
        self.backend = backend or os.environ.get("GRIDVOLT_SOLVER", "clarabel").lower()
        if self.backend not in ("clarabel", "scs"):
            raise SolverError(f"unknown conic backend {self.backend!r}")
        self.tol = tol
        self._bounds = _BoundRows(prob)
        self._a_full = sp.vstack(
            [prob.a_eq, prob.a_le, self._bounds.mat, -prob.a_soc], format="csc")
        self._n_le = prob.a_le.shape[0] + self._bounds.mat.shape[0]

    def solve(self, lb: np.ndarray | None = None, ub: np.ndarray | None = None) -> ConicResult:
        prob = self.prob
        lb = prob.lb if lb is None else lb
        ub = prob.ub if ub is None else ub
        b = np.concatenate([prob.b_eq, prob.b_le, self._bounds.rhs(lb, ub), prob.b_soc])
        if self.backend == "clarabel":
            return self._solve_clarabel(b)
        return self._solve_scs(b)

    def _solve_clarabel(self, b):
        import clarabel

        prob = self.prob
        cones = []
        if prob.a_eq.shape[0]:
            cones.append(clarabel.ZeroConeT(prob.a_eq.shape[0]))
        if self._n_le:
            cones.append(clarabel.NonnegativeConeT(self._n_le))
        cones.extend(clarabel.SecondOrderConeT(d) for d in prob.soc_dims)

        settings = clarabel.DefaultSettings()
        settings.verbose = False
        solver = clarabel.DefaultSolver(
            sp.csc_matrix((prob.n, prob.n)), prob.q, self._a_full, b, cones, settings)
        sol = solver.solve()
        status = str(sol.status)
        if status in ("Solved", "AlmostSolved"):
            x = np.asarray(sol.x)
            # recompute from x so objectives are exact bookkeeping, not the
            # solver's internal (scaled) report
            obj = float(prob.q @ x) + prob.cost_const
            tag = "optimal" if status == "Solved" else "inaccurate"
            return ConicResult(tag, x, obj)
        if "PrimalInfeasible" in status:
            return ConicResult("infeasible", None, INF)
        if "DualInfeasible" in status:
            return ConicResult("unbounded", None, -INF)
        return ConicResult("error", None, INF)

    def _solve_scs(self, b):
        import scs

        prob = self.prob
        cone = {"z": int(prob.a_eq.shape[0]), "l": int(self._n_le),
                "q": [int(d) for d in prob.soc_dims]}
        solver = scs.SCS({"A": self._a_full, "b": b, "c": prob.q}, cone,
                         verbose=False, eps_abs=self.tol, eps_rel=self.tol,
                         max_iters=200000)
        out = solver.solve()
        status = out["info"]["status"].lower()
        if "solved" in status:
            x = np.asarray(out["x"])
            obj = float(prob.q @ x) + prob.cost_const
            tag = "inaccurate" if "inaccurate" in status else "optimal"
            return ConicResult(tag, x, obj)
        if "infeasible" in status:
            return ConicResult("infeasible", None, INF)
        if "unbounded" in status:
            return ConicResult("unbounded", None, -INF)
        return ConicResult("error", None, INF)
