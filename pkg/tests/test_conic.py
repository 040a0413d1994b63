import numpy as np
import pytest

from gridvolt.bnb import solve_mip
from gridvolt.conic import ConicSolver, ConstraintBlock, compile_block, ex


class TestConicSolver:
    def test_lp(self):
        # min x + y s.t. x + y >= 1, x,y >= 0  -> obj 1
        blk = ConstraintBlock()
        blk.var("x", lb=0.0)
        blk.var("y", lb=0.0)
        blk.ge(ex(("x", 1), ("y", 1)), 1.0)
        blk.add_cost("x", 1.0)
        blk.add_cost("y", 1.0)
        res = ConicSolver(compile_block(blk)).solve()
        assert res.ok
        assert res.obj == pytest.approx(1.0, abs=1e-7)

    def test_soc(self):
        # min -x - y s.t. ||(x, y)|| <= 5: optimum on the circle diagonal
        blk = ConstraintBlock()
        blk.var("x")
        blk.var("y")
        blk.soc(ex(const=5.0), [ex(("x", 1)), ex(("y", 1))])
        blk.add_cost("x", -1.0)
        blk.add_cost("y", -1.0)
        prob = compile_block(blk)
        res = ConicSolver(prob).solve()
        assert res.ok
        assert prob.value(res.x, "x") == pytest.approx(5 / np.sqrt(2), abs=1e-6)
        assert res.obj == pytest.approx(-np.sqrt(2) * 5, abs=1e-6)

    def test_soc_affine_bound(self):
        # min t s.t. ||(x - 3,)|| <= t, x == 1 -> t = 2
        blk = ConstraintBlock()
        blk.var("x", lb=1.0, ub=1.0)
        blk.var("t", lb=0.0)
        blk.soc(ex(("t", 1)), [ex(("x", 1), const=-3.0)])
        blk.add_cost("t", 1.0)
        res = ConicSolver(compile_block(blk)).solve()
        assert res.ok
        assert res.obj == pytest.approx(2.0, abs=1e-6)

    def test_infeasible(self):
        blk = ConstraintBlock()
        blk.var("x", lb=0.0, ub=1.0)
        blk.ge(ex(("x", 1)), 2.0)
        blk.add_cost("x", 1.0)
        res = ConicSolver(compile_block(blk)).solve()
        assert res.status == "infeasible"

    def test_bound_override(self):
        blk = ConstraintBlock()
        blk.var("x", lb=0.0, ub=10.0)
        blk.add_cost("x", 1.0)
        prob = compile_block(blk)
        solver = ConicSolver(prob)
        lb = prob.lb.copy()
        lb[prob.index["x"]] = 4.0
        res = solver.solve(lb=lb)
        assert res.obj == pytest.approx(4.0, abs=1e-7)

    def test_scs_backend_agrees(self):
        blk = ConstraintBlock()
        blk.var("x", lb=0.0)
        blk.var("y", lb=0.0)
        blk.ge(ex(("x", 1), ("y", 2)), 3.0)
        blk.add_cost("x", 2.0)
        blk.add_cost("y", 1.0)
        prob = compile_block(blk)
        a = ConicSolver(prob, backend="clarabel").solve()
        b = ConicSolver(prob, backend="scs").solve()
        assert a.obj == pytest.approx(b.obj, abs=1e-5)

    def test_export_text(self, tmp_path):
        blk = ConstraintBlock()
        blk.var("x", lb=0.0, ub=2.0, integer=True)
        blk.var("y")
        blk.eq(ex(("y", 1), ("x", -1)), 0.5)
        blk.soc(ex(const=3.0), [ex(("y", 1))])
        blk.add_cost("y", 1.0)
        prob = compile_block(blk)
        out = tmp_path / "problem.txt"
        prob.export_text(out)
        text = out.read_text()
        assert "[VARS]" in text and "[EQ]" in text and "[SOC]" in text
        assert "x 0 2 1" in text


class TestBranchAndBound:
    def test_pure_continuous(self):
        blk = ConstraintBlock()
        blk.var("x", lb=0.5)
        blk.add_cost("x", 1.0)
        res = solve_mip(compile_block(blk))
        assert res.status == "optimal"
        assert res.obj == pytest.approx(0.5, abs=1e-7)

    def test_knapsack_toy(self):
        # max 5a + 4b + 3c s.t. 2a + 3b + c <= 3, binaries -> a=1, c=1
        blk = ConstraintBlock()
        for name in "abc":
            blk.var(name, lb=0.0, ub=1.0, integer=True)
        blk.le(ex(("a", 2), ("b", 3), ("c", 1)), 3.0)
        blk.add_cost("a", -5.0)
        blk.add_cost("b", -4.0)
        blk.add_cost("c", -3.0)
        prob = compile_block(blk)
        res = solve_mip(prob)
        assert res.status == "optimal"
        assert res.obj == pytest.approx(-8.0, abs=1e-5)
        assert prob.value(res.x, "a") == pytest.approx(1.0, abs=1e-5)
        assert prob.value(res.x, "b") == pytest.approx(0.0, abs=1e-5)

    def test_integer_range(self):
        # min (x - 2.6)^2 via SOC epigraph with x integer in [-5, 5] -> x = 3
        blk = ConstraintBlock()
        blk.var("x", lb=-5, ub=5, integer=True)
        blk.var("t", lb=0.0)
        blk.soc(ex(("t", 1)), [ex(("x", 1), const=-2.6)])
        blk.add_cost("t", 1.0)
        prob = compile_block(blk)
        res = solve_mip(prob)
        assert res.status == "optimal"
        assert prob.value(res.x, "x") == pytest.approx(3.0, abs=1e-5)

    def test_infeasible_mip(self):
        blk = ConstraintBlock()
        blk.var("x", lb=0.0, ub=1.0, integer=True)
        blk.ge(ex(("x", 1)), 2.0)
        blk.add_cost("x", 1.0)
        res = solve_mip(compile_block(blk))
        assert res.status == "infeasible"

    def test_hint_used(self):
        blk = ConstraintBlock()
        blk.var("z", lb=0.0, ub=1.0, integer=True)
        blk.var("y", lb=0.0, ub=10.0)
        # y >= 3 - 10 z and y >= z: z=1 gives y=1, z=0 gives y=3
        blk.ge(ex(("y", 1), ("z", 10)), 3.0)
        blk.ge(ex(("y", 1), ("z", -1)), 0.0)
        blk.add_cost("y", 1.0)
        prob = compile_block(blk)
        res = solve_mip(prob, hints=[{"z": 1.0}])
        assert res.status == "optimal"
        assert res.obj == pytest.approx(1.0, abs=1e-5)

    def test_determinism(self):
        def run():
            blk = ConstraintBlock()
            for k in range(6):
                blk.var(f"z{k}", lb=0.0, ub=1.0, integer=True)
            blk.var("y", lb=0.0)
            blk.ge(ex(*[(f"z{k}", k + 1) for k in range(6)], ("y", 1)), 7.3)
            for k in range(6):
                blk.add_cost(f"z{k}", 1.0 + 0.1 * k)
            blk.add_cost("y", 0.9)
            return solve_mip(compile_block(blk))

        r1, r2 = run(), run()
        assert r1.obj == r2.obj
        assert np.array_equal(r1.x, r2.x)
