import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridvolt.bnb import solve_mip
from gridvolt.conic import ConicSolver, ConstraintBlock, compile_block, ex
from gridvolt.der import (
    BessUnit,
    ControllableLoad,
    DerError,
    DerFleet,
    DgUnit,
    bess_constraints,
    bess_step,
    capability_bounds,
    cl_constraints,
    load_fleet,
)


def dg(capability, p=1.0, s=1.1, cos_phi=0.9, floor=0.0):
    return DgUnit(name="u", bus=1, p_rating_mva=p, s_inv_mva=s,
                  capability=capability, cos_phi_max=cos_phi,
                  p_floor_rating_mva=floor)


class TestCapabilityBounds:
    def test_triangular_zero_injection(self):
        region = capability_bounds(dg("triangular"), 0.0)
        assert region.q_min == region.q_max == 0.0

    def test_semicircle_at_rating(self):
        # sqrt(1.21 - 1) = 0.45826 at S_inv = 1.1 * P_max
        region = capability_bounds(dg("semicircle"), 1.0)
        assert region.q_max == pytest.approx(0.4582575695, abs=1e-9)
        assert region.q_min == pytest.approx(-0.4582575695, abs=1e-9)

    def test_triangular_pf_09(self):
        # tan(acos 0.9) = 0.48432
        region = capability_bounds(dg("triangular", cos_phi=0.9), 1.0)
        assert region.q_max == pytest.approx(0.4843221049, abs=1e-9)

    def test_rectangular_rating_anchored(self):
        region = capability_bounds(dg("rectangular", cos_phi=0.9), 0.0)
        assert region.q_max == pytest.approx(0.4843221049, abs=1e-9)
        assert region.q_min == 0.0  # default absorption anchor is the 0 floor

    def test_rectangular_with_floor(self):
        region = capability_bounds(dg("rectangular", cos_phi=0.9, floor=1.0), 0.5)
        assert region.q_min == pytest.approx(-0.4843221049, abs=1e-9)

    def test_over_rating_rejected(self):
        with pytest.raises(DerError, match="exceeds"):
            capability_bounds(dg("semicircle"), 1.2)

    @given(p_now=st.floats(0.0, 1.0), cos_phi=st.floats(0.7, 1.0))
    @settings(max_examples=100, deadline=None)
    def test_triangle_inside_rectangle_upper(self, p_now, cos_phi):
        # the export half of the triangle sits inside the rating rectangle
        tri = capability_bounds(dg("triangular", cos_phi=cos_phi), p_now)
        rect = capability_bounds(dg("rectangular", cos_phi=cos_phi), p_now)
        assert tri.q_max <= rect.q_max + 1e-12

    @given(p_now=st.floats(0.0, 1.0))
    @settings(max_examples=100, deadline=None)
    def test_rectangle_inside_semicircle_when_nested(self, p_now):
        # with cos_phi 0.95 and 10 percent oversizing the circle radius at
        # P = rating still exceeds the rectangle top, so the regions nest
        rect = capability_bounds(dg("rectangular", cos_phi=0.95), p_now)
        semi = capability_bounds(dg("semicircle", cos_phi=0.95), p_now)
        assert semi.q_max >= rect.q_max - 1e-12

    def test_corner_outside_semicircle_not_asserted(self):
        # at cos_phi 0.9 the triangle corner pokes out of the circle; this is
        # expected and the regions simply do not nest there
        tri = capability_bounds(dg("triangular", cos_phi=0.9), 1.0)
        semi = capability_bounds(dg("semicircle", cos_phi=0.9), 1.0)
        assert tri.q_max > semi.q_max


class TestBessStep:
    def test_idle(self):
        assert bess_step(100.0, 0.0, 0.0, 0.95, 0.25) == 100.0

    def test_charge(self):
        assert bess_step(0.0, 100.0, 0.0, 0.95, 0.25) == pytest.approx(23.75)

    def test_discharge(self):
        assert bess_step(100.0, 0.0, 95.0, 0.95, 0.25) == pytest.approx(100.0 - 25.0)

    def test_negative_power_rejected(self):
        with pytest.raises(DerError):
            bess_step(0.0, -1.0, 0.0, 0.95, 0.25)


def bess_unit(mode="epsilon"):
    return BessUnit(name="b", bus=1, e_cap_kwh=200, soc_min=0.1, soc_max=0.9,
                    e_start_kwh=100, p_max_kw=100, s_max_kva=120, eta=0.95,
                    mode=mode)


def solve_block(blk, integer=False):
    prob = compile_block(blk)
    if integer:
        res = solve_mip(prob)
    else:
        res = ConicSolver(prob).solve()
    assert res.x is not None
    return prob, res


class TestBessConstraints:
    def test_round_trip_loss_accounting(self):
        # charge then discharge back to start: discharged energy is eta^2 of
        # what was drawn, checked by hand from two dynamics steps
        unit = bess_unit()
        deficit = np.array([-50.0, 50.0])  # surplus then deficit
        blk = bess_constraints(unit, 2, 0.25, local_deficit_kw=deficit)
        blk.add_cost("Pdis[b,1]", -1.0)  # discharge as much as possible
        prob, res = solve_block(blk)
        p_ch = prob.value(res.x, "Pch[b,0]")
        p_dis = prob.value(res.x, "Pdis[b,1]")
        assert p_dis == pytest.approx(unit.eta ** 2 * p_ch, abs=1e-5)

    def test_epsilon_blocks_charging_at_deficit(self):
        unit = bess_unit()
        deficit = np.array([200.0])  # P_l - P_avail = 200 kW deficit
        blk = bess_constraints(unit, 1, 0.25, local_deficit_kw=deficit)
        blk.add_cost("Pch[b,0]", -1.0)  # try hard to charge
        prob, res = solve_block(blk)
        assert prob.value(res.x, "Pch[b,0]") <= unit.epsilon / 200.0 + 1e-9

    def test_epsilon_blocks_discharge_at_surplus(self):
        unit = bess_unit()
        deficit = np.array([-200.0])
        blk = bess_constraints(unit, 1, 0.25, local_deficit_kw=deficit)
        blk.add_cost("Pdis[b,0]", -1.0)
        prob, res = solve_block(blk)
        assert prob.value(res.x, "Pdis[b,0]") <= unit.epsilon / 200.0 + 1e-9

    def test_binary_mode_exclusive(self):
        unit = bess_unit(mode="binary")
        blk = bess_constraints(unit, 2, 0.25)
        # reward simultaneous charge and discharge; the binary must forbid it
        blk.add_cost("Pch[b,0]", -1.0)
        blk.add_cost("Pdis[b,0]", -1.0)
        prob, res = solve_block(blk, integer=True)
        p_ch = prob.value(res.x, "Pch[b,0]")
        p_dis = prob.value(res.x, "Pdis[b,0]")
        assert min(p_ch, p_dis) <= 1e-6

    def test_terminal_energy_pinned(self):
        unit = bess_unit()
        deficit = np.array([-100.0, -100.0, 100.0, 100.0])
        blk = bess_constraints(unit, 4, 0.25, local_deficit_kw=deficit)
        blk.add_cost("Pch[b,0]", -0.5)
        prob, res = solve_block(blk)
        assert prob.value(res.x, "Eb[b,0]") == pytest.approx(100.0, abs=1e-6)
        assert prob.value(res.x, "Eb[b,4]") == pytest.approx(100.0, abs=1e-6)

    def test_soc_bounds_enforced(self):
        unit = bess_unit()
        deficit = -np.ones(8) * 100.0  # surplus all day: charge freely
        blk = bess_constraints(unit, 8, 1.0, local_deficit_kw=deficit)
        for t in range(8):
            blk.add_cost(f"Pch[b,{t}]", -1.0)
        prob, res = solve_block(blk)
        for t in range(9):
            e = prob.value(res.x, f"Eb[b,{t}]")
            assert 0.1 * 200 - 1e-6 <= e <= 0.9 * 200 + 1e-6

    def test_q_cone(self):
        unit = bess_unit()
        blk = bess_constraints(unit, 1, 0.25, local_deficit_kw=np.array([-100.0]))
        blk.add_cost("Qb[b,0]", -1.0)
        blk.add_cost("Pch[b,0]", -0.1)
        prob, res = solve_block(blk)
        q = prob.value(res.x, "Qb[b,0]")
        p = prob.value(res.x, "Pch[b,0]")
        assert math.hypot(p, q) <= unit.s_max_kva + 1e-6

    def test_infeasible_soc_rejected(self):
        with pytest.raises(DerError):
            BessUnit(name="x", bus=1, e_cap_kwh=100, soc_min=0.5, soc_max=0.4,
                     e_start_kwh=45, p_max_kw=10, s_max_kva=10, eta=0.9)


class TestControllableLoad:
    def test_no_shift_identity(self):
        load = ControllableLoad(name="cl", bus=3, p_shift_kw=5.0)
        blk = cl_constraints(load, 4, baseline_kw=np.full(4, 20.0))
        prob, res = solve_block(blk, integer=True)
        total = sum(prob.value(res.x, f"n[cl,{t}]") for t in range(4))
        assert total == pytest.approx(0.0, abs=1e-9)

    def test_shift_preserves_energy(self):
        load = ControllableLoad(name="cl", bus=3, p_shift_kw=5.0)
        blk = cl_constraints(load, 96, baseline_kw=np.full(96, 20.0))
        # push one block from step 10 to step 70
        blk.add_cost("n[cl,10]", 1.0)
        blk.add_cost("n[cl,70]", -1.0)
        prob = compile_block(blk)
        mip = solve_mip(prob)
        assert mip.ok
        vals = [prob.value(mip.x, f"n[cl,{t}]") for t in range(96)]
        assert sum(vals) == pytest.approx(0.0, abs=1e-6)
        assert vals[10] == pytest.approx(-1.0, abs=1e-6)
        assert vals[70] == pytest.approx(1.0, abs=1e-6)

    def test_oversized_block_rejected(self):
        load = ControllableLoad(name="cl", bus=3, p_shift_kw=25.0)
        with pytest.raises(DerError, match="negative"):
            cl_constraints(load, 4, baseline_kw=np.full(4, 20.0))


class TestFleetLoading:
    def test_benchmark_fleet(self, benchmark_fleet_path):
        fleet = load_fleet(benchmark_fleet_path)
        assert len(fleet.dg) == 9
        assert len(fleet.bess) == 1
        assert fleet.bess[0].e_cap_kwh == 200.0
        assert len(fleet.cl) == 1
        assert fleet.cl[0].p_shift_kw == 5.0

    def test_with_capability(self, benchmark_fleet_path):
        fleet = load_fleet(benchmark_fleet_path).with_capability("semicircle")
        assert all(u.capability == "semicircle" for u in fleet.dg)
