"""Controllable resources: inverter-based generators, batteries, shiftable
loads.

Each resource exposes its operating envelope two ways: small evaluators used
for post-hoc dispatch audits (:func:`capability_bounds`, :func:`bess_step`)
and constraint-block emitters consumed by the OPF builder
(:func:`bess_constraints`, :func:`cl_constraints`; generator capability is
emitted inline by the builder since it couples to the network dispatch
variables).

Units follow the data they model: generator dispatch in MW/Mvar, battery
power in kW and energy in kWh, load blocks in kW.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conic import ConstraintBlock, ex

CAPABILITY_MODES = ("triangular", "rectangular", "semicircle")


class DerError(ValueError):
    pass


@dataclass(frozen=True)
class DgUnit:
    """Inverter-interfaced generator (PV or wind; both differ only in their
    availability profile)."""

    name: str
    bus: int
    p_rating_mva: float
    s_inv_mva: float
    capability: str = "triangular"
    cos_phi_max: float = 0.95
    profile: str = ""
    kind: str = "pv"
    p_floor_rating_mva: float = 0.0  # rectangle absorption anchor

    def __post_init__(self):
        if self.capability not in CAPABILITY_MODES:
            raise DerError(f"{self.name}: unknown capability {self.capability!r}")
        if self.s_inv_mva < self.p_rating_mva:
            raise DerError(f"{self.name}: inverter rating below installed capacity")
        if not 0.0 < self.cos_phi_max <= 1.0:
            raise DerError(f"{self.name}: cos_phi_max outside (0, 1]")

    @property
    def tan_phi(self) -> float:
        return math.tan(math.acos(self.cos_phi_max))


@dataclass(frozen=True)
class QRegion:
    """Reactive-power envelope at a fixed active injection."""

    kind: str
    q_min: float
    q_max: float

    def contains(self, q: float, tol: float = 1e-9) -> bool:
        return self.q_min - tol <= q <= self.q_max + tol


def capability_bounds(unit: DgUnit, p_now: float) -> QRegion:
    """Reactive envelope of one unit at active injection ``p_now`` (MW).

    triangular: |Q| <= tan(phi_max) * P, so no reactive headroom at zero
    injection; rectangular: fixed rating-anchored band independent of P;
    semicircle: Q**2 <= S_inv**2 - P**2 (apparent-power circle).
    """
    if p_now < -1e-12:
        raise DerError(f"{unit.name}: negative active injection")
    if p_now > unit.s_inv_mva + 1e-12:
        raise DerError(f"{unit.name}: P={p_now} exceeds inverter rating {unit.s_inv_mva}")
    if unit.capability == "triangular":
        lim = unit.tan_phi * p_now
        return QRegion("triangular", -lim, lim)
    if unit.capability == "rectangular":
        return QRegion("rectangular",
                       -unit.tan_phi * unit.p_floor_rating_mva,
                       unit.tan_phi * unit.p_rating_mva)
    q = math.sqrt(max(unit.s_inv_mva ** 2 - p_now ** 2, 0.0))
    return QRegion("semicircle", -q, q)


@dataclass(frozen=True)
class BessUnit:
    name: str
    bus: int
    e_cap_kwh: float
    soc_min: float
    soc_max: float
    e_start_kwh: float
    p_max_kw: float
    s_max_kva: float
    eta: float
    mode: str = "epsilon"   # epsilon | binary charge/discharge exclusivity
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.soc_min < self.soc_max <= 1.0:
            raise DerError(f"{self.name}: SoC bounds must satisfy 0 <= min < max <= 1")
        if not self.soc_min * self.e_cap_kwh <= self.e_start_kwh <= self.soc_max * self.e_cap_kwh:
            raise DerError(f"{self.name}: starting energy outside SoC band")
        if not 0.0 < self.eta <= 1.0:
            raise DerError(f"{self.name}: efficiency outside (0, 1]")
        if self.mode not in ("epsilon", "binary"):
            raise DerError(f"{self.name}: unknown complementarity mode {self.mode!r}")


def bess_step(e_prev_kwh: float, p_ch_kw: float, p_dis_kw: float,
              eta: float, dt_h: float) -> float:
    """One energy update: E + (eta * P_ch - P_dis / eta) * dt."""
    if p_ch_kw < 0 or p_dis_kw < 0:
        raise DerError("charging and discharging powers are nonnegative")
    return e_prev_kwh + (eta * p_ch_kw - p_dis_kw / eta) * dt_h


def bess_constraints(unit: BessUnit, n_steps: int, dt_h: float,
                     local_deficit_kw: np.ndarray | None = None) -> ConstraintBlock:
    """Multi-period battery block.

    Variables (kW / kvar / kWh): Pch[u,t], Pdis[u,t], Qb[u,t] and the energy
    trajectory Eb[u,t] for t = 0..n_steps with Eb[0] = Eb[n] = E_start.

    Charge/discharge exclusivity: in ``epsilon`` mode the known local
    deficit profile (load minus available generation at the battery's bus)
    gates the direction linearly, charging only at surplus and discharging
    only at deficit; ``binary`` mode uses one binary per step instead.
    The reactive envelope is a pair of second-order cones covering whichever
    of Pch/Pdis is active.
    """
    if n_steps < 1:
        raise DerError("horizon must cover at least one step")
    if unit.mode == "epsilon" and local_deficit_kw is None:
        raise DerError(f"{unit.name}: epsilon mode needs the local deficit profile")

    blk = ConstraintBlock()
    u = unit.name
    e_lo = unit.soc_min * unit.e_cap_kwh
    e_hi = unit.soc_max * unit.e_cap_kwh

    for t in range(n_steps + 1):
        fixed = t in (0, n_steps)
        blk.var(f"Eb[{u},{t}]",
                lb=unit.e_start_kwh if fixed else e_lo,
                ub=unit.e_start_kwh if fixed else e_hi)
    for t in range(n_steps):
        blk.var(f"Pch[{u},{t}]", lb=0.0, ub=unit.p_max_kw)
        blk.var(f"Pdis[{u},{t}]", lb=0.0, ub=unit.p_max_kw)
        blk.var(f"Qb[{u},{t}]", lb=-unit.s_max_kva, ub=unit.s_max_kva)
        blk.eq(ex((f"Eb[{u},{t + 1}]", 1.0), (f"Eb[{u},{t}]", -1.0),
                  (f"Pch[{u},{t}]", -unit.eta * dt_h),
                  (f"Pdis[{u},{t}]", dt_h / unit.eta)),
               0.0, name=f"bess-dyn[{u},{t}]")
        blk.soc(ex(const=unit.s_max_kva),
                [ex((f"Pch[{u},{t}]", 1.0)), ex((f"Qb[{u},{t}]", 1.0))],
                name=f"bess-cone-ch[{u},{t}]")
        blk.soc(ex(const=unit.s_max_kva),
                [ex((f"Pdis[{u},{t}]", 1.0)), ex((f"Qb[{u},{t}]", 1.0))],
                name=f"bess-cone-dis[{u},{t}]")

        if unit.mode == "epsilon":
            c = float(local_deficit_kw[t])
            # deficit (c > 0) pins charging near zero, surplus (c < 0) pins
            # discharging near zero; the other side stays free
            blk.le(ex((f"Pch[{u},{t}]", c)), unit.epsilon, name=f"bess-eps-ch[{u},{t}]")
            blk.ge(ex((f"Pdis[{u},{t}]", c)), -unit.epsilon, name=f"bess-eps-dis[{u},{t}]")
        else:
            zb = blk.var(f"Zb[{u},{t}]", lb=0.0, ub=1.0, integer=True)
            blk.le(ex((f"Pch[{u},{t}]", 1.0), (zb, -unit.p_max_kw)), 0.0,
                   name=f"bess-bin-ch[{u},{t}]")
            blk.le(ex((f"Pdis[{u},{t}]", 1.0), (zb, unit.p_max_kw)), unit.p_max_kw,
                   name=f"bess-bin-dis[{u},{t}]")
    return blk


@dataclass(frozen=True)
class ControllableLoad:
    """Load with a fixed block that can be shifted across the horizon while
    keeping total daily energy unchanged."""

    name: str
    bus: int
    p_shift_kw: float

    def __post_init__(self):
        if self.p_shift_kw < 0:
            raise DerError(f"{self.name}: shift block must be nonnegative")


def cl_constraints(load: ControllableLoad, n_steps: int,
                   baseline_kw: np.ndarray) -> ConstraintBlock:
    """Shift variables n[l,t] in {-1, 0, 1} with sum(n) = 0.

    The flexible demand is baseline + n * P_shift; a block that could push
    demand negative is rejected here rather than at solve time.
    """
    if n_steps < 1:
        raise DerError("horizon must cover at least one step")
    if load.p_shift_kw > float(np.min(baseline_kw)) + 1e-9:
        raise DerError(
            f"{load.name}: shift block {load.p_shift_kw} kW exceeds minimum baseline "
            f"{float(np.min(baseline_kw)):.3f} kW and would drive demand negative")
    blk = ConstraintBlock()
    names = [blk.var(f"n[{load.name},{t}]", lb=-1.0, ub=1.0, integer=True)
             for t in range(n_steps)]
    blk.eq(ex(*[(nm, 1.0) for nm in names]), 0.0, name=f"cl-neutral[{load.name}]")
    return blk


@dataclass(frozen=True)
class DerFleet:
    dg: tuple[DgUnit, ...] = ()
    bess: tuple[BessUnit, ...] = ()
    cl: tuple[ControllableLoad, ...] = ()

    def with_capability(self, capability: str) -> "DerFleet":
        """Copy of the fleet with every generator switched to one mode."""
        if capability not in CAPABILITY_MODES:
            raise DerError(f"unknown capability {capability!r}")
        dg = tuple(DgUnit(name=u.name, bus=u.bus, p_rating_mva=u.p_rating_mva,
                          s_inv_mva=u.s_inv_mva, capability=capability,
                          cos_phi_max=u.cos_phi_max, profile=u.profile, kind=u.kind,
                          p_floor_rating_mva=u.p_floor_rating_mva)
                   for u in self.dg)
        return DerFleet(dg=dg, bess=self.bess, cl=self.cl)


def load_fleet(source) -> DerFleet:
    """Fleet from a JSON description (path, str or dict)."""
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text())
    elif isinstance(source, dict):
        data = source
    else:
        raise DerError(f"unsupported fleet source {type(source)!r}")

    dg = tuple(DgUnit(
        name=e["name"], bus=int(e["bus"]), p_rating_mva=float(e["p_rating_mva"]),
        s_inv_mva=float(e.get("s_inv_mva", e["p_rating_mva"])),
        capability=e.get("capability", "triangular"),
        cos_phi_max=float(e.get("cos_phi_max", 0.95)),
        profile=e.get("profile", ""), kind=e.get("kind", "pv"),
        p_floor_rating_mva=float(e.get("p_floor_rating_mva", 0.0)),
    ) for e in data.get("dg", []))
    bess = tuple(BessUnit(
        name=e["name"], bus=int(e["bus"]), e_cap_kwh=float(e["e_cap_kwh"]),
        soc_min=float(e["soc_min"]), soc_max=float(e["soc_max"]),
        e_start_kwh=float(e["e_start_kwh"]), p_max_kw=float(e["p_max_kw"]),
        s_max_kva=float(e["s_max_kva"]), eta=float(e["eta"]),
        mode=e.get("mode", "epsilon"), epsilon=float(e.get("epsilon", 1e-5)),
    ) for e in data.get("bess", []))
    cl = tuple(ControllableLoad(
        name=e["name"], bus=int(e["bus"]), p_shift_kw=float(e["p_shift_kw"]),
    ) for e in data.get("cl", []))
    return DerFleet(dg=dg, bess=bess, cl=cl)
