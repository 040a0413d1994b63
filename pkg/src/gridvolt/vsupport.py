"""Swiss voltage-support schemes: tariff evaluators, settlement, and the
mixed-integer constraint blocks the OPF embeds.

Sign convention is generator-oriented throughout: E_Q > 0 means the
distribution grid exports reactive energy to the transmission grid, which
raises the interconnection voltage.  Sources quoting the consumer-oriented
convention must be flipped at ingestion.

Passive scheme: a 15-minute reactive energy exchange is free inside a band
that is the larger of a power-factor cone and a transformer-derived floor;
the excess is billed linearly.  Active scheme: the interconnection voltage
tracks a TSO setpoint; reactive exchange whose sign helps the tracking earns
revenue, exchange that fights it pays a penalty, and a monthly compliance
share decides remuneration or demotion to the passive role.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conic import ConstraintBlock, ex


class SettlementError(ValueError):
    pass


COMPLIANT_REGIONS = ("A1", "A2")


@dataclass(frozen=True)
class PassiveTariff:
    cos_phi_min: float = 0.9
    uk_percent: float = 6.0
    s_n_mva: float = 25.0
    dt_v_h: float = 0.25
    c_p_chf_per_mvarh: float = 0.0138

    def __post_init__(self):
        if not 0.0 < self.cos_phi_min <= 1.0:
            raise SettlementError("cos_phi_min outside (0, 1]")
        if self.dt_v_h <= 0:
            raise SettlementError("measurement window must be positive")
        if self.c_p_chf_per_mvarh < 0:
            raise SettlementError("penalty rate must be nonnegative")

    @property
    def tan_phi_min(self) -> float:
        return math.tan(math.acos(self.cos_phi_min))


@dataclass(frozen=True)
class ActiveTariff:
    c_comp_chf_per_mvarh: float = 0.003
    c_noncomp_chf_per_mvarh: float = 0.0138
    eps_v_pu: float = 0.005
    remuneration_threshold: float = 0.80
    demotion_threshold: float = 0.70

    def __post_init__(self):
        if self.c_comp_chf_per_mvarh < 0 or self.c_noncomp_chf_per_mvarh < 0:
            raise SettlementError("tariff rates must be nonnegative")
        if not 0.0 < self.eps_v_pu < 0.1:
            raise SettlementError("voltage tolerance outside (0, 0.1) pu")


def load_tariff_presets(path) -> dict:
    """Year-labeled rate presets, normalized to CHF per Mvarh."""
    data = json.loads(Path(path).read_text())
    out = {}
    for name, preset in data["presets"].items():
        unit = preset["unit"]
        if unit == "CHF_per_Mvarh":
            scale = 1.0
        elif unit == "CHF_per_kvarh":
            scale = 1000.0
        else:
            raise SettlementError(f"preset {name}: unknown unit {unit!r}")
        out[name] = {
            "c_p": preset["c_p"] * scale,
            "c_ac": preset["c_ac"] * scale,
            "c_an": preset["c_an"] * scale,
        }
    return out


# -- direct evaluators ------------------------------------------------------


def passive_qlim(e_p_mwh: float, tariff: PassiveTariff) -> float:
    """Cost-free reactive band: max of the power-factor cone at |E_P| and
    the transformer floor (uk/100) * S_N * dt."""
    pf_term = tariff.tan_phi_min * abs(e_p_mwh)
    trafo_term = tariff.uk_percent / 100.0 * tariff.s_n_mva * tariff.dt_v_h
    return max(pf_term, trafo_term)


def passive_cost(e_q_mvarh: float, e_qlim_mvarh: float, c_p: float) -> float:
    """Linear charge on the reactive energy beyond the cost-free band."""
    if e_qlim_mvarh < 0:
        raise SettlementError("band must be nonnegative")
    excess = abs(e_q_mvarh) - e_qlim_mvarh
    return c_p * excess if excess > 0 else 0.0


def active_region(e_q_mvarh: float, v_m_pu: float, v_set_pu: float,
                  eps_pu: float) -> str:
    """Classify one interval into A1..A4; boundary points go to the
    compliant region (zero exchange costs nothing either way)."""
    dv = v_m_pu - v_set_pu
    if e_q_mvarh <= 0 and dv >= -eps_pu:
        return "A1"
    if e_q_mvarh >= 0 and dv <= eps_pu:
        return "A2"
    if e_q_mvarh <= 0:
        return "A3"
    return "A4"


def active_cost(e_q_mvarh: float, region: str, tariff: ActiveTariff) -> float:
    """Interval cost under the active scheme, negative when remunerated."""
    if region in COMPLIANT_REGIONS:
        return -tariff.c_comp_chf_per_mvarh * abs(e_q_mvarh)
    return tariff.c_noncomp_chf_per_mvarh * abs(e_q_mvarh)


# -- settlement -------------------------------------------------------------


STATUS_REMUNERATED = "remunerated"
STATUS_BELOW = "below-remuneration"
STATUS_WARNING = "demotion-warning"
STATUS_DEMOTED = "demoted"


@dataclass(frozen=True)
class IntervalRecord:
    timestamp: str
    e_p_mwh: float
    e_q_mvarh: float
    v_m_pu: float
    v_set_pu: float
    region: str = ""
    cost_chf: float = 0.0


@dataclass(frozen=True)
class ComplianceReport:
    month: str
    intervals: int
    compliant_fraction: float
    status: str
    cost_chf: float          # per-interval costs as accrued
    settled_chf: float       # after the monthly remuneration rule
    records: tuple[IntervalRecord, ...] = field(repr=False, default=())


def classify_record(rec: IntervalRecord, tariff: ActiveTariff) -> IntervalRecord:
    region = active_region(rec.e_q_mvarh, rec.v_m_pu, rec.v_set_pu, tariff.eps_v_pu)
    cost = active_cost(rec.e_q_mvarh, region, tariff)
    return IntervalRecord(rec.timestamp, rec.e_p_mwh, rec.e_q_mvarh, rec.v_m_pu,
                          rec.v_set_pu, region, cost)


def settle_month(records, tariff: ActiveTariff, history=(),
                 month: str = "", expected_intervals: int | None = None) -> ComplianceReport:
    """Monthly compliance fold over an ordered 15-minute record stream.

    ``history`` holds prior months' statuses, newest last: a fraction under
    the demotion threshold in this month and the previous one demotes the
    participant to the passive role.  Revenue is only granted when the
    compliant share reaches the remuneration threshold; penalties always
    stand.
    """
    records = [classify_record(r, tariff) for r in records]
    if not records:
        raise SettlementError("empty record stream")
    if expected_intervals is not None and len(records) != expected_intervals:
        raise SettlementError(
            f"record stream has gaps: {len(records)} of {expected_intervals} intervals")

    compliant = sum(1 for r in records if r.region in COMPLIANT_REGIONS)
    fraction = compliant / len(records)
    accrued = sum(r.cost_chf for r in records)

    if fraction >= tariff.remuneration_threshold:
        status = STATUS_REMUNERATED
        settled = accrued
    else:
        penalties_only = sum(r.cost_chf for r in records if r.cost_chf > 0)
        settled = penalties_only
        if fraction < tariff.demotion_threshold:
            prev_bad = bool(history) and history[-1] in (STATUS_WARNING, STATUS_DEMOTED)
            status = STATUS_DEMOTED if prev_bad else STATUS_WARNING
        else:
            status = STATUS_BELOW

    return ComplianceReport(month=month, intervals=len(records),
                            compliant_fraction=fraction, status=status,
                            cost_chf=accrued, settled_chf=settled,
                            records=tuple(records))


# -- OPF constraint blocks ---------------------------------------------------


def passive_constraint_block(t: int, e_qlim_mvarh: float, c_p: float,
                             big_m: float = 100.0,
                             tie_break: float = 1e-7) -> ConstraintBlock:
    """Big-M block positioning |E_Q| against the cost-free band.

    Declares EQ[t] (Mvarh, tied to the network by the caller), the envelope
    absEQ[t] >= |EQ[t]|, the region binary Zp[t] (1 inside the band) and the
    billed excess u[t]; cost is c_p * u[t].  The excess is pushed to exactly
    max(0, absEQ - band) by the objective, and Zp = 1 forces it to zero.

    Exchanges inside the band make both binary values cost-free; the
    ``tie_break`` reward (orders of magnitude below any tariff) resolves the
    degeneracy toward the compliant label.
    """
    blk = ConstraintBlock()
    eq = blk.var(f"EQ[{t}]", lb=-big_m, ub=big_m)
    w = blk.var(f"absEQ[{t}]", lb=0.0, ub=big_m)
    zp = blk.var(f"Zp[{t}]", lb=0.0, ub=1.0, integer=True)
    u = blk.var(f"uP[{t}]", lb=0.0)
    blk.ge(ex((w, 1.0), (eq, -1.0)), 0.0, name=f"absEQ-pos[{t}]")
    blk.ge(ex((w, 1.0), (eq, 1.0)), 0.0, name=f"absEQ-neg[{t}]")
    # -M Zp + band <= absEQ <= band + M (1 - Zp)
    blk.ge(ex((w, 1.0), (zp, big_m)), e_qlim_mvarh, name=f"passive-lo[{t}]")
    blk.le(ex((w, 1.0), (zp, big_m)), e_qlim_mvarh + big_m, name=f"passive-hi[{t}]")
    # u >= absEQ - band - M Zp and u <= M (1 - Zp): equals the excess at Zp=0
    blk.ge(ex((u, 1.0), (w, -1.0), (zp, big_m)), -e_qlim_mvarh, name=f"passive-u-lo[{t}]")
    blk.le(ex((u, 1.0), (zp, big_m)), big_m, name=f"passive-u-hi[{t}]")
    blk.add_cost(u, c_p)
    blk.add_cost(zp, -tie_break)
    return blk


def active_constraint_block(t: int, v_set_pu: float, eps_pu: float,
                            c_ac: float, c_an: float,
                            big_m: float = 100.0,
                            tie_break: float = 1e-7) -> ConstraintBlock:
    """Big-M block pricing the compliance of the reactive exchange.

    Binaries: Zaq[t] = 1 for export (EQ >= 0); Zav[t] = 1 keeps the measured
    voltage at or below the setpoint band top (the voltage-low side), 0 keeps
    it at or above the band bottom.  Compliance is the XNOR of the two,
    carried by the implied variable Zc[t]; revenue applies to the exported
    magnitude through the split EQ = EQp - EQm gated by Zaq.

    The caller ties EQ[t] (Mvarh) and Vm[t] (pu) to the network model.
    """
    blk = ConstraintBlock()
    eq = blk.var(f"EQ[{t}]", lb=-big_m, ub=big_m)
    eqp = blk.var(f"EQp[{t}]", lb=0.0, ub=big_m)
    eqm = blk.var(f"EQm[{t}]", lb=0.0, ub=big_m)
    vm = blk.var(f"Vm[{t}]")
    zaq = blk.var(f"Zaq[{t}]", lb=0.0, ub=1.0, integer=True)
    zav = blk.var(f"Zav[{t}]", lb=0.0, ub=1.0, integer=True)
    zc = blk.var(f"Zc[{t}]", lb=0.0, ub=1.0)   # XNOR of the binaries, implied
    r = blk.var(f"rA[{t}]", lb=0.0, ub=big_m)  # Zc * |EQ|

    blk.eq(ex((eq, 1.0), (eqp, -1.0), (eqm, 1.0)), 0.0, name=f"eq-split[{t}]")
    blk.le(ex((eqp, 1.0), (zaq, -big_m)), 0.0, name=f"eq-pos-gate[{t}]")
    blk.le(ex((eqm, 1.0), (zaq, big_m)), big_m, name=f"eq-neg-gate[{t}]")

    # Zav=1 enforces Vm <= Vset+eps (voltage-low side), Zav=0 enforces
    # Vm >= Vset-eps; inside the band either value is feasible and the
    # objective picks the compliant one
    blk.le(ex((vm, 1.0), (zav, big_m)), v_set_pu + eps_pu + big_m, name=f"vm-hi[{t}]")
    blk.ge(ex((vm, 1.0), (zav, big_m)), v_set_pu - eps_pu, name=f"vm-lo[{t}]")

    # Zc = 1 iff Zaq == Zav (exact at binary points even with Zc continuous)
    blk.ge(ex((zc, 1.0), (zaq, -1.0), (zav, -1.0)), -1.0, name=f"xnor-11[{t}]")
    blk.ge(ex((zc, 1.0), (zaq, 1.0), (zav, 1.0)), 1.0, name=f"xnor-00[{t}]")
    blk.le(ex((zc, 1.0), (zaq, -1.0), (zav, 1.0)), 1.0, name=f"xnor-10[{t}]")
    blk.le(ex((zc, 1.0), (zaq, 1.0), (zav, -1.0)), 1.0, name=f"xnor-01[{t}]")

    # r = Zc * (EQp + EQm), exact at binary Zc because its net objective
    # coefficient -(c_ac + c_an) pushes r to its upper envelope
    blk.le(ex((r, 1.0), (eqp, -1.0), (eqm, -1.0)), 0.0, name=f"rev-cap-abs[{t}]")
    blk.le(ex((r, 1.0), (zc, -big_m)), 0.0, name=f"rev-cap-z[{t}]")
    blk.ge(ex((r, 1.0), (eqp, -1.0), (eqm, -1.0), (zc, -big_m)), -big_m,
           name=f"rev-floor[{t}]")

    blk.add_cost(r, -(c_ac + c_an))
    blk.add_cost(eqp, c_an)
    blk.add_cost(eqm, c_an)
    blk.add_cost(zc, -tie_break)  # compliant-first on zero-exchange ties
    return blk
