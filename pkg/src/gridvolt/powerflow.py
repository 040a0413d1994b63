"""Exact fixed-point backward/forward-sweep AC power flow for radial grids.

This is the projection step of the outer dispatch loop: given fixed
constant-power injections it finds bus voltages satisfying the full AC
equations, alternating a backward current sweep (BIBC) with a forward
voltage-drop sweep (BCBV) until the voltage update falls below tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkModel


class PowerFlowError(RuntimeError):
    pass


class ConvergenceError(PowerFlowError):
    """Sweeps did not reach a fixed point; the operating point is infeasible
    or far beyond normal loading."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class InjectionSet:
    """Net per-unit power injections at every non-slack bus (generation
    positive), ordered like ``model.nonslack_ids()``."""

    p_pu: np.ndarray
    q_pu: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.p_pu)) and np.all(np.isfinite(self.q_pu))):
            raise PowerFlowError("injections must be finite")
        if self.p_pu.shape != self.q_pu.shape:
            raise PowerFlowError("P and Q injection arrays must have the same shape")

    @property
    def s(self) -> np.ndarray:
        return self.p_pu + 1j * self.q_pu


@dataclass(frozen=True)
class NetworkState:
    """Solved snapshot: voltages per bus (model order, slack included),
    branch currents oriented toward the slack, per-branch ohmic losses and
    the net slack-source injection."""

    v: np.ndarray
    i_br: np.ndarray
    p_loss: np.ndarray
    slack_p: float
    slack_q: float
    tap: int
    iterations: int

    def v_at(self, model: NetworkModel, bus_id: int) -> complex:
        return self.v[model.bus_index[bus_id]]


def solve_bfs(model: NetworkModel, inj: InjectionSet, tap: int = 0,
              tol: float = 1e-8, max_iter: int = 100,
              v_init: np.ndarray | None = None, hour: int = 0) -> NetworkState:
    """Solve the power flow by repeated backward/forward sweeps.

    Loads are constant power: injection currents are recomputed every sweep
    as conj((P+jQ)/V).  Starts flat at the slack voltage unless ``v_init``
    warm-starts it.  Raises :class:`ConvergenceError` after ``max_iter``
    sweeps; never clamps silently.
    """
    if model.oltc is not None and not model.oltc.rho_min <= tap <= model.oltc.rho_max:
        raise PowerFlowError(f"tap {tap} outside OLTC bounds")
    v_slack, z_th = model.thevenin.at_hour(hour)

    nonslack = model.nonslack_ids()
    n = len(nonslack)
    if inj.p_pu.shape != (n,):
        raise PowerFlowError(f"expected injections for {n} non-slack buses")

    tm = model.topology()
    bibc = tm.bibc
    bcbv = tm.bcbv.copy()
    # the boundary branch carries the model Thevenin impedance regardless of
    # what the branch table stores (supports hourly Z_th schedules)
    for bi, br in enumerate(model.branches):
        if br.boundary:
            bcbv[:, bi] = np.where(bcbv[:, bi] != 0, z_th, 0.0)

    dv_tap = model.oltc.dv_tap_pu if model.oltc is not None else 0.0
    tap_mask = np.array([model.tap_affected(b) for b in nonslack], dtype=float)
    shift = dv_tap * tap * tap_mask

    s = inj.s
    v = np.full(n, v_slack, dtype=complex) if v_init is None else v_init.astype(complex).copy()

    for it in range(1, max_iter + 1):
        if np.any(np.abs(v) < 1e-6):
            raise ConvergenceError("voltage collapsed toward zero during sweeps")
        i_inj = np.conj(s / v)           # backward: bus injection currents
        i_br = bibc @ i_inj              # backward: accumulate toward slack
        v_new = v_slack - shift + bcbv @ i_br   # forward: drops along paths
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta < tol:
            break
    else:
        raise ConvergenceError(
            f"no fixed point within {max_iter} sweeps (last update {delta:.3e})",
            last_state=v)

    r = np.array([br.z.real for br in model.branches])
    for bi, br in enumerate(model.branches):
        if br.boundary:
            r[bi] = z_th.real
    p_loss = np.abs(i_br) ** 2 * r

    # net injection of the ideal source feeding the root of the tree;
    # branch currents are oriented toward the slack, hence the sign flip
    root_children = [bi for bi, br in enumerate(model.branches)
                     if br.from_bus == model.slack_id]
    s_slack = -sum(v_slack * np.conj(i_br[bi]) for bi in root_children)

    v_full = np.empty(model.n_bus, dtype=complex)
    v_full[model.bus_index[model.slack_id]] = v_slack
    for j, bus_id in enumerate(nonslack):
        v_full[model.bus_index[bus_id]] = v[j]

    return NetworkState(v=v_full, i_br=i_br, p_loss=p_loss,
                        slack_p=float(s_slack.real), slack_q=float(s_slack.imag),
                        tap=tap, iterations=it)


def branch_loss(state: NetworkState, model: NetworkModel) -> np.ndarray:
    """Per-branch ohmic losses |I|^2 R of a solved state (per-unit)."""
    return state.p_loss.copy()


def total_network_loss(state: NetworkState, model: NetworkModel) -> float:
    """Losses over the distribution grid itself, excluding the fictitious
    Thevenin boundary branch."""
    keep = np.array([not br.boundary for br in model.branches])
    return float(state.p_loss[keep].sum())


def interconnection_voltage(state: NetworkState, model: NetworkModel) -> float:
    """|V| at the configured measurement bus (HV side of the OLTC)."""
    if model.measurement_bus not in model.bus_index:
        raise PowerFlowError("measurement bus undefined")
    return float(abs(state.v[model.bus_index[model.measurement_bus]]))


def boundary_exchange(state: NetworkState, model: NetworkModel) -> complex:
    """Net power the grid exports to the TN, metered at the measurement bus
    (per-unit, export positive).

    Computed on the boundary branch as V_m * conj(I), with the branch current
    oriented toward the slack.  Models without a Thevenin branch fall back to
    the negated slack injection (import shows up as negative export).
    """
    boundary = [bi for bi, br in enumerate(model.branches) if br.boundary]
    if not boundary:
        return complex(-state.slack_p, -state.slack_q)
    bi = boundary[0]
    v_m = state.v[model.bus_index[model.branches[bi].to_bus]]
    return v_m * np.conj(state.i_br[bi])
