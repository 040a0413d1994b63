"""Independent reference implementations used only to check the package.

These deliberately avoid the BIBC/BCBV sweep machinery: the power flow
oracle is a rectangular-coordinate Newton-Raphson on the bus admittance
matrix, and the dispatch oracle is a brute-force grid search over setpoints
with exact power flows.
"""

from __future__ import annotations

import numpy as np


def ybus_from_model(model):
    """Bus admittance matrix (model bus ordering). Requires z != 0 branches."""
    n = model.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in model.branches:
        i = model.bus_index[br.from_bus]
        j = model.bus_index[br.to_bus]
        yb = 1.0 / br.z
        y[i, i] += yb
        y[j, j] += yb
        y[i, j] -= yb
        y[j, i] -= yb
    return y


def newton_pf(model, p_pu, q_pu, tol=1e-10, max_iter=50):
    """Newton-Raphson AC power flow in rectangular coordinates.

    p_pu/q_pu are net injections at non-slack buses in ``nonslack_ids()``
    order (generation positive).  Returns complex voltages in model bus
    order.  No OLTC support: intended for plain impedance networks.
    """
    y = ybus_from_model(model)
    n = model.n_bus
    slack = model.bus_index[model.slack_id]
    nonslack = [model.bus_index[b] for b in model.nonslack_ids()]
    s_spec = np.zeros(n, dtype=complex)
    for k, idx in enumerate(nonslack):
        s_spec[idx] = p_pu[k] + 1j * q_pu[k]

    v = np.ones(n, dtype=complex) * model.thevenin.v_slack
    for _ in range(max_iter):
        yv = y @ v
        s_calc = v * np.conj(yv)
        mism = s_calc - s_spec
        f = np.concatenate([mism[nonslack].real, mism[nonslack].imag])
        if np.max(np.abs(f)) < tol:
            return v
        # dS = dV o conj(YV) + V o conj(Y dV); real and imaginary basis
        m1 = np.diag(np.conj(yv)) + np.diag(v) @ np.conj(y)
        m2 = 1j * np.diag(np.conj(yv)) - 1j * np.diag(v) @ np.conj(y)
        m1 = m1[np.ix_(nonslack, nonslack)]
        m2 = m2[np.ix_(nonslack, nonslack)]
        jac = np.block([[m1.real, m2.real], [m1.imag, m2.imag]])
        dx = np.linalg.solve(jac, -f)
        k = len(nonslack)
        v_ns = v[nonslack] + dx[:k] + 1j * dx[k:]
        v = v.copy()
        v[nonslack] = v_ns
    raise RuntimeError("newton oracle did not converge")


def random_radial_case(rng, n_bus_max=20):
    """Random radial network plus a moderate random loading.

    Returns (model, p_pu, q_pu).  Impedances and loads are scaled so the
    case stays far from voltage collapse.
    """
    from gridvolt.network import Branch, Bus, NetworkModel, TheveninEquivalent

    n = int(rng.integers(3, n_bus_max + 1))
    buses = [Bus(id=0, kind="slack", base_kv=20.0)]
    branches = []
    for i in range(1, n):
        parent = int(rng.integers(0, i))
        r = float(rng.uniform(0.002, 0.02))
        x = float(rng.uniform(0.004, 0.04))
        buses.append(Bus(id=i, kind="mv", base_kv=20.0))
        branches.append(Branch(from_bus=parent, to_bus=i, r_pu=r, x_pu=x, i_max_pu=10.0))
    model = NetworkModel(buses=buses, branches=branches,
                         thevenin=TheveninEquivalent(v_slack=1.0 + 0j))
    p = rng.uniform(-0.3, 0.15, n - 1)
    q = rng.uniform(-0.1, 0.05, n - 1)
    return model, p, q


def vectorized_bfs(model, p_pu_grid, q_pu_grid, inj_bus, base_inj_p, base_inj_q,
                   tol=1e-10, max_iter=200):
    """Exact sweep power flow over a whole dispatch grid at once.

    p/q grids are per-unit injections ADDED at ``inj_bus`` on top of the
    base injection vectors; returns complex voltages of shape
    (grid, n_nonslack) plus branch currents (grid, n_branch).
    """
    tm = model.topology()
    nonslack = model.nonslack_ids()
    col = {b: j for j, b in enumerate(nonslack)}
    n = len(nonslack)
    g = len(p_pu_grid)
    s = np.tile(base_inj_p + 1j * base_inj_q, (g, 1)).astype(complex)
    s[:, col[inj_bus]] += p_pu_grid + 1j * q_pu_grid
    v = np.ones((g, n), dtype=complex) * model.thevenin.v_slack
    bibc_t = tm.bibc.T
    bcbv_t = tm.bcbv.T
    for _ in range(max_iter):
        i_inj = np.conj(s / v)
        i_br = i_inj @ bibc_t
        v_new = model.thevenin.v_slack + i_br @ bcbv_t
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta < tol:
            break
    i_inj = np.conj(s / v)
    return v, i_inj @ bibc_t


def brute_force_dispatch(model, unit, p_avail_mw, load_p_mw, load_q_mvar,
                         c_curt, c_q, dt_h, v_min=0.95, v_max=1.05,
                         resolution=1e-3):
    """Grid search over one generator's (P, Q) with exact power flows.

    Enumerates P and Q at ``resolution`` (per-unit of the system base),
    filters exact AC feasibility (voltage band, ampacities), and prices
    curtailment, reactive use and losses.  Returns (best cost, best P MW,
    best Q MW, feasible count).
    """
    sbase = model.base_mva
    nonslack = model.nonslack_ids()
    base_p = np.array([-load_p_mw.get(b, 0.0) / sbase for b in nonslack])
    base_q = np.array([-load_q_mvar.get(b, 0.0) / sbase for b in nonslack])

    p_hi = p_avail_mw / sbase
    p_grid_1d = np.arange(0.0, p_hi + resolution / 2, resolution)
    tan_phi = np.tan(np.arccos(unit.cos_phi_max))

    best = (np.inf, None, None)
    feasible = 0
    # chunk over P to bound memory; Q range depends on P for the triangle
    for p in p_grid_1d:
        if unit.capability == "triangular":
            q_hi = tan_phi * p
        elif unit.capability == "rectangular":
            q_hi = tan_phi * unit.p_rating_mva / sbase
        else:
            q_hi = np.sqrt(max((unit.s_inv_mva / sbase) ** 2 - p * p, 0.0))
        q_grid = np.arange(-q_hi, q_hi + resolution / 2, resolution)
        if len(q_grid) == 0:
            q_grid = np.array([0.0])
        p_grid = np.full_like(q_grid, p)
        v, i_br = vectorized_bfs(model, p_grid, q_grid, unit.bus, base_p, base_q)
        vm = np.abs(v)
        ok = np.all((vm <= v_max) & (vm >= v_min), axis=1)
        for bi, br in enumerate(model.branches):
            ok &= np.abs(i_br[:, bi]) <= br.i_max_pu
        if not np.any(ok):
            continue
        feasible += int(ok.sum())
        r = np.array([br.r_pu for br in model.branches])
        loss_pu = (np.abs(i_br) ** 2 @ r)
        cost = (c_curt * (p_avail_mw - p_grid * sbase) * 1000.0 * dt_h
                + c_q * np.abs(q_grid) * sbase * 1000.0 * dt_h
                + c_curt * loss_pu * sbase * 1000.0 * dt_h)
        cost = np.where(ok, cost, np.inf)
        k = int(np.argmin(cost))
        if cost[k] < best[0]:
            best = (float(cost[k]), float(p_grid[k] * sbase), float(q_grid[k] * sbase))
    return best[0], best[1], best[2], feasible
