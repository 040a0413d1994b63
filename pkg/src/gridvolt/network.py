"""Radial network data model.

Buses, branches, the OLTC transformer and the Thevenin boundary of the
upstream grid, plus construction of the BIBC/BCBV topology matrices used by
both the sweep power flow and the linearized OPF.

All internal quantities are in per-unit on a single system MVA base with one
base kV per voltage level.  Physical units (ohm, kV, kA, MW) appear only in
the JSON network description and are converted at load time.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BUS_KINDS = ("slack", "hv", "mv", "lv")


class NetworkError(ValueError):
    """Malformed or non-radial network description."""


@dataclass(frozen=True)
class LoadComponent:
    """Nominal constant-power demand scaled at runtime by a named profile."""

    p_mw: float
    q_mvar: float
    profile: str = ""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_kv: float
    loads: tuple[LoadComponent, ...] = ()

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise NetworkError(f"bus {self.id}: unknown kind {self.kind!r}")
        if self.base_kv <= 0:
            raise NetworkError(f"bus {self.id}: base_kv must be positive")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float
    i_max_pu: float
    name: str = ""
    tap_controlled: bool = False
    boundary: bool = False  # Thevenin link: carries the metered TN exchange,
    #                         excluded from loss pricing and thermal limits

    def __post_init__(self):
        if self.r_pu < 0:
            raise NetworkError(f"branch {self.name or (self.from_bus, self.to_bus)}: R < 0")
        if self.i_max_pu <= 0:
            raise NetworkError(f"branch {self.name or (self.from_bus, self.to_bus)}: I_max <= 0")

    @property
    def z(self) -> complex:
        return complex(self.r_pu, self.x_pu)


@dataclass(frozen=True)
class OltcTransformer:
    """Tap changer applying a constant per-tap voltage shift downstream."""

    dv_tap_pu: float
    rho_min: int
    rho_max: int
    rho: int = 0

    def __post_init__(self):
        if self.dv_tap_pu <= 0:
            raise NetworkError("OLTC: dv_tap_pu must be positive")
        if not self.rho_min <= self.rho <= self.rho_max:
            raise NetworkError("OLTC: tap position outside bounds")


@dataclass(frozen=True)
class TheveninEquivalent:
    """Source-behind-impedance representation of the transmission grid."""

    v_slack: complex = 1.0 + 0j
    z_th: complex = 0j
    # optional per-hour overrides [(v_slack, z_th), ...] covering 24 h
    schedule: tuple[tuple[complex, complex], ...] | None = None

    def __post_init__(self):
        if abs(self.v_slack) <= 0:
            raise NetworkError("Thevenin: |v_slack| must be positive")

    def at_hour(self, hour: int) -> tuple[complex, complex]:
        if self.schedule is None:
            return self.v_slack, self.z_th
        return self.schedule[hour % len(self.schedule)]


def thevenin_from_scc(scc_pu: float, factor: float = 3.0, x_r_ratio: float = 10.0) -> complex:
    """Boundary impedance from a short-circuit capacity: |Z| = factor / scc.

    The magnitude rule comes with no angle; the X/R ratio is a configured
    parameter (default 10, transmission-typical).
    """
    if scc_pu <= 0:
        raise NetworkError("short-circuit capacity must be positive")
    mag = factor / scc_pu
    angle = math.atan(x_r_ratio)
    return complex(mag * math.cos(angle), mag * math.sin(angle))


@dataclass(frozen=True)
class TopologyMatrices:
    """BIBC (0/1 path incidence) and BCBV (path impedance) matrices.

    Rows/columns follow model ordering: branch b, non-slack bus j.
    BIBC[b, j] = 1 iff branch b lies on the path slack -> j;
    BCBV[j, b] = z_b on the same condition, else 0.
    """

    bibc: np.ndarray
    bcbv: np.ndarray

    def to_csv(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savetxt(directory / "bibc.csv", self.bibc, fmt="%d", delimiter=",")
        with open(directory / "bcbv.csv", "w") as fh:
            for row in self.bcbv:
                fh.write(",".join(f"{z.real:.12g}{z.imag:+.12g}j" for z in row) + "\n")


class NetworkModel:
    """Validated radial network, immutable after construction.

    Construction checks tree structure and caches the depth ordering used by
    the sweeps, the parent pointers and the BIBC/BCBV matrices.
    """

    def __init__(self, buses, branches, oltc=None, thevenin=None, base_mva=10.0,
                 measurement_bus=None):
        self.buses: tuple[Bus, ...] = tuple(buses)
        self.branches: tuple[Branch, ...] = tuple(branches)
        self.oltc: OltcTransformer | None = oltc
        self.thevenin: TheveninEquivalent = thevenin or TheveninEquivalent()
        self.base_mva = float(base_mva)
        if self.base_mva <= 0:
            raise NetworkError("base_mva must be positive")

        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        self.bus_index: dict[int, int] = {b.id: i for i, b in enumerate(self.buses)}

        slacks = [b.id for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise NetworkError(f"exactly one slack bus required, found {len(slacks)}")
        self.slack_id: int = slacks[0]

        for br in self.branches:
            if br.from_bus not in self.bus_index or br.to_bus not in self.bus_index:
                raise NetworkError(f"branch {br.name!r} references unknown bus")
            if br.from_bus == br.to_bus:
                raise NetworkError(f"branch {br.name!r} is a self-loop")

        self._validate_tree()

        if measurement_bus is None:
            controlled = [br for br in self.branches if br.tap_controlled]
            measurement_bus = controlled[0].from_bus if controlled else self.slack_id
        if measurement_bus not in self.bus_index:
            raise NetworkError("measurement bus undefined")
        self.measurement_bus: int = measurement_bus

        if self.oltc is not None and not any(br.tap_controlled for br in self.branches):
            raise NetworkError("OLTC defined but no branch is tap_controlled")

        self._topology: TopologyMatrices | None = None

    # -- topology ---------------------------------------------------------

    def _validate_tree(self):
        n = len(self.buses)
        if len(self.branches) != n - 1:
            raise NetworkError(
                f"non-tree topology: {len(self.branches)} branches for {n} buses")
        adj: dict[int, list[tuple[int, int]]] = {b.id: [] for b in self.buses}
        for bi, br in enumerate(self.branches):
            adj[br.from_bus].append((br.to_bus, bi))
            adj[br.to_bus].append((br.from_bus, bi))

        parent = {self.slack_id: None}
        parent_branch: dict[int, int] = {}
        order: list[int] = []  # branch indices, parents before children
        depth = {self.slack_id: 0}
        queue = [self.slack_id]
        seen_edges = set()
        while queue:
            u = queue.pop(0)
            for v, bi in adj[u]:
                if bi in seen_edges:
                    continue
                seen_edges.add(bi)
                if v in parent:
                    raise NetworkError(f"cycle detected through branch index {bi}")
                parent[v] = u
                parent_branch[v] = bi
                depth[v] = depth[u] + 1
                order.append(bi)
                queue.append(v)
        unreachable = [b.id for b in self.buses if b.id not in parent]
        if unreachable:
            raise NetworkError(f"disconnected buses: {unreachable}")

        self.parent: dict[int, int | None] = parent
        self.parent_branch: dict[int, int] = parent_branch
        self.sweep_order: tuple[int, ...] = tuple(order)
        self.depth: dict[int, int] = depth
        # receiving bus of each branch (child side, oriented away from slack)
        child = {}
        for v, bi in parent_branch.items():
            child[bi] = v
        self.branch_child: tuple[int, ...] = tuple(child[i] for i in range(len(self.branches)))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def nonslack_ids(self) -> list[int]:
        return [b.id for b in self.buses if b.id != self.slack_id]

    def path_branches(self, bus_id: int) -> list[int]:
        """Branch indices on the path slack -> bus, slack side first."""
        path = []
        u = bus_id
        while u != self.slack_id:
            bi = self.parent_branch[u]
            path.append(bi)
            u = self.parent[u]
        return path[::-1]

    def tap_affected(self, bus_id: int) -> bool:
        """True if the OLTC shift applies at this bus (downstream of a
        controlled branch)."""
        return any(self.branches[bi].tap_controlled for bi in self.path_branches(bus_id))

    def topology(self) -> TopologyMatrices:
        if self._topology is None:
            self._topology = build_topology_matrices(self)
        return self._topology

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_index[bus_id]]


def validate_radial(model: NetworkModel) -> dict:
    """Re-check tree structure; returns the depth-ordered branch list.

    NetworkModel construction already fails closed on non-radial input, so on
    an existing model this always reports ok; it exists so callers assembling
    models programmatically have an explicit check point.
    """
    model._validate_tree()
    return {
        "ok": True,
        "n_bus": model.n_bus,
        "n_branch": model.n_branch,
        "sweep_order": list(model.sweep_order),
        "max_depth": max(model.depth.values()),
    }


def build_topology_matrices(model: NetworkModel) -> TopologyMatrices:
    """BIBC/BCBV construction by path enumeration over the validated tree."""
    nonslack = model.nonslack_ids()
    col = {bus_id: j for j, bus_id in enumerate(nonslack)}
    nb = model.n_branch
    bibc = np.zeros((nb, len(nonslack)))
    bcbv = np.zeros((len(nonslack), nb), dtype=complex)
    for bus_id, j in col.items():
        for bi in model.path_branches(bus_id):
            bibc[bi, j] = 1.0
            bcbv[j, bi] = model.branches[bi].z
    return TopologyMatrices(bibc=bibc, bcbv=bcbv)


# -- ingestion -------------------------------------------------------------


def _branch_impedance_pu(entry: dict, to_kv: float, base_mva: float) -> tuple[float, float]:
    if "r_pu" in entry or "x_pu" in entry:
        return float(entry.get("r_pu", 0.0)), float(entry.get("x_pu", 0.0))
    if "uk_percent" in entry:
        s_rated = float(entry["s_rated_mva"])
        z = entry["uk_percent"] / 100.0 * base_mva / s_rated
        r = entry.get("ukr_percent", 0.0) / 100.0 * base_mva / s_rated
        x = math.sqrt(max(z * z - r * r, 0.0))
        return r, x
    if "r_ohm" in entry or "x_ohm" in entry:
        z_base = to_kv * to_kv / base_mva
        return float(entry.get("r_ohm", 0.0)) / z_base, float(entry.get("x_ohm", 0.0)) / z_base
    raise NetworkError(f"branch {entry}: impedance units not declared (r_pu / r_ohm / uk_percent)")


def _branch_ampacity_pu(entry: dict, to_kv: float, base_mva: float) -> float:
    if "i_max_pu" in entry:
        return float(entry["i_max_pu"])
    if "i_max_ka" in entry:
        i_base_ka = base_mva / (math.sqrt(3.0) * to_kv)
        return float(entry["i_max_ka"]) / i_base_ka
    if "s_rated_mva" in entry:
        return float(entry["s_rated_mva"]) / base_mva
    raise NetworkError(f"branch {entry}: ampacity not declared (i_max_pu / i_max_ka)")


def _load_components(entry: dict) -> tuple[LoadComponent, ...]:
    comps = []
    for ld in entry.get("loads", []):
        if "s_mva" in ld:
            s = float(ld["s_mva"])
            cos_phi = float(ld["cos_phi"])
            p = s * cos_phi
            q = s * math.sqrt(max(1.0 - cos_phi * cos_phi, 0.0))
        else:
            p = float(ld["p_mw"])
            q = float(ld.get("q_mvar", 0.0))
        comps.append(LoadComponent(p_mw=p, q_mvar=q, profile=ld.get("profile", "")))
    return tuple(comps)


def load_network(source) -> NetworkModel:
    """Build a validated model from a JSON description (path, str or dict).

    The description declares `base_mva`, a `buses` array, a `branches` array
    with explicit impedance units, an optional `transformer` (OLTC) block and
    an optional `thevenin` block.  Fails closed on malformed input.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
        data = json.loads(text)
    elif isinstance(source, dict):
        data = source
    else:
        raise NetworkError(f"unsupported network source {type(source)!r}")

    try:
        base_mva = float(data["base_mva"])
        bus_entries = data["buses"]
        branch_entries = data["branches"]
    except KeyError as exc:
        raise NetworkError(f"missing required network section: {exc}") from exc

    buses = []
    kv_by_id = {}
    for e in bus_entries:
        bus = Bus(id=int(e["id"]), kind=e["kind"], base_kv=float(e["base_kv"]),
                  loads=_load_components(e))
        buses.append(bus)
        kv_by_id[bus.id] = bus.base_kv

    oltc = None
    controlled_pairs: set[tuple[int, int]] = set()
    if "transformer" in data and data["transformer"]:
        tr = data["transformer"]
        oltc = OltcTransformer(
            dv_tap_pu=float(tr["dv_tap_pu"]),
            rho_min=int(tr["rho_min"]),
            rho_max=int(tr["rho_max"]),
            rho=int(tr.get("rho", 0)),
        )
        controlled_pairs = {(int(a), int(b)) for a, b in tr.get("branches", [])}

    thevenin = TheveninEquivalent()
    boundary_pair = None
    if "thevenin" in data and data["thevenin"]:
        th = data["thevenin"]
        if "z_pu" in th:
            z = complex(th["z_pu"][0], th["z_pu"][1])
        else:
            scc_pu = float(th["scc_mva"]) / base_mva
            z = thevenin_from_scc(scc_pu, factor=float(th.get("factor", 3.0)),
                                  x_r_ratio=float(th.get("x_r_ratio", 10.0)))
        v = th.get("v_slack_pu", 1.0)
        v_slack = complex(v) if not isinstance(v, list) else complex(v[0], v[1])
        thevenin = TheveninEquivalent(v_slack=v_slack, z_th=z)
        if "branch" in th:
            boundary_pair = (int(th["branch"][0]), int(th["branch"][1]))

    branches = []
    for e in branch_entries:
        f, t = int(e["from"]), int(e["to"])
        if t not in kv_by_id:
            raise NetworkError(f"branch {e.get('name', (f, t))}: unknown to-bus {t}")
        pair = (f, t)
        if pair == boundary_pair:
            r, x = thevenin.z_th.real, thevenin.z_th.imag
            i_max = 1e6
        else:
            r, x = _branch_impedance_pu(e, kv_by_id[t], base_mva)
            i_max = _branch_ampacity_pu(e, kv_by_id[t], base_mva)
        branches.append(Branch(
            from_bus=f, to_bus=t, r_pu=r, x_pu=x, i_max_pu=i_max,
            name=e.get("name", f"{f}-{t}"),
            tap_controlled=pair in controlled_pairs,
            boundary=pair == boundary_pair,
        ))

    return NetworkModel(
        buses=buses, branches=branches, oltc=oltc, thevenin=thevenin,
        base_mva=base_mva, measurement_bus=data.get("measurement_bus"),
    )
