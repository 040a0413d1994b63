import math

import numpy as np
import pytest

from gridvolt.network import (
    Branch,
    Bus,
    NetworkError,
    NetworkModel,
    OltcTransformer,
    TheveninEquivalent,
    build_topology_matrices,
    load_network,
    thevenin_from_scc,
    validate_radial,
)


def chain_model(z_list, kind="mv"):
    buses = [Bus(id=0, kind="slack", base_kv=20.0)]
    branches = []
    for i, z in enumerate(z_list, start=1):
        buses.append(Bus(id=i, kind=kind, base_kv=20.0))
        branches.append(Branch(from_bus=i - 1, to_bus=i, r_pu=z.real, x_pu=z.imag, i_max_pu=5.0))
    return NetworkModel(buses=buses, branches=branches)


class TestLoadNetwork:
    def test_minimal_two_bus(self):
        model = load_network({
            "base_mva": 10,
            "buses": [
                {"id": 0, "kind": "slack", "base_kv": 20},
                {"id": 1, "kind": "mv", "base_kv": 20,
                 "loads": [{"p_mw": 1.0, "q_mvar": 0.2}]},
            ],
            "branches": [
                {"from": 0, "to": 1, "r_pu": 0.01, "x_pu": 0.02, "i_max_pu": 2.0},
            ],
        })
        assert model.n_bus == 2
        assert model.slack_id == 0
        assert model.bus(1).loads[0].p_mw == 1.0

    def test_cycle_rejected(self):
        with pytest.raises(NetworkError, match="non-tree|cycle"):
            load_network({
                "base_mva": 10,
                "buses": [
                    {"id": 0, "kind": "slack", "base_kv": 20},
                    {"id": 1, "kind": "mv", "base_kv": 20},
                    {"id": 2, "kind": "mv", "base_kv": 20},
                ],
                "branches": [
                    {"from": 0, "to": 1, "r_pu": 0.01, "x_pu": 0.01, "i_max_pu": 1},
                    {"from": 1, "to": 2, "r_pu": 0.01, "x_pu": 0.01, "i_max_pu": 1},
                    {"from": 2, "to": 0, "r_pu": 0.01, "x_pu": 0.01, "i_max_pu": 1},
                ],
            })

    def test_duplicate_ids_rejected(self):
        with pytest.raises(NetworkError, match="duplicate"):
            NetworkModel(
                buses=[Bus(id=0, kind="slack", base_kv=20), Bus(id=0, kind="mv", base_kv=20)],
                branches=[Branch(from_bus=0, to_bus=0, r_pu=0, x_pu=0.1, i_max_pu=1)],
            )

    def test_missing_slack_rejected(self):
        with pytest.raises(NetworkError, match="slack"):
            NetworkModel(
                buses=[Bus(id=0, kind="mv", base_kv=20), Bus(id=1, kind="mv", base_kv=20)],
                branches=[Branch(from_bus=0, to_bus=1, r_pu=0.01, x_pu=0.01, i_max_pu=1)],
            )

    def test_disconnected_bus_rejected(self):
        # 4 buses, 3 branches (tree count) but one bus unreachable
        with pytest.raises(NetworkError, match="cycle|disconnected"):
            NetworkModel(
                buses=[Bus(id=i, kind="slack" if i == 0 else "mv", base_kv=20)
                       for i in range(4)],
                branches=[
                    Branch(from_bus=0, to_bus=1, r_pu=0.01, x_pu=0.01, i_max_pu=1),
                    Branch(from_bus=2, to_bus=3, r_pu=0.01, x_pu=0.01, i_max_pu=1),
                    Branch(from_bus=3, to_bus=2, r_pu=0.01, x_pu=0.01, i_max_pu=1),
                ],
            )

    def test_ohm_conversion(self):
        model = load_network({
            "base_mva": 10,
            "buses": [
                {"id": 0, "kind": "slack", "base_kv": 20},
                {"id": 1, "kind": "mv", "base_kv": 20},
            ],
            "branches": [
                # z_base = 20^2 / 10 = 40 ohm
                {"from": 0, "to": 1, "r_ohm": 4.0, "x_ohm": 8.0, "i_max_ka": 0.2887},
            ],
        })
        br = model.branches[0]
        assert br.r_pu == pytest.approx(0.1)
        assert br.x_pu == pytest.approx(0.2)
        # i_base = 10 / (sqrt(3)*20) = 0.28868 kA
        assert br.i_max_pu == pytest.approx(1.0, rel=1e-3)

    def test_uk_percent_conversion(self):
        model = load_network({
            "base_mva": 10,
            "buses": [
                {"id": 0, "kind": "slack", "base_kv": 110},
                {"id": 1, "kind": "mv", "base_kv": 20},
            ],
            "branches": [
                {"from": 0, "to": 1, "uk_percent": 12.0, "ukr_percent": 0.16,
                 "s_rated_mva": 25.0},
            ],
        })
        br = model.branches[0]
        assert br.r_pu == pytest.approx(0.0016 * 10 / 25)
        z = math.hypot(br.r_pu, br.x_pu)
        assert z == pytest.approx(0.12 * 10 / 25)
        assert br.i_max_pu == pytest.approx(2.5)

    def test_benchmark_file_pv_nodes(self, benchmark_network_path, benchmark_fleet_path):
        # merged MV+LV benchmark: PV at nodes [4,5,6,27,31,33,34], WT at [9,15]
        import json
        model = load_network(benchmark_network_path)
        fleet = json.loads(benchmark_fleet_path.read_text())
        pv_nodes = [u["bus"] for u in fleet["dg"] if u["kind"] == "pv"]
        wt_nodes = [u["bus"] for u in fleet["dg"] if u["kind"] == "wt"]
        assert pv_nodes == [4, 5, 6, 27, 31, 33, 34]
        assert wt_nodes == [9, 15]
        for node in pv_nodes + wt_nodes:
            assert node in model.bus_index
        assert model.n_bus == 35  # 34 grid nodes plus the ideal source
        assert model.measurement_bus == 1


class TestValidateRadial:
    def test_three_bus_chain_ordering(self):
        model = chain_model([0.01 + 0.02j, 0.01 + 0.02j])
        report = validate_radial(model)
        assert report["ok"]
        assert report["sweep_order"] == [0, 1]

    def test_star_ok(self):
        buses = [Bus(id=0, kind="slack", base_kv=20)] + [
            Bus(id=i, kind="mv", base_kv=20) for i in (1, 2, 3)]
        branches = [Branch(from_bus=0, to_bus=i, r_pu=0.01, x_pu=0.01, i_max_pu=1)
                    for i in (1, 2, 3)]
        assert validate_radial(NetworkModel(buses=buses, branches=branches))["ok"]

    def test_cross_tie_cycle(self):
        buses = [Bus(id=0, kind="slack", base_kv=20)] + [
            Bus(id=i, kind="mv", base_kv=20) for i in (1, 2)]
        branches = [
            Branch(from_bus=0, to_bus=1, r_pu=0.01, x_pu=0.01, i_max_pu=1),
            Branch(from_bus=0, to_bus=2, r_pu=0.01, x_pu=0.01, i_max_pu=1),
            Branch(from_bus=1, to_bus=2, r_pu=0.01, x_pu=0.01, i_max_pu=1),
        ]
        with pytest.raises(NetworkError):
            NetworkModel(buses=buses, branches=branches)


class TestTopologyMatrices:
    def test_two_bus(self):
        model = chain_model([0.01 + 0.02j])
        tm = build_topology_matrices(model)
        assert tm.bibc.shape == (1, 1)
        assert tm.bibc[0, 0] == 1.0

    def test_three_bus_chain_bibc(self):
        # path enumeration by hand: branch0 feeds A and B, branch1 only B
        model = chain_model([0.01 + 0.02j, 0.01 + 0.02j])
        tm = build_topology_matrices(model)
        assert np.array_equal(tm.bibc, np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_three_bus_chain_bcbv_row(self):
        z = 0.01 + 0.02j
        model = chain_model([z, z])
        tm = build_topology_matrices(model)
        # row for bus B is the sum of path impedances slack->B
        assert np.allclose(tm.bcbv[1], np.array([z, z]))

    def test_bibc_rows_mark_descendants(self):
        # star with a sub-branch: 0 -> 1 -> {2, 3}; branch (0,1) covers all
        buses = [Bus(id=i, kind="slack" if i == 0 else "mv", base_kv=20) for i in range(4)]
        branches = [
            Branch(from_bus=0, to_bus=1, r_pu=0.01, x_pu=0.01, i_max_pu=1),
            Branch(from_bus=1, to_bus=2, r_pu=0.01, x_pu=0.01, i_max_pu=1),
            Branch(from_bus=1, to_bus=3, r_pu=0.01, x_pu=0.01, i_max_pu=1),
        ]
        model = NetworkModel(buses=buses, branches=branches)
        tm = model.topology()
        assert np.array_equal(tm.bibc[0], np.array([1.0, 1.0, 1.0]))
        assert np.array_equal(tm.bibc[1], np.array([0.0, 1.0, 0.0]))
        assert np.array_equal(tm.bibc[2], np.array([0.0, 0.0, 1.0]))

    def test_kirchhoff_equivalence_random_trees(self):
        # voltages via BIBC/BCBV must match direct per-branch accumulation
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(3, 21))
            buses = [Bus(id=0, kind="slack", base_kv=20)]
            branches = []
            for i in range(1, n):
                parent = int(rng.integers(0, i))
                buses.append(Bus(id=i, kind="mv", base_kv=20))
                branches.append(Branch(from_bus=parent, to_bus=i,
                                       r_pu=float(rng.uniform(0.001, 0.05)),
                                       x_pu=float(rng.uniform(0.001, 0.05)),
                                       i_max_pu=10.0))
            model = NetworkModel(buses=buses, branches=branches)
            tm = model.topology()
            i_inj = rng.normal(0, 0.1, n - 1) + 1j * rng.normal(0, 0.1, n - 1)
            v_matrix = 1.0 + tm.bcbv @ (tm.bibc @ i_inj)

            # direct accumulation: branch current = child injection plus all
            # branches hanging off the child; voltage = parent + z * current
            nonslack = model.nonslack_ids()
            col = {b: k for k, b in enumerate(nonslack)}
            children_branches = {b.id: [] for b in model.buses}
            for bi in range(model.n_branch):
                child = model.branch_child[bi]
                parent = model.parent[child]
                children_branches[parent].append(bi)
            i_br = np.zeros(model.n_branch, dtype=complex)
            for bi in reversed(model.sweep_order):
                child = model.branch_child[bi]
                i_br[bi] = i_inj[col[child]] + sum(i_br[bj] for bj in children_branches[child])
            v_by_id = {model.slack_id: 1.0 + 0j}
            for bi in model.sweep_order:
                child = model.branch_child[bi]
                v_by_id[child] = v_by_id[model.parent[child]] + model.branches[bi].z * i_br[bi]
            v_direct = np.array([v_by_id[b] for b in nonslack])
            assert np.max(np.abs(v_matrix - v_direct)) < 1e-12

    def test_csv_export(self, tmp_path):
        model = chain_model([0.01 + 0.02j, 0.01 + 0.02j])
        model.topology().to_csv(tmp_path)
        assert (tmp_path / "bibc.csv").exists()
        assert (tmp_path / "bcbv.csv").exists()


class TestThevenin:
    def test_scc_rule(self):
        z = thevenin_from_scc(10.0, factor=3.0)
        assert abs(z) == pytest.approx(0.3)

    def test_stiff_limit(self):
        assert abs(thevenin_from_scc(1e12)) == pytest.approx(0.0, abs=1e-11)

    def test_unit_case(self):
        assert abs(thevenin_from_scc(1.0, factor=1.0)) == pytest.approx(1.0)

    def test_x_r_ratio(self):
        z = thevenin_from_scc(10.0, factor=3.0, x_r_ratio=10.0)
        assert z.imag / z.real == pytest.approx(10.0)

    def test_nonpositive_scc(self):
        with pytest.raises(NetworkError):
            thevenin_from_scc(0.0)


class TestOltc:
    def test_tap_bounds(self):
        with pytest.raises(NetworkError):
            OltcTransformer(dv_tap_pu=0.0125, rho_min=-2, rho_max=2, rho=5)

    def test_tap_affected(self):
        buses = [Bus(id=0, kind="slack", base_kv=110),
                 Bus(id=1, kind="hv", base_kv=110),
                 Bus(id=2, kind="mv", base_kv=20)]
        branches = [
            Branch(from_bus=0, to_bus=1, r_pu=0.001, x_pu=0.01, i_max_pu=100, boundary=True),
            Branch(from_bus=1, to_bus=2, r_pu=0.001, x_pu=0.05, i_max_pu=2.5,
                   tap_controlled=True),
        ]
        model = NetworkModel(buses=buses, branches=branches,
                             oltc=OltcTransformer(dv_tap_pu=0.0125, rho_min=-9, rho_max=9),
                             thevenin=TheveninEquivalent(z_th=0.001 + 0.01j))
        assert not model.tap_affected(1)
        assert model.tap_affected(2)
        assert model.measurement_bus == 1
