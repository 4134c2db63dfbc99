import json

import numpy as np
import pytest

from gridbench.cases import ParseError, load_bundled, parse_case, two_bus_case
from gridbench.grid import (DisconnectLineAction, SetBusAction, Topology,
                            TopologyError, apply_topology_action, build_ybus,
                            index_nodes, line_series_admittance,
                            validate_topology)

TWO_BUS_TEXT = json.dumps({
    "name": "t",
    "base_mva": 100.0,
    "substations": [{"id": "a", "base_kv": 138.0}, {"id": "b", "base_kv": 138.0}],
    "lines": [{"id": "L", "from": "a", "to": "b", "r": 0.0, "x": 0.1}],
    "generators": [{"id": "G", "substation": "a", "p_mw": 10.0, "v_kv": 138.0,
                    "slack": True}],
    "loads": [{"id": "D", "substation": "b", "p_mw": 10.0, "q_mvar": 0.0}],
})


class TestParsing:
    def test_two_bus_native(self):
        case = parse_case(TWO_BUS_TEXT)
        assert case.n_sub == 2
        assert case.n_line == 1
        assert case.slack_gen == 0

    def test_ieee118_dimensions(self, case118):
        assert case118.n_sub == 118
        assert case118.n_line == 186
        assert case118.n_gen == 54

    def test_two_slack_generators_rejected(self):
        doc = json.loads(TWO_BUS_TEXT)
        doc["generators"].append({"id": "G2", "substation": "b", "p_mw": 0.0,
                                  "v_kv": 138.0, "slack": True})
        with pytest.raises(ParseError, match="slack"):
            parse_case(json.dumps(doc))

    def test_unknown_substation_named(self):
        doc = json.loads(TWO_BUS_TEXT)
        doc["lines"][0]["to"] = "zz"
        with pytest.raises(ParseError, match="zz"):
            parse_case(json.dumps(doc))

    def test_missing_field_located(self):
        doc = json.loads(TWO_BUS_TEXT)
        del doc["lines"][0]["x"]
        with pytest.raises(ParseError, match="'x'"):
            parse_case(json.dumps(doc))

    def test_matpower_total_load(self, case14):
        assert case14.load_p_mw.sum() == pytest.approx(259.0)
        assert case14.n_line == 20

    def test_matpower_gen_voltage_converted_to_kv(self, case118):
        # slack at bus 69: 1.035 pu on a 138 kV base
        g = case118.slack_gen
        assert case118.gen_v_kv[g] == pytest.approx(1.035 * 138.0)

    def test_phase_shifter_rejected(self):
        text = ("mpc.baseMVA = 100;\n"
                "mpc.bus = [1 3 0 0 0 0 1 1 0 138 1 1.1 0.9; 2 1 5 1 0 0 1 1 0 138 1 1.1 0.9];\n"
                "mpc.gen = [1 10 0 10 -10 1.0 100 1 50 0];\n"
                "mpc.branch = [1 2 0.01 0.1 0 0 0 0 0 30 1 -360 360];\n")
        with pytest.raises(ParseError, match="phase"):
            parse_case(text)


class TestTopologyActions:
    def test_set_bus_assigns_roster(self, case118):
        base = Topology.default(case118)
        sub = 0
        roster_len = len(case118.roster(sub))
        assert roster_len == 4  # two line ends, one generator, one load at bus 1
        action = SetBusAction(substation=sub, busbars=(2, 2, 1, 1))
        topo = apply_topology_action(case118, base, action)
        got = [topo.busbar_of(kind, idx) for kind, idx in case118.roster(sub)]
        assert got == [2, 2, 1, 1]
        # base untouched
        assert np.all(base.line_or_bus == 1)

    def test_set_bus_six_element_substation(self):
        # substation with six elements takes the six-entry assignment tuple
        doc = json.loads(TWO_BUS_TEXT)
        doc["substations"].append({"id": "c", "base_kv": 138.0})
        doc["lines"] = [
            {"id": f"L{i}", "from": "a", "to": "b", "r": 0.01, "x": 0.1}
            for i in range(4)
        ]
        doc["generators"].append({"id": "G3", "substation": "a", "p_mw": 1.0,
                                  "v_kv": 138.0})
        case = parse_case(json.dumps(doc))
        assert len(case.roster(0)) == 6
        topo = apply_topology_action(case, Topology.default(case),
                                     SetBusAction(0, (2, 2, 1, 1, 2, 2)))
        got = [topo.busbar_of(kind, idx) for kind, idx in case.roster(0)]
        assert got == [2, 2, 1, 1, 2, 2]

    def test_disconnect_single_flip(self, case118):
        base = Topology.default(case118)
        topo = apply_topology_action(case118, base, DisconnectLineAction(7))
        assert (~topo.line_status).sum() == 1
        assert not topo.line_status[7]

    def test_tuple_length_mismatch(self, case118):
        base = Topology.default(case118)
        with pytest.raises(TopologyError, match="length 5"):
            apply_topology_action(case118, base, SetBusAction(0, (2, 2, 1, 1, 2)))

    def test_unknown_ids(self, case118):
        base = Topology.default(case118)
        with pytest.raises(TopologyError):
            apply_topology_action(case118, base, SetBusAction(999, (1,)))
        with pytest.raises(TopologyError):
            apply_topology_action(case118, base, DisconnectLineAction(999))

    def test_action_is_pure(self, case118):
        base = Topology.default(case118)
        action = SetBusAction(0, (2, 2, 1, 1))
        a = apply_topology_action(case118, base, action)
        b = apply_topology_action(case118, base, action)
        for f in ("line_status", "line_or_bus", "line_ex_bus", "gen_bus", "load_bus"):
            assert np.array_equal(getattr(a, f), getattr(b, f))


class TestValidation:
    def test_default_topology_valid(self, case118):
        assert validate_topology(case118, Topology.default(case118))

    def test_islanding_detected(self):
        case = two_bus_case()
        topo = apply_topology_action(case, Topology.default(case),
                                     DisconnectLineAction(0))
        verdict = validate_topology(case, topo)
        assert not verdict
        assert "islanded" in verdict.reason

    def test_isolated_generator_on_busbar_two(self, case118):
        # move only the generator of substation 0 to busbar 2: no line follows
        base = Topology.default(case118)
        topo = apply_topology_action(case118, base, SetBusAction(0, (1, 1, 2, 1)))
        verdict = validate_topology(case118, topo)
        assert not verdict
        assert "islanded" in verdict.reason


class TestYbus:
    def test_single_line_analytic(self):
        case = two_bus_case(r=0.0, x=0.1, b=0.0)
        adm = build_ybus(case, Topology.default(case))
        y = adm.y.toarray()
        expect = np.array([[-10j, 10j], [10j, -10j]])
        assert np.allclose(y, expect, atol=1e-12)

    def test_disconnected_line_contributes_nothing(self):
        case = two_bus_case()
        topo = apply_topology_action(case, Topology.default(case),
                                     DisconnectLineAction(0))
        adm = build_ybus(case, topo)
        assert adm.n_nodes == 2
        assert np.allclose(adm.y.toarray(), 0.0)
        assert not validate_topology(case, topo)

    def test_zero_impedance_rejected(self):
        case = two_bus_case(r=0.0, x=0.0)
        with pytest.raises(Exception, match="impedance"):
            build_ybus(case, Topology.default(case))

    def test_ieee118_structure(self, case118):
        """Nonzero count equals 118 diagonals plus two off-diagonals per
        line, minus merges from parallel circuits (independent graph scan)."""
        adm = build_ybus(case118, Topology.default(case118))
        y = adm.y.copy()
        y.sum_duplicates()
        assert adm.n_nodes == 118
        pairs = set()
        parallel = 0
        for f, t in zip(case118.line_from, case118.line_to):
            key = (min(f, t), max(f, t))
            if key in pairs:
                parallel += 1
            pairs.add(key)
        expected_nnz = 118 + 2 * (case118.n_line - parallel)
        assert y.nnz == expected_nnz
        # structurally symmetric
        assert (abs(y) - abs(y).T).nnz == 0

    def test_offdiagonals_match_series_admittance(self, case118):
        """Y[k, m] equals minus the summed series admittance over parallel
        lines, recomputed directly from the line list."""
        adm = build_ybus(case118, Topology.default(case118))
        nodes = adm.nodes
        ys = line_series_admittance(case118)
        from collections import defaultdict
        expect = defaultdict(complex)
        for ell in range(case118.n_line):
            k, m = nodes.line_or_node[ell], nodes.line_ex_node[ell]
            expect[(k, m)] += -ys[ell] / case118.line_tap[ell]
        y = adm.y
        for (k, m), val in expect.items():
            assert y[k, m] == pytest.approx(val, abs=1e-12)

    def test_structural_symmetry_random_topologies(self, case118):
        rng = np.random.default_rng(3)
        base = Topology.default(case118)
        for _ in range(5):
            topo = base
            for line in rng.choice(case118.n_line, size=2, replace=False):
                topo = apply_topology_action(case118, topo, DisconnectLineAction(int(line)))
            if not validate_topology(case118, topo):
                continue
            y = build_ybus(case118, topo).y
            assert (abs(y) - abs(y).T).nnz == 0

    def test_all_busbar_one_split_is_noop(self, case118):
        """Moving every element of one substation to busbar 2 relabels the
        node but leaves the matrix unchanged."""
        base = Topology.default(case118)
        y0 = build_ybus(case118, base).y
        sub = 5
        n = len(case118.roster(sub))
        topo = apply_topology_action(case118, base, SetBusAction(sub, (2,) * n))
        y1 = build_ybus(case118, topo).y
        assert np.allclose(y0.toarray(), y1.toarray())

    def test_shunts_on_diagonal(self, case118):
        adm = build_ybus(case118, Topology.default(case118))
        nodes = adm.nodes
        # bus 5 carries a -40 MVAr shunt
        sub5 = case118.substation_ids.index("sub5")
        node = int(nodes.shunt_node[list(case118.shunt_sub).index(sub5)])
        assert adm.y[node, node].imag < 0
