import numpy as np
import pytest

from gridbench.cases import two_bus_case
from gridbench.grid import (DisconnectLineAction, Topology,
                            apply_topology_action, build_ybus, index_nodes)
from gridbench.powerflow import (Injections, SolverError, SolverOptions,
                                 compute_line_flows, dc_power_flow,
                                 initial_state, mismatch, _jacobian,
                                 solve_newton_raphson)

from conftest import random_case


def nominal(case):
    return Injections.nominal(case)


class TestMismatch:
    def test_flat_no_load_zero_residual(self):
        case = two_bus_case(r=0.0, x=0.1, b=0.0, load_p=0.0, load_q=0.0)
        topo = Topology.default(case)
        ybus = build_ybus(case, topo)
        inj = Injections(prod_p=np.zeros(1), prod_v=np.array([138.0]),
                         load_p=np.zeros(1), load_q=np.zeros(1))
        st = initial_state(case, topo, inj, SolverOptions(initializer="flat"))
        f = mismatch(case, ybus, st, inj)
        assert np.allclose(f, 0.0, atol=1e-15)

    def test_two_bus_matches_scalar_formula(self):
        """Hand-evaluated nodal balance on a two-node system.

        With Y from a series r + jx line, the active balance at node 2 is
        p2_calc = v2^2 g22 + v1 v2 (g21 cos th21 + b21 sin th21).
        """
        r, x = 0.02, 0.1
        case = two_bus_case(r=r, x=x, b=0.0, load_p=80.0, load_q=20.0)
        topo = Topology.default(case)
        ybus = build_ybus(case, topo)
        inj = nominal(case)
        st = initial_state(case, topo, inj, SolverOptions(initializer="flat"))
        st.vm[1] = 0.97
        st.va[1] = -0.05
        f = mismatch(case, ybus, st, inj)

        y = 1.0 / complex(r, x)
        g, b = y.real, y.imag
        v1, v2, th = 1.0, 0.97, -0.05
        # p2 = sum_m |v2||vm| (G2m cos(th2-thm) + B2m sin(th2-thm)), m in {1, 2}
        G21, B21 = -g, -b
        G22, B22 = g, b
        p_calc = v2 * v1 * (G21 * np.cos(th) + B21 * np.sin(th)) + v2 * v2 * G22
        q_calc = v2 * v1 * (G21 * np.sin(th) - B21 * np.cos(th)) - v2 * v2 * B22
        p_spec = -80.0 / 100.0
        q_spec = -20.0 / 100.0
        # rows: [dP at node 2, dQ at node 2]
        assert f[0] == pytest.approx(p_calc - p_spec, abs=1e-12)
        assert f[1] == pytest.approx(q_calc - q_spec, abs=1e-12)

    def test_converged_solution_residual_below_tol(self, case14):
        topo = Topology.default(case14)
        sol = solve_newton_raphson(case14, topo, nominal(case14))
        ybus = build_ybus(case14, topo)
        f = mismatch(case14, ybus, sol.state, nominal(case14))
        assert np.max(np.abs(f)) < 1e-8


class BisectionOracle:
    """Nested bisection on the two-unknown lossless system.

    Written directly from the scalar balance equations: for the series
    susceptance B21 = 1/x, the active equation fixes sin(th) given vm, the
    reactive equation changes sign in vm at the solution.
    """

    def __init__(self, x, p_load_pu):
        self.b21 = 1.0 / x
        self.p = p_load_pu

    def theta_for(self, vm):
        lo, hi = -np.pi / 2, 0.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if vm * self.b21 * np.sin(mid) + self.p > 0:
                hi = mid
            else:
                lo = mid
        return 0.5 * (lo + hi)

    def q_residual(self, vm):
        th = self.theta_for(vm)
        return -vm * self.b21 * np.cos(th) + vm * vm * self.b21

    def solve(self):
        lo, hi = 0.5, 1.05
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.q_residual(mid) > 0:
                hi = mid
            else:
                lo = mid
        vm = 0.5 * (lo + hi)
        return self.theta_for(vm), vm


class TestNewtonRaphson:
    def test_two_bus_lossless_vs_bisection(self):
        case = two_bus_case(r=0.0, x=0.1, b=0.0, load_p=100.0, load_q=0.0)
        sol = solve_newton_raphson(case, Topology.default(case), nominal(case),
                                   SolverOptions(tol=1e-12, initializer="flat"))
        th_star, vm_star = BisectionOracle(0.1, 1.0).solve()
        # closed form of the same system: sin(2 th) = -2 p x, vm = cos(th)
        assert th_star == pytest.approx(np.arcsin(-0.2) / 2, abs=1e-12)
        assert sol.state.va[1] == pytest.approx(th_star, abs=1e-10)
        assert sol.state.vm[1] == pytest.approx(vm_star, abs=1e-10)

    def test_zero_load_flat_immediately(self):
        case = two_bus_case(r=0.0, x=0.1, b=0.0, load_p=0.0, load_q=0.0)
        inj = Injections(prod_p=np.zeros(1), prod_v=np.array([138.0]),
                         load_p=np.zeros(1), load_q=np.zeros(1))
        sol = solve_newton_raphson(case, Topology.default(case), inj,
                                   SolverOptions(initializer="flat"))
        assert sol.iterations <= 1
        assert np.allclose(sol.state.vm, 1.0)
        assert np.allclose(sol.state.va, 0.0)

    @pytest.mark.parametrize("name", ["case14", "case118"])
    def test_reference_cases_converge(self, name, request):
        case = request.getfixturevalue(name)
        sol = solve_newton_raphson(case, Topology.default(case), nominal(case))
        assert sol.mismatch_norm < 1e-8
        assert sol.iterations <= 30

    def test_nonconvergence_is_an_error(self, case118):
        sol_opts = SolverOptions(max_iter=1, initializer="flat")
        with pytest.raises(SolverError, match="iteration"):
            solve_newton_raphson(case118, Topology.default(case118),
                                 nominal(case118), sol_opts)

    def test_determinism_bit_identical(self, case118):
        topo = Topology.default(case118)
        a = solve_newton_raphson(case118, topo, nominal(case118))
        b = solve_newton_raphson(case118, topo, nominal(case118))
        assert np.array_equal(a.state.vm, b.state.vm)
        assert np.array_equal(a.state.va, b.state.va)
        assert np.array_equal(a.flows.a_or, b.flows.a_or)

    def test_slack_absorbs_losses(self, case14):
        sol = solve_newton_raphson(case14, Topology.default(case14), nominal(case14))
        total_prod = sol.prod_p_balanced.sum()
        total_load = case14.load_p_mw.sum()
        losses = (sol.flows.p_or + sol.flows.p_ex).sum()
        assert total_prod - total_load == pytest.approx(losses, abs=1e-6)


class TestLineFlows:
    def test_purely_reactive_line_no_transfer(self):
        case = two_bus_case(r=0.0, x=0.1, b=0.0, load_p=0.0, load_q=0.0)
        topo = Topology.default(case)
        inj = Injections(prod_p=np.zeros(1), prod_v=np.array([138.0]),
                         load_p=np.zeros(1), load_q=np.zeros(1))
        st = initial_state(case, topo, inj, SolverOptions(initializer="flat"))
        flows = compute_line_flows(case, topo, st, nodes=index_nodes(case, topo))
        assert flows.p_or[0] == pytest.approx(0.0, abs=1e-12)
        assert flows.p_ex[0] == pytest.approx(0.0, abs=1e-12)

    def test_disconnected_line_exact_zeros(self, case14):
        ell = 16   # 9-14, redundant path keeps the grid connected
        topo = apply_topology_action(case14, Topology.default(case14),
                                     DisconnectLineAction(ell))
        sol = solve_newton_raphson(case14, topo, nominal(case14))
        for arr in (sol.flows.a_or, sol.flows.a_ex, sol.flows.p_or,
                    sol.flows.p_ex, sol.flows.q_or, sol.flows.q_ex):
            assert arr[ell] == 0.0

    def test_kirchhoff_on_random_six_bus(self):
        """Nodal sums of solved line flows reproduce the injections."""
        rng = np.random.default_rng(7)
        for trial in range(5):
            case = random_case(rng)
            topo = Topology.default(case)
            inj = nominal(case)
            sol = solve_newton_raphson(case, topo, inj)
            nodes = index_nodes(case, topo)
            inj_mw = np.zeros(nodes.n_nodes)
            np.add.at(inj_mw, nodes.gen_node, sol.prod_p_balanced)
            np.add.at(inj_mw, nodes.load_node, -inj.load_p)
            flow_sum = np.zeros(nodes.n_nodes)
            np.add.at(flow_sum, nodes.line_or_node, sol.flows.p_or)
            np.add.at(flow_sum, nodes.line_ex_node, sol.flows.p_ex)
            # per-unit comparison at 1e-8
            assert np.allclose(flow_sum / case.base_mva, inj_mw / case.base_mva,
                               atol=1e-8)

    def test_global_conservation_and_loss_sign(self, case118):
        sol = solve_newton_raphson(case118, Topology.default(case118),
                                   nominal(case118))
        losses = sol.flows.p_or + sol.flows.p_ex
        total = sol.prod_p_balanced.sum() - case118.load_p_mw.sum()
        assert total == pytest.approx(losses.sum(), abs=1e-5)
        assert losses.sum() >= 0.0
        assert np.all(losses >= -1e-9)

    def test_end_voltages_match_nodes(self, case14):
        topo = Topology.default(case14)
        sol = solve_newton_raphson(case14, topo, nominal(case14))
        nodes = index_nodes(case14, topo)
        vor = sol.state.vm[nodes.line_or_node] * case14.sub_base_kv[case14.line_from]
        assert np.allclose(sol.flows.v_or, vor)


class TestJacobian:
    def test_matches_central_differences(self):
        """Analytic Jacobian vs central finite differences of the residual."""
        rng = np.random.default_rng(11)
        for trial in range(20):
            case = random_case(rng)
            topo = Topology.default(case)
            ybus = build_ybus(case, topo)
            inj = nominal(case)
            st = initial_state(case, topo, inj, SolverOptions(initializer="flat"))
            st.vm = st.vm * rng.uniform(0.97, 1.03, len(st.vm))
            st.va = st.va + rng.uniform(-0.05, 0.05, len(st.va))
            pvpq = np.concatenate([st.pv_nodes, st.pq_nodes])
            jac = _jacobian(ybus.y, st.v, pvpq, st.pq_nodes).toarray()

            h = 1e-6
            cols = []
            for node in pvpq:
                va_p = st.va.copy(); va_p[node] += h
                va_m = st.va.copy(); va_m[node] -= h
                fp = mismatch(case, ybus, _with(st, va=va_p), inj)
                fm = mismatch(case, ybus, _with(st, va=va_m), inj)
                cols.append((fp - fm) / (2 * h))
            for node in st.pq_nodes:
                vm_p = st.vm.copy(); vm_p[node] += h
                vm_m = st.vm.copy(); vm_m[node] -= h
                fp = mismatch(case, ybus, _with(st, vm=vm_p), inj)
                fm = mismatch(case, ybus, _with(st, vm=vm_m), inj)
                cols.append((fp - fm) / (2 * h))
            fd = np.stack(cols, axis=1)
            scale = max(np.abs(jac).max(), 1.0)
            assert np.max(np.abs(jac - fd)) / scale < 1e-6


def _with(st, vm=None, va=None):
    from gridbench.powerflow import NodeState
    return NodeState(vm=st.vm if vm is None else vm,
                     va=st.va if va is None else va,
                     pv_nodes=st.pv_nodes, pq_nodes=st.pq_nodes,
                     slack_node=st.slack_node)


class TestDCPowerFlow:
    def test_single_line_analytic(self):
        case = two_bus_case(r=0.0, x=0.1, b=0.0, load_p=100.0, load_q=0.0)
        va = dc_power_flow(case, Topology.default(case), nominal(case))
        assert va[1] == pytest.approx(-0.1, abs=1e-12)

    def test_zero_injections_flat(self, case14):
        inj = Injections(prod_p=np.zeros(case14.n_gen), prod_v=case14.gen_v_kv.copy(),
                         load_p=np.zeros(case14.n_load), load_q=np.zeros(case14.n_load))
        va = dc_power_flow(case14, Topology.default(case14), inj)
        assert np.allclose(va, 0.0, atol=1e-12)

    def test_warm_start_not_worse_than_flat(self, case14):
        """DC-started Newton needs no more iterations than flat start on at
        least 90% of random injection draws."""
        rng = np.random.default_rng(5)
        topo = Topology.default(case14)
        wins = 0
        n = 100
        for _ in range(n):
            scale = rng.uniform(0.6, 1.1)
            inj = Injections(prod_p=case14.gen_p_mw * scale,
                             prod_v=case14.gen_v_kv.copy(),
                             load_p=case14.load_p_mw * scale,
                             load_q=case14.load_q_mvar * scale)
            it_dc = solve_newton_raphson(case14, topo, inj,
                                         SolverOptions(initializer="dc")).iterations
            it_flat = solve_newton_raphson(case14, topo, inj,
                                           SolverOptions(initializer="flat")).iterations
            wins += it_dc <= it_flat
        assert wins >= 0.9 * n

    def test_islanded_is_singular(self):
        case = two_bus_case()
        topo = apply_topology_action(case, Topology.default(case),
                                     DisconnectLineAction(0))
        with pytest.raises(SolverError):
            dc_power_flow(case, topo, nominal(case))
