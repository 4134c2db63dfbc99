"""AC power flow: Newton-Raphson solver, line flows, DC linearization.

State is polar: per-node voltage magnitude (pu) and angle (rad).  The slack
node holds its setpoint magnitude and zero angle and absorbs the active
imbalance; PV nodes hold their magnitude setpoints; PQ nodes carry both
unknowns.

Sign convention: all nodal powers are net injections (generation positive,
consumption negative).  The active balance at node k reads
``p_k = sum_m |v_k||v_m| (g_km cos(th_k - th_m) + b_km sin(th_k - th_m))``
with g + jb the admittance-matrix entries; the reactive balance is the
matching injection form ``q_k = sum_m |v_k||v_m| (g_km sin(th_k - th_m) -
b_km cos(th_k - th_m))``, i.e. a load consuming Q appears as a negative
injection.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import build_ybus, index_nodes, line_series_admittance, validate_topology

SQRT3 = np.sqrt(3.0)


class SolverError(RuntimeError):
    """Raised on non-convergence or a singular linear system."""


@dataclass(frozen=True)
class Injections:
    """Generator setpoints and load demands, in physical units."""

    prod_p: np.ndarray    # (G,) MW
    prod_v: np.ndarray    # (G,) kV
    load_p: np.ndarray    # (D,) MW
    load_q: np.ndarray    # (D,) MVAr

    @staticmethod
    def nominal(case):
        return Injections(prod_p=case.gen_p_mw.copy(), prod_v=case.gen_v_kv.copy(),
                          load_p=case.load_p_mw.copy(), load_q=case.load_q_mvar.copy())

    def check(self, case):
        if (self.prod_p.shape != (case.n_gen,) or self.prod_v.shape != (case.n_gen,)
                or self.load_p.shape != (case.n_load,) or self.load_q.shape != (case.n_load,)):
            raise ValueError("injection arrays do not match the case rosters")
        if np.any(self.prod_v <= 0):
            raise ValueError("voltage setpoints must be positive")


@dataclass
class NodeState:
    """Voltage magnitudes (pu) and angles (rad) over the node set."""

    vm: np.ndarray
    va: np.ndarray
    pv_nodes: np.ndarray
    pq_nodes: np.ndarray
    slack_node: int

    @property
    def v(self):
        return self.vm * np.exp(1j * self.va)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8            # pu, max-norm of the residual
    max_iter: int = 30
    initializer: str = "dc"      # "flat" | "dc" | "external"
    external_va: np.ndarray | None = None
    external_vm: np.ndarray | None = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max iterations must be at least 1")
        if self.initializer not in ("flat", "dc", "external"):
            raise ValueError(f"unknown initializer '{self.initializer}'")


@dataclass
class LineFlows:
    """Per-line quantities at both ends, physical units."""

    p_or: np.ndarray   # MW
    p_ex: np.ndarray
    q_or: np.ndarray   # MVAr
    q_ex: np.ndarray
    a_or: np.ndarray   # A
    a_ex: np.ndarray
    v_or: np.ndarray   # kV
    v_ex: np.ndarray
    theta_or: np.ndarray  # rad
    theta_ex: np.ndarray


@dataclass
class PowerFlowSolution:
    state: NodeState
    flows: LineFlows
    prod_p_balanced: np.ndarray   # (G,) MW, slack entry re-estimated
    iterations: int
    mismatch_norm: float
    converged: bool = True


def classify_nodes(case, nodes):
    """PV nodes host a generator (non-slack); the rest are PQ."""
    has_gen = np.zeros(nodes.n_nodes, dtype=bool)
    has_gen[nodes.gen_node] = True
    slack = nodes.slack_node
    all_nodes = np.arange(nodes.n_nodes)
    pv = all_nodes[has_gen & (all_nodes != slack)]
    pq = all_nodes[~has_gen & (all_nodes != slack)]
    return pv, pq


def nodal_injections(case, nodes, inj):
    """Net complex injection per node, per-unit; Q of PV/slack nodes set to 0."""
    s = np.zeros(nodes.n_nodes, dtype=np.complex128)
    np.add.at(s, nodes.gen_node, inj.prod_p / case.base_mva)
    np.add.at(s, nodes.load_node, -(inj.load_p + 1j * inj.load_q) / case.base_mva)
    return s


def setpoint_vm(case, nodes, inj):
    """Per-node magnitude setpoints (pu) for slack and PV nodes.

    Raises if two generators on one node carry different setpoints.
    """
    vm = np.full(nodes.n_nodes, np.nan)
    v_pu = inj.prod_v / case.sub_base_kv[case.gen_sub]
    for g in range(case.n_gen):
        n = nodes.gen_node[g]
        if not np.isnan(vm[n]) and abs(vm[n] - v_pu[g]) > 1e-9:
            raise ValueError(
                f"conflicting voltage setpoints at node {n}: {vm[n]} vs {v_pu[g]}")
        vm[n] = v_pu[g]
    return vm


def mismatch(case, ybus, state, inj):
    """Power-balance residual: active rows at PV+PQ nodes, reactive at PQ.

    Positive entries mean the computed injection exceeds the specified one.
    Per-unit.
    """
    nodes = ybus.nodes
    s_spec = nodal_injections(case, nodes, inj)
    v = state.v
    s_calc = v * np.conj(ybus.y @ v)
    ds = s_calc - s_spec
    pvpq = np.concatenate([state.pv_nodes, state.pq_nodes])
    return np.concatenate([ds[pvpq].real, ds[state.pq_nodes].imag])


def _jacobian(ybus, v, pvpq, pq):
    """Polar Newton Jacobian via the complex power derivatives."""
    n = len(v)
    ib = np.arange(n)
    ibus = ybus @ v
    diag_v = sp.csr_matrix((v, (ib, ib)))
    diag_i = sp.csr_matrix((ibus, (ib, ib)))
    diag_vnorm = sp.csr_matrix((v / np.abs(v), (ib, ib)))
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return sp.vstack([sp.hstack([j11, j12]), sp.hstack([j21, j22])], format="csc")


def initial_state(case, topo, inj, opts, nodes=None):
    if nodes is None:
        nodes = index_nodes(case, topo)
    pv, pq = classify_nodes(case, nodes)
    vm = np.ones(nodes.n_nodes)
    va = np.zeros(nodes.n_nodes)
    set_vm = setpoint_vm(case, nodes, inj)
    fixed = ~np.isnan(set_vm)
    vm[fixed] = set_vm[fixed]
    if opts.initializer == "dc":
        va = dc_power_flow(case, topo, inj, nodes=nodes)
    elif opts.initializer == "external":
        if opts.external_va is None:
            raise ValueError("external initializer requires external_va")
        va = np.asarray(opts.external_va, dtype=float).copy()
        if opts.external_vm is not None:
            ext_vm = np.asarray(opts.external_vm, dtype=float)
            vm = np.where(fixed, vm, ext_vm)
    return NodeState(vm=vm, va=va, pv_nodes=pv, pq_nodes=pq, slack_node=nodes.slack_node)


def solve_newton_raphson(case, topo, inj, opts=SolverOptions(), ybus=None):
    """Full-Newton polar power flow.

    Raises :class:`SolverError` on non-convergence or a singular Jacobian;
    never returns a silent partial result.
    """
    inj.check(case)
    if ybus is None:
        verdict = validate_topology(case, topo)
        if not verdict:
            raise SolverError(f"invalid topology: {verdict.reason}")
        ybus = build_ybus(case, topo)
    nodes = ybus.nodes
    state = initial_state(case, topo, inj, opts, nodes=nodes)
    pvpq = np.concatenate([state.pv_nodes, state.pq_nodes])
    npvpq, npq = len(pvpq), len(state.pq_nodes)

    f = mismatch(case, ybus, state, inj)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    iterations = 0
    while norm >= opts.tol:
        if iterations >= opts.max_iter:
            raise SolverError(
                f"no convergence after {opts.max_iter} iterations (residual {norm:.3e} pu)")
        iterations += 1
        jac = _jacobian(ybus.y, state.v, pvpq, state.pq_nodes)
        try:
            dx = spla.splu(jac.tocsc()).solve(-f)
        except RuntimeError as exc:
            raise SolverError(f"singular Jacobian at iteration {iterations}: {exc}") from None
        if not np.all(np.isfinite(dx)):
            raise SolverError(f"singular Jacobian at iteration {iterations}")
        state.va[pvpq] += dx[:npvpq]
        state.vm[state.pq_nodes] += dx[npvpq:npvpq + npq]
        f = mismatch(case, ybus, state, inj)
        norm = float(np.max(np.abs(f))) if f.size else 0.0

    flows = compute_line_flows(case, topo, state, nodes=nodes)
    return PowerFlowSolution(
        state=state,
        flows=flows,
        prod_p_balanced=rebalance_slack(case, ybus, state, inj),
        iterations=iterations,
        mismatch_norm=norm,
    )


def rebalance_slack(case, ybus, state, inj):
    """Replace the slack generator's setpoint by its solved production."""
    nodes = ybus.nodes
    v = state.v
    s_calc = v * np.conj(ybus.y @ v)
    slack = nodes.slack_node
    load_here = np.zeros(nodes.n_nodes)
    np.add.at(load_here, nodes.load_node, inj.load_p)
    gen_other = np.zeros(nodes.n_nodes)
    sg = case.slack_gen
    for g in range(case.n_gen):
        if g != sg and nodes.gen_node[g] == slack:
            gen_other[slack] += inj.prod_p[g]
    balanced = inj.prod_p.copy()
    balanced[sg] = s_calc[slack].real * case.base_mva + load_here[slack] - gen_other[slack]
    return balanced


def compute_line_flows(case, topo, state, nodes=None):
    """Pi-model line flows at both ends; disconnected lines are exact zeros.

    Currents use the three-phase convention a = |S| / (sqrt(3) |V_LL|).
    """
    if nodes is None:
        raise ValueError("compute_line_flows requires the node map of the state")
    L = case.n_line
    v = state.v
    on = topo.line_status
    kor = nodes.line_or_node
    kex = nodes.line_ex_node

    ys = line_series_admittance(case)
    ysh = 0.5j * case.line_b
    tau = case.line_tap

    p_or = np.zeros(L); p_ex = np.zeros(L)
    q_or = np.zeros(L); q_ex = np.zeros(L)
    a_or = np.zeros(L); a_ex = np.zeros(L)

    von = v[kor[on]]
    vex = v[kex[on]]
    i_or = ((ys[on] + ysh[on]) / tau[on] ** 2) * von - (ys[on] / tau[on]) * vex
    i_ex = (ys[on] + ysh[on]) * vex - (ys[on] / tau[on]) * von
    s_or = von * np.conj(i_or)
    s_ex = vex * np.conj(i_ex)
    p_or[on] = s_or.real * case.base_mva
    q_or[on] = s_or.imag * case.base_mva
    p_ex[on] = s_ex.real * case.base_mva
    q_ex[on] = s_ex.imag * case.base_mva

    kv_or = case.sub_base_kv[case.line_from]
    kv_ex = case.sub_base_kv[case.line_to]
    # ampere base per end: S_base / (sqrt(3) V_base)
    a_or[on] = np.abs(s_or) * case.base_mva * 1e3 / (SQRT3 * np.abs(von) * kv_or[on])
    a_ex[on] = np.abs(s_ex) * case.base_mva * 1e3 / (SQRT3 * np.abs(vex) * kv_ex[on])

    # end voltages follow the assigned busbar node (energized by validation),
    # for disconnected lines included
    vm_or = np.where(kor >= 0, state.vm[np.clip(kor, 0, None)], 0.0)
    vm_ex = np.where(kex >= 0, state.vm[np.clip(kex, 0, None)], 0.0)
    th_or = np.where(kor >= 0, state.va[np.clip(kor, 0, None)], 0.0)
    th_ex = np.where(kex >= 0, state.va[np.clip(kex, 0, None)], 0.0)

    return LineFlows(
        p_or=p_or, p_ex=p_ex, q_or=q_or, q_ex=q_ex, a_or=a_or, a_ex=a_ex,
        v_or=vm_or * kv_or, v_ex=vm_ex * kv_ex, theta_or=th_or, theta_ex=th_ex,
    )


def dc_power_flow(case, topo, inj, nodes=None):
    """Linearized angle estimate: solve B th = P with the slack pinned at 0.

    Raises :class:`SolverError` when the susceptance matrix is singular
    (an islanded topology that escaped validation).
    """
    if nodes is None:
        nodes = index_nodes(case, topo)
    n = nodes.n_nodes
    on = np.flatnonzero(topo.line_status)
    k = nodes.line_or_node[on]
    m = nodes.line_ex_node[on]
    bline = 1.0 / (case.line_x[on] * case.line_tap[on])
    b = sp.coo_matrix(
        (np.concatenate([bline, bline, -bline, -bline]),
         (np.concatenate([k, m, k, m]), np.concatenate([k, m, m, k]))),
        shape=(n, n)).tocsc()
    p = nodal_injections(case, nodes, inj).real
    keep = np.flatnonzero(np.arange(n) != nodes.slack_node)
    va = np.zeros(n)
    if keep.size:
        try:
            lu = spla.splu(b[np.ix_(keep, keep)].tocsc())
            sol = lu.solve(p[keep])
        except RuntimeError as exc:
            raise SolverError(f"singular DC susceptance matrix: {exc}") from None
        if not np.all(np.isfinite(sol)):
            raise SolverError("singular DC susceptance matrix")
        va[keep] = sol
    return va


@dataclass
class SolveTiming:
    """Wall-clock phases of one engine run, seconds."""

    total: float = 0.0
    assembly: float = 0.0
    linear_solve: float = 0.0
    postprocessing: float = 0.0

    def as_dict(self):
        return {"total_s": self.total, "assembly_s": self.assembly,
                "linear_solve_s": self.linear_solve,
                "postprocessing_s": self.postprocessing}


def solve_sequential(case, scenarios, opts=SolverOptions()):
    """Baseline engine: solve scenarios one by one, rebuilding everything.

    Returns (results, timing); per-scenario failures are recorded as
    ``(None, reason)`` entries without aborting the run.
    """
    results = []
    t0 = time.perf_counter()
    for topo, inj in scenarios:
        verdict = validate_topology(case, topo)
        if not verdict:
            results.append((None, f"invalid: {verdict.reason}"))
            continue
        try:
            results.append((solve_newton_raphson(case, topo, inj, opts), ""))
        except SolverError as exc:
            results.append((None, str(exc)))
    timing = SolveTiming(total=time.perf_counter() - t0)
    return results, timing
