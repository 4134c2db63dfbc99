"""Batched many-scenario power flow.

Scenarios are clustered by their exact busbar-assignment signature; members
of a cluster differ only in line statuses, so generator and load node
indices are consistent across the cluster.  Each cluster shares one base
admittance matrix (its signature with every line in service) and every
member carries only a sparse delta against it.  The per-member Newton
systems are stacked into a block-diagonal system on a shared sparsity
pattern and solved in lockstep by a Jacobi-preconditioned conjugate
gradient on the normal equations, with a direct dense solve as fallback for
blocks the iteration does not reach tolerance on.  Line quantities for the
whole batch are derived in one vectorized pass at the end.

Members whose disconnections de-energize a busbar of the cluster base (the
node set shrinks) are solved by the plain per-scenario path inside the same
call; results keep input order either way.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .grid import (AdmittanceMatrix, Topology, build_ybus, index_nodes,
                   line_series_admittance, _line_stamp, validate_topology)
from .powerflow import (LineFlows, NodeState, PowerFlowSolution,
                        SolverOptions, SolveTiming, SQRT3, SolverError,
                        classify_nodes, nodal_injections, setpoint_vm,
                        solve_newton_raphson)


class SignatureMismatch(ValueError):
    """Scenario does not share the cluster's busbar signature."""


class PCGError(RuntimeError):
    """Iterative linear solve failed to reach tolerance on some block."""


@dataclass
class BatchOptions:
    """Solver options plus the inner linear-solve controls."""

    solver: SolverOptions = field(default_factory=SolverOptions)
    inner_tol_factor: float = 1e-2   # linear tol = factor * outer residual norm
    inner_tol_cap: float = 1e-2      # relative-residual ceiling
    inner_tol_floor: float = 1e-12
    pcg_max_iter: int = 4000
    jobs: int | None = None

    def inner_tol(self, outer_norms):
        return np.clip(self.inner_tol_factor * outer_norms,
                       self.inner_tol_floor, self.inner_tol_cap)


@dataclass(frozen=True)
class DeltaAdmittance:
    """Sparse difference between one scenario's Ybus and its cluster base.

    Entries are indexed in the base node map; ``dropped_nodes`` lists base
    nodes absent from the scenario (busbars de-energized by the member's
    disconnections).
    """

    scenario: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    dropped_nodes: np.ndarray

    @property
    def nnz(self):
        return len(self.values)


@dataclass
class ScenarioCluster:
    """Scenarios sharing one busbar signature."""

    signature: tuple
    members: list              # indices into the original scenario list
    base_topology: Topology
    base: AdmittanceMatrix
    topologies: list

    @property
    def size(self):
        return len(self.members)


def cluster_scenarios(case, topologies):
    """Partition scenarios by exact busbar signature (first-seen order).

    Every scenario lands in exactly one cluster; within a cluster members
    differ only in line statuses.
    """
    clusters = {}
    order = []
    for i, topo in enumerate(topologies):
        sig = topo.signature()
        if sig not in clusters:
            base_topo = Topology(
                line_status=np.ones(case.n_line, dtype=bool),
                line_or_bus=topo.line_or_bus.copy(),
                line_ex_bus=topo.line_ex_bus.copy(),
                gen_bus=topo.gen_bus.copy(),
                load_bus=topo.load_bus.copy(),
            )
            clusters[sig] = ScenarioCluster(
                signature=sig, members=[], base_topology=base_topo,
                base=build_ybus(case, base_topo), topologies=[])
            order.append(sig)
        clusters[sig].members.append(i)
        clusters[sig].topologies.append(topo)
    return [clusters[s] for s in order]


def build_delta_admittance(case, base_adm, scenario_topo, cluster, scenario=0):
    """Exact sparse difference of the scenario Ybus against the cluster base.

    Only line-status changes are allowed; at most four entries appear per
    modified line.
    """
    if scenario_topo.signature() != cluster.signature:
        raise SignatureMismatch("scenario busbar signature differs from the cluster's")
    base_status = cluster.base_topology.line_status
    nodes = base_adm.nodes
    ys = line_series_admittance(case)
    rows, cols, vals = [], [], []
    removed = np.flatnonzero(base_status & ~scenario_topo.line_status)
    added = np.flatnonzero(~base_status & scenario_topo.line_status)
    for sign, lines in ((-1.0, removed), (+1.0, added)):
        for ell in lines:
            k, m = int(nodes.line_or_node[ell]), int(nodes.line_ex_node[ell])
            y_oo, y_oe, y_eo, y_ee = _line_stamp(case, ell, ys[ell])
            rows += [k, k, m, m]
            cols += [k, m, m, k]
            vals += [sign * y_oo, sign * y_oe, sign * y_ee, sign * y_eo]
    scen_nodes = index_nodes(case, scenario_topo)
    base_pairs = set(zip(nodes.node_sub.tolist(), nodes.node_busbar.tolist()))
    scen_pairs = set(zip(scen_nodes.node_sub.tolist(), scen_nodes.node_busbar.tolist()))
    dropped = sorted(base_pairs - scen_pairs)
    pair_to_id = {(int(s), int(b)): i
                  for i, (s, b) in enumerate(zip(nodes.node_sub, nodes.node_busbar))}
    return DeltaAdmittance(
        scenario=scenario,
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        values=np.asarray(vals, dtype=np.complex128),
        dropped_nodes=np.asarray([pair_to_id[p] for p in dropped], dtype=np.int64),
    )


def reconstruct_ybus(base_adm, delta):
    """Base plus delta, with the scenario's dropped nodes removed."""
    n = base_adm.n_nodes
    d = sp.coo_matrix((delta.values, (delta.rows, delta.cols)), shape=(n, n)).tocsr()
    y = (base_adm.y + d).tocsr()
    if delta.dropped_nodes.size:
        keep = np.setdiff1d(np.arange(n), delta.dropped_nodes)
        y = y[np.ix_(keep, keep)].tocsr()
    return y


# -- shared Jacobian pattern -------------------------------------------------

@dataclass
class JacobianPattern:
    """CSR pattern of the polar Jacobian plus per-Ybus-entry scatter maps."""

    indptr: np.ndarray
    indices: np.ndarray
    m: int
    pos11: np.ndarray
    pos12: np.ndarray
    pos21: np.ndarray
    pos22: np.ndarray


def build_jacobian_pattern(y_csr, pvpq, pq):
    n = y_csr.shape[0]
    npvpq = len(pvpq)
    m = npvpq + len(pq)
    rowp = np.full(n, -1, dtype=np.int64)
    rowp[pvpq] = np.arange(npvpq)
    rowq = np.full(n, -1, dtype=np.int64)
    rowq[pq] = np.arange(len(pq))
    yi = np.repeat(np.arange(n), np.diff(y_csr.indptr))
    yj = y_csr.indices.astype(np.int64)

    quads = []
    for rmap, roff, cmap, coff in (
            (rowp, 0, rowp, 0), (rowp, 0, rowq, npvpq),
            (rowq, npvpq, rowp, 0), (rowq, npvpq, rowq, npvpq)):
        r = rmap[yi]
        c = cmap[yj]
        ok = (r >= 0) & (c >= 0)
        quads.append((ok, r + roff, c + coff))
    all_r = np.concatenate([q[1][q[0]] for q in quads])
    all_c = np.concatenate([q[2][q[0]] for q in quads])
    pat = sp.coo_matrix((np.ones(len(all_r)), (all_r, all_c)), shape=(m, m)).tocsr()
    pat.sort_indices()

    def positions(ok, r, c):
        pos = np.full(len(yi), -1, dtype=np.int64)
        idx = np.flatnonzero(ok)
        for t in idx:
            lo, hi = pat.indptr[r[t]], pat.indptr[r[t] + 1]
            pos[t] = lo + np.searchsorted(pat.indices[lo:hi], c[t])
        return pos

    pos = [positions(*q) for q in quads]
    return JacobianPattern(indptr=pat.indptr.copy(), indices=pat.indices.astype(np.int64),
                           m=m, pos11=pos[0], pos12=pos[1], pos21=pos[2], pos22=pos[3])


@dataclass
class BlockSystem:
    """Per-scenario Newton systems stacked on one shared CSR pattern.

    Logically a block-diagonal matrix (zero cross-block coupling) with the
    per-block right-hand sides stacked alongside.
    """

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray     # (B, nnz) float64
    rhs: np.ndarray      # (B, m)

    @property
    def n_blocks(self):
        return self.data.shape[0]

    @property
    def block_dim(self):
        return self.rhs.shape[1]

    def block(self, b):
        n = self.block_dim
        return sp.csr_matrix((self.data[b], self.indices, self.indptr), shape=(n, n))

    def to_block_diagonal(self):
        return sp.block_diag([self.block(b) for b in range(self.n_blocks)], format="csr")

    @staticmethod
    def from_blocks(blocks, rhs_list):
        """Stack explicit same-shaped blocks onto their union pattern."""
        blocks = [sp.csr_matrix(a) for a in blocks]
        n = blocks[0].shape[0]
        if any(a.shape != (n, n) for a in blocks):
            raise ValueError("all blocks must share one square shape")
        union = sum((a != 0).astype(np.int8) for a in blocks) + sp.eye(n, dtype=np.int8)
        union = union.tocsr()
        union.sort_indices()
        indptr = union.indptr.copy()
        indices = union.indices.astype(np.int64)
        data = np.zeros((len(blocks), union.nnz))
        for b, a in enumerate(blocks):
            coo = a.tocoo()
            for r, c, v in zip(coo.row, coo.col, coo.data):
                lo, hi = indptr[r], indptr[r + 1]
                data[b, lo + np.searchsorted(indices[lo:hi], c)] += v
        return BlockSystem(indptr=indptr, indices=indices, data=data,
                           rhs=np.asarray(rhs_list, dtype=float))


def pcg_solve(system, tol=1e-10, max_iter=4000):
    """Solve every block to relative residual ||Ax - b|| / ||b|| < ``tol``.

    Raises :class:`PCGError` with the worst block residual if any block
    stagnates before reaching tolerance.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    nb = system.n_blocks
    x = np.zeros_like(system.rhs)
    iters = np.zeros(nb, dtype=np.int64)
    relres = np.zeros(nb)
    active = np.ones(nb, dtype=bool)
    # drive the kernel a bit past the target: it tracks the row-equilibrated
    # residual, the contract below is on the unscaled one
    kernels.cgnr_batch(system.indptr, system.indices, system.data, system.rhs,
                       x, np.full(nb, 0.1 * float(tol)), max_iter, active, iters, relres)
    worst, worst_res = -1, 0.0
    for b in range(nb):
        rhs = system.rhs[b]
        bnorm = np.linalg.norm(rhs)
        res = (np.linalg.norm(system.block(b) @ x[b] - rhs) / bnorm) if bnorm > 0 else 0.0
        if res > worst_res:
            worst, worst_res = b, res
    if worst_res > tol:
        raise PCGError(
            f"block {worst} stagnated at relative residual {worst_res:.3e} "
            f"after {int(iters[worst])} iterations")
    return x, iters


# -- lockstep Newton over one cluster ----------------------------------------

class _ClusterSolver:
    def __init__(self, case, cluster, injections, opts):
        self.case = case
        self.cluster = cluster
        self.opts = opts
        self.nodes = cluster.base.nodes
        self.pv, self.pq = classify_nodes(case, self.nodes)
        self.pvpq = np.concatenate([self.pv, self.pq])
        self.m = len(self.pvpq) + len(self.pq)
        base = cluster.base.y.tocsr()
        base.sort_indices()
        self.y_indptr = base.indptr.copy()
        self.y_indices = base.indices.astype(np.int64)
        self.jpat = build_jacobian_pattern(base, self.pvpq, self.pq)
        B = cluster.size
        self.ydata = np.repeat(base.data[None, :], B, axis=0)
        self.deltas = []
        for b, topo in enumerate(cluster.topologies):
            delta = build_delta_admittance(case, cluster.base, topo, cluster, scenario=b)
            self.deltas.append(delta)
            self._scatter_delta(b, delta)
        self.injections = injections

    def _scatter_delta(self, b, delta):
        for r, c, val in zip(delta.rows, delta.cols, delta.values):
            lo, hi = self.y_indptr[r], self.y_indptr[r + 1]
            k = lo + np.searchsorted(self.y_indices[lo:hi], c)
            self.ydata[b, k] += val

    def _init_states(self):
        """Vectorized specified injections, magnitude setpoints, warm start."""
        case, opts = self.case, self.opts
        B, n = self.cluster.size, self.nodes.n_nodes
        for inj in self.injections:
            inj.check(case)
        prod_p = np.stack([inj.prod_p for inj in self.injections])
        prod_v = np.stack([inj.prod_v for inj in self.injections])
        load_p = np.stack([inj.load_p for inj in self.injections])
        load_q = np.stack([inj.load_q for inj in self.injections])
        rows = np.arange(B)[:, None]
        s_spec = np.zeros((B, n), dtype=np.complex128)
        np.add.at(s_spec, (rows, self.nodes.gen_node[None, :]), prod_p / case.base_mva)
        np.add.at(s_spec, (rows, self.nodes.load_node[None, :]),
                  -(load_p + 1j * load_q) / case.base_mva)
        vm = np.ones((B, n))
        va = np.zeros((B, n))
        v_pu = prod_v / case.sub_base_kv[case.gen_sub][None, :]
        uniq, counts = np.unique(self.nodes.gen_node, return_counts=True)
        if np.any(counts > 1):
            for b in range(B):
                set_vm = setpoint_vm(case, self.nodes,  self.injections[b])
                fixed = ~np.isnan(set_vm)
                vm[b, fixed] = set_vm[fixed]
        else:
            vm[rows, self.nodes.gen_node[None, :]] = v_pu
        if opts.solver.initializer == "dc":
            va = self._dc_batch(s_spec.real)
        elif opts.solver.initializer == "external":
            va = np.asarray(opts.solver.external_va, dtype=float).copy()
            if va.shape != (B, n):
                raise ValueError("external_va must have shape (members, nodes)")
        return s_spec, vm, va

    def _dc_batch(self, p_spec):
        """Per-member linearized warm start via one batched dense solve."""
        case = self.case
        B, n = self.cluster.size, self.nodes.n_nodes
        nodes = self.nodes
        bline = 1.0 / (case.line_x * case.line_tap)
        k, m = nodes.line_or_node, nodes.line_ex_node
        bmat_base = np.zeros((n, n))
        on0 = self.cluster.base_topology.line_status
        np.add.at(bmat_base, (k[on0], k[on0]), bline[on0])
        np.add.at(bmat_base, (m[on0], m[on0]), bline[on0])
        np.add.at(bmat_base, (k[on0], m[on0]), -bline[on0])
        np.add.at(bmat_base, (m[on0], k[on0]), -bline[on0])
        bmat = np.repeat(bmat_base[None, :, :], B, axis=0)
        for b, topo in enumerate(self.cluster.topologies):
            for ell in np.flatnonzero(on0 & ~topo.line_status):
                kk, mm = k[ell], m[ell]
                bmat[b, kk, kk] -= bline[ell]
                bmat[b, mm, mm] -= bline[ell]
                bmat[b, kk, mm] += bline[ell]
                bmat[b, mm, kk] += bline[ell]
        keep = np.flatnonzero(np.arange(n) != nodes.slack_node)
        va = np.zeros((B, n))
        if keep.size:
            sub = bmat[np.ix_(np.arange(B), keep, keep)]
            try:
                va[:, keep] = np.linalg.solve(sub, p_spec[:, keep, None])[:, :, 0]
            except np.linalg.LinAlgError:
                raise SolverError("singular DC susceptance matrix in batch") from None
        return va

    def solve(self, timing):
        case, opts = self.case, self.opts
        B, n, m = self.cluster.size, self.nodes.n_nodes, self.m
        npvpq = len(self.pvpq)
        t0 = time.perf_counter()
        s_spec, vm, va = self._init_states()
        timing.assembly += time.perf_counter() - t0

        active = np.ones(B, dtype=bool)
        iterations = np.zeros(B, dtype=np.int64)
        norms = np.full(B, np.inf)
        errors = [""] * B
        ibus = np.zeros((B, n), dtype=np.complex128)
        jdata = np.zeros((B, self.jpat.indices.size))
        f = np.zeros((B, m))

        for outer in range(opts.solver.max_iter + 1):
            t0 = time.perf_counter()
            v = vm * np.exp(1j * va)
            kernels.spmv_batch(self.y_indptr, self.y_indices, self.ydata,
                               v, ibus, np.ones(B, dtype=bool))
            ds = v * np.conj(ibus) - s_spec
            f[:, :npvpq] = ds[:, self.pvpq].real
            f[:, npvpq:] = ds[:, self.pq].imag
            norms = np.max(np.abs(f), axis=1) if m else np.zeros(B)
            newly = active & (norms < opts.solver.tol)
            active &= ~newly
            timing.assembly += time.perf_counter() - t0
            if not active.any() or outer == opts.solver.max_iter:
                break

            t0 = time.perf_counter()
            kernels.jacobian_batch(self.y_indptr, self.y_indices, self.ydata,
                                   v, ibus, vm, self.jpat.pos11, self.jpat.pos12,
                                   self.jpat.pos21, self.jpat.pos22, jdata, active)
            timing.assembly += time.perf_counter() - t0

            t0 = time.perf_counter()
            rhs = -f
            dx = np.zeros((B, m))
            iters = np.zeros(B, dtype=np.int64)
            relres = np.zeros(B)
            tol_rel = self.opts.inner_tol(norms)
            kernels.cgnr_batch(self.jpat.indptr, self.jpat.indices, jdata, rhs,
                               dx, tol_rel, self.opts.pcg_max_iter, active,
                               iters, relres)
            # direct fallback for blocks the iteration left above tolerance
            for b in np.flatnonzero(active & (relres > tol_rel)):
                block = sp.csr_matrix((jdata[b], self.jpat.indices, self.jpat.indptr),
                                      shape=(m, m))
                try:
                    dx[b] = np.linalg.solve(block.toarray(), rhs[b])
                except np.linalg.LinAlgError:
                    errors[b] = f"singular Jacobian at iteration {outer + 1}"
                    active[b] = False
            timing.linear_solve += time.perf_counter() - t0

            upd = np.flatnonzero(active)
            va[np.ix_(upd, self.pvpq)] += dx[upd, :npvpq]
            vm[np.ix_(upd, self.pq)] += dx[upd, npvpq:]
            iterations[upd] += 1

        for b in np.flatnonzero(active):
            if not errors[b]:
                errors[b] = (f"no convergence after {opts.solver.max_iter} iterations "
                             f"(residual {norms[b]:.3e} pu)")

        # slack re-estimation from the final batched injections S = V conj(YV)
        v = vm * np.exp(1j * va)
        kernels.spmv_batch(self.y_indptr, self.y_indices, self.ydata,
                           v, ibus, np.ones(B, dtype=bool))
        s_calc = v * np.conj(ibus)
        slack = self.nodes.slack_node
        sg = case.slack_gen
        load_at_slack = np.zeros(B)
        for b, inj in enumerate(self.injections):
            sel = self.nodes.load_node == slack
            load_at_slack[b] = inj.load_p[sel].sum()
            sel_g = (self.nodes.gen_node == slack) & (np.arange(case.n_gen) != sg)
            load_at_slack[b] -= inj.prod_p[sel_g].sum()
        prod_balanced = np.stack([inj.prod_p.copy() for inj in self.injections])
        prod_balanced[:, sg] = s_calc[:, slack].real * case.base_mva + load_at_slack
        return vm, va, iterations, norms, errors, prod_balanced


def _batch_line_flows(case, cluster, vm, va, statuses):
    """Vectorized pi-model post-processing for one cluster, all members at once."""
    nodes = cluster.base.nodes
    B = vm.shape[0]
    L = case.n_line
    v = vm * np.exp(1j * va)
    ys = line_series_admittance(case)
    ysh = 0.5j * case.line_b
    tau = case.line_tap
    kor = nodes.line_or_node
    kex = nodes.line_ex_node
    von = v[:, kor]
    vex = v[:, kex]
    i_or = ((ys + ysh) / tau**2)[None, :] * von - (ys / tau)[None, :] * vex
    i_ex = (ys + ysh)[None, :] * vex - (ys / tau)[None, :] * von
    s_or = von * np.conj(i_or)
    s_ex = vex * np.conj(i_ex)
    on = statuses
    base = case.base_mva
    kv_or = case.sub_base_kv[case.line_from]
    kv_ex = case.sub_base_kv[case.line_to]
    p_or = np.where(on, s_or.real * base, 0.0)
    p_ex = np.where(on, s_ex.real * base, 0.0)
    q_or = np.where(on, s_or.imag * base, 0.0)
    q_ex = np.where(on, s_ex.imag * base, 0.0)
    a_or = np.where(on, np.abs(s_or) * base * 1e3 / (SQRT3 * np.abs(von) * kv_or), 0.0)
    a_ex = np.where(on, np.abs(s_ex) * base * 1e3 / (SQRT3 * np.abs(vex) * kv_ex), 0.0)
    v_or = np.abs(von) * kv_or
    v_ex = np.abs(vex) * kv_ex
    th_or = va[:, kor]
    th_ex = va[:, kex]
    return [LineFlows(p_or=p_or[b], p_ex=p_ex[b], q_or=q_or[b], q_ex=q_ex[b],
                      a_or=a_or[b], a_ex=a_ex[b], v_or=v_or[b], v_ex=v_ex[b],
                      theta_or=th_or[b], theta_ex=th_ex[b]) for b in range(B)]


def assemble_block_system(case, cluster, states, injections):
    """Public assembly of one Newton step's block system (Jacobian, -mismatch)."""
    solver = _ClusterSolver(case, cluster, injections, BatchOptions())
    B = cluster.size
    n = solver.nodes.n_nodes
    vm = np.stack([s.vm for s in states])
    va = np.stack([s.va for s in states])
    v = vm * np.exp(1j * va)
    ibus = np.zeros((B, n), dtype=np.complex128)
    ones = np.ones(B, dtype=bool)
    kernels.spmv_batch(solver.y_indptr, solver.y_indices, solver.ydata, v, ibus, ones)
    s_spec = np.stack([nodal_injections(case, solver.nodes, inj) for inj in injections])
    ds = v * np.conj(ibus) - s_spec
    npvpq = len(solver.pvpq)
    f = np.concatenate([ds[:, solver.pvpq].real, ds[:, solver.pq].imag], axis=1)
    jdata = np.zeros((B, solver.jpat.indices.size))
    kernels.jacobian_batch(solver.y_indptr, solver.y_indices, solver.ydata, v, ibus,
                           vm, solver.jpat.pos11, solver.jpat.pos12, solver.jpat.pos21,
                           solver.jpat.pos22, jdata, ones)
    if f.shape[1] != solver.m:
        raise ValueError("state dimension does not match the cluster's unknown layout")
    return BlockSystem(indptr=solver.jpat.indptr, indices=solver.jpat.indices,
                       data=jdata, rhs=-f)


def batch_solve(case, scenarios, opts=None):
    """Solve (topology, injections) scenarios as one batch.

    Returns (results, timing): ``results[i]`` is ``(PowerFlowSolution, "")``
    or ``(None, reason)`` in input order; failures never abort the batch.
    """
    if opts is None:
        opts = BatchOptions()
    elif isinstance(opts, SolverOptions):
        opts = BatchOptions(solver=opts)
    kernels.set_threads(opts.jobs)
    timing = SolveTiming()
    t_start = time.perf_counter()
    results = [None] * len(scenarios)

    valid_idx = []
    t0 = time.perf_counter()
    for i, (topo, inj) in enumerate(scenarios):
        verdict = validate_topology(case, topo)
        if not verdict:
            results[i] = (None, f"invalid: {verdict.reason}")
        else:
            valid_idx.append(i)
    clusters = cluster_scenarios(case, [scenarios[i][0] for i in valid_idx])
    timing.assembly += time.perf_counter() - t0

    for cluster in clusters:
        orig = [valid_idx[j] for j in cluster.members]
        base_nodes = cluster.base.nodes
        # a base node survives in a member iff it hosts a generator, a load,
        # or the end of a line still in service there
        static = np.zeros(base_nodes.n_nodes, dtype=np.int64)
        np.add.at(static, base_nodes.gen_node, 1)
        np.add.at(static, base_nodes.load_node, 1)
        L = case.n_line
        inc = sp.coo_matrix(
            (np.ones(2 * L), (np.concatenate([base_nodes.line_or_node,
                                              base_nodes.line_ex_node]),
                              np.concatenate([np.arange(L), np.arange(L)]))),
            shape=(base_nodes.n_nodes, L)).tocsr()
        statuses_all = np.stack([t.line_status for t in cluster.topologies])
        counts = static[:, None] + inc @ statuses_all.T.astype(np.int64)
        full = np.asarray((counts > 0).all(axis=0)).ravel()
        lockstep = [(pos, i) for pos, i in enumerate(orig) if full[pos]]
        fallback = [i for pos, i in enumerate(orig) if not full[pos]]
        for i in fallback:
            # dropped-node member: reduced system solved on its own node set
            try:
                sol = solve_newton_raphson(case, scenarios[i][0], scenarios[i][1],
                                           opts.solver)
                results[i] = (sol, "")
            except SolverError as exc:
                results[i] = (None, str(exc))
        if not lockstep:
            continue
        sub = ScenarioCluster(
            signature=cluster.signature,
            members=list(range(len(lockstep))),
            base_topology=cluster.base_topology,
            base=cluster.base,
            topologies=[scenarios[i][0] for _, i in lockstep])
        injections = [scenarios[i][1] for _, i in lockstep]
        solver = _ClusterSolver(case, sub, injections, opts)
        vm, va, iterations, norms, errors, prod_balanced = solver.solve(timing)

        t0 = time.perf_counter()
        statuses = np.stack([t.line_status for t in sub.topologies])
        flows = _batch_line_flows(case, sub, vm, va, statuses)
        pv, pq = solver.pv, solver.pq
        for b, (_, i) in enumerate(lockstep):
            if errors[b]:
                results[i] = (None, errors[b])
                continue
            state = NodeState(vm=vm[b].copy(), va=va[b].copy(), pv_nodes=pv,
                              pq_nodes=pq, slack_node=base_nodes.slack_node)
            results[i] = (PowerFlowSolution(
                state=state, flows=flows[b],
                prod_p_balanced=prod_balanced[b],
                iterations=int(iterations[b]), mismatch_norm=float(norms[b]),
            ), "")
        timing.postprocessing += time.perf_counter() - t0

    timing.total = time.perf_counter() - t_start
    return results, timing
