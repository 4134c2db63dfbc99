"""Grid data model: cases, topologies, and admittance matrices.

A grid is described by a :class:`GridCase` (static data: substations, lines,
generators, loads, shunts) plus a :class:`Topology` (which busbar every
element sits on, and which lines are in service).  Electrical nodes are
(substation, busbar) pairs that host at least one in-service element;
de-energized busbars are dropped from the node set so the admittance matrix
stays nonsingular.

Conventions:
  * impedances in per-unit on the case MVA base, injections in MW / MVAr,
    voltage bases in kV per substation;
  * every substation has at most two busbars, numbered 1 and 2;
  * per-substation element rosters are ordered: line origin ends (by line
    index), line extremity ends, generators, loads.  ``set_bus`` tuples and
    the exported ``topo_vect`` follow this order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph


class CaseError(ValueError):
    """Raised when case data violates a model invariant."""


class TopologyError(ValueError):
    """Raised for malformed topology actions or vectors."""


class Element:
    """Kinds of roster elements, in roster order."""

    LINE_OR = 0
    LINE_EX = 1
    GEN = 2
    LOAD = 3


@dataclass(frozen=True)
class GridCase:
    """Static description of a grid.  Immutable after construction."""

    name: str
    base_mva: float
    substation_ids: tuple
    sub_base_kv: np.ndarray          # (S,) kV
    line_ids: tuple
    line_from: np.ndarray            # (L,) substation index
    line_to: np.ndarray              # (L,) substation index
    line_r: np.ndarray               # (L,) pu
    line_x: np.ndarray               # (L,) pu
    line_b: np.ndarray               # (L,) pu total charging
    line_tap: np.ndarray             # (L,) ratio, 1.0 = neutral
    gen_ids: tuple
    gen_sub: np.ndarray              # (G,)
    gen_p_mw: np.ndarray             # (G,)
    gen_v_kv: np.ndarray             # (G,)
    gen_is_slack: np.ndarray         # (G,) bool
    load_ids: tuple
    load_sub: np.ndarray             # (D,)
    load_p_mw: np.ndarray            # (D,)
    load_q_mvar: np.ndarray          # (D,)
    shunt_sub: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    shunt_g_mw: np.ndarray = field(default_factory=lambda: np.empty(0))
    shunt_b_mvar: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self._validate()
        object.__setattr__(self, "_rosters", self._build_rosters())
        for arr in (self.sub_base_kv, self.line_from, self.line_to, self.line_r,
                    self.line_x, self.line_b, self.line_tap, self.gen_sub,
                    self.gen_p_mw, self.gen_v_kv, self.gen_is_slack, self.load_sub,
                    self.load_p_mw, self.load_q_mvar, self.shunt_sub,
                    self.shunt_g_mw, self.shunt_b_mvar):
            arr.setflags(write=False)

    # -- sizes ------------------------------------------------------------
    @property
    def n_sub(self):
        return len(self.substation_ids)

    @property
    def n_line(self):
        return len(self.line_ids)

    @property
    def n_gen(self):
        return len(self.gen_ids)

    @property
    def n_load(self):
        return len(self.load_ids)

    @property
    def slack_gen(self):
        return int(np.flatnonzero(self.gen_is_slack)[0])

    def roster(self, sub):
        """Element roster of one substation: list of (kind, element index)."""
        return self._rosters[sub]

    @property
    def rosters(self):
        return self._rosters

    def _build_rosters(self):
        rosters = [[] for _ in range(self.n_sub)]
        for ell in range(self.n_line):
            rosters[self.line_from[ell]].append((Element.LINE_OR, ell))
        for ell in range(self.n_line):
            rosters[self.line_to[ell]].append((Element.LINE_EX, ell))
        for g in range(self.n_gen):
            rosters[self.gen_sub[g]].append((Element.GEN, g))
        for d in range(self.n_load):
            rosters[self.load_sub[d]].append((Element.LOAD, d))
        return tuple(tuple(r) for r in rosters)

    def _validate(self):
        if self.base_mva <= 0:
            raise CaseError("base power must be positive")
        if np.any(self.sub_base_kv <= 0):
            raise CaseError("base voltages must be positive")
        if len(set(self.substation_ids)) != self.n_sub:
            raise CaseError("duplicate substation ids")
        for name, subs in (("line origin", self.line_from), ("line extremity", self.line_to),
                           ("generator", self.gen_sub), ("load", self.load_sub),
                           ("shunt", self.shunt_sub)):
            if subs.size and (subs.min() < 0 or subs.max() >= self.n_sub):
                raise CaseError(f"{name} references a nonexistent substation")
        if np.any(self.line_r < 0):
            raise CaseError("negative series resistance")
        if int(self.gen_is_slack.sum()) != 1:
            raise CaseError(f"exactly one slack generator required, got {int(self.gen_is_slack.sum())}")
        if np.any(self.gen_v_kv <= 0):
            raise CaseError("generator voltage setpoints must be positive")


@dataclass(frozen=True)
class Topology:
    """Busbar assignment of every element plus per-line in-service status."""

    line_status: np.ndarray   # (L,) bool
    line_or_bus: np.ndarray   # (L,) 1 or 2
    line_ex_bus: np.ndarray   # (L,)
    gen_bus: np.ndarray       # (G,)
    load_bus: np.ndarray      # (D,)

    def __post_init__(self):
        for arr in (self.line_status, self.line_or_bus, self.line_ex_bus,
                    self.gen_bus, self.load_bus):
            arr.setflags(write=False)

    @staticmethod
    def default(case):
        """All elements on busbar 1, all lines connected."""
        ones = np.ones
        return Topology(
            line_status=ones(case.n_line, dtype=bool),
            line_or_bus=ones(case.n_line, dtype=np.int8),
            line_ex_bus=ones(case.n_line, dtype=np.int8),
            gen_bus=ones(case.n_gen, dtype=np.int8),
            load_bus=ones(case.n_load, dtype=np.int8),
        )

    def signature(self):
        """Busbar assignment key (line statuses excluded)."""
        return (self.line_or_bus.tobytes(), self.line_ex_bus.tobytes(),
                self.gen_bus.tobytes(), self.load_bus.tobytes())

    def busbar_of(self, kind, idx):
        if kind == Element.LINE_OR:
            return int(self.line_or_bus[idx])
        if kind == Element.LINE_EX:
            return int(self.line_ex_bus[idx])
        if kind == Element.GEN:
            return int(self.gen_bus[idx])
        return int(self.load_bus[idx])

    def topo_vect(self, case):
        """Concatenated busbar indices in roster order (one entry per element)."""
        out = []
        for s in range(case.n_sub):
            for kind, idx in case.roster(s):
                out.append(self.busbar_of(kind, idx))
        return np.asarray(out, dtype=np.int8)

    def disconnected_lines(self):
        return np.flatnonzero(~self.line_status)


@dataclass(frozen=True)
class SetBusAction:
    """Reassign one substation's elements to busbars, in roster order."""

    substation: int
    busbars: tuple


@dataclass(frozen=True)
class DisconnectLineAction:
    line: int


@dataclass(frozen=True)
class ReconnectLineAction:
    line: int


def apply_topology_action(case, base, action):
    """Return a new Topology with one action applied; ``base`` is untouched."""
    if isinstance(action, SetBusAction):
        s = action.substation
        if not 0 <= s < case.n_sub:
            raise TopologyError(f"unknown substation index {s}")
        roster = case.roster(s)
        if len(action.busbars) != len(roster):
            raise TopologyError(
                f"set_bus tuple of length {len(action.busbars)} does not match "
                f"the {len(roster)} elements of substation {case.substation_ids[s]}")
        if any(b not in (1, 2) for b in action.busbars):
            raise TopologyError("busbar indices must be 1 or 2")
        arrays = dict(
            line_status=base.line_status.copy(),
            line_or_bus=base.line_or_bus.copy(),
            line_ex_bus=base.line_ex_bus.copy(),
            gen_bus=base.gen_bus.copy(),
            load_bus=base.load_bus.copy(),
        )
        names = {Element.LINE_OR: "line_or_bus", Element.LINE_EX: "line_ex_bus",
                 Element.GEN: "gen_bus", Element.LOAD: "load_bus"}
        for (kind, idx), b in zip(roster, action.busbars):
            arrays[names[kind]][idx] = b
        return Topology(**arrays)
    if isinstance(action, (DisconnectLineAction, ReconnectLineAction)):
        ell = action.line
        if not 0 <= ell < case.n_line:
            raise TopologyError(f"unknown line index {ell}")
        status = base.line_status.copy()
        status[ell] = isinstance(action, ReconnectLineAction)
        return Topology(line_status=status, line_or_bus=base.line_or_bus.copy(),
                        line_ex_bus=base.line_ex_bus.copy(), gen_bus=base.gen_bus.copy(),
                        load_bus=base.load_bus.copy())
    raise TopologyError(f"unsupported action type {type(action).__name__}")


@dataclass(frozen=True)
class NodeMap:
    """Electrical node set induced by a topology.

    Nodes are the (substation, busbar) pairs hosting at least one in-service
    element (ends of connected lines, generators, loads).  Ends of
    disconnected lines map to -1 when their busbar hosts nothing else.
    """

    n_nodes: int
    node_sub: np.ndarray      # (N,)
    node_busbar: np.ndarray   # (N,)
    line_or_node: np.ndarray  # (L,) node id or -1
    line_ex_node: np.ndarray
    gen_node: np.ndarray      # (G,)
    load_node: np.ndarray     # (D,)
    shunt_node: np.ndarray
    slack_node: int

    def key(self):
        return (self.node_sub.tobytes(), self.node_busbar.tobytes())


def index_nodes(case, topo):
    """Build the NodeMap for (case, topo)."""
    on = topo.line_status
    # pair key: 4*sub + busbar is monotone in (sub, busbar)
    hosted = np.concatenate([
        4 * case.line_from[on] + topo.line_or_bus[on],
        4 * case.line_to[on] + topo.line_ex_bus[on],
        4 * case.gen_sub + topo.gen_bus,
        4 * case.load_sub + topo.load_bus,
    ])
    keys = np.unique(hosted)

    def lookup(subs, buses):
        q = 4 * np.asarray(subs, dtype=np.int64) + np.asarray(buses, dtype=np.int64)
        pos = np.searchsorted(keys, q)
        pos_c = np.clip(pos, 0, len(keys) - 1)
        found = keys[pos_c] == q
        return np.where(found, pos_c, -1).astype(np.int64)

    gen_node = lookup(case.gen_sub, topo.gen_bus)
    shunt1 = lookup(case.shunt_sub, np.ones(len(case.shunt_sub), dtype=np.int64))
    shunt2 = lookup(case.shunt_sub, np.full(len(case.shunt_sub), 2, dtype=np.int64))
    return NodeMap(
        n_nodes=len(keys),
        node_sub=(keys // 4).astype(np.int64),
        node_busbar=(keys % 4).astype(np.int8),
        line_or_node=lookup(case.line_from, topo.line_or_bus),
        line_ex_node=lookup(case.line_to, topo.line_ex_bus),
        gen_node=gen_node,
        load_node=lookup(case.load_sub, topo.load_bus),
        # shunts stay on busbar 1 of their substation (they are not part of
        # the switchable roster); fall back to busbar 2 if 1 is de-energized
        shunt_node=np.where(shunt1 >= 0, shunt1, shunt2),
        slack_node=int(gen_node[case.slack_gen]),
    )


@dataclass(frozen=True)
class ValidationVerdict:
    ok: bool
    reason: str = ""

    def __bool__(self):
        return self.ok


def validate_topology(case, topo):
    """Accept iff the energized graph is connected and the slack is energized.

    Every node (including pure junction busbars) must reach the slack node
    through in-service lines; otherwise part of the grid is islanded.
    """
    if topo.line_status.shape != (case.n_line,):
        return ValidationVerdict(False, "line status vector has wrong length")
    nodes = index_nodes(case, topo)
    if nodes.n_nodes == 0:
        return ValidationVerdict(False, "no energized nodes")
    if nodes.slack_node < 0:
        return ValidationVerdict(False, "slack generator is not energized")
    on = topo.line_status
    k, m = nodes.line_or_node[on], nodes.line_ex_node[on]
    graph = sp.coo_matrix((np.ones(len(k)), (k, m)),
                          shape=(nodes.n_nodes, nodes.n_nodes))
    _, labels = csgraph.connected_components(graph, directed=False)
    if np.any(labels != labels[nodes.slack_node]):
        bad = int(np.flatnonzero(labels != labels[nodes.slack_node])[0])
        sub = case.substation_ids[nodes.node_sub[bad]]
        return ValidationVerdict(
            False, f"node ({sub}, busbar {nodes.node_busbar[bad]}) is islanded from the slack")
    return ValidationVerdict(True)


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Sparse complex nodal admittance matrix for one topology."""

    y: sp.csr_matrix
    nodes: NodeMap

    @property
    def n_nodes(self):
        return self.nodes.n_nodes


def line_series_admittance(case):
    """Per-line series admittance y = 1/(R + jX)."""
    z = case.line_r + 1j * case.line_x
    if np.any(z == 0):
        bad = int(np.flatnonzero(z == 0)[0])
        raise CaseError(f"line {case.line_ids[bad]} has zero impedance (R = X = 0)")
    return 1.0 / z


def _line_stamp(case, ell, ys):
    """The four admittance contributions of one connected line.

    Returns (y_oo, y_oe, y_eo, y_ee): origin/extremity diagonal and
    off-diagonal stamps for the pi model with an off-nominal tap on the
    origin side.
    """
    ysh = 0.5j * case.line_b[ell]
    tau = case.line_tap[ell]
    return ((ys + ysh) / tau**2, -ys / tau, -ys / tau, ys + ysh)


def build_ybus(case, topo, nodes=None):
    """Assemble the admittance matrix of (case, topo).

    Connected lines stamp the pi model: series admittance plus half the
    charging on each diagonal, minus the series admittance off-diagonal.
    Substation shunts add (g + jb)/base to their node's diagonal.
    """
    if nodes is None:
        nodes = index_nodes(case, topo)
    on = np.flatnonzero(topo.line_status)
    ys = line_series_admittance(case)[on]
    ysh = 0.5j * case.line_b[on]
    tau = case.line_tap[on]
    k = nodes.line_or_node[on]
    m = nodes.line_ex_node[on]
    sh = nodes.shunt_node[nodes.shunt_node >= 0]
    shv = ((case.shunt_g_mw + 1j * case.shunt_b_mvar) / case.base_mva)[nodes.shunt_node >= 0]
    diag = np.arange(nodes.n_nodes)
    rows = np.concatenate([k, k, m, m, sh, diag])
    cols = np.concatenate([k, m, k, m, sh, diag])
    # explicit diagonal zeros keep every diagonal entry structurally present
    vals = np.concatenate([(ys + ysh) / tau**2, -ys / tau, -ys / tau, ys + ysh,
                           shv, np.zeros(nodes.n_nodes, dtype=np.complex128)])
    y = sp.coo_matrix((vals, (rows, cols)),
                      shape=(nodes.n_nodes, nodes.n_nodes), dtype=np.complex128).tocsr()
    return AdmittanceMatrix(y=y, nodes=nodes)
