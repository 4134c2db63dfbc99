"""Surrogate contract, a linearized baseline, and hard-constraint repair.

Every evaluated model implements :class:`Surrogate`: ``fit`` on a training
dataset, then a deterministic ``predict`` over an input batch producing the
per-line output columns.  Externally trained models bypass this module by
exchanging prediction files in the dataset's columnar format.

Hard-constraint repair enforces, after the fact, the two structural
properties cheap to guarantee exactly: zeroed quantities on disconnected
lines, and nodal active-power conservation via the Euclidean projection of
the flattened (p_or, p_ex) vector onto the affine subspace
``{y : A y = b}``:

    y_proj = y - A^T (A A^T)^(-1) (A y - b)

with one conservation row per energized node.  Rows with no in-service
incident line and zero injection are dropped (trivially satisfied); the
factorization of ``A A^T`` is cached per topology so repeated samples on
one grid layout reuse it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .dataset_io import PredictionSet
from .grid import index_nodes
from .powerflow import dc_power_flow, nodal_injections


class Surrogate:
    """Contract for evaluated models.

    ``consumes`` names the input groups the model reads (any of
    "injections", "topology", "physics").  ``predict`` must be
    deterministic once fitted and must not mutate its inputs.
    """

    name = "surrogate"
    consumes = ("injections", "topology")

    def fit(self, train):
        raise NotImplementedError

    def predict(self, batch):
        """batch: a Dataset-like object with inputs and topology groups."""
        raise NotImplementedError

    def timed_predict(self, batch):
        t0 = time.perf_counter()
        pred = self.predict(batch)
        return pred, time.perf_counter() - t0


class DcBaseline(Surrogate):
    """Physics-only reference point: linearized flows, averaged voltages.

    Active flows come from a DC power flow per sample topology; voltages
    are predicted as the per-line-end training means; currents are derived
    from the predicted powers and mean voltages.  No learning beyond the
    voltage averages.
    """

    name = "dc-baseline"
    consumes = ("injections", "topology")

    def __init__(self):
        self.v_or_mean = None
        self.v_ex_mean = None

    def fit(self, train):
        self.v_or_mean = train.outputs["v_or"].mean(axis=0)
        self.v_ex_mean = train.outputs["v_ex"].mean(axis=0)
        return self

    def predict(self, batch):
        if self.v_or_mean is None:
            raise RuntimeError("predict before fit")
        case = batch.case
        n, L = batch.topology["line_status"].shape
        out = {k: np.zeros((n, L)) for k in
               ("a_or", "a_ex", "p_or", "p_ex", "q_or", "q_ex", "v_or", "v_ex")}
        out["v_or"][:] = self.v_or_mean
        out["v_ex"][:] = self.v_ex_mean
        for i in range(n):
            topo = batch.topology_at(i)
            inj = batch.injections_at(i)
            nodes = index_nodes(case, topo)
            va = dc_power_flow(case, topo, inj, nodes=nodes)
            on = np.flatnonzero(topo.line_status)
            k, m = nodes.line_or_node[on], nodes.line_ex_node[on]
            b = 1.0 / (case.line_x[on] * case.line_tap[on])
            p = b * (va[k] - va[m]) * case.base_mva
            out["p_or"][i, on] = p
            out["p_ex"][i, on] = -p
        # currents from |p| and the mean end voltages (q is zero in the
        # linearized model)
        for end, vmean in (("or", self.v_or_mean), ("ex", self.v_ex_mean)):
            v_kv = np.maximum(vmean, 1e-6)
            out[f"a_{end}"] = np.abs(out[f"p_{end}"]) * 1e3 / (np.sqrt(3.0) * v_kv)
        mask = ~batch.topology["line_status"]
        for q in ("a_or", "a_ex", "p_or", "p_ex", "q_or", "q_ex"):
            out[q][mask] = 0.0
        return PredictionSet(values=out, source=self.name)


@dataclass
class LinearConstraintSystem:
    """Nodal conservation rows over the flattened (p_or, p_ex) layout, pu."""

    a: sp.csr_matrix          # (rows, 2 L)
    b: np.ndarray             # (rows,)
    row_nodes: np.ndarray     # node id per row
    _cho: object = None

    @property
    def n_rows(self):
        return self.a.shape[0]

    def cho_factor(self):
        if self._cho is None:
            gram = (self.a @ self.a.T).toarray()
            try:
                self._cho = scipy.linalg.cho_factor(gram)
            except scipy.linalg.LinAlgError as exc:
                raise ValueError(f"constraint system is rank deficient: {exc}") from None
        return self._cho


def build_conservation_constraints(case, topo, inj):
    """One active-power balance row per energized node.

    Row k states: the sum of predicted flows entering the in-service lines
    at node k equals the node's net injection (per-unit).  Nodes with no
    in-service line and no injection are trivially satisfied and dropped;
    an injection at such a node means an islanded topology and is rejected.
    """
    nodes = index_nodes(case, topo)
    L = case.n_line
    on = np.flatnonzero(topo.line_status)
    rows = np.concatenate([nodes.line_or_node[on], nodes.line_ex_node[on]])
    cols = np.concatenate([on, on + L])
    a_full = sp.coo_matrix((np.ones(len(cols)), (rows, cols)),
                           shape=(nodes.n_nodes, 2 * L)).tocsr()
    b_full = nodal_injections(case, nodes, inj).real

    degree = np.asarray(a_full.sum(axis=1)).ravel()
    empty = degree == 0
    if np.any(empty & (np.abs(b_full) > 1e-9)):
        raise ValueError("node with injection but no in-service line (islanded topology)")
    keep = np.flatnonzero(~empty)
    return LinearConstraintSystem(a=a_full[keep], b=b_full[keep],
                                  row_nodes=keep.astype(np.int64))


def kkt_project(y, system):
    """Euclidean projection of y onto {y : A y = b}."""
    y = np.asarray(y, dtype=float)
    resid = system.a @ y - system.b
    lam = scipy.linalg.cho_solve(system.cho_factor(), resid)
    return y - system.a.T @ lam


def apply_hard_zero_mask(pred, line_status):
    """Zero a/p/q on disconnected lines; voltages stay untouched."""
    mask = ~np.asarray(line_status, dtype=bool)
    values = {k: v.copy() for k, v in pred.values.items()}
    for q in ("a_or", "a_ex", "p_or", "p_ex", "q_or", "q_ex"):
        if q in values:
            values[q][mask] = 0.0
    return PredictionSet(values=values, source=pred.source)


def project_predictions(pred, truth, remask=True):
    """Mask, project every sample onto its conservation hyperplane, re-mask.

    Factorizations are cached per distinct topology (signature plus line
    statuses), so datasets with repeated layouts pay one factorization per
    layout.  Projection acts on the active powers only.
    """
    case = truth.case
    pred = apply_hard_zero_mask(pred, truth.topology["line_status"])
    values = {k: v.copy() for k, v in pred.values.items()}
    base = case.base_mva
    cache = {}
    n, L = values["p_or"].shape
    for i in range(n):
        key = (truth.topology["topo_vect"][i].tobytes(),
               truth.topology["line_status"][i].tobytes())
        sys_i = cache.get(key)
        topo = truth.topology_at(i)
        if sys_i is None:
            sys_i = build_conservation_constraints(case, topo, truth.injections_at(i))
            cache[key] = sys_i
        else:
            nodes = index_nodes(case, topo)
            sys_i = LinearConstraintSystem(
                a=sys_i.a,
                b=nodal_injections(case, nodes, truth.injections_at(i)).real[sys_i.row_nodes],
                row_nodes=sys_i.row_nodes, _cho=sys_i._cho)
        y = np.concatenate([values["p_or"][i], values["p_ex"][i]]) / base
        proj = kkt_project(y, sys_i) * base
        values["p_or"][i] = proj[:L]
        values["p_ex"][i] = proj[L:]
    out = PredictionSet(values=values, source=pred.source + "+projected")
    if remask:
        out = apply_hard_zero_mask(out, truth.topology["line_status"])
    return out
