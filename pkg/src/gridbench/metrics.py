"""Accuracy metrics and the eight physics-compliance measures.

ML accuracy follows the per-quantity mapping: MAPE restricted to the top
10% of ground-truth magnitudes for currents, MAPE over the top 90% for
active powers (dropping the near-zero tail that blows the ratio up), MAE
for voltages.  Quantile cutoffs are taken over the flattened
(sample x line) ground-truth array per quantity.

Physics measures, over a prediction set aligned to a reference dataset:

  p1  share of negative predicted currents (both line ends)
  p2  share of negative predicted voltages
  p3  share of line entries with negative losses p_or + p_ex
  p4  share of disconnected-line entries with any non-null a/p/q
  p5  share of samples whose losses / production ratio leaves the
      configured plausibility window
  p6  mean relative residual of total losses against Prod - Load
  p7  mean relative nodal active-power residual (line flows vs injections)
  p8  mean relative residual of per-line losses against the Joule value
      R * ((a_or + a_ex)/2)^2 in per-unit

Sign checks use a small numerical floor so that exactly-lossless lines
(R = 0) do not count as violations through rounding noise, consistent with
the non-null floor of p4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import index_nodes

NUMERIC_FLOOR = 1e-6   # physical units (A, MW, MVAr)


@dataclass(frozen=True)
class PhysicsTolerances:
    """Tolerance set consumed by the physics measures.

    ``el_range`` is the admissible losses/production window; the remaining
    entries floor the denominators of the relative residuals (per-unit).
    """

    el_range: tuple = (0.005, 0.04)
    gc_tolerance: float = 1e-3
    lc_tolerance: float = 1e-2
    joule_tolerance: float = 1e-2
    p7_floor_pu: float = 1e-3
    joule_literal_form: bool = False

    def as_dict(self):
        return {"EL_range": list(self.el_range), "GC_tolerance": self.gc_tolerance,
                "LC_tolerance": self.lc_tolerance, "JOULE_tolerance": self.joule_tolerance,
                "P7_floor_pu": self.p7_floor_pu,
                "joule_literal_form": self.joule_literal_form}


@dataclass
class MLReport:
    mape90_a_or: float
    mape90_a_ex: float
    mape10_p_or: float
    mape10_p_ex: float
    mae_v_or: float
    mae_v_ex: float
    excluded_zero_truth: int = 0

    def ordered(self):
        """Metric values in the fixed (a_or, a_ex, p_or, p_ex, v_or, v_ex) order."""
        return [self.mape90_a_or, self.mape90_a_ex, self.mape10_p_or,
                self.mape10_p_ex, self.mae_v_or, self.mae_v_ex]

    def as_dict(self):
        return {"MAPE90_a_or": self.mape90_a_or, "MAPE90_a_ex": self.mape90_a_ex,
                "MAPE10_p_or": self.mape10_p_or, "MAPE10_p_ex": self.mape10_p_ex,
                "MAE_v_or": self.mae_v_or, "MAE_v_ex": self.mae_v_ex,
                "excluded_zero_truth": self.excluded_zero_truth}


@dataclass
class PhysicsReport:
    p1: float
    p2: float
    p3: float
    p4: float
    p5: float
    p6: float
    p7: float
    p8: float
    tolerances: PhysicsTolerances = field(default_factory=PhysicsTolerances)

    def ordered(self):
        return [self.p1, self.p2, self.p3, self.p4, self.p5, self.p6, self.p7, self.p8]

    def as_dict(self):
        d = {f"p{i}": v for i, v in enumerate(self.ordered(), start=1)}
        d["tolerances"] = self.tolerances.as_dict()
        return d


def mae(pred, truth):
    pred, truth = _aligned(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def mape(pred, truth):
    """Plain MAPE; zero-truth entries are excluded (count available via
    :func:`mape_with_exclusions`)."""
    value, _ = mape_with_exclusions(pred, truth)
    return value


def mape_with_exclusions(pred, truth):
    pred, truth = _aligned(pred, truth)
    keep = truth != 0
    excluded = int(truth.size - keep.sum())
    if not keep.any():
        raise ValueError("MAPE undefined: all ground-truth entries are zero")
    value = float(np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep])))
    return value, excluded


def mape_top_quantile(pred, truth, q):
    """MAPE restricted to entries with truth >= the (1-q)-quantile of truth.

    q = 0.10 keeps the top decile (used for currents); q = 0.90 keeps
    everything above the bottom decile (used for active powers).
    """
    value, _ = mape_top_quantile_with_exclusions(pred, truth, q)
    return value


def mape_top_quantile_with_exclusions(pred, truth, q):
    pred, truth = _aligned(pred, truth)
    if not 0 < q <= 1:
        raise ValueError("quantile fraction must lie in (0, 1]")
    cutoff = np.quantile(truth, 1.0 - q)
    sel = truth >= cutoff
    if not sel.any():
        raise ValueError("empty selection above the quantile cutoff")
    return mape_with_exclusions(pred[sel], truth[sel])


def _aligned(pred, truth):
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def _mape_magnitude_quantile(pred, truth, q):
    """Signed-truth MAPE over entries whose |truth| clears the (1-q)-quantile
    of |truth| (used for active powers, which carry a flow direction)."""
    pred, truth = _aligned(pred, truth)
    mag = np.abs(truth)
    sel = mag >= np.quantile(mag, 1.0 - q)
    if not sel.any():
        raise ValueError("empty selection above the quantile cutoff")
    return mape_with_exclusions(pred[sel], truth[sel])


def evaluate_ml(pred, truth):
    """Per-quantity accuracy of a PredictionSet against its dataset."""
    pred.check_against(truth)
    out = truth.outputs
    v = pred.values
    a_or, e1 = mape_top_quantile_with_exclusions(v["a_or"], out["a_or"], 0.10)
    a_ex, e2 = mape_top_quantile_with_exclusions(v["a_ex"], out["a_ex"], 0.10)
    p_or, e3 = _mape_magnitude_quantile(v["p_or"], out["p_or"], 0.90)
    p_ex, e4 = _mape_magnitude_quantile(v["p_ex"], out["p_ex"], 0.90)
    return MLReport(
        mape90_a_or=a_or, mape90_a_ex=a_ex,
        mape10_p_or=p_or, mape10_p_ex=p_ex,
        mae_v_or=mae(v["v_or"], out["v_or"]),
        mae_v_ex=mae(v["v_ex"], out["v_ex"]),
        excluded_zero_truth=e1 + e2 + e3 + e4,
    )


def ampere_base(case):
    """Per-end conversion from amperes to per-unit current."""
    i_or = case.base_mva * 1e3 / (np.sqrt(3.0) * case.sub_base_kv[case.line_from])
    i_ex = case.base_mva * 1e3 / (np.sqrt(3.0) * case.sub_base_kv[case.line_to])
    return i_or, i_ex


class _NodeBalanceCache:
    """Per-topology incidence structure for the nodal conservation check."""

    def __init__(self, case):
        self.case = case
        self._cache = {}

    def get(self, ds, i):
        key = (ds.topology["topo_vect"][i].tobytes(),
               ds.topology["line_status"][i].tobytes())
        hit = self._cache.get(key)
        if hit is None:
            topo = ds.topology_at(i)
            nodes = index_nodes(self.case, topo)
            hit = (nodes, topo.line_status.copy())
            self._cache[key] = hit
        return hit


def evaluate_physics(pred, truth, tol=None):
    """The eight physics measures of a PredictionSet against its dataset."""
    if tol is None:
        tol = PhysicsTolerances()
    pred.check_against(truth)
    case = truth.case
    v = pred.values
    status = truth.topology["line_status"]
    n, L = status.shape

    # p1, p2: sign of currents and voltages over all lines, samples, ends
    p1 = float(np.mean([(v["a_or"] < -NUMERIC_FLOOR), (v["a_ex"] < -NUMERIC_FLOOR)]))
    p2 = float(np.mean([(v["v_or"] < -NUMERIC_FLOOR), (v["v_ex"] < -NUMERIC_FLOOR)]))

    # p3: negative per-line losses
    loss = v["p_or"] + v["p_ex"]
    p3 = float(np.mean(loss < -NUMERIC_FLOOR))

    # p4: activity on disconnected lines
    disc = ~status
    if disc.any():
        quantities = [v["a_or"], v["a_ex"], v["p_or"], v["p_ex"]]
        if pred.has_reactive():
            quantities += [v["q_or"], v["q_ex"]]
        nonnull = np.zeros_like(disc)
        for q in quantities:
            nonnull |= np.abs(q) > NUMERIC_FLOOR
        p4 = float(nonnull[disc].mean())
    else:
        p4 = 0.0

    # p5: per-sample losses/production window
    prod = truth.inputs["prod_p"].sum(axis=1)
    total_loss = (loss * status).sum(axis=1)
    ratio = total_loss / np.maximum(prod, 1e-9)
    lo, hi = tol.el_range
    p5 = float(np.mean((ratio < lo) | (ratio > hi)))

    # p6: total losses vs Prod - Load, relative per sample
    load = truth.inputs["load_p"].sum(axis=1)
    target = prod - load
    floor6 = tol.gc_tolerance * case.base_mva
    p6 = float(np.mean(np.abs(target - total_loss) / np.maximum(np.abs(target), floor6)))

    # p7: nodal active-power residuals with predicted line flows
    cache = _NodeBalanceCache(case)
    floor7 = tol.p7_floor_pu * case.base_mva
    vals = np.empty(n)
    for i in range(n):
        nodes, st = cache.get(truth, i)
        inj_mw = np.zeros(nodes.n_nodes)
        np.add.at(inj_mw, nodes.gen_node, truth.inputs["prod_p"][i])
        np.add.at(inj_mw, nodes.load_node, -truth.inputs["load_p"][i])
        flow_sum = np.zeros(nodes.n_nodes)
        on = np.flatnonzero(st)
        np.add.at(flow_sum, nodes.line_or_node[on], v["p_or"][i, on])
        np.add.at(flow_sum, nodes.line_ex_node[on], v["p_ex"][i, on])
        resid = np.abs(inj_mw - flow_sum) / np.maximum(np.abs(inj_mw), floor7)
        vals[i] = resid.mean()
    p7 = float(vals.mean())

    # p8: per-line losses against the Joule value R * a_mean^2 (per-unit),
    # denominator floored at the configured tolerance
    ib_or, ib_ex = ampere_base(case)
    a_mean_pu = 0.5 * (v["a_or"] / ib_or + v["a_ex"] / ib_ex)
    if tol.joule_literal_form:
        joule_mw = case.line_r * a_mean_pu * case.base_mva
    else:
        joule_mw = case.line_r * a_mean_pu**2 * case.base_mva
    floor8 = tol.joule_tolerance * case.base_mva
    rel = np.abs(loss - joule_mw) / np.maximum(np.abs(loss), floor8)
    p8 = float(rel[status].mean()) if status.any() else 0.0

    return PhysicsReport(p1=p1, p2=p2, p3=p3, p4=p4, p5=p5, p6=p6, p7=p7, p8=p8,
                         tolerances=tol)
