"""On-disk layout for datasets and prediction sets.

One directory per split, one ``.npy`` file per column (deterministic bytes,
so regeneration under a fixed seed is file-identical), plus a
``manifest.json``.  Wall-clock fields live under the manifest's
``wallclock`` key and are the only part allowed to differ between
otherwise identical runs.

Prediction exchange uses the same columnar layout restricted to the output
quantities, so externally produced predictions can be scored without
linking against this package.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .scenarios import Dataset, OUTPUT_COLUMNS

INPUT_COLUMNS = ("prod_p", "prod_p_raw", "prod_v", "load_p", "load_q")
TOPOLOGY_COLUMNS = ("line_status", "topo_vect")
PHYSICS_COLUMNS = ("ybus_row", "ybus_col", "ybus_data", "ybus_offsets",
                   "n_nodes", "sbus_data", "sbus_offsets")
PREDICTION_COLUMNS = ("a_or", "a_ex", "p_or", "p_ex", "v_or", "v_ex")
OPTIONAL_PREDICTION_COLUMNS = ("q_or", "q_ex")


class DatasetIOError(OSError):
    pass


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_dataset(ds, outdir, case_path=None, extra_manifest=None):
    os.makedirs(outdir, exist_ok=True)
    for group in (ds.inputs, ds.topology, ds.outputs):
        for name, arr in group.items():
            np.save(os.path.join(outdir, f"{name}.npy"), arr)
    if ds.physics is not None:
        for name, arr in ds.physics.items():
            np.save(os.path.join(outdir, f"{name}.npy"), arr)
    manifest = {
        "format_version": 1,
        "split": ds.split,
        "n_samples": int(ds.n_samples),
        "seeds": ds.seeds,
        "config_sha256": ds.config_digest,
        "case_name": ds.case.name,
        "case_sha256": file_sha256(case_path) if case_path else None,
        "redraws": int(ds.redraws),
        "has_physics": ds.physics is not None,
        "wallclock": {"written_at": time.time()},
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_dataset(path, case):
    def col(name):
        f = os.path.join(path, f"{name}.npy")
        if not os.path.exists(f):
            raise DatasetIOError(f"dataset at {path}: missing column {name}.npy")
        return np.load(f)

    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    physics = None
    if manifest.get("has_physics"):
        physics = {name: col(name) for name in PHYSICS_COLUMNS}
    return Dataset(
        split=manifest["split"], case=case,
        config_digest=manifest.get("config_sha256", ""),
        seeds=manifest.get("seeds", {}),
        inputs={name: col(name) for name in INPUT_COLUMNS},
        topology={name: col(name) for name in TOPOLOGY_COLUMNS},
        outputs={name: col(name) for name in OUTPUT_COLUMNS},
        physics=physics,
        redraws=manifest.get("redraws", 0),
    )


@dataclass
class PredictionSet:
    """Per-sample, per-line predicted quantities aligned to a dataset."""

    values: dict                 # name -> (n, L)
    source: str = ""

    @property
    def n_samples(self):
        return next(iter(self.values.values())).shape[0]

    def has_reactive(self):
        return all(k in self.values for k in OPTIONAL_PREDICTION_COLUMNS)

    def check_against(self, ds):
        want = ds.outputs["a_or"].shape
        for name in PREDICTION_COLUMNS:
            if name not in self.values:
                raise ValueError(f"prediction set is missing '{name}'")
            got = self.values[name].shape
            if got != want:
                raise ValueError(
                    f"prediction '{name}' has shape {got}, dataset expects {want}")
            if not np.all(np.isfinite(self.values[name])):
                raise ValueError(f"prediction '{name}' contains non-finite values")

    @staticmethod
    def from_dataset(ds):
        """The reference outputs themselves, as a prediction set."""
        values = {k: ds.outputs[k].copy()
                  for k in PREDICTION_COLUMNS + OPTIONAL_PREDICTION_COLUMNS}
        return PredictionSet(values=values, source="reference-solver")


def save_predictions(pred, outdir):
    os.makedirs(outdir, exist_ok=True)
    for name, arr in pred.values.items():
        np.save(os.path.join(outdir, f"{name}.npy"), arr)
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump({"format_version": 1, "kind": "predictions",
                   "source": pred.source}, fh, indent=1, sort_keys=True)


def load_predictions(path):
    values = {}
    for name in PREDICTION_COLUMNS:
        f = os.path.join(path, f"{name}.npy")
        if not os.path.exists(f):
            raise DatasetIOError(f"predictions at {path}: missing column {name}.npy")
        values[name] = np.load(f)
    for name in OPTIONAL_PREDICTION_COLUMNS:
        f = os.path.join(path, f"{name}.npy")
        if os.path.exists(f):
            values[name] = np.load(f)
    source = ""
    mf = os.path.join(path, "manifest.json")
    if os.path.exists(mf):
        with open(mf) as fh:
            source = json.load(fh).get("source", "")
    return PredictionSet(values=values, source=source)


def export_solution_tables(case, solution, lines_path, nodes_path):
    """Columnar text export of one solution (line table and node table)."""
    import csv

    f = solution.flows
    with open(lines_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["line_id", "a_or_a", "a_ex_a", "p_or_mw", "p_ex_mw",
                    "q_or_mvar", "q_ex_mvar", "v_or_kv", "v_ex_kv",
                    "theta_or_rad", "theta_ex_rad"])
        for i, lid in enumerate(case.line_ids):
            w.writerow([lid, f.a_or[i], f.a_ex[i], f.p_or[i], f.p_ex[i],
                        f.q_or[i], f.q_ex[i], f.v_or[i], f.v_ex[i],
                        f.theta_or[i], f.theta_ex[i]])
    st = solution.state
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "vm_pu", "va_rad"])
        for i in range(len(st.vm)):
            w.writerow([i, st.vm[i], st.va[i]])
