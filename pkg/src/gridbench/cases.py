"""Case-file ingestion: the native JSON schema and a MATPOWER-style importer.

Native schema (JSON), all impedances in per-unit on ``base_mva``::

    {
      "name": "...",
      "base_mva": 100.0,
      "substations": [{"id": "sub0", "base_kv": 138.0}, ...],
      "lines": [{"id": "L0", "from": "sub0", "to": "sub1",
                 "r": 0.01, "x": 0.1, "b": 0.02, "tap": 1.0}, ...],
      "generators": [{"id": "G0", "substation": "sub0", "p_mw": 100.0,
                      "v_kv": 138.0, "slack": true}, ...],
      "loads": [{"id": "D0", "substation": "sub1", "p_mw": 90.0,
                 "q_mvar": 30.0}, ...],
      "shunts": [{"substation": "sub2", "g_mw": 0.0, "b_mvar": 19.0}, ...]
    }

MATPOWER import reads the ``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen`` and
``mpc.branch`` matrices in the standard column order.  One substation is
created per bus; phase-shifting transformers are rejected, out-of-service
branches and generators are skipped, and nonpositive base voltages are
replaced by ``default_base_kv``.
"""

from __future__ import annotations

import json
import re
from importlib import resources

import numpy as np

from .grid import CaseError, GridCase


class ParseError(ValueError):
    """Raised with a location when a case file cannot be parsed."""


def parse_case(source, name=None, default_base_kv=138.0):
    """Parse a case from a path or raw text (native JSON or MATPOWER .m)."""
    text, inferred = _read(source)
    name = name or inferred
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return parse_native(text, name=name)
    if "mpc." in text or stripped.startswith("function"):
        return parse_matpower(text, name=name, default_base_kv=default_base_kv)
    raise ParseError("unrecognized case format: expected native JSON or MATPOWER text")


def _read(source):
    import os
    s = os.fspath(source) if hasattr(source, "__fspath__") else source
    if isinstance(s, str) and ("\n" in s or s.lstrip().startswith("{")):
        return s, "case"
    with open(s) as fh:
        base = os.path.splitext(os.path.basename(s))[0]
        return fh.read(), base


def _req(record, key, where):
    if key not in record:
        raise ParseError(f"{where}: missing field '{key}'")
    return record[key]


def parse_native(text, name="case"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"native case: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    subs = _req(doc, "substations", "case")
    sub_ids = tuple(_req(s, "id", f"substations[{i}]") for i, s in enumerate(subs))
    if len(set(sub_ids)) != len(sub_ids):
        raise ParseError("duplicate substation ids")
    sub_idx = {sid: i for i, sid in enumerate(sub_ids)}
    base_kv = np.array([float(_req(s, "base_kv", f"substation {s.get('id')}")) for s in subs])

    def sub_of(record, key, where):
        sid = _req(record, key, where)
        if sid not in sub_idx:
            raise ParseError(f"{where}: unknown substation '{sid}'")
        return sub_idx[sid]

    lines = doc.get("lines", [])
    gens = _req(doc, "generators", "case")
    loads = doc.get("loads", [])
    shunts = doc.get("shunts", [])
    try:
        case = GridCase(
            name=doc.get("name", name),
            base_mva=float(_req(doc, "base_mva", "case")),
            substation_ids=sub_ids,
            sub_base_kv=base_kv,
            line_ids=tuple(str(_req(l, "id", f"lines[{i}]")) for i, l in enumerate(lines)),
            line_from=np.array([sub_of(l, "from", f"line {l.get('id')}") for l in lines], dtype=np.int64),
            line_to=np.array([sub_of(l, "to", f"line {l.get('id')}") for l in lines], dtype=np.int64),
            line_r=np.array([float(_req(l, "r", f"line {l.get('id')}")) for l in lines]),
            line_x=np.array([float(_req(l, "x", f"line {l.get('id')}")) for l in lines]),
            line_b=np.array([float(l.get("b", 0.0)) for l in lines]),
            line_tap=np.array([float(l.get("tap", 1.0)) for l in lines]),
            gen_ids=tuple(str(_req(g, "id", f"generators[{i}]")) for i, g in enumerate(gens)),
            gen_sub=np.array([sub_of(g, "substation", f"generator {g.get('id')}") for g in gens], dtype=np.int64),
            gen_p_mw=np.array([float(_req(g, "p_mw", f"generator {g.get('id')}")) for g in gens]),
            gen_v_kv=np.array([float(_req(g, "v_kv", f"generator {g.get('id')}")) for g in gens]),
            gen_is_slack=np.array([bool(g.get("slack", False)) for g in gens], dtype=bool),
            load_ids=tuple(str(_req(d, "id", f"loads[{i}]")) for i, d in enumerate(loads)),
            load_sub=np.array([sub_of(d, "substation", f"load {d.get('id')}") for d in loads], dtype=np.int64),
            load_p_mw=np.array([float(_req(d, "p_mw", f"load {d.get('id')}")) for d in loads]),
            load_q_mvar=np.array([float(d.get("q_mvar", 0.0)) for d in loads]),
            shunt_sub=np.array([sub_of(s, "substation", "shunt") for s in shunts], dtype=np.int64),
            shunt_g_mw=np.array([float(s.get("g_mw", 0.0)) for s in shunts]),
            shunt_b_mvar=np.array([float(s.get("b_mvar", 0.0)) for s in shunts]),
        )
    except CaseError as exc:
        raise ParseError(f"case validation failed: {exc}") from None
    return case


_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([0-9.eE+-]+)\s*;")


def _matpower_tables(text):
    scalars = {m.group(1): float(m.group(2)) for m in _SCALAR_RE.finditer(text)}
    tables = {}
    for m in _MATRIX_RE.finditer(text):
        rows = []
        body = "\n".join(line.split("%")[0] for line in m.group(2).splitlines())
        for lineno, raw in enumerate(body.replace(";", "\n").splitlines()):
            row = raw.strip()
            if not row:
                continue
            try:
                rows.append([float(tok) for tok in row.split()])
            except ValueError:
                raise ParseError(
                    f"mpc.{m.group(1)}: unparseable row '{row}' (row {lineno})") from None
        width = max((len(r) for r in rows), default=0)
        tables[m.group(1)] = np.array([r + [0.0] * (width - len(r)) for r in rows])
    return scalars, tables


def parse_matpower(text, name="case", default_base_kv=138.0):
    scalars, tables = _matpower_tables(text)
    if "baseMVA" not in scalars:
        raise ParseError("MATPOWER case: missing mpc.baseMVA")
    for key in ("bus", "gen", "branch"):
        if key not in tables:
            raise ParseError(f"MATPOWER case: missing mpc.{key}")
    bus, gen, branch = tables["bus"], tables["gen"], tables["branch"]

    bus_ids = bus[:, 0].astype(np.int64)
    bus_idx = {int(b): i for i, b in enumerate(bus_ids)}
    bus_type = bus[:, 1].astype(np.int64)
    base_kv = bus[:, 9].copy()
    base_kv[base_kv <= 0] = default_base_kv

    def to_sub(col, what, row):
        b = int(col)
        if b not in bus_idx:
            raise ParseError(f"{what} row {row}: unknown bus {b}")
        return bus_idx[b]

    # loads: one per bus with nonzero demand
    load_rows = np.flatnonzero((bus[:, 2] != 0) | (bus[:, 3] != 0))
    # shunts: nonzero Gs or Bs
    shunt_rows = np.flatnonzero((bus[:, 4] != 0) | (bus[:, 5] != 0))

    gen_on = gen[:, 7] > 0
    gen = gen[gen_on]
    gen_sub = np.array([to_sub(g[0], "gen", i) for i, g in enumerate(gen)], dtype=np.int64)
    gen_is_slack = bus_type[gen_sub] == 3
    if gen_is_slack.sum() > 1:
        # several generators at the reference bus: keep the first as slack
        first = int(np.flatnonzero(gen_is_slack)[0])
        gen_is_slack = np.zeros(len(gen), dtype=bool)
        gen_is_slack[first] = True

    br_on = branch[:, 10] > 0 if branch.shape[1] > 10 else np.ones(len(branch), dtype=bool)
    branch = branch[br_on]
    if branch.shape[1] > 9 and np.any(branch[:, 9] != 0):
        bad = int(np.flatnonzero(branch[:, 9] != 0)[0])
        raise ParseError(f"branch row {bad}: phase-shifting transformers are not supported")
    line_from = np.array([to_sub(b[0], "branch", i) for i, b in enumerate(branch)], dtype=np.int64)
    line_to = np.array([to_sub(b[1], "branch", i) for i, b in enumerate(branch)], dtype=np.int64)
    tap = branch[:, 8].copy() if branch.shape[1] > 8 else np.ones(len(branch))
    tap[tap == 0] = 1.0

    try:
        case = GridCase(
            name=name,
            base_mva=scalars["baseMVA"],
            substation_ids=tuple(f"sub{int(b)}" for b in bus_ids),
            sub_base_kv=base_kv,
            line_ids=tuple(f"branch{i}_{int(branch[i, 0])}-{int(branch[i, 1])}"
                           for i in range(len(branch))),
            line_from=line_from,
            line_to=line_to,
            line_r=branch[:, 2].copy(),
            line_x=branch[:, 3].copy(),
            line_b=branch[:, 4].copy(),
            line_tap=tap,
            gen_ids=tuple(f"gen{i}_{int(g[0])}" for i, g in enumerate(gen)),
            gen_sub=gen_sub,
            gen_p_mw=gen[:, 1].copy(),
            gen_v_kv=gen[:, 5] * base_kv[gen_sub],
            gen_is_slack=gen_is_slack,
            load_ids=tuple(f"load{int(bus_ids[r])}" for r in load_rows),
            load_sub=load_rows.astype(np.int64),
            load_p_mw=bus[load_rows, 2].copy(),
            load_q_mvar=bus[load_rows, 3].copy(),
            shunt_sub=shunt_rows.astype(np.int64),
            shunt_g_mw=bus[shunt_rows, 4].copy(),
            shunt_b_mvar=bus[shunt_rows, 5].copy(),
        )
    except CaseError as exc:
        raise ParseError(f"case validation failed: {exc}") from None
    return case


def load_bundled(name):
    """Load one of the case files shipped with the package (e.g. 'case118')."""
    pkg = resources.files("gridbench.data")
    for suffix in (".m", ".json"):
        ref = pkg / f"{name}{suffix}"
        if ref.is_file():
            return parse_case(ref.read_text(), name=name)
    raise FileNotFoundError(f"no bundled case named '{name}'")


def two_bus_case(r=0.0, x=0.1, b=0.0, load_p=100.0, load_q=0.0, base_mva=100.0,
                 base_kv=138.0):
    """Minimal two-substation case: slack generator, one line, one load."""
    return GridCase(
        name="two_bus",
        base_mva=base_mva,
        substation_ids=("sub0", "sub1"),
        sub_base_kv=np.array([base_kv, base_kv]),
        line_ids=("L0",),
        line_from=np.array([0]),
        line_to=np.array([1]),
        line_r=np.array([r]),
        line_x=np.array([x]),
        line_b=np.array([b]),
        line_tap=np.array([1.0]),
        gen_ids=("G0",),
        gen_sub=np.array([0]),
        gen_p_mw=np.array([load_p]),
        gen_v_kv=np.array([base_kv]),
        gen_is_slack=np.array([True]),
        load_ids=("D0",),
        load_sub=np.array([1]),
        load_p_mw=np.array([load_p]),
        load_q_mvar=np.array([load_q]),
    )
