"""Scenario sampling and dataset generation.

Each sample is drawn in two independent stages:

* a *reference* stage that applies busbar reassignment actions from a
  configured list (skipped with probability ``prob_do_nothing``, action
  count drawn from ``prob_depth``, combinations touching one substation
  twice are rejected);
* a *scenario* stage that draws the per-split variation, line
  disconnections for every split here (again gated by its own
  ``prob_do_nothing``, count from ``prob_depth``, at most ``max_disc``
  lines, all within a configured neighborhood when ``same_region`` is set).

Topologies failing validation are redrawn with a capped attempt budget.
Two RNG streams per split keep injections (env seed) and topology actions
(actor seed) independently reproducible.

Injection profiles scale the case's nominal loads by correlated log-normal
multipliers (one global factor, one per-load factor) and dispatch every
generator proportionally to the drawn total load; the slack entry is
re-estimated after the solve.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csgraph

from .batch import BatchOptions, batch_solve
from .grid import (DisconnectLineAction, Element, SetBusAction, Topology,
                   apply_topology_action, validate_topology)
from .powerflow import Injections, SolverOptions

SPLITS = ("train", "val", "test", "test_ood")


class ConfigError(ValueError):
    """Raised with the offending key path when a configuration is invalid."""


class GenerationError(RuntimeError):
    """Raised when sampling cannot satisfy the configured constraints."""


@dataclass(frozen=True)
class StageParams:
    """One sampling stage (reference or per-split scenario)."""

    prob_depth: tuple
    prob_type: tuple          # (busbar action, line disconnection)
    prob_do_nothing: float
    max_disc: int
    same_region: bool = False

    def validate(self, where):
        for name, vec in (("prob_depth", self.prob_depth), ("prob_type", self.prob_type)):
            if len(vec) == 0 or any(p < 0 for p in vec):
                raise ConfigError(f"{where}.{name}: probabilities must be nonnegative")
            if abs(sum(vec) - 1.0) > 1e-9:
                raise ConfigError(f"{where}.{name}: probabilities must sum to 1")
        if len(self.prob_type) != 2:
            raise ConfigError(f"{where}.prob_type: expected (busbar, disconnection) pair")
        if not 0.0 <= self.prob_do_nothing <= 1.0:
            raise ConfigError(f"{where}.prob_do_nothing: must be within [0, 1]")
        if self.max_disc < 0:
            raise ConfigError(f"{where}.max_disc: must be nonnegative")


@dataclass(frozen=True)
class InjectionParams:
    sigma_global: float = 0.02
    sigma_load: float = 0.02
    scale: float = 0.70

    def validate(self):
        if self.sigma_global < 0 or self.sigma_load < 0 or self.scale <= 0:
            raise ConfigError("injection_params: sigmas must be >= 0 and scale > 0")


@dataclass
class ScenarioConfig:
    reference: StageParams
    reference_actions: list      # SetBusAction specs
    splits: dict                 # split -> StageParams
    n_samples: dict              # split -> int
    seeds: dict                  # Appendix-style names, e.g. train_env_seed
    injections: InjectionParams = field(default_factory=InjectionParams)
    region_distance: int = 1     # max substation-graph distance between lines
    max_attempts: int = 100
    store_physics: bool = False

    def validate(self):
        self.reference.validate("reference_args")
        for split, stage in self.splits.items():
            if split not in SPLITS:
                raise ConfigError(f"unknown split '{split}'")
            stage.validate(split)
            draws_lines = stage.prob_type[1] > 0 and stage.prob_do_nothing < 1.0
            if draws_lines and len(stage.prob_depth) > stage.max_disc:
                raise ConfigError(
                    f"{split}.prob_depth: allows depth {len(stage.prob_depth)} "
                    f"above max_disc {stage.max_disc}")
        for split in self.splits:
            if self.n_samples.get(split, 0) <= 0:
                raise ConfigError(f"samples.{split}: must be positive")
            for kind in ("env", "actor"):
                if self.seed_for(split, kind) is None:
                    raise ConfigError(f"benchmark_seeds: missing {split} {kind} seed")
        self.injections.validate()
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be at least 1")

    def seed_for(self, split, kind):
        for key in (f"{split}_{kind}_seed", f"{split}_topo_{kind}_seed"):
            if key in self.seeds:
                return int(self.seeds[key])
        return None

    def digest(self):
        blob = json.dumps(config_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _stage_from_dict(d, where):
    return StageParams(
        prob_depth=tuple(d.get("prob_depth", (1.0,))),
        prob_type=tuple(d.get("prob_type", (0.0, 1.0))),
        prob_do_nothing=float(d.get("prob_do_nothing", 0.0)),
        max_disc=int(d.get("max_disc", 0)),
        same_region=bool(d.get("same_region", False)),
    )


def _actions_from_list(raw):
    actions = []
    for i, item in enumerate(raw):
        if "set_bus" not in item or "substations_id" not in item["set_bus"]:
            raise ConfigError(f"reference_args.topo_actions[{i}]: expected a set_bus action")
        for sub, busbars in item["set_bus"]["substations_id"]:
            actions.append(SetBusAction(substation=int(sub), busbars=tuple(int(b) for b in busbars)))
    return actions


def config_from_dict(doc):
    ref_raw = doc.get("reference_args", {})
    splits_raw = {s: doc[s] for s in SPLITS if s in doc}
    if not splits_raw:
        raise ConfigError("config defines no splits")
    cfg = ScenarioConfig(
        reference=_stage_from_dict(ref_raw, "reference_args"),
        reference_actions=_actions_from_list(ref_raw.get("topo_actions", [])),
        splits={s: _stage_from_dict(d, s) for s, d in splits_raw.items()},
        n_samples={s: int(n) for s, n in doc.get("samples", {}).items()},
        seeds=dict(doc.get("benchmark_seeds", {})),
        injections=InjectionParams(**doc.get("injection_params", {})),
        region_distance=int(doc.get("region_distance", 1)),
        max_attempts=int(doc.get("max_attempts", 100)),
        store_physics=bool(doc.get("store_physics", False)),
    )
    cfg.validate()
    return cfg


def config_to_dict(cfg):
    def stage(st):
        return {"prob_depth": list(st.prob_depth), "prob_type": list(st.prob_type),
                "prob_do_nothing": st.prob_do_nothing, "max_disc": st.max_disc,
                "same_region": st.same_region}

    return {
        "reference_args": {
            "topo_actions": [
                {"set_bus": {"substations_id": [[a.substation, list(a.busbars)]]}}
                for a in cfg.reference_actions],
            **stage(cfg.reference)},
        **{s: stage(st) for s, st in cfg.splits.items()},
        "samples": dict(cfg.n_samples),
        "benchmark_seeds": dict(cfg.seeds),
        "injection_params": {"sigma_global": cfg.injections.sigma_global,
                             "sigma_load": cfg.injections.sigma_load,
                             "scale": cfg.injections.scale},
        "region_distance": cfg.region_distance,
        "max_attempts": cfg.max_attempts,
        "store_physics": cfg.store_physics,
    }


def load_config(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(doc)


@dataclass
class Scenario:
    reference_actions: tuple     # indices into cfg.reference_actions
    disconnected: tuple          # line indices
    topology: Topology
    injections: Injections


def line_distance_table(case):
    """Substation-graph distance between every pair of lines.

    Distance 0 means the lines share a substation; 1 means some endpoints
    are adjacent.
    """
    graph = coo_matrix((np.ones(case.n_line),
                        (case.line_from, case.line_to)),
                       shape=(case.n_sub, case.n_sub))
    d = csgraph.shortest_path(graph, directed=False, unweighted=True)
    ends = np.stack([case.line_from, case.line_to])
    best = np.full((case.n_line, case.n_line), np.inf)
    for a in range(2):
        for b in range(2):
            best = np.minimum(best, d[np.ix_(ends[a], ends[b])])
    return best


def _draw_depth(rng, probs):
    return int(rng.choice(len(probs), p=np.asarray(probs) / np.sum(probs))) + 1


class ScenarioSampler:
    """Draws validated topologies for one split."""

    def __init__(self, case, cfg, split):
        if split not in cfg.splits:
            raise ConfigError(f"split '{split}' not configured")
        self.case = case
        self.cfg = cfg
        self.split = split
        self.stage = cfg.splits[split]
        self.base = Topology.default(case)
        self._line_dist = None

    def line_dist(self):
        if self._line_dist is None:
            self._line_dist = line_distance_table(self.case)
        return self._line_dist

    def _reference_stage(self, rng):
        """Draw reference actions; combinations touching one substation twice
        or invalidating the grid are rejected and redrawn."""
        ref = self.cfg.reference
        if not self.cfg.reference_actions or rng.random() < ref.prob_do_nothing:
            return (), self.base
        kind = int(rng.choice(2, p=np.asarray(ref.prob_type)))
        if kind != 0:
            return (), self.base
        depth = min(_draw_depth(rng, ref.prob_depth), len(self.cfg.reference_actions))
        for _ in range(self.cfg.max_attempts):
            combo = tuple(sorted(rng.choice(len(self.cfg.reference_actions),
                                            size=depth, replace=False).tolist()))
            subs = [self.cfg.reference_actions[i].substation for i in combo]
            if len(set(subs)) != len(subs):
                continue
            topo = self.base
            for i in combo:
                topo = apply_topology_action(self.case, topo, self.cfg.reference_actions[i])
            if validate_topology(self.case, topo):
                return combo, topo
        raise GenerationError("reference stage: no legal action combination found")

    def _scenario_stage(self, rng, topo):
        """Draw the split's own variation; invalid line sets are redrawn while
        the do-nothing decision and depth stand."""
        st = self.stage
        if st.max_disc == 0 or rng.random() < st.prob_do_nothing:
            return (), topo
        kind = int(rng.choice(2, p=np.asarray(st.prob_type)))
        if kind == 0:
            return (), topo   # busbar-type scenario stages reuse reference actions
        depth = min(_draw_depth(rng, st.prob_depth), st.max_disc)
        ld = self.line_dist() if (st.same_region and depth > 1) else None
        for _ in range(self.cfg.max_attempts):
            lines = np.sort(rng.choice(self.case.n_line, size=depth, replace=False))
            if ld is not None:
                pairs_ok = all(ld[a, b] <= self.cfg.region_distance
                               for i, a in enumerate(lines) for b in lines[i + 1:])
                if not pairs_ok:
                    continue
            cand = _disconnect(self.case, topo, lines)
            if validate_topology(self.case, cand):
                return tuple(int(l) for l in lines), cand
        raise GenerationError(
            f"{self.split}: no legal disconnection set of depth {depth} found "
            f"(region constraint too tight?)")

    def sample(self, rng):
        """One validated topology draw (reference actions + disconnections)."""
        picked, topo = self._reference_stage(rng)
        lines, topo = self._scenario_stage(rng, topo)
        return picked, lines, topo


def _disconnect(case, topo, lines):
    status = topo.line_status.copy()
    status[np.asarray(lines, dtype=np.int64)] = False
    return Topology(line_status=status, line_or_bus=topo.line_or_bus,
                    line_ex_bus=topo.line_ex_bus, gen_bus=topo.gen_bus,
                    load_bus=topo.load_bus)


def draw_injections(rng, case, params):
    """Correlated log-normal load scaling with proportional dispatch."""
    z = rng.standard_normal(1 + case.n_load)
    g = params.scale * np.exp(params.sigma_global * z[0] - 0.5 * params.sigma_global**2)
    m = np.exp(params.sigma_load * z[1:] - 0.5 * params.sigma_load**2)
    load_p = case.load_p_mw * g * m
    load_q = case.load_q_mvar * g * m
    ratio = load_p.sum() / max(case.load_p_mw.sum(), 1e-9)
    return Injections(prod_p=case.gen_p_mw * ratio, prod_v=case.gen_v_kv.copy(),
                      load_p=load_p, load_q=load_q)


def sample_scenario(rng_env, rng_actor, case, cfg, split, sampler=None):
    """Draw one Scenario (injections from the env stream, topology from actor)."""
    if sampler is None:
        sampler = ScenarioSampler(case, cfg, split)
    inj = draw_injections(rng_env, case, cfg.injections)
    picked, lines, topo = sampler.sample(rng_actor)
    return Scenario(reference_actions=picked, disconnected=lines,
                    topology=topo, injections=inj)


@dataclass
class Dataset:
    """One generated split: inputs, topology descriptors, solver outputs."""

    split: str
    case: object
    config_digest: str
    seeds: dict
    inputs: dict          # prod_p (re-estimated), prod_p_raw, prod_v, load_p, load_q
    topology: dict        # line_status (n, L) bool, topo_vect (n, T) int8
    outputs: dict         # a_or ... theta_ex, (n, L)
    physics: dict | None = None
    redraws: int = 0

    @property
    def n_samples(self):
        return self.inputs["prod_p"].shape[0]

    def topology_at(self, i):
        return topology_from_vect(self.case, self.topology["topo_vect"][i],
                                  self.topology["line_status"][i])

    def injections_at(self, i):
        return Injections(prod_p=self.inputs["prod_p"][i],
                          prod_v=self.inputs["prod_v"][i],
                          load_p=self.inputs["load_p"][i],
                          load_q=self.inputs["load_q"][i])


OUTPUT_COLUMNS = ("a_or", "a_ex", "p_or", "p_ex", "q_or", "q_ex",
                  "v_or", "v_ex", "theta_or", "theta_ex")


def topo_vect_layout(case):
    """(kind, index) per topo_vect slot, concatenated roster order."""
    layout = []
    for s in range(case.n_sub):
        layout.extend(case.roster(s))
    return layout


def topology_from_vect(case, topo_vect, line_status):
    arrays = {
        Element.LINE_OR: np.ones(case.n_line, dtype=np.int8),
        Element.LINE_EX: np.ones(case.n_line, dtype=np.int8),
        Element.GEN: np.ones(case.n_gen, dtype=np.int8),
        Element.LOAD: np.ones(case.n_load, dtype=np.int8),
    }
    for slot, (kind, idx) in zip(topo_vect, topo_vect_layout(case)):
        arrays[kind][idx] = slot
    return Topology(line_status=np.asarray(line_status, dtype=bool).copy(),
                    line_or_bus=arrays[Element.LINE_OR],
                    line_ex_bus=arrays[Element.LINE_EX],
                    gen_bus=arrays[Element.GEN],
                    load_bus=arrays[Element.LOAD])


def generate_dataset(case, cfg, split, solver_options=None, jobs=None):
    """Draw, solve, and assemble one split; deterministic given (seed, cfg, case).

    Samples whose power flow fails to converge are redrawn from the
    continuing RNG streams; the redraw count is reported on the dataset.
    """
    cfg.validate()
    if solver_options is None:
        solver_options = SolverOptions()
    n = cfg.n_samples[split]
    rng_env = np.random.default_rng(cfg.seed_for(split, "env"))
    rng_actor = np.random.default_rng(cfg.seed_for(split, "actor"))
    sampler = ScenarioSampler(case, cfg, split)

    scenarios = [sample_scenario(rng_env, rng_actor, case, cfg, split, sampler)
                 for _ in range(n)]
    opts = BatchOptions(solver=solver_options, jobs=jobs)
    solutions = [None] * n
    pending = list(range(n))
    redraws = 0
    for _ in range(cfg.max_attempts):
        batch = [(scenarios[i].topology, scenarios[i].injections) for i in pending]
        results, _ = batch_solve(case, batch, opts)
        failed = []
        for i, (sol, reason) in zip(pending, results):
            if sol is None:
                failed.append(i)
            else:
                solutions[i] = sol
        if not failed:
            break
        redraws += len(failed)
        for i in failed:
            scenarios[i] = sample_scenario(rng_env, rng_actor, case, cfg, split, sampler)
        pending = failed
    else:
        raise GenerationError(
            f"{split}: samples kept failing to solve after {cfg.max_attempts} redraw rounds")

    L, G, D = case.n_line, case.n_gen, case.n_load
    inputs = {
        "prod_p": np.stack([s.prod_p_balanced for s in solutions]),
        "prod_p_raw": np.stack([sc.injections.prod_p for sc in scenarios]),
        "prod_v": np.stack([sc.injections.prod_v for sc in scenarios]),
        "load_p": np.stack([sc.injections.load_p for sc in scenarios]),
        "load_q": np.stack([sc.injections.load_q for sc in scenarios]),
    }
    topology = {
        "line_status": np.stack([sc.topology.line_status for sc in scenarios]),
        "topo_vect": np.stack([sc.topology.topo_vect(case) for sc in scenarios]),
    }
    outputs = {col: np.stack([getattr(s.flows, col) for s in solutions])
               for col in OUTPUT_COLUMNS}
    physics = None
    if cfg.store_physics:
        physics = _pack_physics(case, scenarios, solutions)
    return Dataset(split=split, case=case, config_digest=cfg.digest(),
                   seeds={"env": cfg.seed_for(split, "env"),
                          "actor": cfg.seed_for(split, "actor")},
                   inputs=inputs, topology=topology, outputs=outputs,
                   physics=physics, redraws=redraws)


def _pack_physics(case, scenarios, solutions):
    """Sparse per-sample admittance matrices and nodal power vectors."""
    from .grid import build_ybus
    rows, cols, vals, offsets, nnodes = [], [], [], [0], []
    sbus_vals, sbus_offsets = [], [0]
    for sc in scenarios:
        adm = build_ybus(case, sc.topology)
        coo = adm.y.tocoo()
        rows.append(coo.row.astype(np.int32))
        cols.append(coo.col.astype(np.int32))
        vals.append(coo.data)
        offsets.append(offsets[-1] + coo.nnz)
        nnodes.append(adm.n_nodes)
    for sc, sol in zip(scenarios, solutions):
        from .powerflow import nodal_injections
        from .grid import index_nodes
        nodes = index_nodes(case, sc.topology)
        s = nodal_injections(case, nodes, sc.injections)
        sbus_vals.append(s)
        sbus_offsets.append(sbus_offsets[-1] + len(s))
    return {
        "ybus_row": np.concatenate(rows), "ybus_col": np.concatenate(cols),
        "ybus_data": np.concatenate(vals),
        "ybus_offsets": np.asarray(offsets, dtype=np.int64),
        "n_nodes": np.asarray(nnodes, dtype=np.int64),
        "sbus_data": np.concatenate(sbus_vals),
        "sbus_offsets": np.asarray(sbus_offsets, dtype=np.int64),
    }


def default_desk_config(case, seed_base=0):
    """Desk-scale configuration mirroring the competition layout.

    Four busbar reassignment actions on three substations, train/val/test
    with single-line disconnections, OOD with same-region double
    disconnections; sample counts scaled down from the full campaign with
    the split ratios preserved (3:1:1:2).
    """
    def split_action(sub_id):
        sub = case.substation_ids.index(sub_id)
        roster = case.roster(sub)
        busbars = tuple(2 if i % 2 == 0 else 1 for i in range(len(roster)))
        return SetBusAction(substation=sub, busbars=busbars)

    def alt_action(sub_id):
        sub = case.substation_ids.index(sub_id)
        roster = case.roster(sub)
        busbars = tuple(2 if i % 2 == 1 else 1 for i in range(len(roster)))
        return SetBusAction(substation=sub, busbars=busbars)

    actions = [split_action("sub1"), split_action("sub16"),
               alt_action("sub16"), split_action("sub28")]
    ref = StageParams(prob_depth=(0.5, 0.5), prob_type=(1.0, 0.0),
                      prob_do_nothing=0.1, max_disc=0)
    cfg = ScenarioConfig(
        reference=ref,
        reference_actions=actions,
        splits={
            "train": StageParams((1.0,), (0.0, 1.0), 0.3, 1),
            "val": StageParams((1.0,), (0.0, 1.0), 0.0, 1),
            "test": StageParams((1.0,), (0.0, 1.0), 0.0, 1),
            "test_ood": StageParams((0.0, 1.0), (0.0, 1.0), 0.0, 2, same_region=True),
        },
        n_samples={"train": 3000, "val": 1000, "test": 1000, "test_ood": 2000},
        seeds={"train_env_seed": seed_base + 1, "val_env_seed": seed_base + 2,
               "test_env_seed": seed_base + 3, "test_ood_topo_env_seed": seed_base + 4,
               "train_actor_seed": seed_base + 5, "val_actor_seed": seed_base + 6,
               "test_actor_seed": seed_base + 7, "test_ood_topo_actor_seed": seed_base + 8},
    )
    cfg.validate()
    return cfg
