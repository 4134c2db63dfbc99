"""Command-line entry point.

Subcommands wire the library into the end-to-end workflows::

    gridbench generate --config cfg.json --case case.m --out data/
    gridbench solve    --case case.m --n1-all --engine batched --out runs/batched/
    gridbench score    --truth data/ --pred preds/ \
                       --baseline-timing runs/sequential/timing.json \
                       --inference-timing runs/batched/timing.json --out report/
    gridbench repeat   ... --times 10

Exit codes: 0 success, 2 configuration or validation failure, 3 solver
failure (any non-converged scenario), 4 I/O failure.  All outputs are
plain files; no network access anywhere.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time

from . import __version__
from .batch import BatchOptions, batch_solve
from .cases import ParseError, parse_case
from .dataset_io import (export_solution_tables, file_sha256, load_dataset,
                         load_predictions, save_dataset)
from .grid import CaseError, Topology
from .metrics import evaluate_ml, evaluate_physics
from .powerflow import Injections, SolverOptions, solve_sequential
from .scenarios import (ConfigError, GenerationError, SPLITS, config_to_dict,
                        generate_dataset, load_config)
from .scoring import (ScoreWeights, aggregate_scores, global_score,
                      measure_speedup)
from .surrogate import DcBaseline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


def _run_manifest(args, phases=None, **extra):
    manifest = {
        "tool_version": __version__,
        "command": " ".join(sys.argv[1:]),
        "started_at": time.time(),
        **extra,
    }
    if phases:
        manifest["phases_s"] = phases
    return manifest


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def cmd_generate(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds = {k: v + args.seed for k, v in cfg.seeds.items()}
    if args.store_physics:
        cfg.store_physics = True
    case = parse_case(args.case)
    os.makedirs(args.out, exist_ok=True)
    shutil.copy(args.case, os.path.join(args.out, os.path.basename(args.case)))
    _write_json(os.path.join(args.out, "config.json"), config_to_dict(cfg))
    t0 = time.perf_counter()
    for split in SPLITS:
        if split not in cfg.splits:
            continue
        t_split = time.perf_counter()
        ds = generate_dataset(case, cfg, split, jobs=args.jobs)
        save_dataset(ds, os.path.join(args.out, split), case_path=args.case,
                     extra_manifest={"case_file": os.path.basename(args.case)})
        print(f"{split}: {ds.n_samples} samples, {ds.redraws} redraws, "
              f"{time.perf_counter() - t_split:.1f}s")
    _write_json(os.path.join(args.out, "manifest.json"),
                _run_manifest(args, total_s=time.perf_counter() - t0,
                              config_sha256=cfg.digest(),
                              case_sha256=file_sha256(args.case)))
    return EXIT_OK


def _load_scenarios(args, case):
    nominal = Injections.nominal(case)
    base = Topology.default(case)
    if args.n1_all:
        from .grid import DisconnectLineAction, apply_topology_action
        return [(apply_topology_action(case, base, DisconnectLineAction(l)), nominal)
                for l in range(case.n_line)]
    with open(args.scenarios) as fh:
        doc = json.load(fh)
    if not doc:
        print("warning: empty scenario file, nothing to solve", file=sys.stderr)
        return []
    out = []
    from .grid import (DisconnectLineAction, SetBusAction, apply_topology_action)
    for i, item in enumerate(doc):
        topo = base
        for sub, busbars in item.get("set_bus", {}).get("substations_id", []):
            topo = apply_topology_action(
                case, topo, SetBusAction(substation=int(sub),
                                         busbars=tuple(int(b) for b in busbars)))
        for line in item.get("disconnect_lines", []):
            topo = apply_topology_action(case, topo, DisconnectLineAction(int(line)))
        out.append((topo, nominal))
    return out


def cmd_solve(args):
    case = parse_case(args.case)
    scenarios = _load_scenarios(args, case)
    if not scenarios:
        return EXIT_OK
    os.makedirs(args.out, exist_ok=True)
    opts = SolverOptions()
    t0 = time.perf_counter()
    if args.engine == "batched":
        results, timing = batch_solve(case, scenarios, BatchOptions(solver=opts, jobs=args.jobs))
    else:
        results, timing = solve_sequential(case, scenarios, opts)
    elapsed = time.perf_counter() - t0

    failures = []
    for i, (sol, reason) in enumerate(results):
        if sol is None:
            failures.append({"scenario": i, "reason": reason})
            continue
        export_solution_tables(case, sol,
                               os.path.join(args.out, f"lines_{i:04d}.csv"),
                               os.path.join(args.out, f"nodes_{i:04d}.csv"))
    timing_doc = {"engine": args.engine, "seconds": elapsed,
                  "n_scenarios": len(scenarios),
                  "n_solved": len(scenarios) - len(failures),
                  "phases_s": timing.as_dict()}
    _write_json(os.path.join(args.out, "timing.json"), timing_doc)
    _write_json(os.path.join(args.out, "manifest.json"),
                _run_manifest(args, phases=timing.as_dict(),
                              case_sha256=file_sha256(args.case),
                              failures=failures))
    print(f"{args.engine}: solved {timing_doc['n_solved']}/{len(scenarios)} "
          f"scenarios in {elapsed:.2f}s")
    if args.budget is not None and elapsed > args.budget:
        print(f"warning: run exceeded the {args.budget}s budget", file=sys.stderr)
    for f in failures:
        print(f"scenario {f['scenario']}: {f['reason']}", file=sys.stderr)
    return EXIT_SOLVER if failures else EXIT_OK


def _find_case_file(truth_dir):
    for name in sorted(os.listdir(truth_dir)):
        if name.endswith((".m", ".json")) and name not in ("config.json", "manifest.json"):
            return os.path.join(truth_dir, name)
    raise FileNotFoundError(f"no case file found in {truth_dir}")


def _timing_seconds(path):
    with open(path) as fh:
        doc = json.load(fh)
    if "seconds" not in doc:
        raise ValueError(f"{path}: timing file must carry a 'seconds' field")
    return float(doc["seconds"])


def _score_once(args, case, truths, weights):
    reports = {}
    inference_time = None
    if args.pred == "dc-baseline":
        model = DcBaseline()
        train = load_dataset(os.path.join(args.truth, "train"), case)
        model.fit(train)
        preds, dt = {}, 0.0
        for split in ("test", "test_ood"):
            p, t = model.timed_predict(truths[split])
            preds[split] = p
            dt += t
        inference_time = dt
    else:
        preds = {split: load_predictions(os.path.join(args.pred, split))
                 for split in ("test", "test_ood")}
    for split in ("test", "test_ood"):
        pred = preds[split]
        truth = truths[split]
        pred.check_against(truth)
        reports[split] = (evaluate_ml(pred, truth), evaluate_physics(pred, truth))

    baseline = _timing_seconds(args.baseline_timing)
    if inference_time is None:
        inference_time = _timing_seconds(args.inference_timing)
    ratio = measure_speedup(baseline, inference_time)
    report = global_score(reports["test"][0], reports["test"][1],
                          reports["test_ood"][0], reports["test_ood"][1],
                          ratio, weights)
    detail = {
        "ml_test": reports["test"][0].as_dict(),
        "physics_test": reports["test"][1].as_dict(),
        "ml_ood": reports["test_ood"][0].as_dict(),
        "physics_ood": reports["test_ood"][1].as_dict(),
        "baseline_seconds": baseline, "inference_seconds": inference_time,
    }
    return report, detail


def _load_truths(args):
    case = parse_case(_find_case_file(args.truth))
    truths = {}
    for split in ("test", "test_ood"):
        path = os.path.join(args.truth, split)
        if not os.path.isdir(path):
            raise FileNotFoundError(f"missing split '{split}' under {args.truth}")
        truths[split] = load_dataset(path, case)
    return case, truths


def _weights(args):
    if not args.weights:
        return None
    with open(args.weights) as fh:
        return ScoreWeights(**json.load(fh))


def cmd_score(args):
    case, truths = _load_truths(args)
    report, detail = _score_once(args, case, truths, _weights(args))
    print(report.render_table())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "score_report.json"),
                    {**report.as_dict(), "detail": detail})
        with open(os.path.join(args.out, "score_table.txt"), "w") as fh:
            fh.write(report.render_table() + "\n")
    return EXIT_OK


def cmd_repeat(args):
    if args.times < 1:
        raise ConfigError("--times must be at least 1")
    case, truths = _load_truths(args)
    weights = _weights(args)
    reports = []
    for run in range(args.times):
        report, _ = _score_once(args, case, truths, weights)
        reports.append(report)
        print(f"run {run + 1}/{args.times}: {report.global_percent:.1f}%")
    agg = aggregate_scores(reports)
    print(f"global score: {agg['mean_percent']:.1f} +/- {agg['std_percent']:.2f} "
          f"(over {agg['runs']} runs)")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "repeat_report.json"), agg)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gridbench",
                                description="Contingency screening and surrogate benchmarking")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate the per-split datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--case", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None,
                   help="offset added to every configured seed")
    g.add_argument("--jobs", type=int, default=None)
    g.add_argument("--store-physics", action="store_true")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve a scenario batch")
    s.add_argument("--case", required=True)
    grp = s.add_mutually_exclusive_group(required=True)
    grp.add_argument("--scenarios", help="JSON scenario list")
    grp.add_argument("--n1-all", action="store_true",
                     help="all single-line-outage scenarios")
    s.add_argument("--out", required=True)
    s.add_argument("--engine", choices=("sequential", "batched"), default="batched")
    s.add_argument("--jobs", type=int, default=None)
    s.add_argument("--budget", type=float, default=None,
                   help="advisory wall-clock budget in seconds")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("score", help="score predictions against a truth directory")
    _score_args(c)
    c.set_defaults(func=cmd_score)

    r = sub.add_parser("repeat", help="score repeatedly, report mean and std")
    _score_args(r)
    r.add_argument("--times", type=int, required=True)
    r.set_defaults(func=cmd_repeat)
    return p


def _score_args(c):
    c.add_argument("--truth", required=True,
                   help="directory produced by 'generate' (with test/ and test_ood/)")
    c.add_argument("--pred", required=True,
                   help="prediction directory or the literal 'dc-baseline'")
    c.add_argument("--baseline-timing", required=True)
    c.add_argument("--inference-timing", default=None)
    c.add_argument("--weights", default=None)
    c.add_argument("--out", default=None)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "pred", None) != "dc-baseline" and args.command in ("score", "repeat") \
            and args.inference_timing is None:
        parser.error("--inference-timing is required unless --pred dc-baseline")
    try:
        return args.func(args)
    except (ConfigError, ParseError, CaseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
