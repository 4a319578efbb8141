"""Command line entry point: ``loopdsse {generate,run,sweep-baddata,report}``.

Exit codes: 0 success, 2 invalid manifest or arguments, 3 numerical
failure, 4 file-system problems.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import aggregator as agg
from . import grid_model as grid
from . import pipeline, rvm
from .bcse import UnobservableError
from .dataset import write_ami_csv

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

# allowed manifest tables and keys
SCHEMA = {
    "paths": {"topology": str, "output": str},
    "run": {"mode": str},
    "seeds": {"data": int, "loop": int, "sweep": int},
    "scenario": {
        "start": str,
        "end": str,
        "test_start": str,
        "metering_fraction": float,
        "missing_rate": float,
    },
    "loop": {
        "inner_loop_threshold": float,
        "max_inner_cycles": int,
        "train_cap": int,
        "cv_samples": int,
        "full_retrain": bool,
    },
    "sweep": {"grid": list, "trials": int},
    "baselines": {"ridge_linear": bool, "gaussian_mle": bool},
}
MODES = ("open_loop", "closed_loop")


class ManifestError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class LockError(OSError):
    pass


# --------------------------------------------------------------------------
# manifest


def load_manifest(path):
    raw = Path(path).read_bytes()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError([f"manifest is not valid TOML: {exc}"]) from exc
    return doc, hashlib.sha256(raw).hexdigest(), Path(path).resolve().parent


def validate_manifest(doc, base_dir, command, overrides=None):
    """Collect every problem before any compute; returns the resolved settings."""
    problems = []
    overrides = overrides or {}
    for table, body in doc.items():
        if table not in SCHEMA:
            problems.append(f"unknown table [{table}]")
            continue
        if not isinstance(body, dict):
            problems.append(f"[{table}] must be a table")
            continue
        for key, val in body.items():
            if key not in SCHEMA[table]:
                problems.append(f"unknown key {table}.{key}")
                continue
            want = SCHEMA[table][key]
            ok = isinstance(val, want) and not (want is int and isinstance(val, bool))
            if want is float and isinstance(val, int) and not isinstance(val, bool):
                ok = True
            if not ok:
                problems.append(f"{table}.{key} must be of type {want.__name__}")
    get = lambda t, k, d=None: doc.get(t, {}).get(k, d) if isinstance(doc.get(t, {}), dict) else d
    mode = overrides.get("mode") or get("run", "mode", "closed_loop")
    if mode not in MODES:
        problems.append(f"run.mode must be one of {MODES}, got {mode!r}")
    topo = get("paths", "topology")
    topo_path = None
    if isinstance(topo, str):
        topo_path = (base_dir / topo).resolve()
        if not topo_path.exists():
            problems.append(f"paths.topology does not exist: {topo}")
    output = get("paths", "output", "outputs")
    out_dir = (base_dir / output).resolve() if isinstance(output, str) else None
    if command in ("run", "sweep-baddata", "report") and out_dir is None:
        problems.append("paths.output is required")
    grid_ = get("sweep", "grid", [0.0, 0.1, 0.2])
    if command == "sweep-baddata":
        if not isinstance(grid_, list) or not grid_:
            problems.append("sweep.grid must be a nonempty list")
        elif not all(isinstance(x, (int, float)) and not isinstance(x, bool) and 0 <= x <= 1 for x in grid_):
            problems.append("sweep.grid entries must be fractions in [0, 1]")
    trials = get("sweep", "trials", 3)
    if isinstance(trials, int) and trials < 1:
        problems.append("sweep.trials must be >= 1")
    scen_kw = {k: v for k, v in (doc.get("scenario") or {}).items() if k in SCHEMA["scenario"]}
    loop_kw = {k: v for k, v in (doc.get("loop") or {}).items() if k in SCHEMA["loop"]}
    seed = overrides.get("seed")
    data_seed = seed if seed is not None else get("seeds", "data", 7)
    scen_cfg = loop_cfg = None
    if not problems:
        try:
            scen_cfg = pipeline.ScenarioConfig(seed=int(data_seed), **scen_kw)
        except ValueError as exc:
            problems.append(f"[scenario] {exc}")
        try:
            loop_cfg = pipeline.LoopConfig(seed=int(get("seeds", "loop", 0)), open_loop_only=(mode == "open_loop"), **loop_kw)
        except ValueError as exc:
            problems.append(f"[loop] {exc}")
    if problems:
        raise ManifestError(problems)
    return {
        "mode": mode,
        "topology": topo_path,
        "output": out_dir,
        "scenario": scen_cfg,
        "loop": loop_cfg,
        "grid": [float(x) for x in grid_],
        "trials": int(trials),
        "sweep_seed": int(get("seeds", "sweep", 0)),
        "baselines": {k: bool(get("baselines", k, True)) for k in ("ridge_linear", "gaussian_mle")},
    }


def bundled_topology():
    with resources.as_file(resources.files("loopdsse") / "data" / "feeder13.toml") as p:
        return grid.load_topology(p)


def _topology(settings):
    return grid.load_topology(settings["topology"]) if settings["topology"] else bundled_topology()


# --------------------------------------------------------------------------
# output helpers


class OutputLock:
    """Exclusive ``.lock`` file inside an output directory."""

    def __init__(self, directory):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise LockError(f"output directory is locked: {self.path}") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows, manifest_hash):
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest-sha256: {manifest_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [row for row in reader]


def _check_overwrite(paths, force):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise FileExistsError("refusing to overwrite (use --force): " + ", ".join(existing))


# --------------------------------------------------------------------------
# commands


def cmd_generate(settings, manifest_hash, force=False):
    out = settings["output"]
    out.mkdir(parents=True, exist_ok=True)
    targets = [out / "topology.toml", out / "ami.csv", out / "truth.csv", out / "scada.csv"]
    with OutputLock(out):
        _check_overwrite(targets, force)
        top = _topology(settings)
        sc = pipeline.build_scenario(top, settings["scenario"])
        grid.save_topology(top, targets[0])
        write_ami_csv(sc.history, targets[1], comment=f"manifest-sha256: {manifest_hash}")
        ts = np.datetime_as_string(sc.timestamps, unit="h")
        rows = ((ts[h], cid, sc.truth_kw[c, h]) for h in range(len(ts)) for c, cid in enumerate(sc.customer_ids))
        write_csv(targets[2], ["timestamp", "customer_id", "kw_true"], rows, manifest_hash)
        head = ["timestamp"] + [f"{k}:{loc}:{grid.PHASES[ph]}" for k, loc, ph in sc.scada_keys] + ["pmu_v_pu"]
        rows = ([ts[h], *sc.scada[h], sc.pmu[h]] for h in range(len(ts)))
        write_csv(targets[3], head, rows, manifest_hash)
    return {"hours": int(len(sc.timestamps)), "customers": len(sc.customer_ids), "buses": top.n_bus}


def _run_outputs(out, settings, manifest_hash, offline, art, rep):
    sc = offline.scenario
    mode = art.mode
    ts = np.datetime_as_string(sc.timestamps, unit="h")
    metrics = [(mode, "mape", "all", rep.mape), (mode, "precision", "all", rep.precision)]
    metrics += [(mode, "mape", cid, v) for cid, v in rep.customer_mape.items()]
    metrics += [(mode, f"expert_mape_{agg.SEASONS[j]}", "all", v) for j, v in enumerate(rep.expert_mape)]
    metrics += [(mode, "share_hours_f_le_2", "all", float(np.mean(rep.cycles <= 2)))]
    metrics += [(mode, "flagged_hours", "all", rep.flagged_hours)]
    write_csv(out / "metrics.csv", ["mode", "metric", "scope", "value"], metrics, manifest_hash)
    head = ["customer_id", "hour", "t", "season_weight_1", "season_weight_2", "season_weight_3", "season_weight_4", "eta", "max_regret", "bound"]
    write_csv(out / "weights_trace.csv", head, ((cid, ts[h], *rest) for cid, h, *rest in art.weight_rows), manifest_hash)
    ids = [b.id for b in sc.topology.branches]
    rows = [(ids[b], comp, vals[b]) for comp, vals in rep.branch_mape.items() for b in range(len(ids))]
    write_csv(out / "state_errors.csv", ["branch", "component", "mape"], rows, manifest_hash)
    rows = []
    for r in art.records:
        for c, cid in enumerate(sc.customer_ids):
            rows.append((ts[r.hour], cid, r.pseudo_kw[c], math.sqrt(max(r.pseudo_var[c], 0.0)), r.open_kw[c], r.p_tilde[c], sc.truth_kw[c, r.hour], r.live[c], r.cycles, max(r.changes) if r.changes else 0.0))
    write_csv(out / "pseudo_trace.csv", ["timestamp", "customer_id", "pseudo_kw", "sigma_kw", "open_loop_kw", "dle_kw", "true_kw", "metered_live", "cycles", "max_change"], rows, manifest_hash)
    e = rep.histogram_edges
    write_csv(out / "histogram.csv", ["bin_lo_pct", "bin_hi_pct", "count"], ((e[i], e[i + 1], rep.histogram_counts[i]) for i in range(len(rep.histogram_counts))), manifest_hash)
    dom = pipeline.dominance_check(rep)
    summary = {
        "manifest_sha256": manifest_hash,
        **rep.summary(),
        "dominance_margin_max": float(dom.max()),
        "aggregate_vs_best_expert": rep.mape / min(rep.expert_mape),
        "branch_magnitude_mape_mean": float(np.nanmean(rep.branch_mape["magnitude"])),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def cmd_run(settings, manifest_hash, force=False):
    out = settings["output"]
    with OutputLock(out):
        top = _topology(settings)
        sc = pipeline.build_scenario(top, settings["scenario"])
        offline = pipeline.offline_stage(sc, settings["loop"])
        art = pipeline.run_online(offline, settings["mode"])
        rep = pipeline.evaluate(offline, art)
        return _run_outputs(out, settings, manifest_hash, offline, art, rep)


def cmd_sweep_baddata(settings, manifest_hash, force=False):
    out = settings["output"]
    with OutputLock(out):
        top = _topology(settings)
        sc = pipeline.build_scenario(top, settings["scenario"])
        n_train = len(sc.train_hours)
        if max(settings["grid"]) * n_train > n_train:
            raise ManifestError(["sweep.grid exceeds the training size"])
        methods = ["mrvm"] + [k for k, on in settings["baselines"].items() if on]
        rows = pipeline.robustness_sweep(sc, tuple(settings["grid"]), settings["trials"], settings["sweep_seed"], settings["loop"])
        rows = [r for r in rows if r[0] in methods]
        write_csv(out / "robustness.csv", ["method", "fraction", "N", "trial", "mape"], rows, manifest_hash)
        summ = []
        for m in methods:
            for f in settings["grid"]:
                v = np.array([r[4] for r in rows if r[0] == m and r[1] == f])
                n = [r[2] for r in rows if r[0] == m and r[1] == f][0]
                summ.append((m, f, n, float(v.mean()), float(v.std())))
        write_csv(out / "robustness_summary.csv", ["method", "fraction", "N", "mape_mean", "mape_std"], summ, manifest_hash)
    return {"rows": len(rows)}


def cmd_report(settings, manifest_hash, force=False):
    """Render SVG figures from an existing output directory."""
    out = settings["output"]
    if not (out / "histogram.csv").exists():
        raise FileNotFoundError(f"no run outputs in {out}")
    from . import plot

    made = []
    _, rows = read_csv(out / "histogram.csv")
    lo = [float(r[0]) for r in rows]
    hi = [float(r[1]) for r in rows]
    cnt = [int(r[2]) for r in rows]
    (out / "histogram.svg").write_text(plot.bar_svg(lo, hi, cnt, "pseudo-measurement error (%)", "count"))
    made.append("histogram.svg")
    head, rows = read_csv(out / "weights_trace.csv")
    first = rows[0][0] if rows else None
    sel = [r for r in rows if r[0] == first]
    if sel:
        t = [int(r[2]) for r in sel]
        series = {agg.SEASONS[j]: [float(r[3 + j]) for r in sel] for j in range(4)}
        (out / "weights.svg").write_text(plot.line_svg(t, series, "round", f"weight ({first})"))
        made.append("weights.svg")
    if (out / "robustness_summary.csv").exists():
        _, rows = read_csv(out / "robustness_summary.csv")
        series = {}
        for m, f, n, mean, std in rows:
            series.setdefault(m, []).append((float(f), float(mean)))
        xs = sorted({x for v in series.values() for x, _ in v})
        (out / "robustness.svg").write_text(plot.line_svg(xs, {k: [y for _, y in sorted(v)] for k, v in series.items()}, "corrupted fraction", "MAPE"))
        made.append("robustness.svg")
    summary = {}
    if (out / "summary.json").exists():
        summary = json.loads((out / "summary.json").read_text())
    return {"figures": made, **summary}


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "sweep-baddata": cmd_sweep_baddata,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="loopdsse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--manifest", required=True, help="TOML run manifest")
        s.add_argument("--seed", type=int, default=None, help="override seeds.data")
        s.add_argument("--mode", choices=MODES, default=None, help="override run.mode")
        s.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        doc, digest, base = load_manifest(args.manifest)
        settings = validate_manifest(doc, base, args.command, {"seed": args.seed, "mode": args.mode})
        result = COMMANDS[args.command](settings, digest, args.force)
    except ManifestError as exc:
        for msg in exc.problems:
            print(f"error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except (grid.PowerFlowDiverged, rvm.DegenerateModelError, UnobservableError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, grid.TopologyError) as exc:
        code = EXIT_VALIDATION if isinstance(exc, grid.TopologyError) else EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return code
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
