"""Run orchestration and persistence: one config in, a directory of artifacts out.

Each run directory holds

- ``effective_config.yaml``: the validated config with presets and defaults expanded
- ``events.jsonl``: one JSON record per engine event, prefixed by the trial index
- ``results.json``: per-trial protocol results and a summary
- CSV plot-data tables, with units in every column name
- ``manifest.json``: config hash, seed, version, timings and a hash index of the files above

Outputs other than the manifest are a pure function of (effective config, version).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import FitFailedError, deconvolute, end_to_end_recover
from .config import ConfigError, ExperimentConfig, dump_effective, validate_config
from .constants import TWO_PI
from .dynamics import Engine, MoleculePhysics, cycle_time_accounting
from .protocols import (LineBook, measure_transition_rate, project_rotational_state, pump_to_rotational_ground,
                        qnd_readout, spectrum_scan)

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_DIVERGED = 0, 2, 3, 4
MANIFEST = "manifest.json"
CONFIG_FILE = "effective_config.yaml"
EVENTS_FILE = "events.jsonl"
RESULTS_FILE = "results.json"


@dataclass
class RunOutcome:
    exit_code: int
    out_dir: Path
    results: dict
    manifest: dict


@dataclass
class _Trial:
    index: int
    result: dict
    events: str
    tables: dict = field(default_factory=dict)
    partial: bool = False
    sim_time: float = 0.0
    cycles: int = 0


# -- physics context ------------------------------------------------------

class _Context:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.modes = config.modes()
        self.model = config.rotor()
        self.env = config.environment_model()
        self.drive = config.drive()
        self.mode = config.crystal.mode
        p = config.protocol
        self.carrier_rate = None if p.sideband_rate_hz is None else p.sideband_rate_hz / self.modes.eta(self.mode)
        self.physics = MoleculePhysics(self.model, self.env, self.modes, self.drive, self.mode, self.carrier_rate)
        self.book = LineBook(self.model, self.drive, self.modes, self.mode, self.env, self.physics.f0)
        self.noise = config.noise.build()
        self.timing = config.timing.build()
        self.protocol = p.build()

    def engine(self, seed, initial_J=None):
        return Engine(self.physics, self.noise, self.timing, seed=seed, initial_J=initial_J,
                      fourier_factor=self.config.fourier_factor, log=True)


_CONTEXTS = {}


def _context(config):
    key = config.config_hash()
    if key not in _CONTEXTS:
        _CONTEXTS.clear()
        _CONTEXTS[key] = _Context(config)
    return _CONTEXTS[key]


def trial_seeds(seed, trials):
    """Independent per-trial seeds derived from the master seed and trial index."""
    return np.random.SeedSequence(seed).spawn(trials)


def _hz(x):
    return x / TWO_PI


# -- protocols ------------------------------------------------------------

def _scan(ctx, engine):
    res = spectrum_scan(engine.apparatus(), ctx.protocol, infer_orders=ctx.config.protocol.infer_orders)
    p = res.payload
    omega_m, omega_mode = p["omega_m"], p["omega_mode"]
    line_rows = []
    for line in p["lines"]:
        absolute = line.absolute_frequency(omega_m, omega_mode) if line.N is not None else None
        line_rows.append([line.pair_id, line.extra["side"], _hz(line.delta_omega_o), line.N, line.n,
                          absolute, line.uncertainty])
    trace_rows = [[_hz(x), done, darks, darks / done if done else 0.0] for x, done, darks in p["trace"]]
    decon = deconvolute(p["lines"], omega_m, omega_mode)
    result = {"points": p["points"], "pairs": len(p["lines"]) // 2, "duplicates": p["duplicates"],
              "order_errors": p["errors"], "carriers_hz": [c.frequency for c in decon.carriers],
              "lines": [dict(zip(("pair_id", "side", "offset_hz", "N", "n", "frequency_hz", "uncertainty_hz"), r))
                        for r in line_rows]}
    constant_rows = []
    fit_failed = False
    try:
        fit = end_to_end_recover(res, ctx.model.selection_rule, truth=ctx.model)
    except FitFailedError as exc:
        fit_failed = True
        result["fit"] = {"error": str(exc)}
    else:
        result["fit"] = {"B_hz": fit.B, "D_hz": fit.D, "B_sigma_hz": fit.B_err, "D_sigma_hz": fit.D_err,
                         "chi2": fit.chi2, "ambiguity": fit.ambiguity, "degenerate": fit.degenerate,
                         "assignments": [list(a) for a in fit.assignments],
                         "B_error_hz": fit.B - ctx.model.B, "D_error_hz": fit.D - ctx.model.D}
        constant_rows = [["B", fit.B, fit.B_err, ctx.model.B, fit.B - ctx.model.B],
                         ["D", fit.D, fit.D_err, ctx.model.D, fit.D - ctx.model.D]]
    tables = {
        "scan.csv": (["offset_hz", "attempts", "darks", "dark_rate_per_attempt"], trace_rows),
        "lines.csv": (["pair_id", "side", "offset_hz", "comb_order_N", "sideband_n", "frequency_hz",
                       "uncertainty_hz"], line_rows),
        "constants.csv": (["name", "fitted_hz", "sigma_hz", "true_hz", "error_hz"], constant_rows),
    }
    return res, result, tables, res.partial or fit_failed


def _rate(ctx, engine):
    J_pair = tuple(ctx.config.protocol.J_pair)
    res = measure_transition_rate(engine.apparatus(), ctx.book, ctx.protocol, J_pair)
    p = res.payload
    rows = []
    for t, pd, n in zip(p["durations"], p["p_dark"], p["trials"]):
        model = p["amplitude"] * math.sin(math.pi * p["rate"] * t) ** 2 + p["offset"] if "rate" in p else None
        rows.append([t, pd, int(n), model])
    result = {"J_pair": list(J_pair), "status": res.kind, "true_rate_hz": ctx.book.sideband_rate}
    for key in ("rate", "rate_sigma", "ci95", "amplitude", "offset"):
        if key in p:
            result[key if key in ("ci95", "amplitude", "offset") else f"{key}_hz"] = p[key]
    if "ci95" in result:
        result["ci95_hz"] = result.pop("ci95")
    return res, result, {"rabi.csv": (["duration_s", "p_dark", "trials", "p_fit"], rows)}, res.partial


def _qnd(ctx, engine):
    J = ctx.config.protocol.J_hypothesis
    res = qnd_readout(engine.apparatus(), ctx.book, ctx.protocol, J)
    truth = engine.state.J == J
    result = dict(res.payload, final_J=engine.state.J, correct=bool(res.payload["verdict"] == truth))
    return res, result, {}, res.partial


def _project(ctx, engine):
    res = project_rotational_state(engine.apparatus(), ctx.book, ctx.protocol)
    found = res.payload.get("J")
    result = {"status": res.kind, "J": found, "true_J": engine.state.J, "probes": res.payload.get("probes"),
              "correct": found == engine.state.J if found is not None else None}
    return res, result, {}, res.partial


def _pump(ctx, engine):
    res = pump_to_rotational_ground(engine.apparatus(), ctx.book, ctx.protocol, ctx.config.protocol.J_start)
    result = dict(res.payload, status=res.kind, final_J=engine.state.J)
    return res, result, {}, res.partial


_PROTOCOLS = {"scan": _scan, "rate": _rate, "qnd": _qnd, "project": _project, "pump": _pump}


def _initial_J(config):
    p = config.protocol
    if p.initial_J is not None:
        return p.initial_J
    if p.name == "rate":
        return p.J_pair[0]
    if p.name == "pump":
        return p.J_start
    return None


def run_trial(config: ExperimentConfig, index: int) -> _Trial:
    ctx = _context(config)
    seed = trial_seeds(config.seed, config.trials)[index]
    engine = ctx.engine(seed, _initial_J(config))
    res, result, tables, partial = _PROTOCOLS[config.protocol.name](ctx, engine)
    acct = cycle_time_accounting(engine, ctx.protocol.pulse_duration, ctx.protocol.attempts_per_point)
    result.setdefault("status", res.kind)
    result.update(trial=index, sim_time_s=engine.clock, cycles=acct.cycles, confidence=res.confidence,
                  success=res.success, partial=bool(partial))
    prefix = '{"trial":%d,' % index
    events = "".join(prefix + rec.to_json()[1:] + "\n" for rec in engine.events)
    return _Trial(index, result, events, tables, bool(partial), engine.clock, acct.cycles)


# -- persistence ----------------------------------------------------------

def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([["" if v is None else v for v in row] for row in rows])
    return buf.getvalue()


def _json_text(data):
    return json.dumps(data, sort_keys=True, indent=1) + "\n"


def _summary(config, trials):
    name = config.protocol.name
    results = [t.result for t in trials]
    out = {"trials": len(trials), "partial_trials": sum(t.partial for t in trials),
           "sim_time_total_s": sum(t.sim_time for t in trials), "cycles_total": sum(t.cycles for t in trials)}
    correct = [r["correct"] for r in results if r.get("correct") is not None]
    if correct:
        out["accuracy"] = sum(correct) / len(correct)
    if name == "scan":
        fits = [r["fit"] for r in results if "B_hz" in r["fit"]]
        out["fits"] = len(fits)
        if fits:
            out["max_abs_B_error_hz"] = max(abs(f["B_error_hz"]) for f in fits)
            out["max_abs_D_error_hz"] = max(abs(f["D_error_hz"]) for f in fits)
    if name == "rate":
        rates = [r["rate_hz"] for r in results if "rate_hz" in r]
        if rates:
            out["mean_rate_hz"] = float(np.mean(rates))
    if name == "pump":
        out["ground_fraction"] = sum(r["final_J"] == 0 for r in results) / len(results)
    return out


def _execute(config, workers=1):
    indices = range(config.trials)
    if workers > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(run_trial, [config] * config.trials, indices))
    else:
        trials = [run_trial(config, i) for i in indices]
    trials.sort(key=lambda t: t.index)
    files = {CONFIG_FILE: dump_effective(config),
             EVENTS_FILE: "".join(t.events for t in trials)}
    tables = {}
    for t in trials:
        for name, (header, rows) in t.tables.items():
            entry = tables.setdefault(name, (["trial"] + header, []))
            entry[1].extend([t.index] + list(r) for r in rows)
    for name, (header, rows) in sorted(tables.items()):
        files[name] = _csv_text(header, rows)
    results = {"protocol": config.protocol.name, "seed": config.seed, "version": __version__,
               "summary": _summary(config, trials), "trials": [t.result for t in trials]}
    files[RESULTS_FILE] = _json_text(results)
    partial = any(t.partial for t in trials)
    return files, results, partial


def _sha(text):
    return hashlib.sha256(text.encode()).hexdigest()


def run_experiment(config: ExperimentConfig, out_dir=None, workers=1) -> RunOutcome:
    """Execute the configured protocol for every trial and write the run directory."""
    out = Path(out_dir or config.output or f"runs/{config.protocol.name}-seed{config.seed}")
    config = config.model_copy(update={"output": str(out)})
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    wall = time.perf_counter()
    files, results, partial = _execute(config, workers)
    for name, text in files.items():
        (out / name).write_text(text)
    code = EXIT_PARTIAL if partial else EXIT_OK
    manifest = {"tool": "qlspec", "version": __version__, "config_hash": config.config_hash(),
                "seed": config.seed, "trials": config.trials, "protocol": config.protocol.name,
                "started": started, "finished": datetime.now(timezone.utc).isoformat(),
                "wall_time_s": time.perf_counter() - wall,
                "sim_time_total_s": results["summary"]["sim_time_total_s"], "exit_code": code,
                "files": {name: {"sha256": _sha(text), "bytes": len(text.encode())}
                          for name, text in sorted(files.items())}}
    (out / MANIFEST).write_text(_json_text(manifest))
    return RunOutcome(code, out, results, manifest)


# -- replay ---------------------------------------------------------------

@dataclass
class ReplayReport:
    exit_code: int
    messages: list


def _first_divergence(expected, actual):
    a, b = expected.splitlines(keepends=True), actual.splitlines(keepends=True)
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i + 1, x.rstrip("\n"), y.rstrip("\n")
    if len(a) != len(b):
        n = min(len(a), len(b))
        return n + 1, (a[n].rstrip("\n") if n < len(a) else "<end of file>"), \
            (b[n].rstrip("\n") if n < len(b) else "<end of file>")
    return None


def _clip(text, width=160):
    return text if len(text) <= width else text[:width] + "..."


def replay(path) -> ReplayReport:
    """Re-execute a recorded run and compare every indexed output byte for byte."""
    path = Path(path)
    run_dir = path.parent if path.is_file() else path
    manifest_path = path if path.is_file() else path / MANIFEST
    messages = []
    if not manifest_path.is_file():
        return ReplayReport(EXIT_CONFIG, [f"missing manifest: {manifest_path}"])
    config_path = run_dir / CONFIG_FILE
    if not config_path.is_file():
        return ReplayReport(EXIT_CONFIG, [f"missing effective config: {config_path}"])
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        return ReplayReport(EXIT_CONFIG, [f"unreadable manifest {manifest_path}: {exc}"])
    recorded = manifest.get("version")
    if recorded != __version__:
        messages.append(f"warning: run recorded with qlspec {recorded}, replaying with {__version__}")
    try:
        config = validate_config(yaml.safe_load(config_path.read_text()))
    except (ConfigError, yaml.YAMLError) as exc:
        return ReplayReport(EXIT_CONFIG, messages + [f"effective config invalid: {exc}"])
    if config.config_hash() != manifest.get("config_hash"):
        messages.append("warning: effective config hash differs from the manifest")
    files, _, _ = _execute(config)
    diverged = False
    for name, info in sorted(manifest.get("files", {}).items()):
        on_disk = run_dir / name
        fresh = files.get(name)
        if fresh is None:
            messages.append(f"{name}: not produced on replay")
            diverged = True
            continue
        if not on_disk.is_file():
            messages.append(f"{name}: missing from run directory")
            diverged = True
            continue
        recorded_text = on_disk.read_text()
        if recorded_text == fresh and _sha(fresh) == info.get("sha256"):
            continue
        diverged = True
        where = _first_divergence(recorded_text, fresh)
        if where is None:
            messages.append(f"{name}: content matches replay but not the manifest hash")
        else:
            line, old, new = where
            messages.append(f"{name}: first divergence at line {line}\n  recorded: {_clip(old)}\n"
                            f"  replayed: {_clip(new)}")
    if diverged:
        return ReplayReport(EXIT_DIVERGED, messages)
    messages.append(f"verified: {len(manifest.get('files', {}))} files byte-identical")
    return ReplayReport(EXIT_OK, messages)


# -- report ---------------------------------------------------------------

def _fmt_hz(x):
    for unit, scale in (("GHz", 1e9), ("MHz", 1e6), ("kHz", 1e3)):
        if abs(x) >= scale:
            return f"{x / scale:.6g} {unit}"
    return f"{x:.4g} Hz"


def report(run_dir):
    """Human-readable accounting of a run directory; returns (exit code, text)."""
    run_dir = Path(run_dir)
    lines = [f"run directory: {run_dir}"]
    manifest_path, results_path = run_dir / MANIFEST, run_dir / RESULTS_FILE
    if not results_path.is_file():
        lines.append("PARTIAL: no results.json found; the run is incomplete or never started")
        if manifest_path.is_file():
            lines.append("(a manifest exists but its results are missing)")
        return EXIT_PARTIAL, "\n".join(lines)
    results = json.loads(results_path.read_text())
    manifest = json.loads(manifest_path.read_text()) if manifest_path.is_file() else {}
    code = EXIT_OK
    if not manifest:
        lines.append("PARTIAL: manifest.json missing")
        code = EXIT_PARTIAL
    cfg = yaml.safe_load((run_dir / CONFIG_FILE).read_text()) if (run_dir / CONFIG_FILE).is_file() else {}
    summary = results.get("summary", {})
    proto = cfg.get("protocol", {})
    timing = cfg.get("timing", {})
    pulse = proto.get("pulse_duration", 10e-6)
    attempts = proto.get("attempts_per_point", 100)
    per_cycle = pulse + timing.get("transfer", 10e-6) + timing.get("detect", 250e-6) + timing.get("reset", 730e-6)
    sim_total = summary.get("sim_time_total_s", 0.0)
    lines += [f"protocol: {results.get('protocol')}  seed: {results.get('seed')}  "
              f"version: {results.get('version')}  trials: {summary.get('trials')}",
              f"per-cycle time: {per_cycle * 1e6:.1f} us "
              f"(pulse {pulse * 1e6:.1f} us + transfer + detect + reset)",
              f"points per second: {1.0 / (attempts * per_cycle):.2f} at {attempts} attempts per point",
              f"simulated time: {sim_total:.1f} s = {sim_total / 3600:.2f} h "
              f"over {summary.get('cycles_total', 0)} cycles"]
    if summary.get("partial_trials"):
        lines.append(f"PARTIAL: {summary['partial_trials']} trial(s) ran out of budget or failed to finish")
        code = EXIT_PARTIAL
    for trial in results.get("trials", []):
        tag = f"trial {trial['trial']}:"
        if results.get("protocol") == "scan":
            lines.append(f"{tag} {trial['points']} points, {trial['pairs']} line pairs found, "
                         f"{len(trial['carriers_hz'])} carriers")
            fit = trial["fit"]
            if "B_hz" in fit:
                lines.append(f"  B = {fit['B_hz']:.3f} +/- {fit['B_sigma_hz']:.3f} Hz "
                             f"(error vs configured {fit['B_error_hz']:+.3f} Hz)")
                lines.append(f"  D = {fit['D_hz']:.4f} +/- {fit['D_sigma_hz']:.4f} Hz "
                             f"(error vs configured {fit['D_error_hz']:+.4f} Hz)")
                lines.append(f"  assignments (J_upper, J_lower): {fit['assignments']}")
            else:
                lines.append(f"  fit failed: {fit.get('error')}")
        elif results.get("protocol") == "rate":
            if "rate_hz" in trial:
                lo, hi = trial["ci95_hz"]
                lines.append(f"{tag} f = {_fmt_hz(trial['rate_hz'])} +/- {_fmt_hz(trial['rate_sigma_hz'])}, "
                             f"95% CI [{_fmt_hz(lo)}, {_fmt_hz(hi)}]")
            else:
                lines.append(f"{tag} rate undetermined")
    if "accuracy" in summary:
        lines.append(f"accuracy: {summary['accuracy']:.4f}")
    if "ground_fraction" in summary:
        lines.append(f"ground-state fraction: {summary['ground_fraction']:.3f}")
    if manifest.get("exit_code") == EXIT_PARTIAL and code == EXIT_OK:
        lines.append("PARTIAL: run exited with partial results")
        code = EXIT_PARTIAL
    return code, "\n".join(lines)
