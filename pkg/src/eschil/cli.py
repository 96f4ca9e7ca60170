"""Command-line scenario runner.

    simulate run <scenario.json> [--out DIR] [--seedless]
    simulate oracle <scenario.json> --h <s> [--out DIR] [--check]
    simulate compare <summaryA> <summaryB> [--out FILE]

``ESCHIL_THREADS`` caps how many runs of the sweep execute concurrently.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .events import SimulationError, trace_csv_text, wall_log_csv_text
from .scenario import (
    ES,
    ORACLE,
    Scenario,
    ScenarioError,
    blocked_spans,
    bundled,
    cached_oracle,
    load_scenario,
    oracle_self_check,
    oracle_step,
    run_baseline,
    run_es,
    run_name,
    run_oracle,
)


class CliError(RuntimeError):
    pass


def thread_count(n_jobs: int) -> int:
    raw = os.environ.get("ESCHIL_THREADS")
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise CliError(f"ESCHIL_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise CliError("ESCHIL_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_jobs))


def window_label(window) -> str:
    return "all" if window is None else f"{window[0]:g}:{window[1]:g}"


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


# --- runs --------------------------------------------------------------------------

def sweep_jobs(scn: Scenario):
    jobs = [(ES, lambda: run_es(scn))]
    for b in scn.baselines:
        m, h = b["method"], b["h"]
        jobs.append((run_name(m, h), lambda m=m, h=h: run_baseline(scn, m, h)))
    return jobs


def run_sweep(scn: Scenario, threads: int | None = None) -> dict:
    """ES plus every configured baseline; results keyed by run name, in config order."""
    jobs = sweep_jobs(scn)
    width = threads if threads is not None else thread_count(len(jobs))
    if width == 1:
        return {name: fn() for name, fn in jobs}
    with ThreadPoolExecutor(max_workers=width) as pool:
        futures = [(name, pool.submit(fn)) for name, fn in jobs]
        return {name: f.result() for name, f in futures}


def probe_names(scn: Scenario) -> list[str]:
    return [p.name for p in scn.net.probes]


def _run_record(res, out: Path, probes) -> dict:
    name = res.name
    files = {"waveform": f"waveform_{name}.csv", "trace": f"trace_{name}.csv", "wall_log": f"wall_{name}.csv"}
    _write(out / files["waveform"], res.waveform.select(probes).to_csv_text())
    _write(out / files["trace"], trace_csv_text(res.scheduler.event_log()))
    _write(out / files["wall_log"], wall_log_csv_text(res.scheduler.wall_log))
    rec = dict(files)
    rec["samples"] = len(res.waveform)
    rec["frozen_cycles"] = res.scheduler.frozen_cycles
    rec["active_switch_events"] = sum(1 for s in res.switches if not s.passive)
    rec["passive_switch_events"] = sum(1 for s in res.switches if s.passive)
    for attr in ("steps", "rejected", "barrier_calls"):
        if hasattr(res.plant, attr):
            rec[attr] = int(getattr(res.plant, attr))
    return rec


# --- metrics -----------------------------------------------------------------------

def _windows(spec: dict, key: str = "windows"):
    return [None if w is None else (float(w[0]), float(w[1])) for w in spec.get(key, [None])]


def _per_signal(runs: dict, signals, windows, fn) -> dict:
    return {name: {s: {window_label(w): fn(wf, s, w) for w in windows} for s in signals}
            for name, wf in runs.items()}


def evaluate_metrics(scn: Scenario, runs: dict, oracle=None, oracle_switches=None, out: Path | None = None) -> dict:
    """Every metric requested by the scenario; ``runs`` maps run names to waveforms."""
    spec = scn.metrics
    signals = spec.get("signals") or list(scn.net.output_labels())
    result: dict = {}

    if "relative_error" in spec:
        if oracle is None:
            raise CliError("relative_error needs the oracle")
        windows = _windows(spec["relative_error"])
        rel = _per_signal(runs, signals, windows, lambda w, s, win: analysis.relative_error(w, oracle, s, win))
        result["relative_error"] = rel
        if ES in rel:
            result["ratios"] = {
                name: {s: {lbl: _ratio(v, rel[ES][s][lbl]) for lbl, v in per.items()} for s, per in vals.items()}
                for name, vals in rel.items() if name != ES
            }

    for key, fn in (("rms", analysis.rms), ("mean", analysis.mean)):
        if key in spec:
            sigs = spec[key].get("signals") or signals
            result[key] = _per_signal(runs, sigs, _windows(spec[key]), fn)

    spans = None
    if "blocked" in spec or spec.get("fft", {}).get("window") == "longest_blocked":
        if oracle is None:
            raise CliError("blocked-interval metrics need the oracle")
        b = spec.get("blocked", {})
        spans = blocked_spans(oracle_switches, scn.net.diode_ids, {}, float(oracle.t[-1]))
        spans = [s for s in spans if s[1] - s[0] > float(b.get("min_span", 0.0))]
        lo, hi = b.get("interior", [0.1, 0.9])
        spans = analysis.interior(spans, float(lo), float(hi))

    if "blocked" in spec:
        b = spec["blocked"]
        sig = b["signal"]
        pts = int(b.get("points_per_span", 20))
        times = np.concatenate([np.linspace(a, z, pts) for a, z in spans]) if spans else np.empty(0)
        ref = b.get("reference", ES)
        table = analysis.dcm_error_table(runs, oracle, sig, times, ref if ref in runs else None)
        result["blocked_spans"] = [[float(a), float(z)] for a, z in spans]
        result["dcm_error_table"] = table.to_dict()
        chat = {}
        for name, w in list(runs.items()) + [(ORACLE, oracle)]:
            ci = analysis.chattering_index(w, sig, spans, float(b.get("deadband", 0.0)))
            chat[name] = {"alternations": ci.alternations, "amplitude": ci.amplitude,
                          "per_interval": list(ci.per_interval)}
        result["chattering"] = chat

    if "fft" in spec:
        f = spec["fft"]
        win = f.get("window")
        if win == "longest_blocked":
            if not spans:
                raise CliError("no blocked interval for the spectrum window")
            win = max(spans, key=lambda s: s[1] - s[0])
        elif win is not None:
            win = (float(win[0]), float(win[1]))
        bins = int(f.get("bins", 4096))
        taper = str(f.get("taper", "none"))
        bands = [(float(a), float(z)) for a, z in f.get("bands", [])]
        ffts = {}
        for name in f.get("runs", [ES]):
            if name not in runs:
                continue
            ffts[name] = {}
            for s in f.get("signals", signals):
                sp = analysis.fft_spectrum(runs[name], s, win, bins, taper)
                entry = {"dominant_hz": sp.dominant(), "resolution_hz": sp.resolution,
                         "window": None if win is None else [float(win[0]), float(win[1])],
                         "bands": [{"f_lo": a, "f_hi": z, "level": analysis.band_level(sp, a, z)} for a, z in bands]}
                if out is not None:
                    entry["file"] = f"spectrum_{name}_{s}.csv"
                    _write(out / entry["file"], sp.to_csv_text())
                ffts[name][s] = entry
        result["fft"] = ffts
    return result


def _ratio(a: float, b: float) -> float | None:
    if b > 0:
        return a / b
    return None if a == 0 else math.inf


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


# --- commands ----------------------------------------------------------------------

def cmd_run(scn: Scenario, out: Path, seedless: bool = False, threads: int | None = None,
            use_cache: bool = True) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    results = run_sweep(scn, threads)
    summary = {
        "scenario": scn.name,
        "content_hash": scn.content_hash(),
        "duration": scn.duration,
        "control_period": scn.control_period,
        "n_cycles": scn.n_cycles,
        "seedless": bool(seedless),
        "primary": ES,
        "runs": {name: _run_record(res, out, probe_names(scn)) for name, res in results.items()},
    }
    oracle = osw = None
    if scn.metrics and any(k in scn.metrics for k in ("relative_error", "blocked")) \
            or scn.metrics.get("fft", {}).get("window") == "longest_blocked":
        h = oracle_step(scn)
        oracle, osw = cached_oracle(scn, h, use_cache)
        _write(out / "waveform_oracle.csv", oracle.select(probe_names(scn)).to_csv_text())
        summary["oracle"] = {"h": h, "waveform": "waveform_oracle.csv", "samples": len(oracle),
                             "passive_switch_events": len(osw)}
    waves = {name: res.waveform for name, res in results.items()}
    summary["metrics"] = evaluate_metrics(scn, waves, oracle, osw, out)
    _write(out / "summary.json", _dump(summary))
    return summary


def cmd_oracle(scn: Scenario, h: float, out: Path, check: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    res = run_oracle(scn, h)
    rec = _run_record(res, out, probe_names(scn))
    summary = {"scenario": scn.name, "content_hash": scn.content_hash(), "duration": scn.duration,
               "control_period": scn.control_period, "n_cycles": scn.n_cycles, "primary": ORACLE,
               "oracle": {"h": h}, "runs": {ORACLE: rec}}
    if check:
        summary["self_check"] = oracle_self_check(scn, h, reference=res.waveform)
    _write(out / "summary.json", _dump(summary))
    return summary


def _load_summary(path: Path):
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: cannot read summary: {exc}") from None
    base = path.parent
    runs = {}
    for name, rec in doc.get("runs", {}).items():
        runs[name] = analysis.Waveform.read_csv(base / rec["waveform"], {"solver": name})
    primary = doc.get("primary")
    if primary not in runs:
        raise CliError(f"{path}: primary run {primary!r} has no waveform")
    return doc, runs, primary


def cmd_compare(path_a: Path, path_b: Path) -> dict:
    """Every run of A against its namesake in B, or against B's primary run when
    B has no run of that name, on the window shared by both primaries."""
    _, runs_a, prim_a = _load_summary(path_a)
    _, runs_b, prim_b = _load_summary(path_b)
    ref = runs_b[prim_b]
    test = runs_a[prim_a]
    lo, hi = max(test.t[0], ref.t[0]), min(test.t[-1], ref.t[-1])
    if not hi > lo:
        raise CliError(f"no overlap: A covers [{test.t[0]:g}, {test.t[-1]:g}] s, "
                       f"B covers [{ref.t[0]:g}, {ref.t[-1]:g}] s")
    signals = [s for s in test.names if s in ref.names]
    if not signals:
        raise CliError("the two runs share no signal")
    rel, against = {}, {}
    for name, w in runs_a.items():
        other = name if name in runs_b else prim_b
        r = runs_b[other]
        if w.t[0] > lo or w.t[-1] < hi or r.t[0] > lo or r.t[-1] < hi:
            continue
        rel[name] = {s: _rel_or_zero(w, r, s, (lo, hi)) for s in signals}
        against[name] = other
    summary = {"a": str(path_a), "b": str(path_b), "reference": prim_b, "against": against,
               "window": [float(lo), float(hi)], "relative_error": rel}
    if prim_a in rel:
        summary["ratios"] = {name: {s: _ratio(v, rel[prim_a][s]) for s, v in vals.items()}
                             for name, vals in rel.items() if name != prim_a}
    return summary


def _rel_or_zero(w, ref, s, window) -> float:
    """relative_error, reporting 0 for two identical all-zero signals."""
    try:
        return analysis.relative_error(w, ref, s, window)
    except analysis.AnalysisError:
        a = np.interp(ref.t, w.t, w.signal(s))
        if not np.any(a) and not np.any(ref.signal(s)):
            return 0.0
        raise


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simulate", description="Event-synchronized CHIL scenario runner")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run ES and the baseline sweep, write waveforms and metrics")
    r.add_argument("scenario", type=Path, help="scenario JSON file or bundled scenario name")
    r.add_argument("--out", type=Path, default=None, help="output directory (default: out/<scenario name>)")
    r.add_argument("--seedless", action="store_true", help="record that no random seed is used")
    r.add_argument("--no-cache", action="store_true", help="recompute the oracle instead of reading the cache")
    o = sub.add_parser("oracle", help="run the fine-step reference")
    o.add_argument("scenario", type=Path, help="scenario JSON file or bundled scenario name")
    o.add_argument("--h", type=float, required=True, help="oracle grid step in seconds")
    o.add_argument("--out", type=Path, default=None)
    o.add_argument("--check", action="store_true", help="also run the h/2 self-consistency check")
    c = sub.add_parser("compare", help="compare the runs of summary A against summary B")
    c.add_argument("summary_a", type=Path)
    c.add_argument("summary_b", type=Path)
    c.add_argument("--out", type=Path, default=None, help="write the comparison JSON here")
    return p


def resolve_scenario(path: Path) -> Path:
    """A file path, or the bare name of a bundled scenario."""
    if path.exists() or path.suffix or len(path.parts) > 1:
        return path
    candidate = bundled(str(path))
    return candidate if candidate.exists() else path


def _fail(module: str, exc: BaseException, cycle=None, t=None) -> int:
    print(f"error: [{module}] cycle {cycle}, t={t!r} s: {exc}", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            summary = cmd_compare(args.summary_a, args.summary_b)
            text = _dump(summary)
            if args.out:
                _write(args.out, text)
            sys.stdout.write(text)
            return 0
        scn = load_scenario(resolve_scenario(args.scenario))
        if args.command == "run":
            out = args.out or Path("out") / scn.name
            cmd_run(scn, out, args.seedless, use_cache=not args.no_cache)
        else:
            out = args.out or Path("out") / f"{scn.name}_oracle"
            cmd_oracle(scn, args.h, out, args.check)
        print(out / "summary.json")
        return 0
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ScenarioError as exc:
        return _fail("scenario", exc)
    except (CliError, analysis.AnalysisError) as exc:
        return _fail("cli" if isinstance(exc, CliError) else "analysis", exc)
    except OSError as exc:
        return _fail("cli", exc)


if __name__ == "__main__":
    sys.exit(main())
