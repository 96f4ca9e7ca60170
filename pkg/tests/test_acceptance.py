"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import expm

from eschil import cli, detect
from eschil.analysis import mean
from eschil.controller import ConstantController, EchoPeer, ExternalControllerSession, GatePwm, PwmConfig
from eschil.detect import CURRENT_ZERO, FALLING, PassiveMonitor
from eschil.events import EventKind, PlantSession, Scheduler, CycleTiming, ScriptedDurations
from eschil.scenario import bundled, cached_oracle, load_bundled, run_es, run_oracle, scenario_from_dict
from eschil.solver import StepControl, compute_derivatives, integrate_to_barrier, taylor_advance
from eschil.sources import Dc, SourceBank

from nets import buck, model, oscillator

FE_SWEEP = ("FE_100ns", "FE_50ns", "FE_10ns")


def rel_all(summary, run):
    return {s: v["all"] for s, v in summary["metrics"]["relative_error"][run].items()}


# 1 ---------------------------------------------------------------------------------

def test_criterion_1_chattering_elimination(fig2a_run, report):
    m = fig2a_run.summary["metrics"]
    avg = m["dcm_error_table"]["averages"]
    ratio = avg["FE_100ns"] / avg["ES"]
    es_worst = max(m["chattering"]["ES"]["per_interval"])
    fe_least = min(m["chattering"]["FE_100ns"]["per_interval"])
    ok = ratio >= 100 and es_worst <= 1 and fe_least >= 10 and fig2a_run.seconds <= 120
    report("1", ok, f"dcm error FE100/ES={ratio:.3g} (>=100), ES max alternations/interval={es_worst} (<=1), "
                    f"FE100 min={fe_least} (>=10), runtime {fig2a_run.seconds:.1f}s (<=120)")
    assert ok


# 2 ---------------------------------------------------------------------------------

def test_criterion_2_accuracy_ordering(wpt_run, report):
    es = rel_all(wpt_run.summary, "ES")
    fe = rel_all(wpt_run.summary, "FE_100ns")
    worst = max(es.values())
    ratio = min(fe[s] / es[s] for s in es)
    ok = worst <= 1e-3 and ratio >= 10 and wpt_run.seconds <= 300
    report("2", ok, f"max ES relative error={worst:.3g} (<=1e-3), min FE100/ES={ratio:.3g} (>=10), "
                    f"runtime {wpt_run.seconds:.1f}s (<=300)")
    assert ok


# 3 ---------------------------------------------------------------------------------

def test_criterion_3_step_size_monotonicity(fig2a_run, wpt_run, report):
    details, ok = [], True
    for label, run in (("fig2a", fig2a_run), ("wpt", wpt_run)):
        errs = [rel_all(run.summary, r) for r in FE_SWEEP]
        for s in errs[0]:
            seq = [e[s] for e in errs]
            ok &= seq[0] > seq[1] > seq[2]
            details.append(f"{label}.{s}=" + ">".join(f"{v:.2g}" for v in seq))
    report("3", ok, "; ".join(details))
    assert ok


# 4 ---------------------------------------------------------------------------------

def _single_step_error(mod, x0, dt, p):
    s = compute_derivatives(mod, x0, np.zeros((p + 1, 0)), p)
    return float(np.max(np.abs(taylor_advance(s, dt) - expm(mod.A * dt) @ x0)))


def test_criterion_4_solver_order(report):
    w = 2 * math.pi * 40e3
    systems = {"exponential": (model([[-1.0]]), np.array([1.0]), 0.1),
               "oscillator": (oscillator(w), np.array([1.0, 0.0]), 0.5 / w)}
    ok, details = True, []
    for p in (2, 4):
        for name, (mod, x0, dt) in systems.items():
            ratio = _single_step_error(mod, x0, dt, p) / _single_step_error(mod, x0, dt / 2, p)
            target = 2.0 ** (p + 1)
            ok &= target / 2 <= ratio <= target * 2
            details.append(f"{name} p={p}: {ratio:.3g} (target {target:g})")
    report("4", ok, "; ".join(details))
    assert ok


# 5 ---------------------------------------------------------------------------------

def _pair_switches(a, b):
    """Largest time gap between same-named, same-direction switch sequences."""
    worst, names = 0.0, sorted({n for _, n, _ in a} | {n for _, n, _ in b})
    for n in names:
        sa = [(t, on) for t, m, on in a if m == n]
        sb = [(t, on) for t, m, on in b if m == n]
        if len(sa) != len(sb) or any(x[1] != y[1] for x, y in zip(sa, sb)):
            return math.inf
        worst = max([worst] + [abs(x[0] - y[0]) for x, y in zip(sa, sb)])
    return worst


def test_criterion_5_event_location(monkeypatch, report):
    m = model([[0.0]], [[1.0]])
    mon = PassiveMonitor("D", 0, CURRENT_ZERO, 0, 0.0, FALLING)
    res = integrate_to_barrier(m, [1.0], SourceBank([Dc(-2.0)]), 0.0, 1.0, [mon], StepControl(dt=0.1, p=2, dt_max=1.0))
    linear_err = abs(res.t_end - 0.5) / 0.5

    seen = []
    original = detect.scan_monitors

    def recording(stack, monitors, dt):
        reps = original(stack, monitors, dt)
        by_index = {mo.diode_index: mo for mo in monitors}
        seen.extend((r, by_index[r.diode_index]) for r in reps)
        return reps

    monkeypatch.setattr(detect, "scan_monitors", recording)
    scn = load_bundled("fig2a")
    es = run_es(scn)
    monkeypatch.undo()
    es_sw = [(s.t, s.name, s.on) for s in es.switches if s.passive]
    _, orc_sw = cached_oracle(scn)
    gap = _pair_switches(es_sw, orc_sw)
    bad = [r for r, mo in seen if not abs(r.residual) <= 1e-9 * max(1.0, abs(mo.threshold))]
    ok = linear_err <= 1e-12 and gap <= 1e-9 and seen and not bad
    report("5", ok, f"linear crossing rel err={linear_err:.2g} (<=1e-12), fig2a {len(es_sw)} ES vs "
                    f"{len(orc_sw)} oracle commutations, max gap={gap:.3g}s (<=1e-9), "
                    f"{len(seen)} crossing reports, {len(bad)} over residual tolerance")
    assert ok


# 6 ---------------------------------------------------------------------------------

def _fig2a_short(durations, tmp_path: Path, tag: str):
    scn = load_bundled("fig2a")
    res = run_es(scn, durations=durations, n_cycles=40)
    path = tmp_path / f"w_{tag}.csv"
    res.waveform.write_csv(path)
    return res, path.read_bytes()


def test_criterion_6_scheduler(tmp_path, report):
    ideal, ideal_bytes = _fig2a_short(None, tmp_path, "ideal")
    log = ideal.scheduler.event_log()
    n = 40
    per_a = [sum(1 for e in log if e.kind == EventKind.CONTROL_A and e.cycle == k) for k in range(n)]
    per_b = [sum(1 for e in log if e.kind == EventKind.CONTROL_B and e.cycle == k) for k in range(n)]
    ok_a = per_a == [1] * n and per_b == [1] * n
    t_sim = [e.t_sim for e in log]
    done = [e.t_sim for e in log if e.kind == EventKind.SIM_DONE]
    ok_b = all(b >= a for a, b in zip(t_sim, t_sim[1:])) and all(b > a for a, b in zip(done, done[1:]))

    T = ideal.scheduler.timing.T_c
    slow, slow_bytes = _fig2a_short(ScriptedDurations({3: 2.5 * T, 10: 1.5 * T}), tmp_path, "slow")
    ok_c = (slow_bytes == ideal_bytes
            and slow.scheduler.sync_a_payloads == ideal.scheduler.sync_a_payloads
            and slow.scheduler.frozen_cycles >= 3 and ideal.scheduler.frozen_cycles == 0
            and slow.scheduler.wall_log != ideal.scheduler.wall_log)

    net = buck()
    sched = Scheduler(PlantSession(net, 25e-6), ConstantController(PwmConfig(())), CycleTiming(25e-6),
                      durations=ScriptedDurations({0: 60e-6}))
    sched.run(3)
    ok_d = sched.frozen_cycles == 2

    for tag, ok, detail in (("6a", ok_a, "one ControlA and one ControlB per cycle"),
                            ("6b", ok_b, "t_sim monotone, SimDone strictly increasing"),
                            ("6c", ok_c, f"{slow.scheduler.frozen_cycles} frozen cycles, waveform and "
                                         "samples byte-identical, wall log differs"),
                            ("6d", ok_d, f"completion at 60 us gives frozen_cycles={sched.frozen_cycles} (==2)")):
        report(tag, ok, detail)
    assert ok_a and ok_b and ok_c and ok_d


# 7 ---------------------------------------------------------------------------------

def test_criterion_7_closed_loop_regulation(report):
    doc = json.loads(bundled("wpt_submodule").read_text())
    doc["duration"] = 0.02
    doc["solver"]["record_dt"] = 1e-7
    doc["oracle"]["record_dt"] = 1e-7
    scn = scenario_from_dict(doc, bundled("wpt_submodule").parent)
    setpoint = doc["controller"]["parts"][1]["setpoint"]
    window = (0.8 * scn.duration, scn.duration)
    start = time.perf_counter()
    es = mean(run_es(scn).waveform, "i_buck", window)
    orc = mean(run_oracle(scn).waveform, "i_buck", window)
    dev = [abs(v - setpoint) / setpoint for v in (es, orc)]
    ok = max(dev) <= 0.01
    report("7", ok, f"mean i_buck over last 20%: ES {es:.4g} A, oracle {orc:.4g} A, setpoint {setpoint:g} A "
                    f"(max deviation {max(dev):.2%}, <=1%), {time.perf_counter() - start:.0f}s")
    assert ok


# 8 ---------------------------------------------------------------------------------

def test_criterion_8_spectrum(fig2a_run, wpt_run, report):
    fft = wpt_run.summary["metrics"]["fft"]["ES"]
    dom = {s: (fft[s]["dominant_hz"], fft[s]["resolution_hz"]) for s in ("i_tx", "i_rx")}
    ok_dom = all(abs(f - 40e3) <= res for f, res in dom.values())
    f2 = fig2a_run.summary["metrics"]["fft"]
    best = 0.0
    for sig, spec in f2["FE_100ns"].items():
        for fe_band, es_band in zip(spec["bands"], f2["ES"][sig]["bands"]):
            best = max(best, fe_band["level"] / es_band["level"])
    ok = ok_dom and best >= 10
    report("8", ok, "ES dominant " + ", ".join(f"{s}={f / 1e3:.3g} kHz (bin {r / 1e3:.3g} kHz)"
                                               for s, (f, r) in dom.items())
           + f"; fig2a band level FE100/ES={best:.3g} (>=10)")
    assert ok


# 9 ---------------------------------------------------------------------------------

def test_criterion_9_external_controller_equivalence(report):
    T = 25e-6
    tmpl = PwmConfig((GatePwm("g1", T, 0.2),))
    target = tmpl.with_gate("g1", duty=0.5)

    def run(ctl):
        plant = PlantSession(buck(), T)
        Scheduler(plant, ctl, CycleTiming(T)).run(40)
        return plant.waveform().to_csv_text()

    local = run(ConstantController(target))
    with EchoPeer([0.5, 0.0, T]) as peer, ExternalControllerSession(peer.endpoint, target, ["i_l", "v_o"]) as sess:
        remote = run(sess)
    ok = local == remote
    report("9", ok, f"echo peer vs in-process constant duty, {local.count(chr(10))} waveform rows, "
                    + ("bit-identical" if ok else "different"))
    assert ok


# 10 --------------------------------------------------------------------------------

def test_criterion_10_determinism(fig2a_run, wpt_run, rc_run, tmp_path, report):
    ok, details = True, []
    for name, first in (("fig2a", fig2a_run), ("wpt_submodule", wpt_run), ("rc_smoke", rc_run)):
        out = tmp_path / name
        assert cli.main(["run", name, "--out", str(out)]) == 0
        a = sorted(p.name for p in first.out.iterdir())
        b = sorted(p.name for p in out.iterdir())
        same = a == b and all((first.out / f).read_bytes() == (out / f).read_bytes() for f in a)
        ok &= same
        details.append(f"{name}: {len(a)} files {'identical' if same else 'DIFFER'}")
    report("10", ok, "; ".join(details))
    assert ok
