"""Event taxonomy and the event-synchronized scheduler.

Controller and plant meet only at sync-events.  At every clock edge k the
scheduler hands the samples taken at ``k*T_c`` to the controller (SyncA)
and the command produced in the previous cycle to the plant (SyncB); the
plant then simulates the window ``[k*T_c, (k+1)*T_c)`` and reports SimDone.
If the plant is slower than real time, the controller is frozen at clock
edges until the plant catches up; simulated results do not depend on it.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import detect, solver
from .analysis import Waveform
from .circuit import mode_cache
from .controller import AseSchedule, pwm_edges, sample_map

MAX_EVENTS_PER_INSTANT = 64


class EventKind(str, enum.Enum):
    CLOCK = "Clock"
    CONTROL_A = "ControlA"
    CONTROL_B = "ControlB"
    SYNC_A = "SyncA"
    SYNC_B = "SyncB"
    SIM_DONE = "SimDone"
    ACTIVE_SWITCH = "ActiveSwitch"
    PASSIVE_SWITCH = "PassiveSwitch"


@dataclass(frozen=True)
class Event:
    kind: EventKind
    t_sim: float
    cycle: int
    payload: object = None
    seq: int = -1

    def summary(self) -> str:
        p = self.payload
        if p is None:
            return ""
        if isinstance(p, dict):
            return ";".join(f"{k}={_fmt(v)}" for k, v in p.items())
        return str(p)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, (list, tuple)):
        return "[" + " ".join(_fmt(x) for x in v) + "]"
    return str(v)


class SimulationError(RuntimeError):
    """A solver/detector/controller failure tagged with its origin."""

    def __init__(self, module: str, cycle: int | None, t: float | None, cause: BaseException):
        super().__init__(f"[{module}] cycle {cycle}, t={t!r} s: {type(cause).__name__}: {cause}")
        self.module = module
        self.cycle = cycle
        self.t = t
        self.cause = cause


class SchedulerError(RuntimeError):
    pass


@dataclass
class CycleTiming:
    T_c: float
    t_d: float = 0.0
    t_run: float = 0.0
    frozen_cycles: int = 0
    t_sim_wall: list = field(default_factory=list)

    def __post_init__(self):
        if not self.T_c > 0:
            raise SchedulerError("T_c must be > 0")
        if not 0.0 <= self.t_d < self.T_c or not 0.0 <= self.t_d + self.t_run < self.T_c:
            raise SchedulerError("need 0 <= t_d (+ t_run) < T_c")


# --- solver wall-time sources -------------------------------------------------

class IdealDurations:
    """Plant always finishes within the cycle."""

    def __call__(self, k: int, measured: float) -> float:
        return 0.0


class MeasuredDurations:
    def __call__(self, k: int, measured: float) -> float:
        return measured


class ScriptedDurations:
    """Per-cycle wall durations from a dict or list; unlisted cycles take 0."""

    def __init__(self, durations):
        self.durations = dict(durations) if isinstance(durations, dict) else dict(enumerate(durations))

    def __call__(self, k: int, measured: float) -> float:
        return float(self.durations.get(k, 0.0))


# --- plant ------------------------------------------------------------------------

@dataclass(frozen=True)
class SwitchRecord:
    t: float
    name: str
    on: bool
    passive: bool


@dataclass
class CycleResult:
    k: int
    t_end: float
    x_end: np.ndarray
    samples: dict
    switches: list
    barrier_calls: int


class _Recorder:
    def __init__(self, q: int):
        self.q = q
        self.times: list[np.ndarray] = []
        self.rows: list[np.ndarray] = []
        self.last = -math.inf

    def add(self, times: np.ndarray, rows: np.ndarray):
        if len(times) == 0:
            return
        times = np.array(times, dtype=float)
        if times[0] <= self.last:
            # post-event rows share t* with the pre-event row; keep times strictly increasing
            keep = times > self.last
            if not keep[0]:
                times[0] = np.nextafter(self.last, math.inf)
                keep[0] = True
            times, rows = times[keep], rows[keep]
        self.times.append(times)
        self.rows.append(np.asarray(rows, dtype=float).reshape(len(times), self.q))
        self.last = float(times[-1])

    def waveform(self, names, meta) -> Waveform:
        if not self.times:
            return Waveform(np.empty(0), names, np.empty((0, len(names))), meta)
        return Waveform(np.concatenate(self.times), names, np.vstack(self.rows), meta)


class PlantSession:
    """Event-driven plant: Taylor solver plus exact active/passive switch handling."""

    def __init__(self, net, T_c: float, settings: solver.SolverSettings | None = None, cache=None):
        self.net = net
        self.T_c = T_c
        self.settings = settings or solver.SolverSettings()
        self.cache = cache or mode_cache(net)
        self.sources = net.sources()
        self.ctrl = self.settings.step_control(T_c)
        self.cfg = net.initial_config()
        self.gate_index = {g: i for i, g in enumerate(net.gate_ids)}
        self.x = net.initial_state()
        self.t = 0.0
        self.switches: list[SwitchRecord] = []
        self.rec = _Recorder(len(net.output_labels()))
        self.barrier_calls = 0
        self.steps = 0
        self.rejected = 0
        self._settle(0.0, initial=True)
        self._record_now()

    @property
    def gate_states(self) -> dict[str, bool]:
        return {g: self.cfg.gates[i] for g, i in self.gate_index.items()}

    def outputs(self) -> np.ndarray:
        model = self.cache.get(self.cfg)
        return model.C @ self.x + model.D @ self.sources.values(self.t)

    def probe_values(self) -> dict[str, float]:
        y = self.outputs()
        return {name: float(y[i]) for i, name in enumerate(self.net.output_labels())}

    def _record_now(self):
        self.rec.add(np.array([self.t]), self.outputs()[None, :])

    def _settle(self, t: float, initial: bool = False):
        before = self.cfg
        cfg, toggled = detect.post_event_consistency(self.cache, self.cfg, self.x, t, self.sources,
                                                     p=max(self.ctrl.p, 2))
        self.cfg = cfg
        for j in toggled:
            self.switches.append(SwitchRecord(t, self.net.diode_ids[j], cfg.diodes[j], True))
        return cfg != before

    def _apply_edges(self, edges):
        cfg = self.cfg
        for t, gate, on in edges:
            if gate not in self.gate_index:
                raise KeyError(f"command drives unknown gate {gate!r}")
            cfg = cfg.with_gate(self.gate_index[gate], on)
            self.switches.append(SwitchRecord(t, gate, on, False))
        self.cfg = cfg

    def simulate_control_cycle(self, k: int, schedule: AseSchedule) -> CycleResult:
        t0 = self.t
        t1 = (k + 1) * self.T_c
        if schedule.t0 != t0 and not math.isclose(schedule.t0, t0, rel_tol=0, abs_tol=1e-15):
            raise SchedulerError(f"schedule window starts at {schedule.t0!r}, plant is at {t0!r}")
        first_switch = len(self.switches)
        calls0 = self.barrier_calls
        try:
            self._run_window(schedule, t1)
        except (solver.SolverError, detect.DetectionError, detect.ConsistencyError, np.linalg.LinAlgError) as exc:
            module = "solver" if isinstance(exc, solver.SolverError) else "detect"
            raise SimulationError(module, k, self.t, exc) from exc
        return CycleResult(k, self.t, self.x.copy(), self.probe_values(),
                           self.switches[first_switch:], self.barrier_calls - calls0)

    def _run_window(self, schedule: AseSchedule, t1: float):
        edges = list(schedule.edges)
        barriers = sorted({e[0] for e in edges if e[0] > self.t} | set(self.sources.breakpoints(self.t, t1)) | {t1})
        # edges at the window start apply before integration
        at_start = [e for e in edges if e[0] <= self.t]
        if at_start:
            self._apply_edges(at_start)
            self._settle(self.t)
            self._record_now()
        edges = [e for e in edges if e[0] > self.t]
        for b in barriers:
            while self.t < b:
                self._integrate(b)
            here = [e for e in edges if e[0] == b]
            if here:
                self._apply_edges(here)
            if here or b != t1:
                if self._settle(b) or here:
                    self._record_now()

    def _integrate(self, barrier: float):
        model = self.cache.get(self.cfg)
        monitors = detect.monitors_for(self.net, self.cfg)
        res = solver.integrate_to_barrier(model, self.x, self.sources, self.t, barrier, monitors, self.ctrl,
                                          self.settings.record_dt)
        self.barrier_calls += 1
        self.steps += res.steps
        self.rejected += res.rejected
        self.rec.add(res.times, res.outputs)
        self.x = res.x_end
        self.ctrl = res.ctrl
        if res.terminal == "reached_barrier":
            self.t = barrier
            return
        t_star = res.t_end
        self.t = t_star
        for c in res.crossings:
            self.cfg = detect.diode_transition(self.cfg, c.diode_index)
            self.switches.append(SwitchRecord(t_star, c.diode_id, self.cfg.diodes[c.diode_index], True))
        self._settle(t_star)
        self._record_now()
        if len(self.switches) > MAX_EVENTS_PER_INSTANT and all(
                s.t == t_star for s in self.switches[-MAX_EVENTS_PER_INSTANT:]):
            raise detect.ConsistencyError(f"switch events do not advance time at t={t_star!r}")

    def waveform(self, meta: dict | None = None) -> Waveform:
        return self.rec.waveform(tuple(self.net.output_labels()), dict(meta or {}))


# --- scheduler ----------------------------------------------------------------------

@dataclass
class WallRecord:
    cycle: int
    sync_wall: float
    duration: float
    done_wall: float
    frozen_ticks: int


class Scheduler:
    """Drives one controller against one plant over ``n_cycles`` control cycles."""

    def __init__(self, plant: PlantSession, controller, timing: CycleTiming, sensors=None,
                 durations=None):
        self.plant = plant
        self.controller = controller
        self.timing = timing
        self.sensors = sensors
        self.durations = durations or IdealDurations()
        self.events: list[Event] = []
        self.wall_log: list[WallRecord] = []
        self.sync_a_payloads: list[tuple[int, dict]] = []
        self.commands: list = []
        self._tick = 0
        self._cmd = controller.initial_command()
        self._samples = plant.probe_values()
        self._k = 0

    @property
    def frozen_cycles(self) -> int:
        return self.timing.frozen_cycles

    def _emit(self, kind, t, k, payload=None):
        self.events.append(Event(kind, float(t), k, payload))

    def _x_c(self) -> dict:
        if self.sensors is None:
            return dict(self._samples)
        return sample_map(self._samples, self.sensors)

    def run_cycle(self) -> CycleResult:
        k = self._k
        T_c = self.timing.T_c
        t_k = k * T_c
        self._emit(EventKind.CLOCK, t_k, k, {"edge": "p1", "wall": self._tick * T_c})
        x_c = self._x_c()
        self.sync_a_payloads.append((k, x_c))
        self._emit(EventKind.SYNC_A, t_k, k, x_c)
        self._emit(EventKind.SYNC_B, t_k, k - 1, {"gates": len(self._cmd.gates)})
        schedule = pwm_edges(self._cmd, t_k, T_c, self.plant.gate_states)
        self.commands.append(self._cmd)
        self._emit(EventKind.CONTROL_A, t_k + self.timing.t_d, k)
        try:
            new_cmd = self.controller.step(k, t_k, x_c)
        except Exception as exc:
            raise SimulationError("controller", k, t_k, exc) from exc
        self._emit(EventKind.CONTROL_B, t_k + self.timing.t_d + self.timing.t_run, k)

        start = time.perf_counter()
        try:
            result = self.plant.simulate_control_cycle(k, schedule)
        except SimulationError:
            raise
        except Exception as exc:
            raise SimulationError(getattr(self.plant, "module", "plant"), k, getattr(self.plant, "t", t_k),
                                  exc) from exc
        measured = time.perf_counter() - start
        for s in result.switches:
            kind = EventKind.PASSIVE_SWITCH if s.passive else EventKind.ACTIVE_SWITCH
            self._emit(kind, s.t, k, {"id": s.name, "on": int(s.on)})
        self._emit(EventKind.SIM_DONE, result.t_end, k)
        self.on_sim_done(k, result, measured)
        self._cmd = new_cmd
        self._samples = result.samples
        self._k = k + 1
        return result

    def on_sim_done(self, k: int, result: CycleResult, measured: float):
        """Frozen-state accounting: the next sync is the first clock tick at
        or after the plant's completion in wall time."""
        T_c = self.timing.T_c
        duration = float(self.durations(k, measured))
        self.timing.t_sim_wall.append(duration)
        sync_wall = self._tick * T_c
        done_wall = sync_wall + duration
        j = self._tick + 1
        frozen = 0
        while j * T_c < done_wall:
            self._emit(EventKind.CLOCK, result.t_end, k + 1, {"edge": "p1", "wall": j * T_c, "frozen": 1})
            frozen += 1
            j += 1
        self.timing.frozen_cycles += frozen
        self._tick = j
        self.wall_log.append(WallRecord(k, sync_wall, duration, done_wall, frozen))

    def run(self, n_cycles: int):
        for _ in range(n_cycles):
            self.run_cycle()
        return self

    def event_log(self) -> list[Event]:
        ordered = sorted(self.events, key=lambda e: e.t_sim)  # stable: emission order breaks ties
        return [dataclasses.replace(e, seq=i) for i, e in enumerate(ordered)]


def simulate_control_cycle(plant: PlantSession, k: int, schedule: AseSchedule) -> CycleResult:
    return plant.simulate_control_cycle(k, schedule)


def event_log(sched: Scheduler) -> list[Event]:
    return sched.event_log()


def trace_csv_text(events) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seq", "t_sim_s", "kind", "cycle", "payload_summary"])
    for e in events:
        w.writerow([e.seq, f"{e.t_sim:.17g}", e.kind.value, e.cycle, e.summary()])
    return buf.getvalue()


def wall_log_csv_text(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cycle", "sync_wall_s", "duration_s", "done_wall_s", "frozen_ticks"])
    for r in records:
        w.writerow([r.cycle, f"{r.sync_wall:.17g}", f"{r.duration:.17g}", f"{r.done_wall:.17g}", r.frozen_ticks])
    return buf.getvalue()
