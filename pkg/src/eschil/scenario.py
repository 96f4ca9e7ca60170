"""Scenario documents: one JSON file per experiment, embedding the netlist,
controller, solver settings, baseline sweep and metric requests."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis
from .baseline import FixedStepPlant
from .circuit import netlist_from_dict
from .controller import (
    CompositeController,
    ConstantController,
    ExternalControllerSession,
    GatePwm,
    NullController,
    PwmConfig,
    RxPiController,
    Sensor,
    TxPhaseShiftController,
)
from .events import CycleTiming, PlantSession, Scheduler
from .oracle import OraclePlant
from .solver import SolverSettings

ES = "ES"
ORACLE = "oracle"


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    netlist_doc: dict
    control_period: float
    duration: float
    controller: dict
    solver: SolverSettings
    baselines: list = field(default_factory=list)
    oracle: dict = field(default_factory=dict)
    sensors: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    t_d: float = 0.0
    t_run: float = 0.0
    baseline_record_dt: float | None = None
    doc: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.duration > 0:
            raise ScenarioError("duration must be > 0")
        if not self.control_period > 0:
            raise ScenarioError("control_period must be > 0")
        self.net = netlist_from_dict(self.netlist_doc)
        labels = set(self.net.output_labels())
        for s in self.sensors:
            if s.probe not in labels:
                raise ScenarioError(f"sensor references unknown probe {s.probe!r}")
        for b in self.baselines:
            n = round(self.control_period / b["h"])
            if n < 1 or abs(n * b["h"] - self.control_period) > 1e-9 * self.control_period:
                raise ScenarioError(f"baseline step {b['h']!r} does not divide T_c")

    @property
    def n_cycles(self) -> int:
        return int(round(self.duration / self.control_period))

    def content_hash(self, extra=None) -> str:
        blob = json.dumps([self.doc, extra], sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def timing(self) -> CycleTiming:
        return CycleTiming(self.control_period, self.t_d, self.t_run)


def run_name(method: str, h: float) -> str:
    return f"{method}_{h * 1e9:g}ns"


def scenario_from_dict(doc: dict, base_dir: Path | None = None) -> Scenario:
    doc = copy.deepcopy(doc)
    try:
        net_doc = doc.get("netlist")
        if net_doc is None:
            path = Path(doc["netlist_path"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            net_doc = json.loads(path.read_text())
        sensors = [Sensor(**s) for s in doc.get("sensors", [])]
        return Scenario(
            name=str(doc.get("name", "scenario")),
            netlist_doc=net_doc,
            control_period=float(doc["control_period"]),
            duration=float(doc["duration"]),
            controller=doc.get("controller", {"type": "null"}),
            solver=SolverSettings.from_dict(doc.get("solver")),
            baselines=[{"method": b["method"], "h": float(b["h"])} for b in doc.get("baselines", [])],
            oracle=dict(doc.get("oracle", {})),
            sensors=sensors,
            metrics=dict(doc.get("metrics", {})),
            t_d=float(doc.get("t_d", 0.0)),
            t_run=float(doc.get("t_run", 0.0)),
            baseline_record_dt=doc.get("baseline_record_dt"),
            doc=doc,
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing {exc}") from None
    except TypeError as exc:
        raise ScenarioError(f"bad scenario field: {exc}") from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON: {exc}") from None
    return scenario_from_dict(doc, path.parent)


def bundled(name: str) -> Path:
    """Path of a bundled scenario file, e.g. ``bundled("fig2a")``."""
    ref = resources.files("eschil") / "scenarios" / f"{name}.json"
    return Path(str(ref))


def load_bundled(name: str) -> Scenario:
    return load_scenario(bundled(name))


# --- controllers ------------------------------------------------------------------

def _pwm_from_list(items) -> PwmConfig:
    return PwmConfig(tuple(GatePwm(**g) for g in items))


def build_controller(scn: Scenario, spec: dict | None = None):
    spec = spec or scn.controller
    kind = spec.get("type", "null")
    if kind == "null":
        return NullController()
    if kind == "constant":
        return ConstantController(_pwm_from_list(spec["gates"]))
    if kind == "tx_phase_shift":
        return TxPhaseShiftController(tuple(spec["gates"]), float(spec["period"]), float(spec["steady_shift"]),
                                      float(spec.get("ramp_time", 0.01)), float(spec.get("dead_time", 0.0)))
    if kind == "rx_pi":
        return RxPiController(
            gate=spec["gate"], signal=spec["signal"], setpoint=float(spec["setpoint"]),
            kp=float(spec["kp"]), ki=float(spec["ki"]), period=float(spec["period"]),
            control_period=scn.control_period, decimation=int(spec.get("decimation", 8)),
            initial_duty=float(spec.get("initial_duty", 0.0)), enable_time=float(spec.get("enable_time", 0.01)),
            carrier=spec.get("carrier", "sawtooth"),
        )
    if kind == "composite":
        return CompositeController([build_controller(scn, p) for p in spec["parts"]])
    if kind == "external":
        host, port = spec["endpoint"]
        signals = spec.get("signals") or [s.label for s in scn.sensors] or scn.net.output_labels()
        return ExternalControllerSession((host, int(port)), _pwm_from_list(spec["template"]), signals)
    raise ScenarioError(f"unknown controller type {kind!r}")


# --- runs ----------------------------------------------------------------------------

@dataclass
class RunResult:
    name: str
    waveform: analysis.Waveform
    scheduler: Scheduler
    plant: object

    @property
    def switches(self):
        return self.plant.switches


def _drive(scn: Scenario, plant, name: str, controller=None, durations=None, n_cycles=None) -> RunResult:
    ctl = controller if controller is not None else build_controller(scn)
    sched = Scheduler(plant, ctl, scn.timing(), scn.sensors or None, durations)
    sched.run(scn.n_cycles if n_cycles is None else n_cycles)
    meta = {"scenario": scn.name, "solver": name}
    return RunResult(name, plant.waveform(meta), sched, plant)


def run_es(scn: Scenario, controller=None, durations=None, n_cycles=None) -> RunResult:
    plant = PlantSession(scn.net, scn.control_period, scn.solver)
    return _drive(scn, plant, ES, controller, durations, n_cycles)


def run_baseline(scn: Scenario, method: str, h: float, controller=None, n_cycles=None) -> RunResult:
    every = 1
    if scn.baseline_record_dt:
        every = max(1, int(round(scn.baseline_record_dt / h)))
    plant = FixedStepPlant(scn.net, scn.control_period, method, h, every)
    return _drive(scn, plant, run_name(method, h), controller, None, n_cycles)


def oracle_step(scn: Scenario, h: float | None = None) -> float:
    return float(h if h is not None else scn.oracle.get("h", 1e-9))


def run_oracle(scn: Scenario, h: float | None = None, controller=None, n_cycles=None) -> RunResult:
    h = oracle_step(scn, h)
    plant = OraclePlant(scn.net, scn.control_period, h, scn.oracle.get("record_dt"))
    return _drive(scn, plant, ORACLE, controller, None, n_cycles)


def cache_dir() -> Path:
    root = os.environ.get("ESCHIL_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "eschil")
    return Path(root)


def cached_oracle(scn: Scenario, h: float | None = None, use_cache: bool = True):
    """Oracle waveform and passive-switch list, cached by content hash of (scenario, h)."""
    h = oracle_step(scn, h)
    key = scn.content_hash({"oracle_h": h, "version": 1})
    path = cache_dir() / f"oracle_{scn.name}_{key}.npz"
    if use_cache and path.exists():
        with np.load(path, allow_pickle=False) as z:
            w = analysis.Waveform(z["t"], tuple(str(n) for n in z["names"]), z["values"],
                                  {"scenario": scn.name, "solver": ORACLE, "h": h})
            sw = [(float(t), str(n), bool(o)) for t, n, o in zip(z["sw_t"], z["sw_name"], z["sw_on"])]
        return w, sw
    res = run_oracle(scn, h)
    sw = [(s.t, s.name, s.on) for s in res.switches if s.passive]
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, t=res.waveform.t, names=np.array(res.waveform.names), values=res.waveform.values,
                 sw_t=np.array([s[0] for s in sw], dtype=float), sw_name=np.array([s[1] for s in sw], dtype=str),
                 sw_on=np.array([s[2] for s in sw], dtype=bool))
        os.replace(tmp, path)
    res.waveform.meta["h"] = h
    return res.waveform, sw


def blocked_spans(switches, diode_ids, initial: dict, t_end: float, t_start: float = 0.0):
    """Spans where every listed diode blocks, from (t, name, on) passive records."""
    spans = None
    for d in diode_ids:
        tr = [(t, on) for t, name, on in switches if name == d]
        s = analysis.off_spans(tr, initial.get(d, False), t_start, t_end)
        spans = s if spans is None else analysis.intersect_spans(spans, s)
    return spans or []


def oracle_self_check(scn: Scenario, h: float | None = None, n_cycles=None, reference=None) -> dict:
    """Relative error of the oracle at ``h`` against itself at ``h/2``, per probe."""
    h = oracle_step(scn, h)
    coarse = reference if reference is not None else run_oracle(scn, h, n_cycles=n_cycles).waveform
    fine = run_oracle(scn, h / 2, n_cycles=n_cycles).waveform
    return {s: analysis.relative_error(coarse, fine, s) for s in scn.net.output_labels()[: len(scn.net.probes)]}
