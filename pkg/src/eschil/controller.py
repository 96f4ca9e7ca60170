"""Discrete controller model: sampling, control laws, PWM commands and their
expansion into pre-known active switch-event (ASE) schedules.

A controller is any object with ``initial_command() -> PwmConfig`` and
``step(k, t, samples) -> PwmConfig``; it is invoked once per control cycle
and never mid-window.
"""

from __future__ import annotations

import dataclasses
import math
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

SAWTOOTH = "sawtooth"
TRIANGLE = "triangle"


class ControllerError(ValueError):
    pass


@dataclass(frozen=True)
class GatePwm:
    """Carrier/reference comparison for one gate: on while carrier < duty.

    A gate with ``complement_of`` set is driven as the inverse of that gate's
    reference, and both gates of the pair delay their rising edges by
    ``dead_time``.
    """

    gate: str
    period: float
    duty: float = 0.0
    phase: float = 0.0  # fraction of the period, in [0, 1)
    carrier: str = SAWTOOTH
    inverted: bool = False
    complement_of: str | None = None
    dead_time: float = 0.0

    def __post_init__(self):
        if self.carrier not in (SAWTOOTH, TRIANGLE):
            raise ControllerError(f"{self.gate}: unknown carrier {self.carrier!r}")
        if not self.period > 0:
            raise ControllerError(f"{self.gate}: carrier period must be > 0")
        if not 0.0 <= self.duty <= 1.0:
            raise ControllerError(f"{self.gate}: duty {self.duty!r} outside [0, 1]")
        if not 0.0 <= self.phase < 1.0:
            raise ControllerError(f"{self.gate}: phase {self.phase!r} outside [0, 1)")
        if not 0.0 <= self.dead_time < self.period / 2:
            raise ControllerError(f"{self.gate}: dead time must be in [0, period/2)")


@dataclass(frozen=True)
class PwmConfig:
    gates: tuple[GatePwm, ...]

    def __post_init__(self):
        names = [g.gate for g in self.gates]
        if len(set(names)) != len(names):
            raise ControllerError("duplicate gate in PwmConfig")
        by_name = {g.gate: g for g in self.gates}
        for g in self.gates:
            if g.complement_of is not None:
                lead = by_name.get(g.complement_of)
                if lead is None or lead.complement_of is not None:
                    raise ControllerError(f"{g.gate}: complement_of must name an independent gate")

    @property
    def independent(self) -> tuple[GatePwm, ...]:
        return tuple(g for g in self.gates if g.complement_of is None)

    def gate(self, name: str) -> GatePwm:
        for g in self.gates:
            if g.gate == name:
                return g
        raise KeyError(name)

    def merged(self, other: "PwmConfig") -> "PwmConfig":
        return PwmConfig(self.gates + other.gates)

    def with_gate(self, name: str, **changes) -> "PwmConfig":
        return PwmConfig(tuple(dataclasses.replace(g, **changes) if g.gate == name else g for g in self.gates))


@dataclass(frozen=True)
class AseSchedule:
    """Time-sorted gate edges ``(t, gate, on)`` inside ``[t0, t1)``."""

    t0: float
    t1: float
    edges: tuple[tuple[float, str, bool], ...]

    def __post_init__(self):
        times = [e[0] for e in self.edges]
        if times != sorted(times):
            raise ControllerError("ASE schedule not time-sorted")
        if times and not (self.t0 <= times[0] and times[-1] < self.t1):
            raise ControllerError("ASE edge outside its window")

    def __len__(self):
        return len(self.edges)


def _on_fraction(g: GatePwm) -> tuple[float, float] | None:
    """Carrier-phase interval [a, b) where the raw comparison is on."""
    d = g.duty
    if d <= 0.0:
        return None
    if d >= 1.0:
        return (0.0, 1.0)
    if g.carrier == SAWTOOTH:
        return (0.0, d)
    return ((1.0 - d) / 2.0, (1.0 + d) / 2.0)


def _raw_intervals(g: GatePwm, lo: float, hi: float) -> list[tuple[float, float]]:
    """On-intervals of the (non-inverted) reference covering [lo, hi]."""
    frac = _on_fraction(g)
    if frac is None:
        return []
    if frac == (0.0, 1.0):
        return [(-math.inf, math.inf)]
    a, b = frac
    T = g.period
    n0 = math.floor(lo / T - g.phase) - 1
    n1 = math.ceil(hi / T - g.phase) + 1
    return [((n + g.phase + a) * T, (n + g.phase + b) * T) for n in range(n0, n1 + 1)]


def _complement(intervals, lo: float, hi: float) -> list[tuple[float, float]]:
    out = []
    cur = -math.inf
    for s, e in intervals:
        if s > cur:
            out.append((cur, s))
        cur = max(cur, e)
    if cur < math.inf:
        out.append((cur, math.inf))
    return out


def _delay_rising(intervals, dead: float) -> list[tuple[float, float]]:
    if dead <= 0.0:
        return list(intervals)
    # pulses no longer than the dead time vanish; the margin absorbs rounding in s + dead
    return [(s + dead, e) for s, e in intervals if e - s - dead > 1e-9 * dead]


def _merge(intervals) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for s, e in sorted(intervals):
        if not e > s:
            continue  # rounding can collapse a tiny pulse to nothing
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def gate_intervals(cfg: PwmConfig, name: str, lo: float, hi: float) -> list[tuple[float, float]]:
    """Merged on-intervals of one gate, valid over [lo, hi]."""
    g = cfg.gate(name)
    lead = cfg.gate(g.complement_of) if g.complement_of else g
    margin = lead.period + lead.dead_time + g.dead_time
    raw = _raw_intervals(lead, lo - margin, hi + margin)
    if lead.inverted:
        raw = _complement(raw, lo, hi)
    if g.complement_of:
        raw = _complement(_merge(raw), lo, hi)
    dead = max(g.dead_time, lead.dead_time) if g.complement_of or any(
        o.complement_of == g.gate for o in cfg.gates) else 0.0
    return _merge(_delay_rising(_merge(raw), dead))


def gate_state(cfg: PwmConfig, name: str, t: float) -> bool:
    return any(s <= t < e for s, e in gate_intervals(cfg, name, t, t))


def pwm_edges(cfg: PwmConfig, t0: float, T_c: float, previous: dict | None = None) -> AseSchedule:
    """Expand a command into its analytic gate edges for the window [t0, t0+T_c).

    ``previous`` maps gate -> state just before ``t0``; a gate whose state at
    ``t0`` differs gets an edge at ``t0`` itself.  Gates absent from
    ``previous`` are assumed off.
    """
    t1 = t0 + T_c
    previous = previous or {}
    edges = []
    for g in cfg.gates:
        iv = gate_intervals(cfg, g.gate, t0, t1)
        state0 = any(s <= t0 < e for s, e in iv)
        if state0 != bool(previous.get(g.gate, False)):
            edges.append((t0, g.gate, state0))
        for s, e in iv:
            if t0 < s < t1:
                edges.append((s, g.gate, True))
            if t0 < e < t1:
                edges.append((e, g.gate, False))
    order = {g.gate: i for i, g in enumerate(cfg.gates)}
    # at equal times apply turn-offs first so a pair never overlaps
    edges.sort(key=lambda e: (e[0], e[2], order[e[1]]))
    return AseSchedule(t0, t1, tuple(edges))


def states_at(cfg: PwmConfig, t: float) -> dict[str, bool]:
    return {g.gate: gate_state(cfg, g.gate, t) for g in cfg.gates}


def phase_shift_bridge(gates, period: float, shift: float, dead_time: float = 0.0) -> PwmConfig:
    """Full bridge with 50 % legs; leg B lags leg A by ``shift`` radians."""
    s1, s2, s3, s4 = gates
    phase_b = (shift / (2.0 * math.pi)) % 1.0
    return PwmConfig((
        GatePwm(s1, period, 0.5, 0.0, dead_time=dead_time),
        GatePwm(s2, period, 0.5, 0.0, complement_of=s1, dead_time=dead_time),
        GatePwm(s3, period, 0.5, phase_b, dead_time=dead_time),
        GatePwm(s4, period, 0.5, phase_b, complement_of=s3, dead_time=dead_time),
    ))


# --- sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class Sensor:
    probe: str
    gain: float = 1.0
    offset: float = 0.0
    name: str | None = None
    bits: int | None = None  # optional uniform quantizer
    full_scale: float = 1.0

    @property
    def label(self) -> str:
        return self.name or self.probe

    def convert(self, value: float) -> float:
        v = self.gain * value + self.offset
        if self.bits:
            lsb = 2.0 * self.full_scale / 2 ** self.bits
            v = float(np.clip(np.round(v / lsb) * lsb, -self.full_scale, self.full_scale - lsb))
        return v


def sample_map(probes: dict, sensors) -> dict[str, float]:
    out = {}
    for s in sensors:
        if s.probe not in probes:
            raise ControllerError(f"sensor references unknown probe {s.probe!r}")
        out[s.label] = s.convert(float(probes[s.probe]))
    return out


# --- controllers --------------------------------------------------------------

class ConstantController:
    """Always issues the same command."""

    def __init__(self, command: PwmConfig):
        self.command = command

    def initial_command(self) -> PwmConfig:
        return self.command

    def step(self, k: int, t: float, samples: dict) -> PwmConfig:
        return self.command


class NullController(ConstantController):
    def __init__(self):
        super().__init__(PwmConfig(()))


@dataclass
class TxPhaseShiftController:
    """Open-loop phase-shift ramp to a fixed steady shift."""

    gates: tuple[str, str, str, str]
    period: float
    steady_shift: float  # rad
    ramp_time: float = 0.01
    dead_time: float = 0.0

    def shift_at(self, t: float) -> float:
        if self.ramp_time <= 0:
            return self.steady_shift
        return self.steady_shift * min(max(t / self.ramp_time, 0.0), 1.0)

    def initial_command(self) -> PwmConfig:
        return phase_shift_bridge(self.gates, self.period, self.shift_at(0.0), self.dead_time)

    def step(self, k: int, t: float, samples: dict) -> PwmConfig:
        return phase_shift_bridge(self.gates, self.period, self.shift_at(t), self.dead_time)


@dataclass
class RxPiController:
    """PI regulation of the averaged output current through a buck duty.

    Samples arrive every control cycle; the law runs every ``decimation``
    cycles on their mean.  The integrator is frozen while the duty is
    saturated (conditional-integration anti-windup).
    """

    gate: str
    signal: str
    setpoint: float
    kp: float
    ki: float  # per second
    period: float  # buck carrier period
    control_period: float
    decimation: int = 8
    initial_duty: float = 0.0
    enable_time: float = 0.01
    carrier: str = "sawtooth"
    integrator: float = 0.0
    duty: float = 0.0
    _acc: list = field(default_factory=list, repr=False)

    def _command(self) -> PwmConfig:
        return PwmConfig((GatePwm(self.gate, self.period, self.duty, carrier=self.carrier),))

    def initial_command(self) -> PwmConfig:
        return self._command()

    def update(self, error: float) -> float:
        """One PI evaluation; returns the new duty."""
        dt = self.control_period * self.decimation
        raw = self.initial_duty + self.kp * error + self.ki * (self.integrator + error * dt)
        if 0.0 <= raw <= 1.0:
            self.integrator += error * dt
            self.duty = raw
        else:
            self.duty = min(max(raw, 0.0), 1.0)
        return self.duty

    def step(self, k: int, t: float, samples: dict) -> PwmConfig:
        if t < self.enable_time:
            self._acc.clear()
            self.duty = 0.0
            return self._command()
        if self.signal not in samples:
            raise ControllerError(f"RX controller needs sample {self.signal!r}")
        self._acc.append(samples[self.signal])
        if len(self._acc) >= self.decimation:
            mean = float(np.mean(self._acc))
            self._acc.clear()
            self.update(self.setpoint - mean)
        return self._command()


class CompositeController:
    """Runs several controllers on the same samples and merges their gates."""

    def __init__(self, parts):
        self.parts = list(parts)

    def initial_command(self) -> PwmConfig:
        cmd = PwmConfig(())
        for p in self.parts:
            cmd = cmd.merged(p.initial_command())
        return cmd

    def step(self, k: int, t: float, samples: dict) -> PwmConfig:
        cmd = PwmConfig(())
        for p in self.parts:
            cmd = cmd.merged(p.step(k, t, samples))
        return cmd


# --- wire protocol ------------------------------------------------------------

MAGIC = 0x45534348
VERSION = 1
SYNC_A = 1
SYNC_B = 2
_HEADER = struct.Struct("<IHHQH")


class ProtocolError(RuntimeError):
    def __init__(self, message: str, cycle: int | None = None):
        super().__init__(f"cycle {cycle}: {message}" if cycle is not None else message)
        self.cycle = cycle


@dataclass(frozen=True)
class Frame:
    kind: int
    cycle: int
    payload: tuple[float, ...]


def encode_frame(kind: int, cycle: int, payload) -> bytes:
    payload = [float(v) for v in payload]
    return _HEADER.pack(MAGIC, VERSION, kind, cycle, len(payload)) + struct.pack(f"<{len(payload)}d", *payload)


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed by peer")
        buf += chunk
    return bytes(buf)


def decode_frame(data: bytes, cycle: int | None = None) -> Frame:
    if len(data) < _HEADER.size:
        raise ProtocolError("truncated frame header", cycle)
    magic, version, kind, k, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"malformed frame: bad magic 0x{magic:08x}", cycle)
    if version != VERSION:
        raise ProtocolError(f"protocol version mismatch: got {version}, expected {VERSION}", cycle)
    if kind not in (SYNC_A, SYNC_B):
        raise ProtocolError(f"malformed frame: unknown kind {kind}", cycle)
    if len(data) != _HEADER.size + 8 * count:
        raise ProtocolError("malformed frame: payload length mismatch", cycle)
    return Frame(kind, k, struct.unpack_from(f"<{count}d", data, _HEADER.size))


def read_frame(sock, cycle: int | None = None) -> Frame:
    head = _recv_exact(sock, _HEADER.size)
    count = _HEADER.unpack(head)[4]
    return decode_frame(head + _recv_exact(sock, 8 * count), cycle)


def command_payload(cmd: PwmConfig) -> list[float]:
    """SyncB payload: (duty, phase) per independent gate, then one carrier period."""
    out = []
    for g in cmd.independent:
        out += [g.duty, g.phase]
    out.append(cmd.independent[0].period if cmd.independent else 0.0)
    return out


def command_from_payload(template: PwmConfig, payload, cycle: int) -> PwmConfig:
    ind = template.independent
    if len(payload) != 2 * len(ind) + 1:
        raise ProtocolError(f"malformed frame: expected {2 * len(ind) + 1} values, got {len(payload)}", cycle)
    period = payload[-1]
    if not (math.isfinite(period) and period > 0):
        raise ProtocolError(f"malformed frame: carrier period {period!r}", cycle)
    changes = {}
    for g, duty, phase in zip(ind, payload[0::2], payload[1::2]):
        if not (math.isfinite(duty) and 0.0 <= duty <= 1.0):
            raise ProtocolError(f"malformed frame: duty {duty!r} for gate {g.gate}", cycle)
        if not (math.isfinite(phase) and 0.0 <= phase < 1.0):
            raise ProtocolError(f"malformed frame: phase {phase!r} for gate {g.gate}", cycle)
        changes[g.gate] = (duty, phase)
    gates = []
    for g in template.gates:
        lead = g.complement_of or g.gate
        duty, phase = changes[lead]
        gates.append(dataclasses.replace(g, duty=duty, phase=phase, period=period))
    try:
        return PwmConfig(tuple(gates))
    except ControllerError as exc:
        raise ProtocolError(f"malformed frame: {exc}", cycle) from None


class ExternalControllerSession:
    """Controller living in another process, reached over a byte stream.

    ``step`` sends the samples as SyncA and blocks until the matching SyncB
    arrives; blocking is harmless because the scheduler freezes the
    controller side anyway.
    """

    def __init__(self, endpoint, template: PwmConfig, signals, timeout: float | None = 30.0):
        self.template = template
        self.signals = list(signals)
        self.sock = socket.create_connection(endpoint, timeout=timeout)
        self.wall_log: list[tuple[int, float]] = []

    def initial_command(self) -> PwmConfig:
        return self.template

    def step(self, k: int, t: float, samples: dict) -> PwmConfig:
        start = time.perf_counter()
        try:
            self.sock.sendall(encode_frame(SYNC_A, k, [samples[s] for s in self.signals]))
            frame = read_frame(self.sock, k)
        except (OSError, ConnectionError) as exc:
            raise ProtocolError(f"connection lost: {exc}", k) from None
        if frame.kind != SYNC_B or frame.cycle != k:
            raise ProtocolError(f"malformed frame: expected SyncB for cycle {k}, got kind {frame.kind} cycle {frame.cycle}", k)
        self.wall_log.append((k, time.perf_counter() - start))
        return command_from_payload(self.template, frame.payload, k)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class EchoPeer:
    """Loopback peer answering every SyncA with a fixed SyncB payload."""

    def __init__(self, payload, delay: float = 0.0, host: str = "127.0.0.1"):
        self.payload = list(payload)
        self.delay = delay
        self.server = socket.create_server((host, 0))
        self.endpoint = self.server.getsockname()[:2]
        self.thread = threading.Thread(target=self._serve, daemon=True)
        self.thread.start()

    def _serve(self):
        try:
            conn, _ = self.server.accept()
        except OSError:
            return
        with conn:
            while True:
                try:
                    frame = read_frame(conn)
                except (ConnectionError, OSError, ProtocolError):
                    return
                if self.delay:
                    time.sleep(self.delay)
                conn.sendall(encode_frame(SYNC_B, frame.cycle, self.payload))

    def close(self):
        self.server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
