"""Fixed-step time-synchronized baselines (Forward / Backward Euler).

Diodes are decided once per step from the previous step's outputs by plain
threshold comparison, and gate edges are snapped to the step grid.  This
is the conventional real-time CHIL recipe whose chattering the event-driven
engine avoids.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .circuit import mode_cache
from .events import CycleResult, SwitchRecord, _Recorder
from .controller import AseSchedule

FE = "FE"
BE = "BE"


class BaselineError(RuntimeError):
    pass


def fe_step(model, x, u, h: float) -> np.ndarray:
    return x + h * (model.A @ x + model.B @ u)


_be_lock = threading.Lock()
_be_cache: dict = {}


def _be_factor(model, h: float):
    key = (id(model), h)
    with _be_lock:
        hit = _be_cache.get(key)
        if hit is not None and hit[0] is model:
            return hit[1]
    M = np.eye(model.n) - h * model.A
    if model.n and np.linalg.cond(M) > 1e14:
        raise BaselineError(f"(I - h*A) is singular for h={h!r}")
    lu = lu_factor(M) if model.n else None
    with _be_lock:
        _be_cache[key] = (model, lu)
    return lu


def be_step(model, x, u_next, h: float) -> np.ndarray:
    lu = _be_factor(model, h)
    rhs = x + h * (model.B @ u_next)
    return lu_solve(lu, rhs) if lu is not None else rhs


class _StepMaps:
    """Per-configuration affine step map x' = P x + Q u."""

    def __init__(self, cache, method: str, h: float):
        self.cache = cache
        self.method = method
        self.h = h
        self.maps = {}

    def get(self, cfg):
        m = self.maps.get(cfg)
        if m is None:
            model = self.cache.get(cfg)
            n = model.n
            if self.method == FE:
                P = np.eye(n) + self.h * model.A
                Q = self.h * model.B
            else:
                M = np.eye(n) - self.h * model.A
                if n and np.linalg.cond(M) > 1e14:
                    raise BaselineError(f"(I - h*A) is singular for h={self.h!r}")
                P = np.linalg.solve(M, np.eye(n)) if n else np.eye(0)
                Q = P @ (self.h * model.B)
            m = (model, P, Q)
            self.maps[cfg] = m
        return m


class FixedStepPlant:
    """Plant with the same cycle interface as the event-driven session."""

    module = "baseline"

    def __init__(self, net, T_c: float, method: str, h: float, record_every: int = 1, cache=None):
        if method not in (FE, BE):
            raise BaselineError(f"unknown method {method!r}")
        if not h > 0:
            raise BaselineError("h must be > 0")
        n_steps = round(T_c / h)
        if n_steps < 1 or abs(n_steps * h - T_c) > 4 * np.spacing(T_c):
            raise BaselineError(f"h={h!r} does not divide T_c={T_c!r}")
        self.net = net
        self.T_c = T_c
        self.method = method
        self.h = h
        self.n_steps = n_steps
        self.record_every = max(1, int(record_every))
        self.cache = cache or mode_cache(net)
        self.maps = _StepMaps(self.cache, method, h)
        self.sources = net.sources()
        self.cfg = net.initial_config()
        self.gate_index = {g: i for i, g in enumerate(net.gate_ids)}
        self.x = net.initial_state()
        self.t = 0.0
        self.switches: list[SwitchRecord] = []
        self.rec = _Recorder(len(net.output_labels()))
        nprobe = len(net.probes)
        self._i_idx = np.array([nprobe + 2 * j for j in range(len(net.diodes))], dtype=int)
        self._v_idx = self._i_idx + 1
        self._step_count = 0
        self._carry: list = []  # edges after the last grid point of the previous window
        self.rec.add(np.array([0.0]), self._outputs(self.x, self.sources.values(0.0))[None, :])

    @property
    def gate_states(self) -> dict[str, bool]:
        return {g: self.cfg.gates[i] for g, i in self.gate_index.items()}

    def _outputs(self, x, u):
        model = self.cache.get(self.cfg)
        return model.C @ x + model.D @ u

    def probe_values(self) -> dict[str, float]:
        y = self._outputs(self.x, self.sources.values(self.t))
        return {name: float(y[i]) for i, name in enumerate(self.net.output_labels())}

    def _decide_diodes(self, y, t):
        cfg = self.cfg
        for j, on in enumerate(cfg.diodes):
            if on and y[self._i_idx[j]] < self.net.i_threshold:
                cfg = cfg.with_diode(j, False)
                self.switches.append(SwitchRecord(t, self.net.diode_ids[j], False, True))
            elif not on and y[self._v_idx[j]] > self.net.v_threshold:
                cfg = cfg.with_diode(j, True)
                self.switches.append(SwitchRecord(t, self.net.diode_ids[j], True, True))
        self.cfg = cfg

    def simulate_control_cycle(self, k: int, schedule: AseSchedule) -> CycleResult:
        t0 = k * self.T_c
        h = self.h
        grid = t0 + h * np.arange(self.n_steps + 1)
        grid[-1] = (k + 1) * self.T_c
        U = self.sources.values_on(grid)
        first = len(self.switches)
        edges = self._carry + list(schedule.edges)
        e = 0
        x = self.x
        times, rows = [], []
        for i in range(self.n_steps):
            t = grid[i]
            # edges snap to the first grid point at or after their time
            while e < len(edges) and edges[e][0] <= t + 1e-9 * h:
                _, gate, on = edges[e]
                gi = self.gate_index[gate]
                if self.cfg.gates[gi] != on:
                    self.cfg = self.cfg.with_gate(gi, on)
                    self.switches.append(SwitchRecord(t, gate, on, False))
                e += 1
            model, P, Q = self.maps.get(self.cfg)
            u = U[i + 1] if self.method == BE else U[i]
            x = P @ x + Q @ u
            y = model.C @ x + model.D @ U[i + 1]
            self._step_count += 1
            if self._step_count % self.record_every == 0 or i == self.n_steps - 1:
                times.append(grid[i + 1])
                rows.append(y)
            self._decide_diodes(y, grid[i + 1])
        # edges after the last step start snap to the next window's first point
        self._carry = [ed for ed in edges[e:] if ed[0] <= grid[-1] + 1e-9 * h]
        if len(self._carry) != len(edges) - e:
            raise BaselineError(f"cycle {k}: edges beyond the window")
        self.x = x
        self.t = grid[-1]
        if times:
            self.rec.add(np.array(times), np.array(rows))
        return CycleResult(k, self.t, x.copy(), self.probe_values(), self.switches[first:], 0)

    def waveform(self, meta: dict | None = None):
        return self.rec.waveform(tuple(self.net.output_labels()), dict(meta or {}))


def run_ts_chil(net, controller, T_c: float, n_cycles: int, method: str, h: float, sensors=None,
                record_every: int = 1):
    """Fixed-step run synchronized with the controller every T_c/h steps."""
    from .events import CycleTiming, Scheduler

    plant = FixedStepPlant(net, T_c, method, h, record_every)
    sched = Scheduler(plant, controller, CycleTiming(T_c), sensors)
    sched.run(n_cycles)
    return plant.waveform({"solver": f"{method}", "h": h}), sched

