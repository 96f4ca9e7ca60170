"""Brute-force reference plant.

Sources are turned into autonomous linear generators and appended to the
circuit state, so each switch configuration is an autonomous linear system
w' = M w that is propagated exactly with the matrix exponential.  Diode
monitors are checked on a fine absolute time grid (default 1 ns) and every
crossing is refined by bracketing root-finding on the exact flow, to machine
precision in time.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from . import detect
from .circuit import mode_cache
from .controller import AseSchedule
from .events import CycleResult, SwitchRecord, _Recorder

CHUNK = 256


class OracleError(RuntimeError):
    pass


class _Flow:
    """Exact propagators of one configuration on the augmented state."""

    def __init__(self, model, F, H, h: float):
        n, gsize = model.n, F.shape[0]
        M = np.zeros((n + gsize, n + gsize))
        M[:n, :n] = model.A
        M[:n, n:] = model.B @ H
        M[n:, n:] = F
        self.M = M
        self.model = model
        self.Cy = np.hstack([model.C, model.D @ H])
        phi = expm(M * h)
        P = np.empty((CHUNK, len(M), len(M)))
        P[0] = phi
        for j in range(1, CHUNK):
            P[j] = phi @ P[j - 1]
        self.P = P

    def advance(self, w, tau: float):
        return expm(self.M * tau) @ w


class OraclePlant:
    """Reference plant with the same cycle interface as the event-driven session."""

    module = "oracle"

    def __init__(self, net, T_c: float, h: float = 1e-9, record_dt: float | None = None, cache=None):
        if not h > 0:
            raise OracleError("oracle grid step must be > 0")
        self.net = net
        self.T_c = T_c
        self.h = h
        self.record_every = max(1, int(round(record_dt / h))) if record_dt else 1
        self.cache = cache or mode_cache(net)
        self.sources = net.sources()
        self.F, self.H, _ = self.sources.generator(0.0)
        self._flows: dict = {}
        self.cfg = net.initial_config()
        self.gate_index = {g: i for i, g in enumerate(net.gate_ids)}
        self.x = net.initial_state()
        self.t = 0.0
        self.switches: list[SwitchRecord] = []
        self.rec = _Recorder(len(net.output_labels()))
        self.crossing_times: list[tuple[float, str]] = []
        nprobe = len(net.probes)
        self._mon_rows = np.array([[nprobe + 2 * j, nprobe + 2 * j + 1] for j in range(len(net.diodes))],
                                  dtype=int).reshape(-1, 2)
        self._settle(0.0)
        self._record(np.array([0.0]), self.outputs()[None, :])

    @property
    def gate_states(self) -> dict[str, bool]:
        return {g: self.cfg.gates[i] for g, i in self.gate_index.items()}

    def flow(self, cfg) -> _Flow:
        f = self._flows.get(cfg)
        if f is None:
            f = _Flow(self.cache.get(cfg), self.F, self.H, self.h)
            self._flows[cfg] = f
        return f

    def outputs(self) -> np.ndarray:
        model = self.cache.get(self.cfg)
        return model.C @ self.x + model.D @ self.sources.values(self.t)

    def probe_values(self) -> dict[str, float]:
        y = self.outputs()
        return {name: float(y[i]) for i, name in enumerate(self.net.output_labels())}

    def _record(self, times, rows):
        self.rec.add(times, rows)

    def _settle(self, t: float) -> bool:
        before = self.cfg
        cfg, toggled = detect.post_event_consistency(self.cache, self.cfg, self.x, t, self.sources)
        self.cfg = cfg
        for j in toggled:
            self.switches.append(SwitchRecord(t, self.net.diode_ids[j], cfg.diodes[j], True))
        return cfg != before

    # monitors ---------------------------------------------------------------

    def _gaps(self, Y) -> np.ndarray:
        """Monitor gaps (positive = not crossed) for output rows Y, shape (k, #diodes)."""
        on = np.array(self.cfg.diodes, dtype=bool)
        if not len(on):
            return np.empty((len(Y), 0))
        cur = Y[:, self._mon_rows[:, 0]] - self.net.i_threshold
        vol = self.net.v_threshold - Y[:, self._mon_rows[:, 1]]
        return np.where(on, cur, vol)

    def _first_crossing(self, G):
        """Index i of the first interval (i, i+1) with a directed crossing, or None."""
        if G.shape[1] == 0:
            return None, None
        hit = (G[:-1] > 0.0) & (G[1:] <= 0.0)
        rows = np.nonzero(hit.any(axis=1))[0]
        if not len(rows):
            return None, None
        i = int(rows[0])
        return i, np.nonzero(hit[i])[0]

    def _locate(self, flow: _Flow, w, span: float, cands):
        """Earliest root in (0, span] among candidate diodes, on the exact flow."""
        best = []
        for j in cands:
            col = self._mon_rows[j, 0 if self.cfg.diodes[j] else 1]
            c = flow.Cy[col]
            if self.cfg.diodes[j]:
                g = lambda tau: float(c @ flow.advance(w, tau)) - self.net.i_threshold  # noqa: E731
            else:
                g = lambda tau: self.net.v_threshold - float(c @ flow.advance(w, tau))  # noqa: E731
            g_end = g(span)
            if g_end == 0.0:
                tau = span
            else:
                tau = brentq(g, 0.0, span, xtol=1e-24, rtol=4 * np.finfo(float).eps, maxiter=200)
                # land on the crossed side
                if g(tau) > 0.0:
                    tau = np.nextafter(tau, math.inf)
            best.append((tau, j))
        first = min(t for t, _ in best)
        return first, sorted(j for t, j in best if t - first <= 1e-15)

    # integration ---------------------------------------------------------

    def _grid_index(self, t: float) -> int:
        """Index of the last grid point at or before t (with rounding slack)."""
        s = t / self.h
        r = round(s)
        return int(r) if abs(s - r) <= 1e-6 else int(math.floor(s))

    def _segment(self, b: float):
        """Advance from self.t toward barrier b; stops early at a passive event."""
        flow = self.flow(self.cfg)
        _, _, z = self.sources.generator(self.t)
        w = np.concatenate([self.x, z])
        t = self.t
        h = self.h
        n = self._grid_index(t) + 1
        n_end = self._grid_index(b)
        if abs(b / h - n_end) <= 1e-6:
            n_end -= 1  # the barrier itself is reached by the final partial step
        if n <= n_end:
            w1 = flow.advance(w, n * h - t)
            if self._check(flow, t, w, n * h - t, w1):
                return
            w, t = w1, n * h
            if n % self.record_every == 0:
                self._record(np.array([t]), (flow.Cy @ w)[None, :])
            while n < n_end:
                m = min(CHUNK, n_end - n)
                W = flow.P[:m] @ w
                times = (n + 1 + np.arange(m)) * h
                Y = W @ flow.Cy.T
                G = self._gaps(np.vstack([(flow.Cy @ w)[None, :], Y]))
                i, cands = self._first_crossing(G)
                if i is not None:
                    self._record_grid(n + 1, times[:i], Y[:i])
                    w0 = w if i == 0 else W[i - 1]
                    t0 = t if i == 0 else float(times[i - 1])
                    self._event(flow, t0, w0, float(times[i]) - t0, cands)
                    return
                self._record_grid(n + 1, times, Y)
                w, t = W[-1], float(times[-1])
                n += m
        w1 = flow.advance(w, b - t)
        if self._check(flow, t, w, b - t, w1):
            return
        self._record(np.array([b]), (flow.Cy @ w1)[None, :])
        self.x = w1[: flow.model.n].copy()
        self.t = b

    def _check(self, flow, t0, w0, tau, w1) -> bool:
        G = self._gaps(np.vstack([flow.Cy @ w0, flow.Cy @ w1]))
        i, cands = self._first_crossing(G)
        if i is None:
            return False
        self._event(flow, t0, w0, tau, cands)
        return True

    def _record_grid(self, n0, times, Y):
        if len(times) == 0:
            return
        idx = n0 + np.arange(len(times))
        keep = idx % self.record_every == 0
        if np.any(keep):
            self._record(times[keep], Y[keep])

    def _event(self, flow, t0, w0, span, cands):
        tau, fired = self._locate(flow, w0, span, cands)
        w = flow.advance(w0, tau)
        t_star = t0 + tau
        if t_star <= self.rec.last:
            t_star = float(np.nextafter(self.rec.last, math.inf))
        self._record(np.array([t_star]), (flow.Cy @ w)[None, :])
        self.x = w[: flow.model.n].copy()
        self.t = t_star
        for j in fired:
            self.cfg = detect.diode_transition(self.cfg, int(j))
            self.switches.append(SwitchRecord(t_star, self.net.diode_ids[j], self.cfg.diodes[j], True))
            self.crossing_times.append((t_star, self.net.diode_ids[j]))
        self._settle(t_star)
        self._record(np.array([t_star]), self.outputs()[None, :])

    def _apply_edges(self, edges):
        for t, gate, on in edges:
            self.cfg = self.cfg.with_gate(self.gate_index[gate], on)
            self.switches.append(SwitchRecord(t, gate, on, False))

    def simulate_control_cycle(self, k: int, schedule: AseSchedule) -> CycleResult:
        t1 = (k + 1) * self.T_c
        first = len(self.switches)
        edges = list(schedule.edges)
        start = [e for e in edges if e[0] <= self.t]
        if start:
            self._apply_edges(start)
            self._settle(self.t)
            self._record(np.array([self.t]), self.outputs()[None, :])
        edges = [e for e in edges if e[0] > self.t]
        barriers = sorted({e[0] for e in edges} | set(self.sources.breakpoints(self.t, t1)) | {t1})
        guard = 0
        for b in barriers:
            while self.t < b:
                self._segment(b)
                guard += 1
                if guard > 100000:
                    raise OracleError(f"cycle {k}: no progress at t={self.t!r}")
            here = [e for e in edges if e[0] == b]
            if here:
                self._apply_edges(here)
            if here or b != t1:
                if self._settle(b) or here:
                    self._record(np.array([b]), self.outputs()[None, :])
        return CycleResult(k, self.t, self.x.copy(), self.probe_values(), self.switches[first:], 0)

    def waveform(self, meta: dict | None = None):
        return self.rec.waveform(tuple(self.net.output_labels()), dict(meta or {}))
