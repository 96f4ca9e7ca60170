"""Passive switch-event (diode commutation) detection.

A conducting diode is watched for its current falling to the current
threshold; a blocked diode for its anode-cathode voltage rising to the
voltage threshold.  Crossings are located on the Taylor polynomial of the
monitored output that the solver already built for the step, so no extra
derivative work is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CURRENT_ZERO = "current_zero"
VOLTAGE_THRESHOLD = "voltage_threshold"
FALLING = "falling"
RISING = "rising"

MAX_ITER = 50
TIME_TOL = 1e-15
SCAN_POINTS = 8
TIE_TOL = 1e-15
HYSTERESIS = 1e-6


class DetectionError(RuntimeError):
    pass


class ConsistencyError(RuntimeError):
    def __init__(self, message, configs=()):
        super().__init__(message)
        self.configs = list(configs)


@dataclass(frozen=True)
class PassiveMonitor:
    diode_id: str
    diode_index: int
    watch: str
    output_index: int
    threshold: float
    direction: str

    @property
    def residual_tol(self) -> float:
        return 1e-9 * max(1.0, abs(self.threshold))

    def gap(self, y):
        """Positive while the monitor has not crossed, <= 0 once it has."""
        if self.direction == FALLING:
            return y - self.threshold
        return self.threshold - y


@dataclass(frozen=True)
class CrossingReport:
    t_rel: float  # offset from the start of the step
    iterations: int
    residual: float
    diode_id: str = ""
    diode_index: int = -1
    t: float | None = None  # absolute time, filled in by the solver


def monitors_for(net, cfg) -> list[PassiveMonitor]:
    """Exactly one armed monitor per diode, matching its conduction bit."""
    nprobe = len(net.probes)
    mons = []
    for j, (d, on) in enumerate(zip(net.diodes, cfg.diodes)):
        if on:
            mons.append(PassiveMonitor(d.name, j, CURRENT_ZERO, nprobe + 2 * j, net.i_threshold, FALLING))
        else:
            mons.append(PassiveMonitor(d.name, j, VOLTAGE_THRESHOLD, nprobe + 2 * j + 1, net.v_threshold, RISING))
    return mons


def _poly(coeffs: np.ndarray, dt: float) -> float:
    # Horner on y^(i) dt^i / i!
    p = len(coeffs) - 1
    acc = coeffs[p]
    for i in range(p, 0, -1):
        acc = coeffs[i - 1] + acc * dt / i
    return float(acc)


def output_poly_eval(stack, index: int, dt: float) -> float:
    if not 0 <= index < stack.y.shape[1]:
        raise IndexError(f"output index {index} out of range (q={stack.y.shape[1]})")
    return _poly(stack.y[:, index], dt)


def _refine(coeffs, mon: PassiveMonitor, a: float, b: float, ga: float, gb: float):
    """Secant iteration on a bracket with g(a) > 0 >= g(b), bisection fallback."""
    tol = mon.residual_tol
    if gb == 0.0:
        return b, 0, 0.0
    x0, g0, x1, g1 = a, ga, b, gb
    it = 0
    while it < 4 * MAX_ITER:
        if it < MAX_ITER and g1 != g0:
            x2 = x1 - g1 * (x1 - x0) / (g1 - g0)
            if not a < x2 < b:
                x2 = 0.5 * (a + b)
        else:
            x2 = 0.5 * (a + b)
        it += 1
        g2 = mon.gap(_poly(coeffs, x2))
        if abs(g2) <= tol:
            return x2, it, abs(g2)
        if g2 > 0:
            a, ga = x2, g2
        else:
            b, gb = x2, g2
        if b - a <= TIME_TOL or x2 in (a, b) and b - a <= 4 * np.spacing(b):
            # bracket exhausted: report the already-crossed end
            return b, it, abs(gb)
        x0, g0, x1, g1 = x1, g1, x2, g2
    raise DetectionError(f"{mon.diode_id}: crossing did not converge on [{a!r}, {b!r}]")


def locate_crossing(stack, monitor: PassiveMonitor, dt_step: float) -> CrossingReport | None:
    coeffs = stack.y[:, monitor.output_index]
    taus = np.linspace(0.0, dt_step, SCAN_POINTS + 1)
    g = np.array([monitor.gap(_poly(coeffs, tau)) for tau in taus])
    return _from_scan(coeffs, monitor, taus, g)


def _from_scan(coeffs, monitor, taus, g) -> CrossingReport | None:
    if not g[0] > 0.0:
        return None
    past = np.nonzero(g <= 0.0)[0]
    if len(past) == 0:
        return None
    j = int(past[0])
    t_star, it, res = _refine(coeffs, monitor, taus[j - 1], taus[j], g[j - 1], g[j])
    return CrossingReport(t_star, it, res, monitor.diode_id, monitor.diode_index)


def scan_monitors(stack, monitors, dt: float) -> list[CrossingReport]:
    """Earliest crossing(s) of any monitor within [0, dt]; ties all returned."""
    taus = np.linspace(0.0, dt, SCAN_POINTS + 1)
    p = stack.p
    V = np.ones((len(taus), p + 1))
    for i in range(1, p + 1):
        V[:, i] = V[:, i - 1] * taus / i
    idx = [m.output_index for m in monitors]
    Y = V @ stack.y[:, idx]
    reports = []
    for k, mon in enumerate(monitors):
        col = Y[:, k]
        g = col - mon.threshold if mon.direction == FALLING else mon.threshold - col
        if g[0] > 0.0 and np.any(g <= 0.0):
            rep = _from_scan(stack.y[:, mon.output_index], mon, taus, g)
            if rep is not None:
                reports.append(rep)
    if not reports:
        return []
    first = min(r.t_rel for r in reports)
    return sorted((r for r in reports if r.t_rel - first <= TIE_TOL), key=lambda r: r.diode_index)


def diode_transition(cfg, fired: int):
    """Toggle exactly the fired diode's conduction bit."""
    return cfg.toggled_diode(fired)


def _heading(coeffs, sign: float) -> float:
    """Sign of the first non-negligible derivative, times ``sign``."""
    scale = np.max(np.abs(coeffs[1:])) if len(coeffs) > 1 else 0.0
    for c in coeffs[1:]:
        if abs(c) > 1e-12 * scale and c != 0.0:
            return float(np.sign(c)) * sign
    return 0.0


def diode_violations(net, model, stack, cfg) -> list[tuple[float, int]]:
    """(severity, diode index) for every diode inconsistent with ``cfg``."""
    out = []
    nprobe = len(net.probes)
    for j, on in enumerate(cfg.diodes):
        if on:
            coeffs = stack.y[:, nprobe + 2 * j]
            thr = net.i_threshold
            hyst = HYSTERESIS * max(1.0, abs(thr))
            g = coeffs[0] - thr
            if g < -hyst:
                out.append((-g / hyst, j))
            elif abs(g) <= hyst and _heading(coeffs, 1.0) < 0:
                out.append((0.0, j))
        else:
            coeffs = stack.y[:, nprobe + 2 * j + 1]
            thr = net.v_threshold
            hyst = HYSTERESIS * max(1.0, abs(thr))
            g = coeffs[0] - thr
            if g > hyst:
                out.append((g / hyst, j))
            elif abs(g) <= hyst and _heading(coeffs, 1.0) > 0:
                out.append((0.0, j))
    return out


def post_event_consistency(cache, cfg, x, t: float, sources, p: int = 4):
    """Toggle diodes until every monitor agrees with its conduction bit.

    Returns ``(cfg', toggled_indices)``.  The most severe violation is fixed
    first and the remaining diodes re-evaluated in the new mode.
    """
    from .solver import compute_derivatives

    net = cache.net
    visited = [cfg]
    toggled = []
    limit = 2 ** len(cfg.diodes)
    u = sources.derivs(t, p)
    while True:
        model = cache.get(cfg)
        stack = compute_derivatives(model, x, u, p, t)
        bad = diode_violations(net, model, stack, cfg)
        if not bad:
            return cfg, toggled
        _, j = max(bad, key=lambda v: (v[0], -v[1]))
        cfg = diode_transition(cfg, j)
        toggled.append(j)
        if cfg in visited or len(visited) > limit:
            cycle = visited[visited.index(cfg):] if cfg in visited else visited
            raise ConsistencyError(
                f"no consistent diode mode at t={t!r}: cycling through "
                + " -> ".join(c.label() for c in cycle + [cfg]),
                cycle,
            )
        visited.append(cfg)
