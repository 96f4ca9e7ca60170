"""Variable-step, variable-order Taylor-series integration of a piecewise-LTI model.

For a fixed switch configuration the state derivatives follow from the
recursion x^(i+1) = A x^(i) + B u^(i); the output derivatives are
y^(i) = C x^(i) + D u^(i).  A step of length dt evaluates the order-p Taylor
polynomial, and the magnitude of its last retained term is used as the
local-error proxy for step/order control.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import detect

EPS = np.finfo(float).eps


class SolverError(RuntimeError):
    pass


class StiffnessError(SolverError):
    """Step size would fall below ``dt_min`` in the current configuration."""


@dataclass(frozen=True)
class DerivativeStack:
    x: np.ndarray  # (p+1, n)
    u: np.ndarray  # (p+1, m)
    y: np.ndarray  # (p+1, q)
    t: float
    config: object = None

    @property
    def p(self) -> int:
        return self.x.shape[0] - 1


@dataclass(frozen=True)
class StepControl:
    dt: float = 1e-8
    p: int = 4
    abs_tol: float = 1e-9
    rel_tol: float = 1e-6
    dt_min: float = 1e-12
    dt_max: float = 6.25e-6
    p_max: int = 8
    p_min: int = 2
    lte_estimate: float = 0.0
    accepted: bool = True
    at_max_streak: int = 0


@dataclass(frozen=True)
class SolverSettings:
    abs_tol: float = 1e-9
    rel_tol: float = 1e-6
    p_init: int = 4
    p_max: int = 8
    dt_min: float = 1e-12
    dt_max: float | None = None  # defaults to T_c / 4
    dt_init: float = 1e-8
    record_dt: float | None = None  # dense-output spacing; None = step ends only

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverSettings":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver settings: {sorted(unknown)}")
        return cls(**d)

    def step_control(self, control_period: float) -> StepControl:
        dt_max = self.dt_max if self.dt_max is not None else control_period / 4.0
        return StepControl(
            dt=min(self.dt_init, dt_max),
            p=self.p_init,
            abs_tol=self.abs_tol,
            rel_tol=self.rel_tol,
            dt_min=self.dt_min,
            dt_max=dt_max,
            p_max=self.p_max,
        )


def compute_derivatives(model, x, u_derivs, p: int, t: float = 0.0) -> DerivativeStack:
    A, B, C, D = model.A, model.B, model.C, model.D
    x = np.asarray(x, dtype=float)
    U = np.asarray(u_derivs, dtype=float)
    if p < 1:
        raise ValueError("Taylor order must be >= 1")
    if x.shape != (A.shape[0],):
        raise ValueError(f"state has shape {x.shape}, model expects ({A.shape[0]},)")
    if U.shape[0] < p + 1 or U.shape[1] != B.shape[1]:
        raise ValueError(f"input derivatives have shape {U.shape}, need ({p + 1}, {B.shape[1]})")
    U = U[: p + 1]
    X = np.empty((p + 1, A.shape[0]))
    X[0] = x
    for i in range(p):
        X[i + 1] = A @ X[i] + B @ U[i]
    Y = X @ C.T + U @ D.T
    return DerivativeStack(X, U, Y, t, model.config)


def taylor_weights(dt: float, p: int) -> np.ndarray:
    """dt^i / i! for i = 0..p."""
    w = np.empty(p + 1)
    w[0] = 1.0
    for i in range(1, p + 1):
        w[i] = w[i - 1] * dt / i
    return w


def taylor_advance(stack: DerivativeStack, dt: float) -> np.ndarray:
    return taylor_weights(dt, stack.p) @ stack.x


def estimate_lte(stack: DerivativeStack, dt: float) -> float:
    p = stack.p
    if stack.x.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(stack.x[p])) * dt**p / math.factorial(p))


def error_weights(x, abs_tol: float, rel_tol: float) -> np.ndarray:
    """Per-component factors mapping componentwise tolerances onto the scalar
    ``abs_tol + rel_tol*||x||_inf`` used by :func:`adapt_step`.

    States of very different scale (amperes of leakage next to hundreds of
    volts) would otherwise share the tolerance of the largest one.
    """
    x = np.abs(np.asarray(x, dtype=float))
    if x.size == 0:
        return x
    ref = abs_tol + rel_tol * float(np.max(x))
    return ref / (abs_tol + rel_tol * x)


def weighted_lte(stack: DerivativeStack, dt: float, weights: np.ndarray) -> float:
    p = stack.p
    if stack.x.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(stack.x[p]) * weights) * dt**p / math.factorial(p))


def adapt_step(ctrl: StepControl, err: float, norm_x: float) -> StepControl:
    """Accept/reject the step just tried with ``ctrl.dt`` and propose the next one."""
    if err < 0:
        raise ValueError("error estimate must be non-negative")
    tol = ctrl.abs_tol + ctrl.rel_tol * norm_x
    accepted = err <= tol
    if err == 0.0:
        factor = 2.0
    else:
        factor = 0.9 * (tol / err) ** (1.0 / (ctrl.p + 1))
        factor = min(2.0, max(0.25, factor))
    raw = ctrl.dt * factor
    if not accepted and raw < ctrl.dt_min:
        raise StiffnessError(
            f"step size {raw:.3g} s would fall below dt_min={ctrl.dt_min:.3g} s (err={err:.3g}, tol={tol:.3g})"
        )
    dt_new = min(max(raw, ctrl.dt_min), ctrl.dt_max)

    p = ctrl.p
    streak = ctrl.at_max_streak
    if accepted:
        streak = streak + 1 if ctrl.dt >= ctrl.dt_max else 0
        if streak >= 2 and p < ctrl.p_max:
            p += 1
            streak = 0
        elif err < 1e2 * EPS * norm_x and p > ctrl.p_min:
            p -= 1
    return dataclasses.replace(
        ctrl, dt=dt_new, p=p, lte_estimate=err, accepted=accepted, at_max_streak=streak
    )


@dataclass
class BarrierResult:
    terminal: str  # "reached_barrier" | "passive_event"
    t_end: float
    x_end: np.ndarray
    ctrl: StepControl
    times: np.ndarray
    outputs: np.ndarray
    crossings: list  # CrossingReports at t_end (passive events only)
    steps: int = 0
    rejected: int = 0

    @property
    def diode_ids(self) -> list[str]:
        return [c.diode_id for c in self.crossings]


def _dense_rows(stack: DerivativeStack, t0: float, dt: float, t_end: float, record_dt):
    """Output rows on the absolute record grid inside (t0, t0+dt), plus the step end.

    The last row is stamped with ``t_end`` exactly.
    """
    taus = np.array([dt])
    if record_dt:
        m = np.arange(math.floor(t0 / record_dt) + 1, math.ceil((t0 + dt) / record_dt))
        inner = m * record_dt - t0
        # grid points that coincide with either step end up to rounding belong to that end
        slack = 1e-9 * record_dt
        inner = inner[(inner > slack) & (inner < dt - slack)]
        taus = np.concatenate([inner, taus])
    V = np.cumprod(np.column_stack([np.ones(len(taus))] + [taus / i for i in range(1, stack.p + 1)]), axis=1)
    Y = V @ stack.y
    times = t0 + taus
    times[-1] = t_end
    return times, Y


def integrate_to_barrier(
    model,
    x0,
    sources,
    t0: float,
    t_barrier: float,
    monitors,
    ctrl: StepControl,
    record_dt: float | None = None,
) -> BarrierResult:
    """Integrate from ``t0`` until ``t_barrier`` or the first passive switch-event.

    Rows are produced for every accepted step (plus dense Taylor rows when
    ``record_dt`` is set); the row at ``t0`` itself is the caller's.
    """
    if not t0 < t_barrier:
        raise ValueError(f"need t0 < t_barrier, got {t0!r} >= {t_barrier!r}")
    t = t0
    x = np.asarray(x0, dtype=float)
    times, rows = [], []
    steps = rejected = 0
    while True:
        remaining = t_barrier - t
        stack = compute_derivatives(model, x, sources.derivs(t, ctrl.p), ctrl.p, t)
        norm_x = float(np.max(np.abs(x))) if x.size else 0.0
        weights = error_weights(x, ctrl.abs_tol, ctrl.rel_tol)
        while True:
            # never leave a sliver shorter than dt_min before the barrier
            dt = remaining if remaining - ctrl.dt < ctrl.dt_min else ctrl.dt
            err = weighted_lte(stack, dt, weights)
            trial = adapt_step(dataclasses.replace(ctrl, dt=dt), err, norm_x)
            if trial.accepted:
                break
            rejected += 1
            ctrl = dataclasses.replace(trial, p=ctrl.p, at_max_streak=ctrl.at_max_streak)
        landing = dt == remaining
        if landing and dt < ctrl.dt:
            # a short landing step says nothing about the achievable step size or order
            trial = dataclasses.replace(trial, dt=max(trial.dt, ctrl.dt), p=ctrl.p, at_max_streak=ctrl.at_max_streak)
        steps += 1

        crossings = detect.scan_monitors(stack, monitors, dt) if monitors else []
        if crossings:
            tau = crossings[0].t_rel
            t_end = t + tau
            x_end = taylor_advance(stack, tau)
            if tau > 0:
                tt, yy = _dense_rows(stack, t, tau, t_end, record_dt)
                times.append(tt)
                rows.append(yy)
            crossings = [dataclasses.replace(c, t=t_end) for c in crossings]
            return BarrierResult("passive_event", t_end, x_end, trial, *_stack_rows(times, rows, model.q),
                                 crossings, steps, rejected)

        t_end = t_barrier if landing else t + dt
        x = taylor_advance(stack, dt)
        tt, yy = _dense_rows(stack, t, dt, t_end, record_dt)
        times.append(tt)
        rows.append(yy)
        ctrl = trial
        t = t_end
        if landing:
            return BarrierResult("reached_barrier", t, x, ctrl, *_stack_rows(times, rows, model.q),
                                 [], steps, rejected)


def _stack_rows(times, rows, q):
    if not times:
        return np.empty(0), np.empty((0, q))
    return np.concatenate(times), np.vstack(rows)
