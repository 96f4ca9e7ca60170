"""Independent source waveforms.

Every waveform gives its value, its first ``p`` analytic time derivatives
(consumed by the Taylor solver) and an equivalent autonomous linear
generator ``z' = F z, u = h . z`` that the exact reference integrator
appends to the circuit state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SourceError(ValueError):
    pass


@dataclass(frozen=True)
class Dc:
    value: float

    def value_at(self, t):
        return np.full(np.shape(t), self.value)

    def derivs(self, t: float, p: int) -> np.ndarray:
        out = np.zeros(p + 1)
        out[0] = self.value
        return out

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        return []

    def generator(self, t: float):
        return np.zeros((1, 1)), np.array([1.0]), np.array([self.value])


@dataclass(frozen=True)
class Sine:
    """``amplitude * sin(2 pi f t + phase) + offset``; phase in radians."""

    amplitude: float
    frequency: float
    phase: float = 0.0
    offset: float = 0.0

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.frequency

    def value_at(self, t):
        return self.amplitude * np.sin(self.omega * np.asarray(t, dtype=float) + self.phase) + self.offset

    def derivs(self, t: float, p: int) -> np.ndarray:
        w = self.omega
        theta = w * t + self.phase
        s, c = math.sin(theta), math.cos(theta)
        # d^i/dt^i sin(theta) cycles through sin, cos, -sin, -cos
        cycle = (s, c, -s, -c)
        out = np.empty(p + 1)
        scale = self.amplitude
        for i in range(p + 1):
            out[i] = scale * cycle[i % 4]
            scale *= w
        out[0] += self.offset
        return out

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        return []

    def generator(self, t: float):
        w = self.omega
        theta = w * t + self.phase
        F = np.array([[0.0, w, 0.0], [-w, 0.0, 0.0], [0.0, 0.0, 0.0]])
        z = np.array([self.amplitude * math.sin(theta), self.amplitude * math.cos(theta), self.offset])
        return F, np.array([1.0, 0.0, 1.0]), z


@dataclass(frozen=True)
class Pwl:
    """Piecewise-linear table; held constant outside the first/last point."""

    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times:
            raise SourceError("pwl needs matching, non-empty time and value lists")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise SourceError("pwl times must be strictly increasing")

    def value_at(self, t):
        return np.interp(t, self.times, self.values)

    def _slope(self, t: float) -> float:
        # right-continuous slope: a breakpoint belongs to the segment it starts
        ts = self.times
        if t < ts[0] or t >= ts[-1]:
            return 0.0
        j = int(np.searchsorted(ts, t, side="right")) - 1
        return (self.values[j + 1] - self.values[j]) / (ts[j + 1] - ts[j])

    def derivs(self, t: float, p: int) -> np.ndarray:
        out = np.zeros(p + 1)
        out[0] = float(np.interp(t, self.times, self.values))
        if p >= 1:
            out[1] = self._slope(t)
        return out

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        return [t for t in self.times if t0 < t < t1]

    def generator(self, t: float):
        F = np.array([[0.0, 1.0], [0.0, 0.0]])
        return F, np.array([1.0, 0.0]), np.array([float(np.interp(t, self.times, self.values)), self._slope(t)])


def waveform_from_json(desc: dict):
    kind = desc.get("type")
    try:
        if kind == "dc":
            return Dc(float(desc["value"]))
        if kind == "sine":
            return Sine(
                float(desc["amplitude"]),
                float(desc["frequency"]),
                float(desc.get("phase", 0.0)),
                float(desc.get("offset", 0.0)),
            )
        if kind == "pwl":
            pts = desc["points"]
            return Pwl(tuple(float(a) for a, _ in pts), tuple(float(b) for _, b in pts))
    except (KeyError, TypeError) as exc:
        raise SourceError(f"bad waveform descriptor {desc!r}: {exc}") from None
    raise SourceError(f"unknown waveform type {kind!r}")


class SourceBank:
    """The ordered input vector ``u`` of a circuit."""

    def __init__(self, waveforms):
        self.waveforms = list(waveforms)

    def __len__(self):
        return len(self.waveforms)

    def values(self, t: float) -> np.ndarray:
        return np.array([float(w.derivs(t, 0)[0]) for w in self.waveforms])

    def values_on(self, times: np.ndarray) -> np.ndarray:
        """Input samples on a time grid, shape (len(times), m)."""
        if not self.waveforms:
            return np.zeros((len(times), 0))
        return np.column_stack([w.value_at(times) for w in self.waveforms])

    def derivs(self, t: float, p: int) -> np.ndarray:
        """Input derivatives, shape (p+1, m)."""
        if not self.waveforms:
            return np.zeros((p + 1, 0))
        return np.column_stack([w.derivs(t, p) for w in self.waveforms])

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        pts = set()
        for w in self.waveforms:
            pts.update(w.breakpoints(t0, t1))
        return sorted(pts)

    def generator(self, t: float):
        """Block-diagonal generator (F, H, z) with u = H z."""
        blocks = [w.generator(t) for w in self.waveforms]
        size = sum(len(z) for _, _, z in blocks)
        F = np.zeros((size, size))
        H = np.zeros((len(blocks), size))
        z = np.zeros(size)
        k = 0
        for i, (Fi, hi, zi) in enumerate(blocks):
            n = len(zi)
            F[k:k + n, k:k + n] = Fi
            H[i, k:k + n] = hi
            z[k:k + n] = zi
            k += n
        return F, H, z
