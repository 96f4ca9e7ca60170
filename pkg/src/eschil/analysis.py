"""Waveform storage and comparison metrics (RMS, relative error, FFT,
blocked-interval error table, chattering index)."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np


class AnalysisError(ValueError):
    pass


@dataclass
class Waveform:
    """Multi-signal trajectory on one shared, strictly increasing time base."""

    t: np.ndarray
    names: tuple[str, ...]
    values: np.ndarray  # (N, S)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.t), len(self.names))
        self.names = tuple(self.names)
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise AnalysisError("waveform times must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def signal(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise AnalysisError(f"no signal {name!r} in waveform ({', '.join(self.names)})") from None

    def scaled(self, factor: float) -> "Waveform":
        return Waveform(self.t.copy(), self.names, self.values * factor, dict(self.meta))

    def select(self, names) -> "Waveform":
        idx = [self.names.index(n) for n in names]
        return Waveform(self.t, tuple(names), self.values[:, idx], dict(self.meta))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(("t",) + self.names) + "\n")
        data = np.column_stack([self.t, self.values])
        np.savetxt(buf, data, fmt="%.17g", delimiter=",")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def read_csv(cls, path, meta: dict | None = None) -> "Waveform":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if not header or header[0] != "t":
            raise AnalysisError(f"{path}: waveform CSV must start with a 't' column")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], tuple(header[1:]), data[:, 1:], meta or {})


def _window(w: Waveform, window) -> tuple[float, float]:
    if window is None:
        return float(w.t[0]), float(w.t[-1])
    t1, t2 = float(window[0]), float(window[1])
    if not t2 > t1:
        raise AnalysisError(f"empty window [{t1}, {t2}]")
    if len(w.t) < 2 or t1 < w.t[0] or t2 > w.t[-1]:
        raise AnalysisError(f"window [{t1}, {t2}] not covered by record [{w.t[0] if len(w.t) else None}, "
                            f"{w.t[-1] if len(w.t) else None}]")
    return t1, t2


def _clip(w: Waveform, signal: str, t1: float, t2: float):
    """Samples inside [t1, t2] with interpolated end points."""
    y = w.signal(signal)
    inside = (w.t > t1) & (w.t < t2)
    tt = np.concatenate([[t1], w.t[inside], [t2]])
    yy = np.concatenate([[np.interp(t1, w.t, y)], y[inside], [np.interp(t2, w.t, y)]])
    return tt, yy


def rms(w: Waveform, signal: str, window=None) -> float:
    t1, t2 = _window(w, window)
    tt, yy = _clip(w, signal, t1, t2)
    return math.sqrt(float(np.trapezoid(yy * yy, tt)) / (t2 - t1))


def mean(w: Waveform, signal: str, window=None) -> float:
    t1, t2 = _window(w, window)
    tt, yy = _clip(w, signal, t1, t2)
    return float(np.trapezoid(yy, tt)) / (t2 - t1)


def _median_spacing(w: Waveform, t1: float, t2: float) -> float:
    tt = w.t[(w.t >= t1) & (w.t <= t2)]
    if len(tt) < 2:
        return t2 - t1
    return float(np.median(np.diff(tt)))


def uniform_grid(t1: float, t2: float, step: float) -> np.ndarray:
    n = max(2, int(math.ceil((t2 - t1) / step - 1e-9)) + 1)
    return np.linspace(t1, t2, n)


def relative_error(test: Waveform, reference: Waveform, signal: str, window=None) -> float:
    """RMS(test - ref) / RMS(ref) on a common uniform grid.

    The grid step is the smaller of the two records' median sample spacings
    inside the window; both records are linearly interpolated onto it.
    """
    if window is None:
        window = (max(test.t[0], reference.t[0]), min(test.t[-1], reference.t[-1]))
        if not window[1] > window[0]:
            raise AnalysisError("records do not overlap")
    t1, t2 = _window(test, window)
    _window(reference, window)
    step = min(_median_spacing(test, t1, t2), _median_spacing(reference, t1, t2))
    grid = uniform_grid(t1, t2, step)
    a = np.interp(grid, test.t, test.signal(signal))
    b = np.interp(grid, reference.t, reference.signal(signal))
    ref = math.sqrt(float(np.trapezoid(b * b, grid)))
    if ref == 0.0:
        raise AnalysisError(f"reference RMS of {signal!r} is zero")
    d = a - b
    return math.sqrt(float(np.trapezoid(d * d, grid))) / ref


@dataclass(frozen=True)
class Spectrum:
    freq: np.ndarray
    magnitude: np.ndarray

    @property
    def resolution(self) -> float:
        return float(self.freq[1] - self.freq[0]) if len(self.freq) > 1 else 0.0

    def dominant(self, skip_dc: bool = True) -> float:
        start = 1 if skip_dc else 0
        return float(self.freq[start + int(np.argmax(self.magnitude[start:]))])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("freq_hz,magnitude\n")
        np.savetxt(buf, np.column_stack([self.freq, self.magnitude]), fmt="%.17g", delimiter=",")
        return buf.getvalue()


def windowed_samples(w: Waveform, signal: str, window, bins: int, taper: str = "none"):
    """Uniform resample (optionally Hann-tapered) used by :func:`fft_spectrum`."""
    t1, t2 = _window(w, window)
    n = 1 << max(1, int(bins - 1).bit_length())
    if n * _median_spacing(w, t1, t2) > (t2 - t1) * (1 + 1e-9):
        raise AnalysisError(f"window too short for {n} bins at the record's sample spacing")
    step = (t2 - t1) / n
    grid = t1 + step * np.arange(n)
    x = np.interp(grid, w.t, w.signal(signal))
    if taper == "hann":
        x = x * np.hanning(n)
    elif taper != "none":
        raise AnalysisError(f"unknown taper {taper!r}")
    return x, step


def fft_spectrum(w: Waveform, signal: str, window=None, bins: int = 4096, taper: str = "none") -> Spectrum:
    """One-sided spectrum of the window resampled to ``bins`` points (next power of two).

    Magnitudes are normalized so that their squares sum to the energy of the
    (tapered) samples, i.e. their sum of squares.  The default rectangular
    window keeps a constant signal entirely in bin 0.
    """
    xw, step = windowed_samples(w, signal, window, bins, taper)
    n = len(xw)
    X = np.fft.rfft(xw)
    mag = np.abs(X) / math.sqrt(n)
    mag[1:-1] *= math.sqrt(2.0)
    return Spectrum(np.fft.rfftfreq(n, step), mag)


def band_level(spec: Spectrum, f_lo: float, f_hi: float) -> float:
    """RMS magnitude of the bins inside [f_lo, f_hi]."""
    sel = (spec.freq >= f_lo) & (spec.freq <= f_hi)
    if not np.any(sel):
        raise AnalysisError(f"no bins in [{f_lo}, {f_hi}] Hz")
    return float(np.sqrt(np.mean(spec.magnitude[sel] ** 2)))


@dataclass(frozen=True)
class DcmErrorTable:
    times: np.ndarray
    errors: dict  # run name -> absolute errors at ``times``
    averages: dict
    ratios: dict  # average / average of the reference run

    def to_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "errors": {k: [float(v) for v in e] for k, e in self.errors.items()},
            "averages": {k: float(v) for k, v in self.averages.items()},
            "ratios": {k: float(v) for k, v in self.ratios.items()},
        }


def dcm_error_table(runs: dict, oracle: Waveform, probe: str, times, reference: str | None = None) -> DcmErrorTable:
    times = np.asarray(times, dtype=float)
    ref_vals = np.interp(times, oracle.t, oracle.signal(probe))
    errors, avgs = {}, {}
    for name, w in runs.items():
        if len(times) and (times[0] < w.t[0] or times[-1] > w.t[-1]):
            raise AnalysisError(f"run {name!r} does not cover the sample times")
        errors[name] = np.abs(np.interp(times, w.t, w.signal(probe)) - ref_vals)
        avgs[name] = float(np.mean(errors[name])) if len(times) else 0.0
    ratios = {}
    if reference is not None:
        base = avgs[reference]
        ratios = {k: (v / base if base > 0 else (math.inf if v > 0 else 1.0)) for k, v in avgs.items()}
    return DcmErrorTable(times, errors, avgs, ratios)


@dataclass(frozen=True)
class ChatterIndex:
    alternations: int
    amplitude: float
    per_interval: tuple[int, ...] = ()

    @property
    def max_per_interval(self) -> int:
        return max(self.per_interval, default=0)

    @property
    def min_per_interval(self) -> int:
        return min(self.per_interval, default=0)


def _sign_changes(y: np.ndarray, deadband: float) -> int:
    s = np.sign(y[np.abs(y) > deadband])
    return int(np.count_nonzero(s[1:] != s[:-1])) if len(s) > 1 else 0


def chattering_index(w: Waveform, signal: str, intervals=None, deadband: float = 0.0) -> ChatterIndex:
    """Sign alternations and peak magnitude of ``signal`` inside the spans.

    Samples with magnitude at or below ``deadband`` carry no sign.
    """
    y = w.signal(signal)
    if intervals is None:
        intervals = [(w.t[0], w.t[-1])]
    counts, amp = [], 0.0
    for a, b in intervals:
        sel = (w.t >= a) & (w.t <= b)
        seg = y[sel]
        counts.append(_sign_changes(seg, deadband))
        if len(seg):
            amp = max(amp, float(np.max(np.abs(seg))))
    return ChatterIndex(sum(counts), amp, tuple(counts))


def off_spans(transitions, initial: bool, t_start: float, t_end: float) -> list[tuple[float, float]]:
    """Spans where a binary state is False, from time-sorted (t, state) transitions."""
    spans = []
    state, since = initial, t_start
    for t, new in transitions:
        if new == state:
            continue
        if not state:
            spans.append((since, t))
        state, since = new, t
    if not state:
        spans.append((since, t_end))
    return [(a, b) for a, b in spans if b > a]


def intersect_spans(a, b) -> list[tuple[float, float]]:
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def interior(spans, lo: float = 0.1, hi: float = 0.9) -> list[tuple[float, float]]:
    return [(a + lo * (b - a), a + hi * (b - a)) for a, b in spans]
