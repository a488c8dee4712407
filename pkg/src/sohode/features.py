"""Charging-curve feature extraction.

Input per cycle is the raw (time, voltage, current) record of the
constant-current charge plus the measured capacity. Output is the
model's feature row: the capacity fraction soh = q_k / q_0 followed by
the normalized times at which the voltage passes a fixed grid of
values. Times are rescaled per cycle so the lowest grid voltage maps
to 0 and the highest to 1, which makes the features invariant to the
absolute duration of the charge.
"""

import warnings
from dataclasses import dataclass

import numpy as np


class RangeNotCovered(ValueError):
    """The profile never spans the requested voltage range."""


class NotConstantCurrent(ValueError):
    """Current varies too much inside a supposed CC window."""


class InsufficientData(ValueError):
    """Too few samples or cycles for the requested operation."""


@dataclass(frozen=True)
class VoltageGrid:
    """Ordered, non-overlapping segments of equidistant grid voltages."""

    segments: tuple  # ((v_lo, v_hi, n_points), ...)

    def __post_init__(self):
        segs = tuple((float(lo), float(hi), int(n)) for lo, hi, n in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("grid needs at least one segment")
        prev_hi = -np.inf
        for lo, hi, n in segs:
            if n < 2:
                raise ValueError("each segment needs at least 2 points")
            if hi <= lo:
                raise ValueError(f"segment ({lo}, {hi}) is not increasing")
            if lo <= prev_hi:
                raise ValueError("segments must be non-overlapping and increasing")
            prev_hi = hi

    @property
    def n_points(self):
        return sum(n for _, _, n in self.segments)

    def voltages(self):
        """All grid voltages, segment order, endpoints included."""
        parts = [np.linspace(lo, hi, n) for lo, hi, n in self.segments]
        return np.concatenate(parts)


GRID_PRESETS = {
    "oxford": VoltageGrid(((3.0, 4.2, 21),)),
    "nasa": VoltageGrid(((3.6, 4.2, 19),)),
    "tju": VoltageGrid(((3.6, 4.2, 19),)),
    "hust": VoltageGrid(((3.15, 3.45, 13), (3.475, 3.55, 4))),
}


@dataclass(frozen=True)
class FeatureVector:
    soh: float
    times: np.ndarray  # normalized, in [0, 1]

    def __post_init__(self):
        t = np.ascontiguousarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", t)
        if not 0.0 < self.soh <= 1.2:
            raise ValueError(f"soh {self.soh} outside (0, 1.2]")
        if t.min() < -1e-12 or t.max() > 1 + 1e-12:
            raise ValueError("normalized times must lie in [0, 1]")
        if np.any(np.diff(t) < -1e-12):
            raise ValueError("normalized times must be non-decreasing")

    def as_array(self):
        return np.concatenate([[self.soh], self.times])


def soh(q_k, q_0):
    """Capacity fraction q_k / q_0."""
    if q_0 <= 0 or q_k <= 0:
        raise ValueError(f"capacities must be positive, got q_k={q_k}, q_0={q_0}")
    return q_k / q_0


def cc_window(profile, v_lo, v_hi, cv_warn=0.05, cv_error=0.20):
    """Slice of a profile covering [v_lo, v_hi], cleaned to monotone voltage.

    The window runs from where the voltage enters v_lo from below to the
    first sample at or above v_hi; if v_lo falls between samples the
    bracketing sample below it is kept so the full range is
    interpolable. Samples that do not increase the voltage are dropped
    (first sample of a tied run wins). The current inside the window
    must be near-constant: coefficient of variation above `cv_warn`
    warns, above `cv_error` raises.
    """
    t = np.asarray(profile.time_s, dtype=np.float64)
    v = np.asarray(profile.voltage_v, dtype=np.float64)
    i_a = np.asarray(profile.current_a, dtype=np.float64)

    # monotone cleanup: keep a sample iff it exceeds everything before it
    keep = np.ones(v.size, dtype=bool)
    if v.size > 1:
        keep[1:] = v[1:] > np.maximum.accumulate(v)[:-1]
    t, v, i_a = t[keep], v[keep], i_a[keep]

    above_lo = np.nonzero(v >= v_lo)[0]
    reach_hi = np.nonzero(v >= v_hi)[0]
    if above_lo.size == 0 or reach_hi.size == 0:
        raise RangeNotCovered(
            f"profile (cycle {profile.cycle}) never covers [{v_lo}, {v_hi}] V")
    start = above_lo[0]
    if v[start] > v_lo and start > 0:
        start -= 1  # keep the bracketing sample below v_lo
    stop = reach_hi[0] + 1
    if stop - start < 2:
        raise InsufficientData(
            f"cycle {profile.cycle}: fewer than 2 samples inside [{v_lo}, {v_hi}] V")

    cur = i_a[start:stop]
    mean = np.abs(cur).mean()
    if mean > 0:
        cv = cur.std() / mean
        if cv >= cv_error:
            raise NotConstantCurrent(
                f"cycle {profile.cycle}: current CV {cv:.3f} in [{v_lo}, {v_hi}] V")
        if cv >= cv_warn:
            warnings.warn(
                f"cycle {profile.cycle}: current CV {cv:.3f} in CC window",
                stacklevel=2)
    return t[start:stop], v[start:stop]


def time_at_voltage(times, voltages, v):
    """Linear interpolation of time against (monotone) voltage."""
    if v < voltages[0] or v > voltages[-1]:
        raise RangeNotCovered(
            f"voltage {v} outside window span [{voltages[0]}, {voltages[-1]}]")
    j = int(np.searchsorted(voltages, v))
    if voltages[j] == v:
        return float(times[j])
    t0, t1 = times[j - 1], times[j]
    v0, v1 = voltages[j - 1], voltages[j]
    return float(t0 + (v - v0) * (t1 - t0) / (v1 - v0))


def extract_features(profile, grid, q_0):
    """Feature row (soh, normalized grid times) for one charging cycle.

    The normalization is shared across all segments: the time at the
    overall lowest grid voltage maps to 0, at the highest to 1, so
    cross-segment timing is preserved for dual-phase protocols.
    """
    raw = []
    for lo, hi, n in grid.segments:
        t_w, v_w = cc_window(profile, lo, hi)
        for v in np.linspace(lo, hi, n):
            raw.append(time_at_voltage(t_w, v_w, v))
    raw = np.asarray(raw)
    t_start, t_end = raw[0], raw[-1]
    if t_end <= t_start:
        raise InsufficientData(
            f"cycle {profile.cycle}: degenerate normalization span")
    norm = (raw - t_start) / (t_end - t_start)
    norm[0], norm[-1] = 0.0, 1.0  # exact endpoints
    return FeatureVector(soh=soh(profile.capacity_ah, q_0), times=norm)


def feature_correlation(vectors):
    """Pearson correlation over the feature columns of a cycle series.

    Returns (matrix, defined): entries whose columns are constant carry
    0.0 with defined=False rather than a NaN from 0/0. The diagonal is
    1 by convention.
    """
    if len(vectors) < 3:
        raise InsufficientData("correlation needs at least 3 feature vectors")
    data = np.stack([fv.as_array() for fv in vectors])
    n, d = data.shape
    centered = data - data.mean(axis=0)
    std = np.sqrt((centered ** 2).sum(axis=0))
    constant = std < 1e-300
    corr = np.eye(d)
    defined = np.ones((d, d), dtype=bool)
    for i in range(d):
        for j in range(i + 1, d):
            if constant[i] or constant[j]:
                corr[i, j] = corr[j, i] = 0.0
                defined[i, j] = defined[j, i] = False
            else:
                r = float((centered[:, i] * centered[:, j]).sum() / (std[i] * std[j]))
                r = min(1.0, max(-1.0, r))
                corr[i, j] = corr[j, i] = r
    return corr, defined


def features_to_csv(path, cycles, vectors):
    """Write `cycle,soh,t_1..t_N` rows at full float precision."""
    from .common import fmt_float
    n_v = vectors[0].times.size
    header = "cycle,soh," + ",".join(f"t_{i + 1}" for i in range(n_v))
    with open(path, "w") as f:
        f.write(header + "\n")
        for cyc, fv in zip(cycles, vectors):
            row = [str(int(cyc)), fmt_float(fv.soh)]
            row += [fmt_float(x) for x in fv.times]
            f.write(",".join(row) + "\n")


def features_from_csv(path):
    """Read a feature table; returns (cycles, vectors)."""
    cycles, vectors = [], []
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header[:2] != ["cycle", "soh"]:
            raise ValueError(f"{path}: unexpected feature header {header[:2]}")
        for line in f:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            cycles.append(int(parts[0]))
            vectors.append(FeatureVector(soh=float(parts[1]),
                                         times=np.array([float(x) for x in parts[2:]])))
    if not vectors:
        raise InsufficientData(f"{path}: no feature rows")
    return cycles, vectors
