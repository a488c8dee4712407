"""Cycle ingestion, subsampling, chronological splits and the synthetic
degradation generator.

The generator is the quantitative oracle for desk-scale validation: it
produces charging curves whose shape drifts deterministically with a
known SOH trajectory, so extracted features genuinely encode health
and the true end of life is known in closed form.
"""

import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .common import NOT_REACHED, CycleMap, fmt_float

EOL_THRESHOLD = 0.8


class DataError(ValueError):
    pass


class MissingCapacityIndex(DataError):
    pass


class NonMonotoneTime(DataError):
    def __init__(self, file, line):
        super().__init__(f"{file}:{line}: time goes backwards")
        self.file, self.line = file, line


class ParseError(DataError):
    def __init__(self, file, line, detail):
        super().__init__(f"{file}:{line}: {detail}")
        self.file, self.line = file, line


@dataclass(frozen=True)
class ChargeProfile:
    """One cycle's raw charge record plus its measured capacity."""

    cycle: int
    time_s: np.ndarray
    voltage_v: np.ndarray
    current_a: np.ndarray
    capacity_ah: float

    def __post_init__(self):
        t = np.ascontiguousarray(self.time_s, dtype=np.float64)
        object.__setattr__(self, "time_s", t)
        object.__setattr__(self, "voltage_v",
                           np.ascontiguousarray(self.voltage_v, dtype=np.float64))
        object.__setattr__(self, "current_a",
                           np.ascontiguousarray(self.current_a, dtype=np.float64))
        if np.any(np.diff(t) <= 0):
            raise DataError(f"cycle {self.cycle}: times not strictly increasing")
        if self.capacity_ah <= 0:
            raise DataError(f"cycle {self.cycle}: capacity must be positive")


@dataclass
class BatterySeries:
    """Ordered per-cycle feature rows for one battery.

    `cycle_map` fixes the dimensionless time axis: by convention tau
    spans [0, 1] over the full (sub)sampled series, so a chronological
    split keeps the parent's map and EOL extrapolation converts tau
    back to real cycles.
    """

    battery_id: str
    cycles: np.ndarray
    vectors: list
    q_0: float
    cycle_map: CycleMap

    @classmethod
    def from_features(cls, battery_id, cycles, vectors, q_0):
        cycles = np.asarray(cycles, dtype=np.int64)
        if cycles.size != len(vectors) or cycles.size < 2:
            raise DataError("need at least 2 cycles with matching feature rows")
        if np.any(np.diff(cycles) <= 0):
            raise DataError("cycles must be strictly increasing")
        first = vectors[0].soh
        if not 0.95 < first <= 1.05:
            raise DataError(
                f"first soh {first:.4f} outside (0.95, 1.05]; series must start fresh")
        cmap = CycleMap(cycle0=float(cycles[0]), span=float(cycles[-1] - cycles[0]))
        return cls(battery_id, cycles, list(vectors), float(q_0), cmap)

    def __len__(self):
        return self.cycles.size

    @property
    def n_v(self):
        return self.vectors[0].times.size

    def tau_grid(self):
        return self.cycle_map.tau_at(self.cycles)

    def feature_matrix(self):
        return np.stack([fv.as_array() for fv in self.vectors])

    def soh_values(self):
        return np.array([fv.soh for fv in self.vectors])


def uniform_sample(series, n):
    """Pick n entries at evenly spaced indices; endpoints always kept."""
    if n < 2:
        raise DataError("uniform_sample needs n >= 2")
    total = len(series)
    if total < n:
        raise DataError(f"series has {total} entries, cannot sample {n}")
    idx = np.unique(np.floor(np.arange(n) * (total - 1) / (n - 1) + 0.5).astype(int))
    cycles = series.cycles[idx]
    vectors = [series.vectors[i] for i in idx]
    cmap = CycleMap(cycle0=float(cycles[0]), span=float(cycles[-1] - cycles[0]))
    return BatterySeries(series.battery_id, cycles, vectors, series.q_0, cmap)


def chrono_split(series, fraction):
    """Earliest floor(fraction * N) entries to train, remainder to test.

    Both halves keep the parent's tau parameterization.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction {fraction} outside (0, 1)")
    n_tp = int(math.floor(fraction * len(series)))
    if n_tp < 1 or n_tp >= len(series):
        raise DataError(f"split {fraction} leaves an empty side for {len(series)} entries")
    train = BatterySeries(series.battery_id, series.cycles[:n_tp],
                          series.vectors[:n_tp], series.q_0, series.cycle_map)
    test = BatterySeries(series.battery_id, series.cycles[n_tp:],
                         series.vectors[n_tp:], series.q_0, series.cycle_map)
    return train, test


# -- synthetic generator ------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Parametric degradation battery.

    Noiseless health follows 1 - a*k^b - c*(exp(d*k) - 1); the charging
    curve is a monotone rational sigmoid in normalized time whose two
    shape parameters drift affinely with health, so grid-time features
    carry the health signal. Gaussian noise (if any) perturbs measured
    capacity only; curve noise is available behind `curve_noise_sigma`.
    """

    q_0: float = 2.0
    n_cycles: int = 100
    a: float = 2e-4
    b: float = 1.0
    c: float = 0.0
    d: float = 0.0
    noise_sigma: float = 0.0
    curve_noise_sigma: float = 0.0
    seed: int = 0
    v_lo: float = 3.0
    v_hi: float = 4.2
    current_a: float = 1.48
    duration0_s: float = 3600.0
    n_samples: int = 240
    # curve shape at soh=1 and its drift per unit health loss
    gamma0: float = 1.2
    gamma1: float = 0.8
    beta0: float = 1.5
    beta1: float = -1.0


def synth_soh(spec, k):
    """Noiseless health at (possibly fractional) cycle k."""
    k = np.asarray(k, dtype=np.float64)
    return 1.0 - spec.a * k ** spec.b - spec.c * (np.exp(spec.d * k) - 1.0)


def curve_shape(spec, soh_k):
    gamma = spec.gamma0 + spec.gamma1 * (1.0 - soh_k)
    beta = spec.beta0 + spec.beta1 * (1.0 - soh_k)
    if gamma <= 0 or beta <= 0:
        raise DataError(f"curve shape degenerate at soh={soh_k:.3f}")
    return gamma, beta


def voltage_fraction(u, gamma, beta):
    """Monotone [0,1] -> [0,1] voltage profile: rational sigmoid of u^gamma."""
    w = np.power(u, gamma)
    return (1.0 + beta) * w / (w + beta)


def voltage_fraction_inverse(s, gamma, beta):
    """Closed-form inverse of voltage_fraction (the feature oracle)."""
    w = beta * s / ((1.0 + beta) - s)
    return np.power(w, 1.0 / gamma)


@dataclass(frozen=True)
class SynthResult:
    profiles: list
    true_eol: object  # cycles (float) or NOT_REACHED
    soh_noiseless: np.ndarray


def synth_battery(spec):
    """Generate per-cycle charging profiles with known ground truth."""
    k = np.arange(spec.n_cycles, dtype=np.float64)
    soh = synth_soh(spec, k)
    if np.any(np.diff(soh) > 0):
        raise DataError("degradation parameters yield non-monotone health")
    if soh[-1] <= 0:
        raise DataError("health reaches zero inside the horizon; shrink n_cycles")

    below = soh < EOL_THRESHOLD
    if below.any():
        i = int(np.argmax(below))
        s0, s1 = soh[i - 1], soh[i]
        true_eol = float(k[i - 1] + (s0 - EOL_THRESHOLD) / (s0 - s1) * (k[i] - k[i - 1]))
    else:
        true_eol = NOT_REACHED

    rng = np.random.default_rng(spec.seed)
    u = np.linspace(0.0, 1.0, spec.n_samples)
    profiles = []
    for kk in range(spec.n_cycles):
        s_k = soh[kk]
        gamma, beta = curve_shape(spec, s_k)
        duration = spec.duration0_s * (0.55 + 0.45 * s_k)
        v = spec.v_lo + (spec.v_hi - spec.v_lo) * voltage_fraction(u, gamma, beta)
        if spec.curve_noise_sigma > 0:
            v = v + rng.normal(0.0, spec.curve_noise_sigma, size=v.shape)
        cap = spec.q_0 * s_k
        if spec.noise_sigma > 0:
            cap = spec.q_0 * (s_k + rng.normal(0.0, spec.noise_sigma))
        if cap <= 0:
            raise DataError(f"cycle {kk}: noise drove capacity non-positive")
        profiles.append(ChargeProfile(
            cycle=kk,
            time_s=u * duration,
            voltage_v=v,
            current_a=np.full(u.size, spec.current_a),
            capacity_ah=float(cap),
        ))
    return SynthResult(profiles=profiles, true_eol=true_eol, soh_noiseless=soh)


# -- on-disk cycle format -----------------------------------------------

_CYCLE_RE = re.compile(r"^cycle_(\d+)\.csv$")


def write_cycles(directory, profiles):
    """Emit cycle_<k>.csv files plus the capacity index."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "capacity.csv"), "w") as f:
        f.write("cycle,capacity_ah\n")
        for p in profiles:
            f.write(f"{p.cycle},{fmt_float(p.capacity_ah)}\n")
    for p in profiles:
        path = os.path.join(directory, f"cycle_{p.cycle}.csv")
        with open(path, "w") as f:
            f.write("time_s,voltage_v,current_a\n")
            for t, v, i in zip(p.time_s, p.voltage_v, p.current_a):
                f.write(f"{fmt_float(t)},{fmt_float(v)},{fmt_float(i)}\n")


def load_cycles(directory):
    """Read every cycle_<k>.csv under `directory`, sorted by cycle."""
    try:
        entries = sorted(os.listdir(directory))
    except FileNotFoundError:
        raise DataError(f"no such data directory: {directory}") from None
    cap_path = os.path.join(directory, "capacity.csv")
    if not os.path.exists(cap_path):
        raise MissingCapacityIndex(f"{directory}: capacity.csv not found")

    capacities = {}
    with open(cap_path) as f:
        header = f.readline().strip()
        if header != "cycle,capacity_ah":
            raise ParseError(cap_path, 1, f"unexpected header {header!r}")
        for ln, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            try:
                capacities[int(parts[0])] = float(parts[1])
            except (ValueError, IndexError):
                raise ParseError(cap_path, ln, f"bad capacity row {line.strip()!r}") from None

    profiles = []
    for name in entries:
        match = _CYCLE_RE.match(name)
        if not match:
            continue
        cycle = int(match.group(1))
        path = os.path.join(directory, name)
        t, v, i = [], [], []
        with open(path) as f:
            header = f.readline().strip()
            if header != "time_s,voltage_v,current_a":
                raise ParseError(path, 1, f"unexpected header {header!r}")
            for ln, line in enumerate(f, start=2):
                if not line.strip():
                    continue
                parts = line.strip().split(",")
                if len(parts) != 3:
                    raise ParseError(path, ln, f"expected 3 columns, got {len(parts)}")
                try:
                    row = [float(x) for x in parts]
                except ValueError:
                    raise ParseError(path, ln, f"non-numeric value in {line.strip()!r}") from None
                if t and row[0] <= t[-1]:
                    raise NonMonotoneTime(path, ln)
                t.append(row[0])
                v.append(row[1])
                i.append(row[2])
        if cycle not in capacities:
            raise MissingCapacityIndex(f"{directory}: no capacity entry for cycle {cycle}")
        profiles.append(ChargeProfile(cycle=cycle, time_s=np.array(t),
                                      voltage_v=np.array(v), current_a=np.array(i),
                                      capacity_ah=capacities[cycle]))
    if not profiles:
        raise DataError(f"{directory}: no cycle_<k>.csv files found")
    profiles.sort(key=lambda p: p.cycle)
    return profiles


def series_from_profiles(battery_id, profiles, grid):
    """Extract features for every profile and assemble a fresh series."""
    from .features import extract_features
    q_0 = profiles[0].capacity_ah
    vectors = [extract_features(p, grid, q_0) for p in profiles]
    return BatterySeries.from_features(battery_id, [p.cycle for p in profiles],
                                       vectors, q_0)
