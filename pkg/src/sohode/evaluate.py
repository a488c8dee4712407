"""Metrics, per-battery reports and the sweep harnesses.

Error conventions: health errors are fractions internally (a report of
0.0224 means 2.24%); CSV output stores fractions, human-readable
summaries multiply by 100. Aggregation over batteries uses the
population standard deviation, which is the honest choice for the
3-10 battery groups these studies use.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from .common import NOT_REACHED, fmt_float
from .data import chrono_split
from .model import predict_eol, rollout
from .train import fit


def rmse_soh(predicted, actual):
    """Root-mean-square error between two health sequences."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.size == 0 or predicted.shape != actual.shape:
        raise ValueError(
            f"need equal non-empty sequences, got {predicted.shape} vs {actual.shape}")
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def ae_eol(predicted_eol, true_eol):
    """Relative absolute end-of-life error |pred - true| / true."""
    if true_eol is NOT_REACHED or true_eol is None:
        raise ValueError("true end of life is undefined")
    true_eol = float(true_eol)
    if true_eol <= 0:
        raise ValueError("true end of life must be positive")
    if predicted_eol is NOT_REACHED:
        return NOT_REACHED
    return abs(float(predicted_eol) - true_eol) / true_eol


@dataclass
class BatteryReport:
    battery_id: str
    split_fraction: float
    n_test: int
    rmse_soh: float
    ae_eol: object  # fraction or NOT_REACHED
    predicted_eol: object = None
    true_eol: object = None
    wall_time_s: float = 0.0


@dataclass
class AggregateReport:
    n_batteries: int
    rmse_mean: float
    rmse_std: float
    ae_mean: object
    ae_std: object
    n_eol_not_reached: int
    single_battery: bool


def aggregate(reports):
    """Mean and population std of the per-battery errors.

    NOT_REACHED end-of-life entries are excluded from the EOL statistics
    and counted separately.
    """
    if not reports:
        raise ValueError("aggregate needs at least one report")
    rmse = np.array([r.rmse_soh for r in reports])
    ae = np.array([r.ae_eol for r in reports if r.ae_eol is not NOT_REACHED])
    n_nr = sum(1 for r in reports if r.ae_eol is NOT_REACHED)
    return AggregateReport(
        n_batteries=len(reports),
        rmse_mean=float(rmse.mean()),
        rmse_std=float(rmse.std()),
        ae_mean=float(ae.mean()) if ae.size else NOT_REACHED,
        ae_std=float(ae.std()) if ae.size else NOT_REACHED,
        n_eol_not_reached=n_nr,
        single_battery=len(reports) == 1,
    )


def evaluate_battery(config, params, series, split_fraction, true_eol=None,
                     eol_threshold=0.8):
    """Roll the trained model over a full series and score the test part.

    The rollout starts from the first training feature row; the health
    error is taken over the chronological test points. True end of life
    defaults to the first measured crossing of the threshold
    (interpolated) when not supplied by a generator.
    """
    train_s, test_s = chrono_split(series, split_fraction)
    tau_full = series.tau_grid()
    feats = series.feature_matrix()
    pred = rollout(config, params, feats[0], tau_full)
    n_train = len(train_s)
    err = rmse_soh(pred[n_train:, 0], feats[n_train:, 0])

    if true_eol is None:
        true_eol = measured_eol(series, eol_threshold)
    pred_eol = predict_eol(config, params, feats[0], series.cycle_map,
                           threshold=eol_threshold)
    ae = ae_eol(pred_eol, true_eol) if true_eol is not NOT_REACHED else NOT_REACHED
    return BatteryReport(
        battery_id=series.battery_id,
        split_fraction=split_fraction,
        n_test=len(test_s),
        rmse_soh=err,
        ae_eol=ae,
        predicted_eol=pred_eol,
        true_eol=true_eol,
    ), pred


def measured_eol(series, threshold=0.8):
    """First measured downward crossing of the threshold, interpolated
    between the bracketing cycles. NOT_REACHED when the series stays above."""
    soh = series.soh_values()
    below = soh < threshold
    if not below.any():
        return NOT_REACHED
    i = int(np.argmax(below))
    if i == 0:
        return float(series.cycles[0])
    s0, s1 = soh[i - 1], soh[i]
    frac = (s0 - threshold) / (s0 - s1)
    return float(series.cycles[i - 1] + frac * (series.cycles[i] - series.cycles[i - 1]))


def attention_sweep(series, model_config, train_config, modes=("start", "mid", "end", "all"),
                    split_fraction=0.7, true_eol=None):
    """Train and score one model per attention placement.

    Everything but the attention spec (and hence the width of the
    attention projection) is held fixed, including the seed.
    """
    from .layers import AttentionSpec

    rows = []
    for mode in modes:
        spec = AttentionSpec.for_mode(mode, model_config.n_v)
        variant = "acl" if spec.m == 0 else "acla"
        cfg = replace(model_config, attention=spec, variant=variant)
        train_s, _ = chrono_split(series, split_fraction)
        t0 = time.perf_counter()
        params, _ = fit(cfg, train_s, train_config)
        wall = time.perf_counter() - t0
        report, _ = evaluate_battery(cfg, params, series, split_fraction,
                                     true_eol=true_eol)
        report.wall_time_s = wall
        rows.append((mode, report))
    return rows


def split_sweep(series, model_config, train_config,
                fractions=(0.5, 0.6, 0.7, 0.8, 0.9), true_eol=None):
    """Train and score one model per training fraction."""
    rows = []
    for frac in fractions:
        train_s, test_s = chrono_split(series, frac)
        if len(test_s) < 2:
            raise ValueError(f"fraction {frac} leaves fewer than 2 test points")
        t0 = time.perf_counter()
        params, _ = fit(model_config, train_s, train_config)
        wall = time.perf_counter() - t0
        report, _ = evaluate_battery(model_config, params, series, frac,
                                     true_eol=true_eol)
        report.wall_time_s = wall
        rows.append((frac, report))
    return rows


SWEEP_HEADER = "dataset,split,variant,mode,rmse_soh_pct,ae_eol_pct,std_rmse,std_ae,wall_time_s"


def sweep_table_csv(path, entries, dataset):
    """Write sweep cells in the shared table schema.

    `entries` rows are (split, variant, mode, BatteryReport); errors go
    out as percentages, std columns are zero for single-battery cells.
    """
    with open(path, "w") as f:
        f.write(SWEEP_HEADER + "\n")
        for split, variant, mode, report in entries:
            ae = report.ae_eol
            ae_txt = "not_reached" if ae is NOT_REACHED else fmt_float(100 * ae)
            f.write(",".join([
                dataset, fmt_float(split), variant, str(mode),
                fmt_float(100 * report.rmse_soh), ae_txt,
                "0.0", "0.0", fmt_float(report.wall_time_s),
            ]) + "\n")
