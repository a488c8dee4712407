"""Command-line entry point.

Subcommands:
  synth    generate a synthetic degradation battery (cycle CSVs + truth)
  extract  charging-curve feature extraction to a feature CSV
  train    fit a model on one or more feature tables
  eval     score a checkpoint on a feature table
  sweep    attention-placement or training-fraction sweeps

Every run writes exactly one manifest.json next to its outputs with the
resolved configuration, seed, input digests and tool version. All
outputs other than the manifest (which carries timestamps) are
byte-reproducible functions of (inputs, config, seed).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .common import NOT_REACHED, fmt_float
from .data import (DataError, SynthSpec, chrono_split, load_cycles,
                   series_from_profiles, synth_battery, uniform_sample,
                   write_cycles, BatterySeries)
from .evaluate import (attention_sweep, evaluate_battery, split_sweep,
                       sweep_table_csv)
from .features import (GRID_PRESETS, InsufficientData, NotConstantCurrent,
                       RangeNotCovered, VoltageGrid, features_from_csv,
                       features_to_csv)
from .layers import AttentionSpec
from .model import (ModelConfig, SolverConfig, load_checkpoint,
                    save_checkpoint)
from .odesolve import NonFiniteDerivative, StepBudgetExceeded
from .train import DivergenceError, TrainConfig, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config files -------------------------------------------------------

def parse_config_file(path):
    """Flat key = value text; '#' starts a comment."""
    cfg = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{ln}: expected key = value")
            key, val = line.split("=", 1)
            cfg[key.strip()] = val.strip()
    return cfg


class Config:
    """Typed access over the merged file + flag key space; records every
    resolved value for the manifest."""

    def __init__(self, raw):
        self.raw = dict(raw)
        self.resolved = {}

    def get(self, key, default, cast=str):
        if key in self.raw:
            try:
                val = cast(self.raw[key])
            except ValueError:
                raise UsageError(f"config key {key!r}: cannot parse {self.raw[key]!r}")
        else:
            val = default
        self.resolved[key] = val
        return val

    def get_float(self, key, default):
        return self.get(key, default, float)

    def get_int(self, key, default):
        return self.get(key, default, int)


def check_unknown_keys(cfg):
    """Reject config keys the command never consulted (typo guard)."""
    unknown = sorted(set(cfg.raw) - set(cfg.resolved))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")


def build_model_config(cfg, n_v, variant=None):
    variant = variant or cfg.get("variant", "acla")
    mode = cfg.get("attention_mode", "start" if variant == "acla" else "none")
    if variant in ("node", "anode", "acl"):
        mode = "none"
    if mode == "custom":
        att = AttentionSpec.for_mode("custom", n_v, p=cfg.get_int("attention_p", 1),
                                     m=cfg.get_int("attention_m", 3))
    else:
        att = AttentionSpec.for_mode(mode, n_v)
    filters = cfg.get("conv_filters", "64,32")
    if isinstance(filters, str):
        filters = tuple(int(x) for x in filters.split(","))
    aug_default = 0 if variant == "node" else 20
    solver = SolverConfig(
        method=cfg.get("solver", "dopri5"),
        rtol=cfg.get_float("rtol", 1e-6),
        atol=cfg.get_float("atol", 1e-8),
        substeps=cfg.get_int("substeps", 2),
        max_steps=cfg.get_int("max_steps", 100_000),
    )
    return ModelConfig(
        n_v=n_v,
        aug_dim=cfg.get_int("aug_dim", aug_default),
        variant=variant,
        attention=att,
        conv_filters=filters,
        conv_kernel=cfg.get_int("conv_kernel", 3),
        lstm_hidden=cfg.get_int("lstm_hidden", 64),
        solver=solver,
        grad_mode=cfg.get("grad_mode", "unrolled"),
    ).validate()


def build_train_config(cfg, seed):
    return TrainConfig(
        lr_max=cfg.get_float("lr_max", 0.01),
        lr_final=cfg.get_float("lr_final", 1e-5),
        warmup_iters=cfg.get_int("warmup_iters", 220),
        plateau_iters=cfg.get_int("plateau_iters", 500),
        decay_iters=cfg.get_int("decay_iters", 280),
        lookahead_s=cfg.get_int("lookahead_s", 5),
        lookahead_beta=cfg.get_float("lookahead_beta", 0.5),
        adam_beta1=cfg.get_float("adam_beta1", 0.9),
        adam_beta2=cfg.get_float("adam_beta2", 0.999),
        adam_eps=cfg.get_float("adam_eps", 1e-8),
        weight_decay=cfg.get_float("weight_decay", 1e-4),
        decay_shape=cfg.get("decay_shape", "linear"),
        seed=seed,
    ).validate()


def build_synth_spec(cfg, seed):
    return SynthSpec(
        q_0=cfg.get_float("q_0", 2.0),
        n_cycles=cfg.get_int("n_cycles", 100),
        a=cfg.get_float("deg_a", 2e-4),
        b=cfg.get_float("deg_b", 1.0),
        c=cfg.get_float("deg_c", 0.0),
        d=cfg.get_float("deg_d", 0.0),
        noise_sigma=cfg.get_float("noise_sigma", 0.0),
        curve_noise_sigma=cfg.get_float("curve_noise_sigma", 0.0),
        seed=seed,
        v_lo=cfg.get_float("v_lo", 3.0),
        v_hi=cfg.get_float("v_hi", 4.2),
        current_a=cfg.get_float("current_a", 1.48),
        duration0_s=cfg.get_float("duration0_s", 3600.0),
        n_samples=cfg.get_int("n_samples", 240),
        gamma0=cfg.get_float("gamma0", 1.2),
        gamma1=cfg.get_float("gamma1", 0.8),
        beta0=cfg.get_float("beta0", 1.5),
        beta1=cfg.get_float("beta1", -1.0),
    )


def parse_grid(args, cfg):
    if getattr(args, "segments", None):
        segs = []
        for part in args.segments.split(","):
            lo, hi, n = part.split(":")
            segs.append((float(lo), float(hi), int(n)))
        cfg.resolved["segments"] = args.segments
        return VoltageGrid(tuple(segs))
    preset = getattr(args, "grid", None) or cfg.get("grid", "oxford")
    if preset not in GRID_PRESETS:
        raise UsageError(f"unknown grid preset {preset!r}")
    cfg.resolved["grid"] = preset
    return GRID_PRESETS[preset]


# -- manifest -----------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, cfg, seed, inputs):
    manifest = {
        "command": command,
        "config": {k: cfg.resolved[k] for k in sorted(cfg.resolved)},
        "seed": seed,
        "inputs": {p: sha256_file(p) for p in inputs},
        "tool_version": __version__,
        "timestamp_utc": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


# -- svg ----------------------------------------------------------------

def write_line_svg(path, x, curves, x_label, y_label):
    """Minimal deterministic line chart: axes plus one polyline per
    (label, values) curve."""
    width, height, margin = 640, 400, 50
    xs = np.asarray(x, dtype=np.float64)
    all_y = np.concatenate([np.asarray(v, dtype=np.float64) for _, v in curves])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(all_y.min()), float(all_y.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(v):
        return margin + (v - x0) / (x1 - x0) * (width - 2 * margin)

    def py(v):
        return height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 10}" text-anchor="middle" '
        f'font-size="14">{x_label}</text>',
        f'<text x="15" y="{height // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 15 {height // 2})">{y_label}</text>',
    ]
    for ci, (label, ys) in enumerate(curves):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, ys))
        color = colors[ci % len(colors)]
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{pts}"/>')
        lines.append(f'<text x="{width - margin - 5}" y="{margin + 18 * (ci + 1)}" '
                     f'text-anchor="end" fill="{color}" font-size="12">{label}</text>')
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# -- commands -----------------------------------------------------------

def cmd_synth(args, cfg):
    seed = args.seed if args.seed is not None else cfg.get_int("seed", 0)
    spec = build_synth_spec(cfg, seed)
    check_unknown_keys(cfg)
    result = synth_battery(spec)
    os.makedirs(args.out, exist_ok=True)
    write_cycles(args.out, result.profiles)
    truth = {
        "true_eol": ("not_reached" if result.true_eol is NOT_REACHED
                     else result.true_eol),
        "cycles": [p.cycle for p in result.profiles],
        "soh_noiseless": [float(s) for s in result.soh_noiseless],
    }
    with open(os.path.join(args.out, "truth.json"), "w") as f:
        json.dump(truth, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(args.out, "synth", cfg, seed,
                   [args.config] if args.config else [])
    print(f"wrote {spec.n_cycles} cycles to {args.out}")
    return EXIT_OK


def cmd_extract(args, cfg):
    grid = parse_grid(args, cfg)
    profiles = load_cycles(args.data_dir)
    q_0 = profiles[0].capacity_ah
    series = series_from_profiles(os.path.basename(os.path.normpath(args.data_dir)),
                                  profiles, grid)
    n_sample = args.sample if args.sample is not None else cfg.get_int("sample", 0)
    if n_sample:
        series = uniform_sample(series, n_sample)
    cfg.resolved["sample"] = n_sample
    check_unknown_keys(cfg)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "features.csv")
    features_to_csv(out_csv, series.cycles, series.vectors)
    inputs = [os.path.join(args.data_dir, "capacity.csv")]
    write_manifest(args.out, "extract", cfg,
                   args.seed if args.seed is not None else 0, inputs)
    print(f"extracted {len(series)} cycles x {series.n_v} time features "
          f"(q_0 = {q_0}) -> {out_csv}")
    return EXIT_OK


def _load_series(path):
    cycles, vectors = features_from_csv(path)
    name = os.path.splitext(os.path.basename(path))[0]
    return BatterySeries.from_features(name, cycles, vectors, q_0=1.0)


def cmd_train(args, cfg):
    seed = args.seed if args.seed is not None else cfg.get_int("seed", 0)
    split = args.split if args.split is not None else cfg.get_float("split", 0.7)
    cfg.resolved["split"] = split
    series_list = [_load_series(p) for p in args.features]
    n_v = series_list[0].n_v
    model_cfg = build_model_config(cfg, n_v, variant=args.variant)
    train_cfg = build_train_config(cfg, seed)
    check_unknown_keys(cfg)
    train_splits = [chrono_split(s, split)[0] for s in series_list]
    params, history = fit(model_cfg, train_splits, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(ckpt, model_cfg, params)
    history.to_csv(os.path.join(args.out, "history.csv"))
    write_manifest(args.out, "train", cfg, seed,
                   list(args.features) + ([args.config] if args.config else []))
    print(f"trained {model_cfg.variant} for {train_cfg.total_iters} iterations; "
          f"final loss {history.losses[-1]:.3e}; checkpoint {ckpt}")
    return EXIT_OK


def _report_csv(path, reports):
    with open(path, "w") as f:
        f.write("battery_id,split,n_test,rmse_soh,ae_eol,predicted_eol,true_eol\n")
        for r in reports:
            ae = "not_reached" if r.ae_eol is NOT_REACHED else fmt_float(r.ae_eol)
            pe = "not_reached" if r.predicted_eol is NOT_REACHED else fmt_float(r.predicted_eol)
            te = "not_reached" if r.true_eol is NOT_REACHED else fmt_float(r.true_eol)
            f.write(",".join([r.battery_id, fmt_float(r.split_fraction),
                              str(r.n_test), fmt_float(r.rmse_soh), ae, pe, te]) + "\n")


def cmd_eval(args, cfg):
    seed = args.seed if args.seed is not None else 0
    model_cfg, params = load_checkpoint(args.checkpoint)
    split = args.split if args.split is not None else cfg.get_float("split", 0.7)
    cfg.resolved["split"] = split
    check_unknown_keys(cfg)
    os.makedirs(args.out, exist_ok=True)
    reports = []
    for path in args.features:
        series = _load_series(path)
        true_eol = None
        if args.truth:
            with open(args.truth) as f:
                t = json.load(f)["true_eol"]
            true_eol = NOT_REACHED if t == "not_reached" else float(t)
        report, pred = evaluate_battery(model_cfg, params, series, split,
                                        true_eol=true_eol)
        reports.append(report)
        curve = os.path.join(args.out, f"curve_{series.battery_id}.csv")
        with open(curve, "w") as f:
            f.write("cycle,tau,soh_actual,soh_predicted\n")
            tau = series.tau_grid()
            actual = series.soh_values()
            for c, tv, sa, sp in zip(series.cycles, tau, actual, pred[:, 0]):
                f.write(f"{int(c)},{fmt_float(tv)},{fmt_float(sa)},{fmt_float(sp)}\n")
        if args.svg:
            write_line_svg(os.path.join(args.out, f"curve_{series.battery_id}.svg"),
                           series.cycles,
                           [("measured", actual), ("predicted", pred[:, 0])],
                           "cycle", "soh")
    _report_csv(os.path.join(args.out, "report.csv"), reports)
    inputs = list(args.features) + [args.checkpoint]
    write_manifest(args.out, "eval", cfg, seed, inputs)
    for r in reports:
        ae = "n/a" if r.ae_eol is NOT_REACHED else f"{100 * r.ae_eol:.2f}%"
        print(f"{r.battery_id}: rmse_soh {100 * r.rmse_soh:.2f}%  ae_eol {ae}")
    return EXIT_OK


def _sweep_cell(payload):
    """One sweep cell; module-level so worker processes can run it."""
    feature_path, raw_cfg, variant, split, seed, kind, label = payload
    series = _load_series(feature_path)
    cfg = Config(raw_cfg)
    model_cfg = build_model_config(cfg, series.n_v, variant=variant)
    train_cfg = build_train_config(cfg, seed)
    if kind == "attention":
        (_, report), = attention_sweep(series, model_cfg, train_cfg,
                                       modes=[label], split_fraction=split)
    else:
        (_, report), = split_sweep(series, model_cfg, train_cfg,
                                   fractions=[float(label)])
    return report


def cmd_sweep(args, cfg):
    seed = args.seed if args.seed is not None else cfg.get_int("seed", 0)
    split = args.split if args.split is not None else cfg.get_float("split", 0.7)
    cfg.resolved["split"] = split
    series = _load_series(args.features[0])
    model_cfg = build_model_config(cfg, series.n_v, variant=args.variant)
    build_train_config(cfg, seed)  # resolve training keys into the manifest
    if args.kind == "attention":
        labels = cfg.get("modes", "start,mid,end,all").split(",")
    else:
        labels = [float(x) for x in
                  cfg.get("fractions", "0.5,0.6,0.7,0.8,0.9").split(",")]
    check_unknown_keys(cfg)
    os.makedirs(args.out, exist_ok=True)
    payloads = [(args.features[0], cfg.raw, args.variant, split, seed,
                 args.kind, label) for label in labels]
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            reports = list(pool.map(_sweep_cell, payloads))
    else:
        reports = [_sweep_cell(p) for p in payloads]

    entries = []
    for label, report in zip(labels, reports):
        if args.kind == "attention":
            variant = "acl" if label == "none" else "acla"
            entries.append((split, variant, label, report))
        else:
            entries.append((label, model_cfg.variant, model_cfg.attention.mode, report))
    out_csv = os.path.join(args.out, "sweep.csv")
    sweep_table_csv(out_csv, entries, dataset=series.battery_id)
    write_manifest(args.out, f"sweep:{args.kind}", cfg, seed,
                   list(args.features) + ([args.config] if args.config else []))
    print(f"wrote {len(entries)} sweep rows -> {out_csv}")
    return EXIT_OK


# -- entry --------------------------------------------------------------

def make_parser():
    parser = _Parser(prog="sohode",
                     description="Battery SOH trajectory prediction with a neural ODE")

    def add_common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic battery")
    add_common(p)

    p = sub.add_parser("extract", help="extract charging-curve features")
    add_common(p)
    p.add_argument("data_dir")
    p.add_argument("--grid", choices=sorted(GRID_PRESETS), default=None)
    p.add_argument("--segments", default=None,
                   help="custom grid, e.g. 3.0:4.2:21[,3.5:3.6:4]")
    p.add_argument("--sample", type=int, default=None,
                   help="uniform-subsample the series to N cycles")

    p = sub.add_parser("train", help="train a model on feature tables")
    add_common(p)
    p.add_argument("features", nargs="+")
    p.add_argument("--variant", choices=("node", "anode", "acl", "acla"), default=None)
    p.add_argument("--split", type=float, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("features", nargs="+")
    p.add_argument("--split", type=float, default=None)
    p.add_argument("--truth", default=None, help="truth.json from synth")
    p.add_argument("--svg", action="store_true")

    p = sub.add_parser("sweep", help="attention or split sweeps")
    add_common(p)
    p.add_argument("kind", choices=("attention", "split"))
    p.add_argument("features", nargs="+")
    p.add_argument("--variant", choices=("node", "anode", "acl", "acla"), default=None)
    p.add_argument("--split", type=float, default=None)

    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        raw = parse_config_file(args.config) if args.config else {}
        cfg = Config(raw)
        return _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, RangeNotCovered, NotConstantCurrent, InsufficientData,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteDerivative, StepBudgetExceeded,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
