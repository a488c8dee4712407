"""Benchmark: compiled program executor vs the pure-Python fallback.

Builds the training workload (an unrolled RK4 rollout of the full
attention/conv/LSTM/linear field plus the composite loss, frozen as a
program) and times forward+backward replays on each backend. This is
exactly the per-iteration work of `fit`, so the ratio printed here is
the training-time ratio.

Usage: python bench/bench_backends.py [--points N] [--repeats K]
"""

import argparse
import time

from sohode import _kernels_py
from sohode.autodiff import Tape, Tensor
from sohode.data import SynthSpec, chrono_split, series_from_profiles, synth_battery
from sohode.features import VoltageGrid
from sohode.layers import AttentionSpec
from sohode.model import ModelConfig, SolverConfig, augment, build_tape_field, init_params
from sohode.odesolve import rk4_unrolled
from sohode.train import loss_on_tape

try:
    from sohode import _kernels_cy
except ImportError:
    _kernels_cy = None


def build_training_tape(points):
    spec = SynthSpec(n_cycles=points, a=0.0032, b=1.0, seed=42)
    series = series_from_profiles(
        "bench", synth_battery(spec).profiles, VoltageGrid(((3.0, 4.2, 9),)))
    train, _ = chrono_split(series, 0.7)
    cfg = ModelConfig(n_v=9, aug_dim=20, variant="acla",
                      attention=AttentionSpec.for_mode("start", 9),
                      solver=SolverConfig(method="rk4", substeps=1))
    params = init_params(cfg, seed=3)
    feats = train.feature_matrix()
    tape = Tape()
    y0 = Tensor(augment(feats[0], cfg.aug_dim)[None, :])
    rows = rk4_unrolled(tape, build_tape_field(cfg, params), y0,
                        train.tau_grid(), substeps=1)
    root = loss_on_tape(tape, rows, feats, cfg.n_v)
    return tape, root


def time_program(prog, repeats):
    prog.forward()
    prog.backward()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        prog.forward()
        prog.backward()
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=80,
                    help="cycles in the synthetic series (default 80)")
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args()

    tape, root = build_training_tape(args.points)
    n_ops = len(tape)
    print(f"workload: {n_ops} tape ops per iteration "
          f"({args.points}-cycle series, 70% train)")

    py = _kernels_py.compile_program(tape._records, tape.tensors(), root)
    t_py = time_program(py, max(1, args.repeats // 5))
    print(f"python executor : {t_py * 1e3:9.1f} ms/iter "
          f"({n_ops * 2 / t_py / 1e6:6.2f} M op-visits/s)")

    if _kernels_cy is None:
        print("cython executor : not built (pip install -e . compiles it)")
        return

    cy = _kernels_cy.compile_program(tape._records, tape.tensors(), root)
    t_cy = time_program(cy, args.repeats)
    print(f"cython executor : {t_cy * 1e3:9.1f} ms/iter "
          f"({n_ops * 2 / t_cy / 1e6:6.2f} M op-visits/s)")
    print(f"speedup         : {t_py / t_cy:9.1f}x")

    # the two executors must agree on the arithmetic
    py.forward()
    loss_py = root.item()
    cy.forward()
    loss_cy = root.item()
    rel = abs(loss_py - loss_cy) / max(1e-300, abs(loss_py))
    print(f"loss agreement  : rel diff {rel:.2e}")


if __name__ == "__main__":
    main()
