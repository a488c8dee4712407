"""Initial-value-problem integration and adjoint-method gradients.

Fields are autonomous: ``f(y) -> dy/dtau``. Time dependence, when
needed, is expressed through an extra clock coordinate in the state.

Two solvers are provided. `dopri5` is the adaptive Dormand-Prince 5(4)
pair with a PI step-size controller; observation times are hit exactly
by clamping step endpoints onto the requested grid. `rk4_fixed` is the
classical fourth-order method with a fixed number of substeps per grid
interval; it doubles as the reference for convergence-order checks and
as the backbone of unrolled (backprop-through-the-solver) training.
"""

from dataclasses import dataclass

import numpy as np


class StepBudgetExceeded(RuntimeError):
    """The adaptive solver hit its max_steps budget."""


class NonFiniteDerivative(RuntimeError):
    """The vector field produced NaN or Inf."""


@dataclass(frozen=True)
class IvpSpec:
    """Problem geometry and tolerances for one integration."""

    dim: int
    t_grid: np.ndarray
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 100_000

    def __post_init__(self):
        grid = np.ascontiguousarray(self.t_grid, dtype=np.float64)
        object.__setattr__(self, "t_grid", grid)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("t_grid must be a 1-D array of length >= 2")
        if not np.all(np.diff(grid) > 0):
            raise ValueError("t_grid must be strictly increasing")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), dim); row 0 is the initial state

    def __post_init__(self):
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite states")


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# b5 - b4: weights of the embedded error estimate
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 5.0
# PI controller exponents (order-5 error estimate)
_ALPHA = 0.17
_BETA = 0.04


def _eval_field(field, y):
    dy = np.asarray(field(y), dtype=np.float64)
    if dy.shape != y.shape:
        raise ValueError(f"field returned shape {dy.shape} for state shape {y.shape}")
    if not np.all(np.isfinite(dy)):
        raise NonFiniteDerivative("vector field produced non-finite values")
    return dy


def _error_norm(err, y, y_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(field, y0, f0, t_span, rtol, atol):
    """Hairer-Norsett-Wanner starting-step heuristic."""
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = _eval_field(field, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, t_span)


def dopri5(field, y0, spec):
    """Integrate over spec.t_grid with the adaptive 5(4) pair.

    Step endpoints are clamped onto every grid time, so the returned
    states are solver values at exactly the requested times (no
    interpolation error on top of the step-error control).
    """
    y0 = np.ascontiguousarray(y0, dtype=np.float64)
    if y0.shape != (spec.dim,):
        raise ValueError(f"y0 has shape {y0.shape}, expected ({spec.dim},)")
    grid = spec.t_grid
    states = np.empty((grid.size, spec.dim))
    states[0] = y0

    y = y0.copy()
    t = grid[0]
    f_cur = _eval_field(field, y)  # FSAL: reused as stage 1 of the next step
    h = _initial_step(field, y, f_cur, grid[-1] - grid[0], spec.rtol, spec.atol)
    fac_old = 1e-4
    k = np.empty((7, spec.dim))
    steps = 0
    next_obs = 1

    while next_obs < grid.size:
        if steps >= spec.max_steps:
            raise StepBudgetExceeded(
                f"dopri5 exceeded {spec.max_steps} steps at t={t:.6g}")
        steps += 1

        t_target = grid[next_obs]
        hits_obs = h >= (t_target - t) * (1 - 1e-12)
        if hits_obs:
            h = t_target - t

        k[0] = f_cur
        for s in range(1, 7):
            k[s] = _eval_field(field, y + h * (_A[s] @ k[:s]))
        y_new = y + h * (_B5 @ k)
        err = _error_norm(h * (_E @ k), y, y_new, spec.rtol, spec.atol)

        if err <= 1.0:
            t = t_target if hits_obs else t + h
            y = y_new
            f_cur = k[6]
            if hits_obs:
                states[next_obs] = y
                next_obs += 1
            if err == 0.0:
                factor = _FAC_MAX
            else:
                factor = _SAFETY * err ** (-_ALPHA) * fac_old ** _BETA
                factor = min(_FAC_MAX, max(_FAC_MIN, factor))
            fac_old = max(err, 1e-4)
            h = h * factor
        else:
            h = h * min(1.0, max(_FAC_MIN, _SAFETY * err ** -0.2))

    return Trajectory(times=grid.copy(), states=states)


def rk4_fixed(field, y0, t_grid, substeps=1):
    """Classical RK4 with `substeps` equal steps per grid interval."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    grid = np.ascontiguousarray(t_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 1:
        raise ValueError("t_grid must be a non-empty 1-D array")
    if grid.size > 1 and not np.all(np.diff(grid) > 0):
        raise ValueError("t_grid must be strictly increasing")
    y = np.ascontiguousarray(y0, dtype=np.float64).copy()
    states = np.empty((grid.size, y.size))
    states[0] = y
    for i in range(1, grid.size):
        h = (grid[i] - grid[i - 1]) / substeps
        for _ in range(substeps):
            k1 = _eval_field(field, y)
            k2 = _eval_field(field, y + 0.5 * h * k1)
            k3 = _eval_field(field, y + 0.5 * h * k2)
            k4 = _eval_field(field, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        states[i] = y
    return Trajectory(times=grid.copy(), states=states)


def rk4_unrolled(tape, field, y0, t_grid, substeps=1):
    """RK4 recorded on a tape: field maps (tape, state row) -> derivative row.

    Returns the list of per-grid-time state tensors, so a loss over the
    trajectory backpropagates through every solver stage.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    from .autodiff import Tensor

    grid = np.ascontiguousarray(t_grid, dtype=np.float64)
    consts = {}

    def const(v):
        key = float(v)
        if key not in consts:
            consts[key] = Tensor.scalar(key)
        return consts[key]

    states = [y0]
    y = y0
    for i in range(1, grid.size):
        h = (grid[i] - grid[i - 1]) / substeps
        c_h2, c_h, c_h6, c_2 = const(h / 2), const(h), const(h / 6), const(2.0)
        for _ in range(substeps):
            k1 = field(tape, y)
            k2 = field(tape, tape.add(y, tape.mul(k1, c_h2)))
            k3 = field(tape, tape.add(y, tape.mul(k2, c_h2)))
            k4 = field(tape, tape.add(y, tape.mul(k3, c_h)))
            ksum = tape.add(tape.add(k1, tape.mul(k2, c_2)),
                            tape.add(tape.mul(k3, c_2), k4))
            y = tape.add(y, tape.mul(ksum, c_h6))
        states.append(y)
    return states


class OdeField:
    """Protocol for adjoint-capable fields.

    __call__(y) -> dy            numeric evaluation
    vjp(y, a)  -> (f, aJy, aJp)  f(y), a^T df/dy, a^T df/dparams
    n_params   -> int
    """

    n_params = 0

    def __call__(self, y):  # pragma: no cover - protocol stub
        raise NotImplementedError

    def vjp(self, y, a):  # pragma: no cover - protocol stub
        raise NotImplementedError


def adjoint_grad(field, y0, spec, dloss_dstates):
    """Gradients of a trajectory loss via backward adjoint integration.

    `dloss_dstates` holds dL/d(state at t_grid[i]) in row i. The
    adjoint state, the re-integrated trajectory and the parameter
    accumulator are solved jointly backward through each
    inter-observation interval; each observation injects its loss
    gradient into the adjoint. Returns (dL/dy0, dL/dparams).
    """
    y0 = np.ascontiguousarray(y0, dtype=np.float64)
    grid = spec.t_grid
    dl = np.ascontiguousarray(dloss_dstates, dtype=np.float64)
    if dl.shape != (grid.size, spec.dim):
        raise ValueError(
            f"dloss_dstates has shape {dl.shape}, expected {(grid.size, spec.dim)}")

    forward = dopri5(field, y0, spec)
    dim = spec.dim
    n_p = field.n_params

    def backward_field(w):
        y = w[:dim]
        a = w[dim:2 * dim]
        f_y, a_jy, a_jp = field.vjp(y, a)
        return np.concatenate([-f_y, a_jy, a_jp])

    a_cur = dl[-1].copy()
    g_cur = np.zeros(n_p)
    for i in range(grid.size - 1, 0, -1):
        span = grid[i] - grid[i - 1]
        w0 = np.concatenate([forward.states[i], a_cur, g_cur])
        sub = IvpSpec(dim=2 * dim + n_p, t_grid=np.array([0.0, span]),
                      rtol=spec.rtol, atol=spec.atol, max_steps=spec.max_steps)
        w_end = dopri5(backward_field, w0, sub).states[-1]
        a_cur = w_end[dim:2 * dim] + dl[i - 1]
        g_cur = w_end[2 * dim:]
    return a_cur, g_cur
