"""Training: composite trajectory loss, AdamW + Lookahead, three-phase
learning-rate schedule, and the fit loop.

The per-iteration work is one battery series: roll the model out over
the series' training grid, score the composite loss (equal weight on
the health estimate and the mean-squared time-feature error), and take
one optimizer step. With the default unrolled gradient mode the whole
rollout+loss graph is recorded once per battery and replayed every
iteration; the adjoint mode instead solves the backward sensitivity
ODE per iteration.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .model import ModelField, augment, build_tape_field, init_params
from .odesolve import IvpSpec, adjoint_grad, dopri5, rk4_unrolled


class DivergenceError(RuntimeError):
    """Loss blew up or a gradient went non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 0.01
    lr_final: float = 1e-5
    warmup_iters: int = 220
    plateau_iters: int = 500
    decay_iters: int = 280
    lookahead_s: int = 5
    lookahead_beta: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    decay_shape: str = "linear"  # linear | cosine
    seed: int = 0

    @property
    def total_iters(self):
        return self.warmup_iters + self.plateau_iters + self.decay_iters

    def validate(self):
        if min(self.warmup_iters, self.plateau_iters, self.decay_iters) < 0:
            raise ValueError("phase lengths must be non-negative")
        if self.lr_final >= self.lr_max:
            raise ValueError("lr_final must be below lr_max")
        if not 0.0 < self.lookahead_beta <= 1.0:
            raise ValueError("lookahead_beta must be in (0, 1]")
        if self.lookahead_s < 1:
            raise ValueError("lookahead_s must be >= 1")
        if self.decay_shape not in ("linear", "cosine"):
            raise ValueError(f"unknown decay shape {self.decay_shape!r}")
        return self


def lr_at(iteration, config):
    """Learning rate at a 1-based iteration: linear warmup from
    lr_max/warmup, a plateau at lr_max, then decay to lr_final."""
    total = config.total_iters
    if not 1 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [1, {total}]")
    if iteration <= config.warmup_iters:
        return config.lr_max * iteration / config.warmup_iters
    if iteration <= config.warmup_iters + config.plateau_iters:
        return config.lr_max
    progress = (iteration - config.warmup_iters - config.plateau_iters) / config.decay_iters
    if config.decay_shape == "cosine":
        weight = 0.5 * (1.0 + np.cos(np.pi * progress))
        return config.lr_final * (1.0 - weight) + config.lr_max * weight
    # convex combination: exact at both endpoints
    return config.lr_final * progress + config.lr_max * (1.0 - progress)


def loss_on_tape(tape, predicted_rows, targets, n_v):
    """Composite trajectory loss recorded on a tape.

    mean_k [ (soh_hat_k - soh_k)^2 + (1/n_v) * ||t_hat_k - t_k||^2 ]
    over the trajectory rows; rows wider than n_v+1 (augmented states)
    are scored on their first n_v+1 coordinates.
    """
    n = len(predicted_rows)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (n, n_v + 1):
        raise ValueError(f"targets shape {targets.shape} != ({n}, {n_v + 1})")
    if n == 0:
        raise ValueError("loss needs at least one trajectory row")
    inv_nv = Tensor.scalar(1.0 / n_v)
    total = None
    for k, row in enumerate(predicted_rows):
        head = row
        if row.shape[1] > n_v + 1:
            head = tape.slice(row, 0, n_v + 1, axis=1)
        diff = tape.add(head, Tensor(-targets[k][None, :]))
        sq = tape.square(diff)
        soh_term = tape.sum(tape.slice(sq, 0, 1, axis=1))
        t_term = tape.mul(tape.sum(tape.slice(sq, 1, n_v + 1, axis=1)), inv_nv)
        term = tape.add(soh_term, t_term)
        total = term if total is None else tape.add(total, term)
    return tape.mul(total, Tensor.scalar(1.0 / n))


def loss_value(predicted, targets, n_v):
    """Numeric twin of loss_on_tape for reporting."""
    predicted = np.asarray(predicted, dtype=np.float64)[:, :n_v + 1]
    targets = np.asarray(targets, dtype=np.float64)
    diff = predicted - targets
    return float(np.mean(diff[:, 0] ** 2 + (diff[:, 1:] ** 2).sum(axis=1) / n_v))


class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments."""

    def __init__(self, tensors, config):
        self.tensors = list(tensors)
        self.config = config
        self.m = [np.zeros_like(t.values) for t in self.tensors]
        self.v = [np.zeros_like(t.values) for t in self.tensors]
        self.t = 0

    def step(self, lr):
        cfg = self.config
        self.t += 1
        b1c = 1.0 - cfg.adam_beta1 ** self.t
        b2c = 1.0 - cfg.adam_beta2 ** self.t
        for p, m, v in zip(self.tensors, self.m, self.v):
            g = p.ensure_grad()
            if not np.all(np.isfinite(g)):
                raise DivergenceError(
                    f"non-finite gradient (shape {p.shape}) at step {self.t}")
            m += (1.0 - cfg.adam_beta1) * (g - m)
            v += (1.0 - cfg.adam_beta2) * (g * g - v)
            update = (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)
            if cfg.weight_decay:
                update = update + cfg.weight_decay * p.values
            p.values -= lr * update


def lookahead_sync(slow, fast, beta):
    """slow' = slow + beta * (fast - slow); fast' = slow'. In place."""
    slow += beta * (fast - slow)
    fast[...] = slow
    return slow, fast


class Lookahead:
    """Slow/fast weight wrapper: every s inner steps the slow weights
    move toward the fast ones and the fast weights are reset to them."""

    def __init__(self, tensors, s, beta):
        self.tensors = list(tensors)
        self.s = s
        self.beta = beta
        self.slow = [t.values.copy() for t in self.tensors]
        self.k = 0

    def after_step(self):
        self.k += 1
        if self.k % self.s == 0:
            for slow, p in zip(self.slow, self.tensors):
                lookahead_sync(slow, p.values, self.beta)

    def finalize(self):
        """Adopt the slow weights (drops any unsynced fast progress)."""
        for slow, p in zip(self.slow, self.tensors):
            p.values[...] = slow


@dataclass
class TrainHistory:
    iterations: np.ndarray
    lrs: np.ndarray
    losses: np.ndarray
    param_digest: str

    def to_csv(self, path):
        from .common import fmt_float
        with open(path, "w") as f:
            f.write("iter,lr,loss\n")
            for it, lr, ls in zip(self.iterations, self.lrs, self.losses):
                f.write(f"{int(it)},{fmt_float(lr)},{fmt_float(ls)}\n")


def params_digest(params):
    return hashlib.sha256(params.flatten().tobytes()).hexdigest()


class _UnrolledProblem:
    """One battery's frozen rollout+loss program."""

    def __init__(self, config, params, series):
        tau = series.tau_grid()
        feats = series.feature_matrix()
        y0 = Tensor(augment(feats[0], config.aug_dim)[None, :])
        tape = Tape()
        field = build_tape_field(config, params)
        rows = rk4_unrolled(tape, field, y0, tau, substeps=config.solver.substeps)
        root = loss_on_tape(tape, rows, feats, config.n_v)
        self.program = tape.compile(root=root)
        self.root = root

    def loss_and_grads(self):
        self.program.forward()
        self.program.backward()
        return self.root.item()


class _AdjointProblem:
    """One battery's adjoint-mode gradient evaluation."""

    def __init__(self, config, params, series):
        self.config = config
        self.params = params
        self.tau = series.tau_grid()
        self.targets = series.feature_matrix()
        self.y0 = augment(self.targets[0], config.aug_dim)
        self.field = ModelField(config, params)
        self.spec = IvpSpec(dim=config.state_dim, t_grid=self.tau,
                            rtol=config.solver.rtol, atol=config.solver.atol,
                            max_steps=config.solver.max_steps)
        d = config.state_dim
        # reusable loss graph over the trajectory rows
        self._leaf_rows = [Tensor.zeros((1, d), requires_grad=True)
                           for _ in range(self.tau.size)]
        tape = Tape()
        self._loss_root = loss_on_tape(tape, self._leaf_rows, self.targets, config.n_v)
        self._loss_prog = tape.compile(root=self._loss_root)

    def loss_and_grads(self):
        traj = dopri5(self.field, self.y0, self.spec)
        for leaf, state in zip(self._leaf_rows, traj.states):
            leaf.values[0, :] = state
        self._loss_prog.forward()
        self._loss_prog.backward()
        dl_dstates = np.stack([leaf.grad[0] for leaf in self._leaf_rows])
        _, g_flat = adjoint_grad(self.field, self.y0, self.spec, dl_dstates)
        off = 0
        for t in self.params.tensors():
            t.ensure_grad().reshape(-1)[:] = g_flat[off:off + t.size]
            off += t.size
        return self._loss_root.item()


def fit(config, train_series, train_config, params=None):
    """Train on one or more battery series (round-robin, one series per
    iteration). Returns (params, TrainHistory)."""
    config.validate()
    train_config.validate()
    if not isinstance(train_series, (list, tuple)):
        train_series = [train_series]
    if not train_series:
        raise ValueError("fit needs at least one training series")
    for s in train_series:
        if s.n_v != config.n_v:
            raise ValueError(
                f"series {s.battery_id!r} has {s.n_v} time features, model expects {config.n_v}")

    if params is None:
        params = init_params(config, seed=train_config.seed)
    total = train_config.total_iters
    history_iter = np.arange(1, total + 1)
    history_lr = np.zeros(total)
    history_loss = np.zeros(total)
    if total == 0:
        return params, TrainHistory(history_iter, history_lr, history_loss,
                                    params_digest(params))

    problem_cls = _AdjointProblem if config.grad_mode == "adjoint" else _UnrolledProblem
    problems = [problem_cls(config, params, s) for s in train_series]

    optimizer = AdamW(params.tensors(), train_config)
    lookahead = Lookahead(params.tensors(), train_config.lookahead_s,
                          train_config.lookahead_beta)

    for it in range(1, total + 1):
        problem = problems[(it - 1) % len(problems)]
        loss = problem.loss_and_grads()
        if not np.isfinite(loss) or loss > 1e6:
            raise DivergenceError(f"loss {loss} at iteration {it}; aborting")
        lr = lr_at(it, train_config)
        optimizer.step(lr)
        lookahead.after_step()
        history_lr[it - 1] = lr
        history_loss[it - 1] = loss

    lookahead.finalize()
    return params, TrainHistory(history_iter, history_lr, history_loss,
                                params_digest(params))
