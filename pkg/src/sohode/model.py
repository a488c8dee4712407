"""Model assembly: the learned vector field, state augmentation,
trajectory rollout and end-of-life prediction.

The state vector is [soh, t_1 .. t_{n_v}, a_1 .. a_{aug_dim}] with the
augmented block zero at tau = 0. Four variants share the machinery:

  node   plain neural ODE, two-layer tanh perceptron field, no augmentation
  anode  the same field with augmented state
  acl    attention-less conv + LSTM + linear field on the augmented state
  acla   acl plus the windowed attention rescaling of the time features

For acl/acla the field evaluates, at every solver stage: attention (if
any) on the evolving state, two 1-D convolutions over the state viewed
as a single-channel sequence, an LSTM over the conv channels, and a
linear head back to the state dimension.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import Tape, Tensor
from .common import NOT_REACHED, CycleMap  # noqa: F401 (CycleMap re-exported)
from .layers import (AttentionSpec, apply_attention, attention_scores,
                     attention_weights, conv1d, linear, lstm_forward,
                     uniform_init)
from .odesolve import IvpSpec, OdeField, dopri5, rk4_fixed

VARIANTS = ("node", "anode", "acl", "acla")

CHECKPOINT_MAGIC = b"SOHODECK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"  # dopri5 | rk4
    rtol: float = 1e-6
    atol: float = 1e-8
    substeps: int = 2
    max_steps: int = 100_000


@dataclass(frozen=True)
class ModelConfig:
    n_v: int
    aug_dim: int = 20
    variant: str = "acla"
    attention: AttentionSpec = dc_field(default_factory=AttentionSpec)
    conv_filters: tuple = (64, 32)
    conv_kernel: int = 3
    lstm_hidden: int = 64
    solver: SolverConfig = dc_field(default_factory=SolverConfig)
    grad_mode: str = "unrolled"  # unrolled | adjoint

    @property
    def state_dim(self):
        return self.n_v + 1 + self.aug_dim

    def validate(self):
        """Strict variant rules, enforced at training/CLI entry points."""
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_v < 1:
            raise ValueError("n_v must be >= 1")
        if self.aug_dim < 0:
            raise ValueError("aug_dim must be >= 0")
        if self.variant == "node" and self.aug_dim != 0:
            raise ValueError("node variant is unaugmented (aug_dim must be 0)")
        if self.variant == "acla" and self.attention.m == 0:
            raise ValueError("acla needs an active attention window (m > 0)")
        if self.variant in ("acl", "anode", "node") and self.attention.m != 0:
            raise ValueError(f"variant {self.variant!r} must not carry attention")
        self.attention.validate(self.n_v)
        if self.grad_mode not in ("unrolled", "adjoint"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.solver.method not in ("dopri5", "rk4"):
            raise ValueError(f"unknown solver {self.solver.method!r}")
        return self


class ParameterSet:
    """Ordered name -> Tensor map; the flat order defines serialization
    and the parameter-gradient layout."""

    def __init__(self):
        self._params = {}

    def add(self, name, values, rng=None, fan_in=None):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        if rng is not None:
            values = uniform_init(rng, values, fan_in)
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    @property
    def n_scalars(self):
        return sum(t.size for t in self._params.values())

    def flatten(self):
        return np.concatenate([t.values.reshape(-1) for t in self.tensors()])

    def load_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_scalars:
            raise ValueError(f"expected {self.n_scalars} scalars, got {vec.size}")
        off = 0
        for t in self.tensors():
            t.values.reshape(-1)[:] = vec[off:off + t.size]
            off += t.size
        return self

    def grad_flat(self):
        return np.concatenate([t.ensure_grad().reshape(-1) for t in self.tensors()])

    def zero_grads(self):
        for t in self.tensors():
            t.ensure_grad().fill(0.0)


def init_params(config, seed=0):
    """Seeded parameter initialization in declaration order."""
    rng = np.random.default_rng(seed)
    p = ParameterSet()
    d = config.state_dim
    if config.variant in ("acl", "acla"):
        n_in = config.n_v + 1
        if config.attention.m > 0:
            p.add("att_w", (n_in, config.attention.m), rng, n_in)
            p.add("att_b", (config.attention.m,), rng, n_in)
        k = config.conv_kernel
        f1, f2 = config.conv_filters
        hid = config.lstm_hidden
        p.add("conv1_w", (k * 1, f1), rng, k * 1)
        p.add("conv1_b", (f1,), rng, k * 1)
        p.add("conv2_w", (k * f1, f2), rng, k * f1)
        p.add("conv2_b", (f2,), rng, k * f1)
        p.add("lstm_wx", (f2, 4 * hid), rng, f2)
        p.add("lstm_wh", (hid, 4 * hid), rng, hid)
        p.add("lstm_b", (4 * hid,), rng, hid)
        p.add("head_w", (hid, d), rng, hid)
        p.add("head_b", (d,), rng, hid)
    else:  # node / anode: two-layer tanh perceptron
        width = 64
        p.add("mlp_w1", (d, width), rng, d)
        p.add("mlp_b1", (width,), rng, d)
        p.add("mlp_w2", (width, d), rng, width)
        p.add("mlp_b2", (d,), rng, width)
    return p


def build_tape_field(config, params):
    """Return field(tape, state_row) -> derivative_row for the variant."""
    d = config.state_dim

    if config.variant in ("acl", "acla"):
        spec = config.attention

        def field(tape, y):
            if spec.m > 0:
                feats = tape.slice(y, 0, config.n_v + 1, axis=1)
                scores = attention_scores(tape, feats, params["att_w"], params["att_b"])
                alpha = attention_weights(tape, scores)
                y = apply_attention(tape, y, alpha, spec)
            seq = tape.reshape(y, (d, 1))
            seq = conv1d(tape, seq, params["conv1_w"], params["conv1_b"])
            seq = conv1d(tape, seq, params["conv2_w"], params["conv2_b"])
            hs = lstm_forward(tape, seq, params["lstm_wx"], params["lstm_wh"],
                              params["lstm_b"])
            return linear(tape, hs[-1], params["head_w"], params["head_b"])

        return field

    def field(tape, y):
        h = tape.tanh(linear(tape, y, params["mlp_w1"], params["mlp_b1"]))
        return linear(tape, h, params["mlp_w2"], params["mlp_b2"])

    return field


class ModelField(OdeField):
    """Numeric + VJP view of the tape field, as frozen programs.

    The field graph is recorded once; evaluations write the state into
    the leaf buffer and replay. vjp() additionally replays the backward
    sweep of sum(f(y) * a), yielding a^T df/dy and a^T df/dparams.
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params
        d = config.state_dim
        fld = build_tape_field(config, params)

        self._y_eval = Tensor.zeros((1, d))
        t_eval = Tape()
        self._out_eval = fld(t_eval, self._y_eval)
        self._prog_eval = t_eval.compile()

        self._y_vjp = Tensor.zeros((1, d), requires_grad=True)
        self._a_vjp = Tensor.zeros((1, d))
        t_vjp = Tape()
        self._out_vjp = fld(t_vjp, self._y_vjp)
        root = t_vjp.sum(t_vjp.mul(self._out_vjp, self._a_vjp))
        self._prog_vjp = t_vjp.compile(root=root)

        self._param_tensors = params.tensors()
        self.n_params = params.n_scalars

    def __call__(self, y):
        self._y_eval.values[0, :] = y
        self._prog_eval.forward()
        out = self._out_eval.values[0]
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("vector field produced non-finite output")
        return out.copy()

    def vjp(self, y, a):
        self._y_vjp.values[0, :] = y
        self._a_vjp.values[0, :] = a
        self._prog_vjp.forward()
        self._prog_vjp.backward()
        grads = np.concatenate([t.grad.reshape(-1) for t in self._param_tensors]) \
            if self._param_tensors else np.zeros(0)
        return (self._out_vjp.values[0].copy(),
                self._y_vjp.grad[0].copy(),
                grads)


def vector_field(config, params, state):
    """One-off numeric field evaluation (builds the program each call;
    hold a ModelField for repeated use)."""
    return ModelField(config, params)(np.asarray(state, dtype=np.float64))


def augment(f0, aug_dim):
    """Initial ODE state: features followed by an all-zero augmented block."""
    if aug_dim < 0:
        raise ValueError("aug_dim must be >= 0")
    f0 = np.asarray(f0, dtype=np.float64).reshape(-1)
    return np.concatenate([f0, np.zeros(aug_dim)])


def rollout(config, params, f0, tau_grid):
    """Integrate the field from augment(f0) and return the observable
    (soh, t_1..t_{n_v}) rows; augmented coordinates are dropped."""
    tau_grid = np.asarray(tau_grid, dtype=np.float64)
    if tau_grid[0] != 0.0:
        raise ValueError("tau_grid must start at 0")
    f0 = np.asarray(f0, dtype=np.float64).reshape(-1)
    if f0.size != config.n_v + 1:
        raise ValueError(f"feature vector length {f0.size} != n_v+1 = {config.n_v + 1}")
    y0 = augment(f0, config.aug_dim)
    if tau_grid.size == 1:
        return y0[None, :config.n_v + 1].copy()
    field = ModelField(config, params)
    if config.solver.method == "rk4":
        traj = rk4_fixed(field, y0, tau_grid, substeps=config.solver.substeps)
    else:
        spec = IvpSpec(dim=config.state_dim, t_grid=tau_grid,
                       rtol=config.solver.rtol, atol=config.solver.atol,
                       max_steps=config.solver.max_steps)
        traj = dopri5(field, y0, spec)
    return traj.states[:, :config.n_v + 1]


def predict_eol(config, params, f0, cycle_map, threshold=0.8,
                horizon_cycles=None, fine_steps=800):
    """First downward crossing of soh = threshold, in real cycles.

    The trajectory is extended on a fine tau grid out to the horizon
    (default: tau = 3, three times the unit data span) and the crossing
    is located by linear interpolation between the bracketing grid
    points. Returns NOT_REACHED when no crossing occurs.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    if horizon_cycles is None:
        tau_end = 3.0
    else:
        tau_end = float(cycle_map.tau_at(horizon_cycles))
    if tau_end <= 0:
        raise ValueError("horizon must lie after cycle 0")
    tau_grid = np.linspace(0.0, tau_end, fine_steps + 1)
    soh = rollout(config, params, f0, tau_grid)[:, 0]
    below = soh < threshold
    if not below.any():
        return NOT_REACHED
    i = int(np.argmax(below))
    if i == 0:
        return float(cycle_map.cycle_at(tau_grid[0]))
    # linear interpolation between the bracketing points
    s0, s1 = soh[i - 1], soh[i]
    frac = (s0 - threshold) / (s0 - s1)
    tau_cross = tau_grid[i - 1] + frac * (tau_grid[i] - tau_grid[i - 1])
    return float(cycle_map.cycle_at(tau_cross))


# -- config (de)serialization and checkpoints --------------------------


def config_to_dict(config):
    return {
        "n_v": config.n_v,
        "aug_dim": config.aug_dim,
        "variant": config.variant,
        "attention": {"mode": config.attention.mode,
                      "p": config.attention.p, "m": config.attention.m},
        "conv_filters": list(config.conv_filters),
        "conv_kernel": config.conv_kernel,
        "lstm_hidden": config.lstm_hidden,
        "solver": {"method": config.solver.method, "rtol": config.solver.rtol,
                   "atol": config.solver.atol, "substeps": config.solver.substeps,
                   "max_steps": config.solver.max_steps},
        "grad_mode": config.grad_mode,
    }


def config_from_dict(d):
    att = d.get("attention", {})
    sol = d.get("solver", {})
    return ModelConfig(
        n_v=int(d["n_v"]),
        aug_dim=int(d.get("aug_dim", 20)),
        variant=d.get("variant", "acla"),
        attention=AttentionSpec(att.get("mode", "none"),
                                int(att.get("p", 0)), int(att.get("m", 0))),
        conv_filters=tuple(d.get("conv_filters", (64, 32))),
        conv_kernel=int(d.get("conv_kernel", 3)),
        lstm_hidden=int(d.get("lstm_hidden", 64)),
        solver=SolverConfig(sol.get("method", "dopri5"),
                            float(sol.get("rtol", 1e-6)),
                            float(sol.get("atol", 1e-8)),
                            int(sol.get("substeps", 2)),
                            int(sol.get("max_steps", 100_000))),
        grad_mode=d.get("grad_mode", "unrolled"),
    )


def config_digest(config):
    canon = json.dumps(config_to_dict(config), sort_keys=True).encode()
    return hashlib.sha256(canon).digest()


def save_checkpoint(path, config, params):
    """Versioned binary checkpoint: header, embedded config, then every
    parameter tensor in declaration order as little-endian float64."""
    blob = json.dumps(config_to_dict(config), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(config_digest(config))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        names = params.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            t = params[name]
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", len(t.shape)))
            for s in t.shape:
                f.write(struct.pack("<I", s))
            f.write(t.values.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        digest = f.read(32)
        (blob_len,) = struct.unpack("<I", f.read(4))
        config = config_from_dict(json.loads(f.read(blob_len).decode()))
        if config_digest(config) != digest:
            raise ValueError(f"{path}: config digest mismatch")
        (n_tensors,) = struct.unpack("<I", f.read(4))
        params = ParameterSet()
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            vals = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            params.add(name, vals.astype(np.float64))
    return config, params
