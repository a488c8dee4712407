"""Differentiable building blocks: windowed attention, 1-D conv, LSTM, linear.

All layers are pure functions of (tape, inputs, parameters); recording
them on a tape is what makes them trainable. Row convention: feature
vectors are (1, n) rows, sequences are (length, channels) matrices.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor

ATTENTION_MODES = ("none", "start", "mid", "end", "all", "custom")


@dataclass(frozen=True)
class AttentionSpec:
    """Placement (p, m) of the attended window over the time features.

    `p` is 1-based into the time block (t_1 .. t_{n_v}), so a feature
    row (soh, t_1, .., t_{n_v}) is rescaled at columns p .. p+m-1.
    m = 0 means no attention.
    """

    mode: str = "none"
    p: int = 0
    m: int = 0

    @classmethod
    def for_mode(cls, mode, n_v, p=None, m=None):
        """Resolve a named placement against a feature count."""
        if mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        if mode == "none":
            return cls("none", 0, 0)
        if mode == "all":
            return cls("all", 1, n_v)
        if mode == "custom":
            if p is None or m is None:
                raise ValueError("custom attention needs explicit p and m")
            spec = cls("custom", int(p), int(m))
            spec.validate(n_v)
            return spec
        if n_v < 3:
            raise ValueError(f"mode {mode!r} needs at least 3 time features")
        if mode == "start":
            return cls("start", 1, 3)
        if mode == "end":
            return cls("end", n_v - 2, 3)
        # mid: window of 3 centred on the time block
        return cls("mid", (n_v - 3) // 2 + 1, 3)

    def validate(self, n_v):
        if not 0 <= self.m <= n_v:
            raise ValueError(f"window length m={self.m} outside [0, {n_v}]")
        if self.m == 0:
            if self.mode != "none":
                raise ValueError("m = 0 is only valid with mode 'none'")
            return
        if not 1 <= self.p <= n_v + 1 - self.m:
            raise ValueError(
                f"window start p={self.p} outside [1, {n_v + 1 - self.m}] for m={self.m}")


def attention_scores(tape, features, w, b):
    """Project feature rows into the attention space: scores = F @ W + b."""
    return tape.add(tape.matmul(features, w), b)


def attention_weights(tape, scores):
    """Row-wise softmax of the scores; each output row sums to one."""
    return tape.softmax_rows(scores)


def apply_attention(tape, row, alpha, spec):
    """Rescale the attended window of a feature row, elementwise.

    Entries outside columns [p, p+m) are returned unchanged (bitwise:
    they are copied, never recomputed). m = 0 returns the input tensor
    itself.
    """
    if spec.m == 0:
        return row
    n = row.shape[1]
    lo, hi = spec.p, spec.p + spec.m
    if not 1 <= lo < hi <= n:
        raise ShapeError(f"attention window [{lo}:{hi}) out of range for row of {n}")
    window = tape.mul(tape.slice(row, lo, hi, axis=1), alpha)
    parts = [tape.slice(row, 0, lo, axis=1), window]
    if hi < n:
        parts.append(tape.slice(row, hi, n, axis=1))
    return tape.concat(parts, axis=1)


def conv1d(tape, x, w, b, activation="tanh"):
    """Same-padded 1-D cross-correlation over a (length, channels) sequence.

    `w` has shape (kernel * in_channels, out_channels), tap-major: rows
    [0, in_channels) belong to the earliest tap. Zero padding keeps the
    output length equal to the input length.
    """
    length, c_in = x.shape
    k = w.shape[0] // c_in
    if k * c_in != w.shape[0] or k % 2 == 0:
        raise ShapeError(f"kernel rows {w.shape[0]} not an odd multiple of {c_in} channels")
    pad = (k - 1) // 2
    if pad > 0:
        z = Tensor.zeros((pad, c_in))
        xp = tape.concat([z, x, z], axis=0)
    else:
        xp = x
    taps = [tape.slice(xp, i, i + length, axis=0) for i in range(k)]
    cols = tape.concat(taps, axis=1) if k > 1 else taps[0]
    out = tape.add(tape.matmul(cols, w), b)
    if activation == "tanh":
        return tape.tanh(out)
    if activation in (None, "identity"):
        return out
    raise ValueError(f"unknown activation {activation!r}")


def lstm_forward(tape, x, wx, wh, b):
    """Standard LSTM over a (length, channels) sequence; returns the
    per-step hidden rows.

    Gate blocks are packed [input, forget, output | candidate] along
    the 4*hidden axis: the first three get sigmoid, the candidate gets
    tanh. Hidden and cell states start at zero.
    """
    length = x.shape[0]
    hidden = wh.shape[0]
    if wx.shape[1] != 4 * hidden or wh.shape[1] != 4 * hidden:
        raise ShapeError(
            f"gate widths {wx.shape[1]}/{wh.shape[1]} must equal 4*hidden={4 * hidden}")
    z_all = tape.add(tape.matmul(x, wx), b)  # input projections for every step
    h = Tensor.zeros((1, hidden))
    c = Tensor.zeros((1, hidden))
    hs = []
    for t in range(length):
        z = tape.add(tape.slice(z_all, t, t + 1, axis=0), tape.matmul(h, wh))
        gates = tape.sigmoid(tape.slice(z, 0, 3 * hidden, axis=1))
        cand = tape.tanh(tape.slice(z, 3 * hidden, 4 * hidden, axis=1))
        i_g = tape.slice(gates, 0, hidden, axis=1)
        f_g = tape.slice(gates, hidden, 2 * hidden, axis=1)
        o_g = tape.slice(gates, 2 * hidden, 3 * hidden, axis=1)
        c = tape.add(tape.mul(f_g, c), tape.mul(i_g, cand))
        h = tape.mul(o_g, tape.tanh(c))
        hs.append(h)
    return hs


def linear(tape, x, w, b):
    """Affine map x @ W + b."""
    return tape.add(tape.matmul(x, w), b)


def uniform_init(rng, shape, fan_in):
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
