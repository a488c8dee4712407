"""Reverse-mode automatic differentiation over dense float64 tensors.

The op set is small and closed: matmul, add (with row-vector bias
broadcast), elementwise mul (with scalar broadcast), sigmoid, tanh,
row-wise softmax, concat, slice, sum, square, plus a metadata-only
reshape. That is everything the attention/conv/LSTM/linear stack, the
ODE unrolling and the loss need.

A :class:`Tape` records ops eagerly (outputs are computed as they are
recorded) and can be compiled into a replayable program: the same op
sequence re-run over the same buffers, which is the hot path during
training. Gradient accumulation is sum-into, so tensors used several
times collect contributions from every use; gradients are zeroed at the
start of every backward sweep.
"""

import numpy as np

from . import _opcodes as oc
from . import backend as _backend
from ._kernels_py import backward_op, forward_op


class ShapeError(ValueError):
    """Raised when an op is recorded with incompatible input shapes."""


class Tensor:
    """Dense float64 array with an optional accumulated gradient.

    `values` is never reassigned once the tensor participates in a
    compiled program; updates must go through in-place operations so
    that replays observe them.
    """

    __slots__ = ("shape", "values", "grad", "requires_grad")

    def __init__(self, values, requires_grad=False, _internal=False):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
        if not _internal and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values rejected at tensor construction")
        self.shape = arr.shape
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad

    @classmethod
    def zeros(cls, shape, requires_grad=False):
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, x, requires_grad=False):
        return cls(np.array([float(x)]), requires_grad=requires_grad)

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _check_shapes(code, ins, aux):
    """Validate input shapes for an op; return the output shape."""
    name = oc.NAMES[code]
    shapes = [t.shape for t in ins]

    def fail(msg):
        raise ShapeError(f"{name}: {msg} (got {shapes})")

    if code == oc.MATMUL:
        a, b = shapes
        if len(a) != 2 or len(b) != 2:
            fail("both operands must be 2-D")
        if a[1] != b[0]:
            fail("inner dimensions differ")
        return (a[0], b[1])
    if code == oc.ADD:
        a, b = shapes
        if a == b:
            return a
        if len(a) == 2 and (b == (1, a[1]) or b == (a[1],)):
            return a  # row-vector bias broadcast
        fail("operands must match or second must be a row-vector bias")
    if code == oc.MUL:
        a, b = shapes
        if a == b:
            return a
        if ins[1].size == 1:
            return a  # scalar broadcast
        fail("operands must match or second must be a scalar")
    if code in (oc.SIGMOID, oc.TANH, oc.SQUARE):
        return shapes[0]
    if code == oc.SOFTMAX_ROWS:
        return shapes[0]
    if code == oc.CONCAT:
        axis = aux[0]
        if axis not in (0, 1):
            fail("axis must be 0 or 1")
        if any(len(s) != 2 for s in shapes):
            fail("concat expects 2-D inputs")
        other = 1 - axis
        if len({s[other] for s in shapes}) != 1:
            fail(f"sizes along axis {other} differ")
        total = sum(s[axis] for s in shapes)
        return (total, shapes[0][1]) if axis == 0 else (shapes[0][0], total)
    if code == oc.SLICE:
        axis, start, stop = aux
        s = shapes[0]
        if len(s) == 1:
            if axis != 0:
                fail("1-D slice must use axis 0")
            n = s[0]
        else:
            n = s[axis]
        if not (0 <= start < stop <= n):
            fail(f"slice [{start}:{stop}) out of range for axis {axis}")
        if len(s) == 1:
            return (stop - start,)
        return (stop - start, s[1]) if axis == 0 else (s[0], stop - start)
    if code == oc.SUM:
        return (1,)
    if code == oc.RESHAPE:
        new_shape = aux[0]
        if int(np.prod(new_shape)) != ins[0].size:
            fail(f"cannot reshape size {ins[0].size} to {new_shape}")
        return tuple(new_shape)
    raise ValueError(f"unknown opcode {code}")


class Tape:
    """Ordered record of primitive ops; inputs always precede their use."""

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def record(self, op_kind, inputs, **aux_kw):
        """Record one primitive by name and return its output tensor."""
        code = oc.FROM_NAME.get(op_kind)
        if code is None:
            raise ValueError(f"unknown op kind {op_kind!r}")
        if code == oc.CONCAT:
            aux = (aux_kw.get("axis", 0),)
        elif code == oc.SLICE:
            aux = (aux_kw.get("axis", 0), aux_kw["start"], aux_kw["stop"])
        elif code == oc.RESHAPE:
            aux = (tuple(aux_kw["shape"]),)
        else:
            aux = ()
        return self._push(code, tuple(inputs), aux)

    def _push(self, code, ins, aux):
        out_shape = _check_shapes(code, ins, aux)
        vals = forward_op(code, tuple(t.values for t in ins), aux)
        out = Tensor.__new__(Tensor)
        out.shape = tuple(out_shape)
        out.values = np.ascontiguousarray(vals.reshape(out_shape))
        out.grad = None
        out.requires_grad = any(t.requires_grad for t in ins)
        self._records.append((code, ins, out, aux))
        return out

    # -- thin helpers -------------------------------------------------

    def matmul(self, a, b):
        return self._push(oc.MATMUL, (a, b), ())

    def add(self, a, b):
        return self._push(oc.ADD, (a, b), ())

    def mul(self, a, b):
        return self._push(oc.MUL, (a, b), ())

    def sigmoid(self, x):
        return self._push(oc.SIGMOID, (x,), ())

    def tanh(self, x):
        return self._push(oc.TANH, (x,), ())

    def softmax_rows(self, x):
        return self._push(oc.SOFTMAX_ROWS, (x,), ())

    def concat(self, parts, axis=0):
        return self._push(oc.CONCAT, tuple(parts), (axis,))

    def slice(self, x, start, stop, axis=0):
        return self._push(oc.SLICE, (x,), (axis, start, stop))

    def sum(self, x):
        return self._push(oc.SUM, (x,), ())

    def square(self, x):
        return self._push(oc.SQUARE, (x,), ())

    def reshape(self, x, shape):
        return self._push(oc.RESHAPE, (x,), (tuple(shape),))

    # -- execution ----------------------------------------------------

    def tensors(self):
        """All tensors touched by the tape, in first-appearance order."""
        seen = {}
        for _, ins, out, _ in self._records:
            for t in ins:
                if id(t) not in seen:
                    seen[id(t)] = t
            if id(out) not in seen:
                seen[id(out)] = out
        return list(seen.values())

    def backward(self, root):
        """Populate gradients of everything `root` depends on.

        Gradients of all tensors on the tape are zeroed first, so two
        identical record+backward runs produce bitwise-identical
        gradients.
        """
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        for t in self.tensors():
            t.ensure_grad().fill(0.0)
        root.ensure_grad().reshape(-1)[0] = 1.0
        for code, ins, out, aux in reversed(self._records):
            backward_op(
                code,
                tuple(t.values for t in ins),
                tuple(t.ensure_grad() for t in ins),
                out.values,
                out.ensure_grad(),
                aux,
            )

    def compile(self, root=None):
        """Freeze into a replayable program on the active backend."""
        if root is not None and root.size != 1:
            raise ValueError("program root must be scalar")
        return _backend.compile_program(self._records, self.tensors(), root)


def grad_check(f, x, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    `f(tape, x)` must return a scalar tensor. The finite-difference side
    re-evaluates `f` on perturbed copies of `x`, so it is independent of
    the backward pass it is checking.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError("eps must be in (0, 1e-2]")
    x.requires_grad = True
    tape = Tape()
    root = f(tape, x)
    tape.backward(root)
    analytic = x.grad.copy().reshape(-1)

    flat = x.values.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tape(), x).item()
        flat[i] = orig - eps
        lo = f(Tape(), x).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(np.abs(analytic - numeric) / denom))
