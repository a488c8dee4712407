"""Reference kernels (numpy) and the pure-Python program executor.

Every op has a forward rule and a backward rule. The backward rules
accumulate (sum into) the input gradients, which is what makes fan-out
work. The compiled backend in ``_kernels_cy`` implements the same
contract; this module is the fallback and the semantic reference.
"""

import numpy as np

from . import _opcodes as oc


def forward_op(code, ins, aux, out=None):
    """Apply one primitive. `ins` is a tuple of float64 arrays.

    When `out` is given the result is written into that buffer (replay
    mode); otherwise a fresh array is returned.
    """
    if code == oc.MATMUL:
        a, b = ins
        return np.matmul(a, b, out=out) if out is not None else a @ b
    if code == oc.ADD:
        a, b = ins
        if out is None:
            return a + b
        np.add(a, b, out=out)
        return out
    if code == oc.MUL:
        a, b = ins
        if out is None:
            return a * b
        np.multiply(a, b, out=out)
        return out
    if code == oc.SIGMOID:
        (x,) = ins
        if out is None:
            return 1.0 / (1.0 + np.exp(-x))
        np.exp(np.negative(x, out=out), out=out)
        out += 1.0
        np.reciprocal(out, out=out)
        return out
    if code == oc.TANH:
        (x,) = ins
        return np.tanh(x, out=out) if out is not None else np.tanh(x)
    if code == oc.SOFTMAX_ROWS:
        (x,) = ins
        shifted = x - x.max(axis=-1, keepdims=True)
        ex = np.exp(shifted)
        ex /= ex.sum(axis=-1, keepdims=True)
        if out is None:
            return ex
        out[...] = ex
        return out
    if code == oc.CONCAT:
        axis = aux[0]
        if out is None:
            return np.concatenate(ins, axis=axis)
        np.concatenate(ins, axis=axis, out=out)
        return out
    if code == oc.SLICE:
        axis, start, stop = aux
        (x,) = ins
        sel = x[start:stop] if axis == 0 else x[:, start:stop]
        if out is None:
            return sel.copy()
        out[...] = sel
        return out
    if code == oc.SUM:
        (x,) = ins
        if out is None:
            return np.array([x.sum()])
        out[0] = x.sum()
        return out
    if code == oc.SQUARE:
        (x,) = ins
        if out is None:
            return x * x
        np.multiply(x, x, out=out)
        return out
    if code == oc.RESHAPE:
        (x,) = ins
        if out is None:
            return x.reshape(aux[0]).copy()
        out[...] = x.reshape(out.shape)
        return out
    raise ValueError(f"unknown opcode {code}")


def backward_op(code, ins_vals, ins_grads, out_vals, out_grad, aux):
    """Accumulate input gradients for one primitive.

    Entries of `ins_grads` may be None (constants whose gradient nobody
    reads); those inputs are skipped.
    """
    g = out_grad
    if code == oc.MATMUL:
        a, b = ins_vals
        ga, gb = ins_grads
        if ga is not None:
            ga += g @ b.T
        if gb is not None:
            gb += a.T @ g
        return
    if code == oc.ADD:
        a, b = ins_vals
        ga, gb = ins_grads
        if ga is not None:
            ga += g
        if gb is not None:
            if b.shape == g.shape:
                gb += g
            else:  # row-vector bias broadcast over rows
                gb += g.sum(axis=0).reshape(b.shape)
        return
    if code == oc.MUL:
        a, b = ins_vals
        ga, gb = ins_grads
        if b.size == 1 and a.size != 1:
            if ga is not None:
                ga += g * b.reshape(-1)[0]
            if gb is not None:
                gb += (g * a).sum()
        else:
            if ga is not None:
                ga += g * b
            if gb is not None:
                gb += g * a
        return
    if code == oc.SIGMOID:
        (gx,) = ins_grads
        if gx is not None:
            gx += g * out_vals * (1.0 - out_vals)
        return
    if code == oc.TANH:
        (gx,) = ins_grads
        if gx is not None:
            gx += g * (1.0 - out_vals * out_vals)
        return
    if code == oc.SOFTMAX_ROWS:
        (gx,) = ins_grads
        if gx is not None:
            dot = (g * out_vals).sum(axis=-1, keepdims=True)
            gx += out_vals * (g - dot)
        return
    if code == oc.CONCAT:
        axis = aux[0]
        offset = 0
        for x, gx in zip(ins_vals, ins_grads):
            n = x.shape[axis] if x.ndim > axis else x.shape[0]
            if gx is not None:
                if axis == 0:
                    gx += g[offset:offset + n]
                else:
                    gx += g[:, offset:offset + n]
            offset += n
        return
    if code == oc.SLICE:
        axis, start, stop = aux
        (gx,) = ins_grads
        if gx is not None:
            if axis == 0:
                gx[start:stop] += g
            else:
                gx[:, start:stop] += g
        return
    if code == oc.SUM:
        (gx,) = ins_grads
        if gx is not None:
            gx += g[0]
        return
    if code == oc.SQUARE:
        (x,) = ins_vals
        (gx,) = ins_grads
        if gx is not None:
            gx += 2.0 * x * g
        return
    if code == oc.RESHAPE:
        (x,) = ins_vals
        (gx,) = ins_grads
        if gx is not None:
            gx += g.reshape(x.shape)
        return
    raise ValueError(f"unknown opcode {code}")


class Program:
    """Replayable tape: re-executes a recorded op sequence in place.

    All tensors keep their buffers across replays, so leaf updates
    (parameter steps, new solver states) are visible to the next
    forward() without re-recording.
    """

    backend_name = "python"

    def __init__(self, records, tensors, root=None):
        self.records = records
        self.tensors = tensors
        self.root = root
        for t in tensors:
            if t.grad is None:
                t.grad = np.zeros_like(t.values)

    def forward(self):
        for code, ins, out, aux in self.records:
            forward_op(code, tuple(t.values for t in ins), aux, out=out.values)

    def backward(self):
        """Zero all gradients, seed d(root)/d(root)=1, sweep in reverse."""
        if self.root is None:
            raise ValueError("program was compiled without a root")
        for t in self.tensors:
            t.grad.fill(0.0)
        self.root.grad.reshape(-1)[0] = 1.0
        for code, ins, out, aux in reversed(self.records):
            backward_op(
                code,
                tuple(t.values for t in ins),
                tuple(t.grad for t in ins),
                out.values,
                out.grad,
                aux,
            )


def compile_program(records, tensors, root=None):
    return Program(records, tensors, root)
