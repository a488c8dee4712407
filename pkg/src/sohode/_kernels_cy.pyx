# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled program executor: replays frozen tapes with C loops.

Same op semantics as `_kernels_py` (the reference); this module exists
because training replays the same few-hundred-thousand-op program once
per iteration, where Python dispatch is the bottleneck. Tensor buffers
are pinned at freeze time, so replays run over raw pointers.
"""

import numpy as np

from libc.math cimport exp as c_exp, tanh as c_tanh
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

from . import _opcodes as oc


cdef int MATMUL = oc.MATMUL
cdef int ADD = oc.ADD
cdef int MUL = oc.MUL
cdef int SIGMOID = oc.SIGMOID
cdef int TANH = oc.TANH
cdef int SOFTMAX_ROWS = oc.SOFTMAX_ROWS
cdef int CONCAT = oc.CONCAT
cdef int SLICE = oc.SLICE
cdef int SUM = oc.SUM
cdef int SQUARE = oc.SQUARE
cdef int RESHAPE = oc.RESHAPE


cdef inline void _gemm_rm(char ta, char tb, int m, int n, int k,
                          double alpha, double* a, int lda,
                          double* b, int ldb,
                          double beta, double* c, int ldc) noexcept nogil:
    # row-major C(m,n) = alpha*op(A)op(B) + beta*C via column-major BLAS
    dgemm(&tb, &ta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef class Program:
    backend_name = "cython"

    cdef list _tensors          # keep buffers alive
    cdef object _root
    cdef long long[::1] vptr, gptr
    cdef int[::1] trows, tcols
    cdef int[::1] op_code, op_out, op_nin, op_inoff
    cdef int[::1] aux0, aux1, aux2
    cdef int[::1] in_idx
    cdef int n_ops, n_tensors, root_idx

    def __init__(self, records, tensors, root=None):
        self._tensors = list(tensors)
        self._root = root
        self.n_tensors = len(self._tensors)
        self.n_ops = len(records)

        index = {}
        vptr = np.zeros(self.n_tensors, dtype=np.int64)
        gptr = np.zeros(self.n_tensors, dtype=np.int64)
        trows = np.zeros(self.n_tensors, dtype=np.int32)
        tcols = np.zeros(self.n_tensors, dtype=np.int32)
        for i, t in enumerate(self._tensors):
            index[id(t)] = i
            if not t.values.flags.c_contiguous:
                raise ValueError("program tensors must be C-contiguous")
            t.ensure_grad()
            vptr[i] = t.values.ctypes.data
            gptr[i] = t.grad.ctypes.data
            if t.values.ndim == 2:
                trows[i], tcols[i] = t.values.shape
            else:
                trows[i], tcols[i] = 1, t.values.size

        op_code = np.zeros(self.n_ops, dtype=np.int32)
        op_out = np.zeros(self.n_ops, dtype=np.int32)
        op_nin = np.zeros(self.n_ops, dtype=np.int32)
        op_inoff = np.zeros(self.n_ops, dtype=np.int32)
        aux0 = np.zeros(self.n_ops, dtype=np.int32)
        aux1 = np.zeros(self.n_ops, dtype=np.int32)
        aux2 = np.zeros(self.n_ops, dtype=np.int32)
        in_idx = []
        for j, (code, ins, out, aux) in enumerate(records):
            op_code[j] = code
            op_out[j] = index[id(out)]
            op_nin[j] = len(ins)
            op_inoff[j] = len(in_idx)
            for t in ins:
                in_idx.append(index[id(t)])
            if code == oc.SLICE:
                axis, start, stop = aux
                if ins[0].values.ndim == 1:
                    axis = 1  # canonical layout stores vectors as one row
                aux0[j], aux1[j], aux2[j] = axis, start, stop
            elif code == oc.CONCAT:
                aux0[j] = aux[0]

        self.vptr = vptr
        self.gptr = gptr
        self.trows = trows
        self.tcols = tcols
        self.op_code = op_code
        self.op_out = op_out
        self.op_nin = op_nin
        self.op_inoff = op_inoff
        self.aux0 = aux0
        self.aux1 = aux1
        self.aux2 = aux2
        self.in_idx = np.asarray(in_idx, dtype=np.int32)
        self.root_idx = index[id(root)] if root is not None else -1

    @property
    def records(self):
        return None  # frozen; op tables are private

    @property
    def tensors(self):
        return self._tensors

    @property
    def root(self):
        return self._root

    def forward(self):
        with nogil:
            self._run_forward()

    def backward(self):
        if self.root_idx < 0:
            raise ValueError("program was compiled without a root")
        with nogil:
            self._run_backward()

    cdef void _run_forward(self) noexcept nogil:
        cdef int j, i0, i1, io, nin, p, r, c, rows, cols, n, k, axis, start, stop, off, code
        cdef double *a
        cdef double *b
        cdef double *o
        cdef double acc, m
        for j in range(self.n_ops):
            io = self.op_out[j]
            o = <double*><size_t>self.vptr[io]
            off = self.op_inoff[j]
            nin = self.op_nin[j]
            i0 = self.in_idx[off]
            a = <double*><size_t>self.vptr[i0]
            rows = self.trows[io]
            cols = self.tcols[io]
            n = rows * cols
            code = self.op_code[j]

            if code == MATMUL:
                i1 = self.in_idx[off + 1]
                b = <double*><size_t>self.vptr[i1]
                k = self.tcols[i0]
                _gemm_rm(b'N', b'N', rows, cols, k, 1.0, a, k, b, cols, 0.0, o, cols)
            elif code == ADD:
                i1 = self.in_idx[off + 1]
                b = <double*><size_t>self.vptr[i1]
                if self.trows[i1] * self.tcols[i1] == n:
                    for p in range(n):
                        o[p] = a[p] + b[p]
                else:  # row-vector bias
                    for r in range(rows):
                        for c in range(cols):
                            o[r * cols + c] = a[r * cols + c] + b[c]
            elif code == MUL:
                i1 = self.in_idx[off + 1]
                b = <double*><size_t>self.vptr[i1]
                if self.trows[i1] * self.tcols[i1] == 1 and n != 1:
                    m = b[0]
                    for p in range(n):
                        o[p] = a[p] * m
                else:
                    for p in range(n):
                        o[p] = a[p] * b[p]
            elif code == SIGMOID:
                for p in range(n):
                    o[p] = 1.0 / (1.0 + c_exp(-a[p]))
            elif code == TANH:
                for p in range(n):
                    o[p] = c_tanh(a[p])
            elif code == SOFTMAX_ROWS:
                for r in range(rows):
                    m = a[r * cols]
                    for c in range(1, cols):
                        if a[r * cols + c] > m:
                            m = a[r * cols + c]
                    acc = 0.0
                    for c in range(cols):
                        o[r * cols + c] = c_exp(a[r * cols + c] - m)
                        acc += o[r * cols + c]
                    for c in range(cols):
                        o[r * cols + c] /= acc
            elif code == CONCAT:
                axis = self.aux0[j]
                if axis == 0:
                    k = 0
                    for p in range(nin):
                        i1 = self.in_idx[off + p]
                        b = <double*><size_t>self.vptr[i1]
                        r = self.trows[i1] * self.tcols[i1]
                        memcpy(o + k, b, r * sizeof(double))
                        k += r
                else:
                    k = 0  # running column offset
                    for p in range(nin):
                        i1 = self.in_idx[off + p]
                        b = <double*><size_t>self.vptr[i1]
                        c = self.tcols[i1]
                        for r in range(rows):
                            memcpy(o + r * cols + k, b + r * c, c * sizeof(double))
                        k += c
            elif code == SLICE:
                axis = self.aux0[j]
                start = self.aux1[j]
                k = self.tcols[i0]
                if axis == 0:
                    memcpy(o, a + start * k, n * sizeof(double))
                else:
                    for r in range(rows):
                        memcpy(o + r * cols, a + r * k + start, cols * sizeof(double))
            elif code == SUM:
                acc = 0.0
                k = self.trows[i0] * self.tcols[i0]
                for p in range(k):
                    acc += a[p]
                o[0] = acc
            elif code == SQUARE:
                for p in range(n):
                    o[p] = a[p] * a[p]
            elif code == RESHAPE:
                memcpy(o, a, n * sizeof(double))

    cdef void _run_backward(self) noexcept nogil:
        cdef int j, i, i0, i1, io, nin, p, r, c, rows, cols, n, k, axis, start, off, code
        cdef double *a
        cdef double *b
        cdef double *g
        cdef double *ga
        cdef double *gb
        cdef double *ov
        cdef double acc, m
        for i in range(self.n_tensors):
            memset(<void*><size_t>self.gptr[i], 0,
                   self.trows[i] * self.tcols[i] * sizeof(double))
        (<double*><size_t>self.gptr[self.root_idx])[0] = 1.0

        for j in range(self.n_ops - 1, -1, -1):
            io = self.op_out[j]
            g = <double*><size_t>self.gptr[io]
            ov = <double*><size_t>self.vptr[io]
            off = self.op_inoff[j]
            nin = self.op_nin[j]
            i0 = self.in_idx[off]
            a = <double*><size_t>self.vptr[i0]
            ga = <double*><size_t>self.gptr[i0]
            rows = self.trows[io]
            cols = self.tcols[io]
            n = rows * cols
            code = self.op_code[j]

            if code == MATMUL:
                i1 = self.in_idx[off + 1]
                b = <double*><size_t>self.vptr[i1]
                gb = <double*><size_t>self.gptr[i1]
                k = self.tcols[i0]
                # dA += dC @ B^T ; dB += A^T @ dC
                _gemm_rm(b'N', b'T', rows, k, cols, 1.0, g, cols, b, cols, 1.0, ga, k)
                _gemm_rm(b'T', b'N', k, cols, rows, 1.0, a, k, g, cols, 1.0, gb, cols)
            elif code == ADD:
                i1 = self.in_idx[off + 1]
                gb = <double*><size_t>self.gptr[i1]
                for p in range(n):
                    ga[p] += g[p]
                if self.trows[i1] * self.tcols[i1] == n:
                    for p in range(n):
                        gb[p] += g[p]
                else:
                    for r in range(rows):
                        for c in range(cols):
                            gb[c] += g[r * cols + c]
            elif code == MUL:
                i1 = self.in_idx[off + 1]
                b = <double*><size_t>self.vptr[i1]
                gb = <double*><size_t>self.gptr[i1]
                if self.trows[i1] * self.tcols[i1] == 1 and n != 1:
                    m = b[0]
                    acc = 0.0
                    for p in range(n):
                        ga[p] += g[p] * m
                        acc += g[p] * a[p]
                    gb[0] += acc
                else:
                    for p in range(n):
                        ga[p] += g[p] * b[p]
                        gb[p] += g[p] * a[p]
            elif code == SIGMOID:
                for p in range(n):
                    ga[p] += g[p] * ov[p] * (1.0 - ov[p])
            elif code == TANH:
                for p in range(n):
                    ga[p] += g[p] * (1.0 - ov[p] * ov[p])
            elif code == SOFTMAX_ROWS:
                for r in range(rows):
                    acc = 0.0
                    for c in range(cols):
                        acc += g[r * cols + c] * ov[r * cols + c]
                    for c in range(cols):
                        ga[r * cols + c] += ov[r * cols + c] * (g[r * cols + c] - acc)
            elif code == CONCAT:
                axis = self.aux0[j]
                if axis == 0:
                    k = 0
                    for p in range(nin):
                        i1 = self.in_idx[off + p]
                        gb = <double*><size_t>self.gptr[i1]
                        r = self.trows[i1] * self.tcols[i1]
                        for c in range(r):
                            gb[c] += g[k + c]
                        k += r
                else:
                    k = 0
                    for p in range(nin):
                        i1 = self.in_idx[off + p]
                        gb = <double*><size_t>self.gptr[i1]
                        c = self.tcols[i1]
                        for r in range(rows):
                            for start in range(c):
                                gb[r * c + start] += g[r * cols + k + start]
                        k += c
            elif code == SLICE:
                axis = self.aux0[j]
                start = self.aux1[j]
                k = self.tcols[i0]
                if axis == 0:
                    for p in range(n):
                        ga[start * k + p] += g[p]
                else:
                    for r in range(rows):
                        for c in range(cols):
                            ga[r * k + start + c] += g[r * cols + c]
            elif code == SUM:
                m = g[0]
                k = self.trows[i0] * self.tcols[i0]
                for p in range(k):
                    ga[p] += m
            elif code == SQUARE:
                for p in range(n):
                    ga[p] += 2.0 * a[p] * g[p]
            elif code == RESHAPE:
                for p in range(n):
                    ga[p] += g[p]


def compile_program(records, tensors, root=None):
    return Program(records, tensors, root)
