# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CIFG recurrence kernels.

Same contracts as ``fedmem._pykernels``. The recurrent matmul goes through
BLAS dgemm; gate nonlinearities and the cell update are fused into one pass
per time step.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    return 1.0 / (1.0 + exp(-x))


cdef inline double _tanh(double x) nogil:
    # exp overflow to inf yields the correct +-1 limit
    return 1.0 - 2.0 / (exp(2.0 * x) + 1.0)


cdef void _rowmajor_matmul_acc(double[:, ::1] a, double[:, ::1] w,
                               double[:, ::1] out, double beta) nogil:
    # out = a @ w + beta * out, all row-major
    cdef int m = w.shape[1]
    cdef int n = a.shape[0]
    cdef int k = a.shape[1]
    cdef double one = 1.0
    cdef char trans = b'N'
    dgemm(&trans, &trans, &m, &n, &k, &one, &w[0, 0], &m, &a[0, 0], &k,
          &beta, &out[0, 0], &m)


cdef void _rowmajor_matmul_wt(double[:, ::1] a, double[:, ::1] w,
                              double[:, ::1] out) nogil:
    # out = a @ w.T with w of shape (out_cols, a_cols)
    cdef int m = w.shape[0]
    cdef int n = a.shape[0]
    cdef int k = a.shape[1]
    cdef double one = 1.0
    cdef double zero = 0.0
    cdef char ta = b'T'
    cdef char tb = b'N'
    dgemm(&ta, &tb, &m, &n, &k, &one, &w[0, 0], &k, &a[0, 0], &k,
          &zero, &out[0, 0], &m)


def cifg_forward(xproj, w_h, h0, c0):
    cdef double[:, :, ::1] xp = np.ascontiguousarray(xproj, dtype=np.float64)
    cdef double[:, ::1] wh = np.ascontiguousarray(w_h, dtype=np.float64)
    cdef Py_ssize_t steps = xp.shape[0]
    cdef Py_ssize_t batch = xp.shape[1]
    cdef Py_ssize_t hid = xp.shape[2] // 3
    gates_a = np.empty((steps, batch, 3 * hid))
    cells_a = np.empty((steps, batch, hid))
    tcells_a = np.empty((steps, batch, hid))
    hid_a = np.empty((steps, batch, hid))
    cdef double[:, :, ::1] gates = gates_a
    cdef double[:, :, ::1] cells = cells_a
    cdef double[:, :, ::1] tcells = tcells_a
    cdef double[:, :, ::1] hs = hid_a
    cdef double[:, ::1] h_prev = np.array(h0, dtype=np.float64, order="C")
    cdef double[:, ::1] c_prev = np.array(c0, dtype=np.float64, order="C")
    cdef Py_ssize_t t, b, j
    cdef double f, g, o, c, tc
    with nogil:
        for t in range(steps):
            gates[t, :, :] = xp[t, :, :]
            _rowmajor_matmul_acc(h_prev, wh, gates[t], 1.0)
            for b in range(batch):
                for j in range(hid):
                    f = _sigmoid(gates[t, b, j])
                    g = _tanh(gates[t, b, hid + j])
                    o = _sigmoid(gates[t, b, 2 * hid + j])
                    c = f * c_prev[b, j] + (1.0 - f) * g
                    tc = _tanh(c)
                    gates[t, b, j] = f
                    gates[t, b, hid + j] = g
                    gates[t, b, 2 * hid + j] = o
                    cells[t, b, j] = c
                    tcells[t, b, j] = tc
                    hs[t, b, j] = o * tc
            h_prev = hs[t]
            c_prev = cells[t]
    return gates_a, cells_a, tcells_a, hid_a


def cifg_backward(dhiddens, w_h, gates, cells, tanh_cells, c0):
    cdef double[:, :, ::1] dhs = np.ascontiguousarray(dhiddens, dtype=np.float64)
    cdef double[:, ::1] wh = np.ascontiguousarray(w_h, dtype=np.float64)
    cdef double[:, :, ::1] gt = np.ascontiguousarray(gates, dtype=np.float64)
    cdef double[:, :, ::1] cs = np.ascontiguousarray(cells, dtype=np.float64)
    cdef double[:, :, ::1] tcs = np.ascontiguousarray(tanh_cells, dtype=np.float64)
    cdef double[:, ::1] cinit = np.ascontiguousarray(c0, dtype=np.float64)
    cdef Py_ssize_t steps = dhs.shape[0]
    cdef Py_ssize_t batch = dhs.shape[1]
    cdef Py_ssize_t hid = dhs.shape[2]
    dz_a = np.empty((steps, batch, 3 * hid))
    cdef double[:, :, ::1] dz = dz_a
    cdef double[:, ::1] dh_next = np.zeros((batch, hid))
    cdef double[:, ::1] dc_next = np.zeros((batch, hid))
    cdef Py_ssize_t t, b, j
    cdef double f, g, o, tc, cp, dh, dc
    with nogil:
        for t in range(steps - 1, -1, -1):
            for b in range(batch):
                for j in range(hid):
                    f = gt[t, b, j]
                    g = gt[t, b, hid + j]
                    o = gt[t, b, 2 * hid + j]
                    tc = tcs[t, b, j]
                    if t > 0:
                        cp = cs[t - 1, b, j]
                    else:
                        cp = cinit[b, j]
                    dh = dhs[t, b, j] + dh_next[b, j]
                    dc = dh * o * (1.0 - tc * tc) + dc_next[b, j]
                    dz[t, b, j] = dc * (cp - g) * f * (1.0 - f)
                    dz[t, b, hid + j] = dc * (1.0 - f) * (1.0 - g * g)
                    dz[t, b, 2 * hid + j] = dh * tc * o * (1.0 - o)
                    dc_next[b, j] = dc * f
            _rowmajor_matmul_wt(dz[t], wh, dh_next)
    return dz_a
