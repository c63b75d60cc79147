# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled block-sparse online-softmax forward pass.

Same contract as ``_kernels_py.block_sparse_forward``. The score and value
products go through BLAS (``scipy.linalg.cython_blas``); the masking, running
max, exponentials and rescaling run in C with the GIL released.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport INFINITY
from libc.stdlib cimport free
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()

cdef enum:
    SKIP = 0
    PARTIAL = 2


cdef inline void _gemm(char ta, char tb, int m, int n, int k, floating alpha,
                       floating* a, int lda, floating* b, int ldb,
                       floating beta, floating* c, int ldc) noexcept nogil:
    if floating is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef extern from "<stdlib.h>" nogil:
    void* aligned_alloc(size_t alignment, size_t size)


cdef extern from "_fastexp.h" nogil:
    double pbs_rowmax_d(const double* s, int n)
    float pbs_rowmax_f(const float* s, int n)
    void pbs_mask_d(double* s, const long long* kp, long long qp, int n)
    void pbs_mask_f(float* s, const long long* kp, long long qp, int n)
    double pbs_exp_shift_d(double* s, int n, double m)
    float pbs_exp_shift_f(float* s, int n, float m)


cdef inline floating _rowmax(floating* s, int n) noexcept nogil:
    if floating is float:
        return pbs_rowmax_f(s, n)
    else:
        return pbs_rowmax_d(s, n)


cdef inline void _mask(floating* s, const long long* kp, long long qp, int n) noexcept nogil:
    if floating is float:
        pbs_mask_f(s, kp, qp, n)
    else:
        pbs_mask_d(s, kp, qp, n)


cdef inline floating _exp_shift(floating* s, int n, floating m) noexcept nogil:
    if floating is float:
        return pbs_exp_shift_f(s, n, m)
    else:
        return pbs_exp_shift_d(s, n, m)


cdef inline void* _alloc(size_t nbytes) noexcept nogil:
    # 64-byte alignment keeps vectorized loop peeling, and so summation order, fixed
    return aligned_alloc(64, ((nbytes + 63) // 64) * 64)


cdef Py_ssize_t _forward(const floating[:, ::1] q, const floating[:, ::1] k,
                         const floating[:, ::1] v, const signed char[:, ::1] plan,
                         const long long[::1] q_pos, const long long[::1] k_pos, int bs, floating scale,
                         floating[:, ::1] out) noexcept nogil:
    cdef int n = q.shape[0], m = k.shape[0], d = q.shape[1], dv = v.shape[1]
    cdef int tr = plan.shape[0], tc = plan.shape[1]
    cdef int i, j, r, c, r0, c0, bq, bk
    cdef floating row_max, m_new, alpha
    cdef floating* row
    cdef floating* s = <floating*> _alloc(bs * bs * sizeof(floating))
    cdef floating* acc = <floating*> _alloc(bs * dv * sizeof(floating))
    cdef floating* mrow = <floating*> _alloc(bs * sizeof(floating))
    cdef floating* lrow = <floating*> _alloc(bs * sizeof(floating))
    cdef Py_ssize_t bad = -1
    if s == NULL or acc == NULL or mrow == NULL or lrow == NULL:
        free(s); free(acc); free(mrow); free(lrow)
        return -2

    for i in range(tr):
        r0 = i * bs
        bq = min(bs, n - r0)
        for r in range(bq):
            mrow[r] = -INFINITY
            lrow[r] = 0
        for r in range(bq * dv):
            acc[r] = 0
        for j in range(tc):
            if plan[i, j] == SKIP:
                continue
            c0 = j * bs
            bk = min(bs, m - c0)
            # s (bq x bk, row-major) = scale * q_i k_j^T, computed as its column-major transpose
            _gemm(c'T', c'N', bk, bq, d, scale, <floating*> &k[c0, 0], d, <floating*> &q[r0, 0], d,
                  0, s, bk)
            for r in range(bq):
                row = s + r * bk
                if plan[i, j] == PARTIAL:
                    _mask(row, &k_pos[c0], q_pos[r0 + r], bk)
                row_max = _rowmax(row, bk)
                m_new = mrow[r] if mrow[r] > row_max else row_max
                if m_new == -INFINITY:
                    # nothing admissible yet in this row; its p row must be all zero
                    for c in range(bk):
                        row[c] = 0
                    continue
                alpha = mrow[r]
                alpha = _exp_shift(&alpha, 1, m_new)
                lrow[r] = lrow[r] * alpha + _exp_shift(row, bk, m_new)
                mrow[r] = m_new
                if alpha != 1:
                    for c in range(dv):
                        acc[r * dv + c] *= alpha
            # acc (bq x dv) += p (bq x bk) v_j (bk x dv)
            _gemm(c'N', c'N', dv, bq, bk, 1, <floating*> &v[c0, 0], dv, s, bk, 1, acc, dv)
        for r in range(bq):
            if lrow[r] == 0:
                bad = r0 + r
                break
            for c in range(dv):
                out[r0 + r, c] = acc[r * dv + c] / lrow[r]
        if bad >= 0:
            break

    free(s); free(acc); free(mrow); free(lrow)
    return bad


def block_sparse_forward(q, k, v, plan, q_pos, k_pos, int block_size, double scale):
    out = np.empty((q.shape[0], v.shape[1]), dtype=q.dtype)
    cdef const signed char[:, ::1] plan_v = plan
    cdef const long long[::1] qp = q_pos
    cdef const long long[::1] kp = k_pos
    cdef const float[:, ::1] qf, kf, vf
    cdef const double[:, ::1] qd, kd, vd
    cdef float[:, ::1] of
    cdef double[:, ::1] od
    cdef float sf = <float> scale
    cdef Py_ssize_t bad
    if q.dtype == np.float32:
        qf, kf, vf, of = q, k, v, out
        with nogil:
            bad = _forward[float](qf, kf, vf, plan_v, qp, kp, block_size, sf, of)
    else:
        qd, kd, vd, od = q, k, v, out
        with nogil:
            bad = _forward[double](qd, kd, vd, plan_v, qp, kp, block_size, scale, od)
    if bad == -2:
        raise MemoryError("could not allocate kernel scratch buffers")
    return out, bad
