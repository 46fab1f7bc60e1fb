# cython: boundscheck=False, wraparound=False
"""Cython bridge to the C packed-matmul kernels."""

import numpy as np

from libc.stdint cimport uint32_t, uint64_t

cdef extern from "packed_kernels.h":
    void nq_group_lane_sums(int nu, int upg, int ng, const float* x, float* xsg) nogil
    void nq_gemv(int bits, int m, int nu, int upg, int ng,
                 const uint64_t* base, const uint32_t* b2, const uint32_t* b3,
                 const float* scales, const float* x, const float* xsg, float* y) nogil
    void nq_gemm(int bits, int m, int nu, int upg, int ng, int batch,
                 const uint64_t* base, const uint32_t* b2, const uint32_t* b3,
                 const float* scales, const float* X, int ldx, float* Y, int ldy) nogil
    int nq_simd_kind() nogil


def simd_kind():
    """"avx512" when the masked-accumulate path is compiled in."""
    return "avx512" if nq_simd_kind() else "portable"


def packed_matmul(uint64_t[:, ::1] base, b2, b3, float[:, ::1] scales,
                  float[:, ::1] Xp, int bits, int group_size):
    """Y = Xp @ dequant(planes).T with on-the-fly unpacking.

    Xp is already zero-padded to 32 * n_units columns. Batch below 8 runs
    one row-dot sweep per activation row; larger batches run the blocked
    path in chunks of 16 rows.
    """
    cdef int m = base.shape[0]
    cdef int nu = base.shape[1]
    cdef int ng = scales.shape[1]
    cdef int upg = group_size // 32
    cdef int batch = Xp.shape[0]
    cdef uint32_t[:, ::1] p2 = b2 if b2 is not None else None
    cdef uint32_t[:, ::1] p3 = b3 if b3 is not None else None
    cdef const uint32_t* p2p = &p2[0, 0] if p2 is not None else NULL
    cdef const uint32_t* p3p = &p3[0, 0] if p3 is not None else NULL

    out = np.empty((batch, m), dtype=np.float32)
    cdef float[:, ::1] Y = out
    xsg_arr = np.empty((ng, 32), dtype=np.float32)
    cdef float[:, ::1] xsg = xsg_arr
    cdef int b, lo, n
    if batch < 8:
        with nogil:
            for b in range(batch):
                nq_group_lane_sums(nu, upg, ng, &Xp[b, 0], &xsg[0, 0])
                nq_gemv(bits, m, nu, upg, ng, &base[0, 0], p2p, p3p,
                        &scales[0, 0], &Xp[b, 0], &xsg[0, 0], &Y[b, 0])
    else:
        with nogil:
            lo = 0
            while lo < batch:
                n = batch - lo
                if n > 16:
                    n = 16
                nq_gemm(bits, m, nu, upg, ng, n, &base[0, 0], p2p, p3p,
                        &scales[0, 0], &Xp[lo, 0], Xp.shape[1],
                        &Y[lo, 0], m)
                lo += n
    return out
