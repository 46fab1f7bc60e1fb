#ifndef NESTQUANT_PACKED_KERNELS_H
#define NESTQUANT_PACKED_KERNELS_H

#include <stdint.h>

/* Moved-in-groups packed matmul kernels over bit-plane weights.
 *
 * Weight matrix: m rows, nu pack units of 32 weights per row; unit u of a
 * row covers padded columns [32u, 32u+31]. upg = group_size / 32 units per
 * scale group, ng = number of groups (last may be short). Activations are
 * zero-padded to 32*nu floats.
 */

/* Per-group per-lane activation sums, serial over units: xsg[g*32 + l] =
 * sum over units u in group g (ascending) of x[32u + l]. Matching the
 * kernel's in-register accumulation order keeps zero-code rows exactly 0. */
void nq_group_lane_sums(int nu, int upg, int ng, const float* x, float* xsg);

/* y[i] = sum_g scales[i*ng + g] * sum_{w in g} (q_w - z) * x_w, batch 1. */
void nq_gemv(int bits, int m, int nu, int upg, int ng,
             const uint64_t* base, const uint32_t* b2, const uint32_t* b3,
             const float* scales, const float* x, const float* xsg, float* y);

/* Blocked batched variant: Y[b*ldy + i]; batch <= 16; X rows of ldx floats. */
void nq_gemm(int bits, int m, int nu, int upg, int ng, int batch,
             const uint64_t* base, const uint32_t* b2, const uint32_t* b3,
             const float* scales, const float* X, int ldx, float* Y, int ldy);

/* 1 when the AVX-512 masked-accumulate path is compiled in, else 0. */
int nq_simd_kind(void);

#endif
