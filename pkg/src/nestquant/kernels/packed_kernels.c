/* Packed-weight matmul kernels.
 *
 * Two regimes, mirroring the batch split of the inference path:
 *   - batch < 8 uses nq_gemv row by row. On AVX-512 + BMI2 the inner loop
 *     never materializes integer codes: each bit plane contributes a
 *     masked lane-sum of the activations, combined as
 *       part = S(bit0) + 2 S(bit1) + 4 S(bit2) + 8 S(bit3) - z * S(all),
 *     and S(all) is precomputed once per activation vector. pext splits
 *     the 2-bit base plane into its two 1-bit planes.
 *   - batch >= 8 uses nq_gemm: decode one 32-weight unit to (q - z)
 *     floats, then a plain FMA sweep over the batch rows. The j-loops are
 *     fixed-trip and auto-vectorize.
 *
 * Accumulation is float32 throughout. The portable (non-AVX) build keeps
 * the same entry points with scalar decode loops.
 */

#include "packed_kernels.h"

#if defined(__AVX512F__) && defined(__BMI2__)
#include <immintrin.h>
#define NQ_HAVE_AVX512 1
#else
#define NQ_HAVE_AVX512 0
#endif

int nq_simd_kind(void) { return NQ_HAVE_AVX512; }

void nq_group_lane_sums(int nu, int upg, int ng, const float* x, float* xsg) {
    for (int g = 0; g < ng; g++) {
        float acc[32];
        for (int l = 0; l < 32; l++) acc[l] = 0.0f;
        int ulim = (g + 1) * upg;
        if (ulim > nu) ulim = nu;
        for (int u = g * upg; u < ulim; u++) {
            const float* xp = x + (size_t)u * 32;
            for (int l = 0; l < 32; l++) acc[l] += xp[l];
        }
        for (int l = 0; l < 32; l++) xsg[(size_t)g * 32 + l] = acc[l];
    }
}

/* ------------------------------------------------------------------ */
/* decode helpers: unit -> 32 floats of (q - z)                         */

static inline void nq_decode2(uint64_t w, float* qf) {
    uint32_t lo = (uint32_t)w, hi = (uint32_t)(w >> 32);
    int32_t q[32];
    for (int j = 0; j < 16; j++) q[j] = (int32_t)((lo >> (2 * j)) & 3u);
    for (int j = 0; j < 16; j++) q[16 + j] = (int32_t)((hi >> (2 * j)) & 3u);
    for (int j = 0; j < 32; j++) qf[j] = (float)(q[j] - 2);
}

static inline void nq_decode3(uint64_t w, uint32_t m2, float* qf) {
    uint32_t lo = (uint32_t)w, hi = (uint32_t)(w >> 32);
    int32_t q[32];
    for (int j = 0; j < 16; j++) q[j] = (int32_t)((lo >> (2 * j)) & 3u);
    for (int j = 0; j < 16; j++) q[16 + j] = (int32_t)((hi >> (2 * j)) & 3u);
    for (int j = 0; j < 32; j++) q[j] |= (int32_t)(((m2 >> j) & 1u) << 2);
    for (int j = 0; j < 32; j++) qf[j] = (float)(q[j] - 4);
}

static inline void nq_decode4(uint64_t w, uint32_t m2, uint32_t m3, float* qf) {
    uint32_t lo = (uint32_t)w, hi = (uint32_t)(w >> 32);
    int32_t q[32];
    for (int j = 0; j < 16; j++) q[j] = (int32_t)((lo >> (2 * j)) & 3u);
    for (int j = 0; j < 16; j++) q[16 + j] = (int32_t)((hi >> (2 * j)) & 3u);
    for (int j = 0; j < 32; j++) q[j] |= (int32_t)(((m2 >> j) & 1u) << 2);
    for (int j = 0; j < 32; j++) q[j] |= (int32_t)(((m3 >> j) & 1u) << 3);
    for (int j = 0; j < 32; j++) qf[j] = (float)(q[j] - 8);
}

/* ------------------------------------------------------------------ */
/* GEMV                                                                 */

#if NQ_HAVE_AVX512

#define NQ_MASK_ACC(accl, acch, mask, xl, xh)                                \
    do {                                                                     \
        accl = _mm512_mask_add_ps(accl, (__mmask16)(mask), accl, xl);        \
        acch = _mm512_mask_add_ps(acch, (__mmask16)((mask) >> 16), acch, xh);\
    } while (0)

static void nq_gemv_avx512(int bits, int m, int nu, int upg, int ng,
                           const uint64_t* base, const uint32_t* b2,
                           const uint32_t* b3, const float* scales,
                           const float* x, const float* xsg, float* y) {
    const float zf = (float)(1 << (bits - 1));
    for (int i = 0; i < m; i++) {
        const uint64_t* br = base + (size_t)i * nu;
        const uint32_t* r2 = b2 ? b2 + (size_t)i * nu : 0;
        const uint32_t* r3 = b3 ? b3 + (size_t)i * nu : 0;
        const float* srow = scales + (size_t)i * ng;
        float acc = 0.0f;
        for (int g = 0; g < ng; g++) {
            __m512 a0l = _mm512_setzero_ps(), a0h = _mm512_setzero_ps();
            __m512 a1l = _mm512_setzero_ps(), a1h = _mm512_setzero_ps();
            __m512 a2l = _mm512_setzero_ps(), a2h = _mm512_setzero_ps();
            __m512 a3l = _mm512_setzero_ps(), a3h = _mm512_setzero_ps();
            __m512 xsl = _mm512_setzero_ps(), xsh = _mm512_setzero_ps();
            int ulim = (g + 1) * upg;
            if (ulim > nu) ulim = nu;
            for (int u = g * upg; u < ulim; u++) {
                uint64_t w = br[u];
                uint32_t mb0 = (uint32_t)_pext_u64(w, 0x5555555555555555ull);
                uint32_t mb1 = (uint32_t)_pext_u64(w, 0xAAAAAAAAAAAAAAAAull);
                __m512 xl = _mm512_loadu_ps(x + (size_t)u * 32);
                __m512 xh = _mm512_loadu_ps(x + (size_t)u * 32 + 16);
                NQ_MASK_ACC(a0l, a0h, mb0, xl, xh);
                NQ_MASK_ACC(a1l, a1h, mb1, xl, xh);
                if (bits >= 3) NQ_MASK_ACC(a2l, a2h, r2[u], xl, xh);
                if (bits == 4) NQ_MASK_ACC(a3l, a3h, r3[u], xl, xh);
            }
            xsl = _mm512_loadu_ps(xsg + (size_t)g * 32);
            xsh = _mm512_loadu_ps(xsg + (size_t)g * 32 + 16);
            __m512 p = _mm512_add_ps(a0l, a0h);
            p = _mm512_fmadd_ps(_mm512_set1_ps(2.0f), _mm512_add_ps(a1l, a1h), p);
            if (bits >= 3)
                p = _mm512_fmadd_ps(_mm512_set1_ps(4.0f), _mm512_add_ps(a2l, a2h), p);
            if (bits == 4)
                p = _mm512_fmadd_ps(_mm512_set1_ps(8.0f), _mm512_add_ps(a3l, a3h), p);
            p = _mm512_fnmadd_ps(_mm512_set1_ps(zf), _mm512_add_ps(xsl, xsh), p);
            acc += srow[g] * _mm512_reduce_add_ps(p);
        }
        y[i] = acc;
    }
}

#endif /* NQ_HAVE_AVX512 */

static void nq_gemv_portable(int bits, int m, int nu, int upg, int ng,
                             const uint64_t* base, const uint32_t* b2,
                             const uint32_t* b3, const float* scales,
                             const float* x, float* y) {
    float qf[32];
    for (int i = 0; i < m; i++) {
        const uint64_t* br = base + (size_t)i * nu;
        const uint32_t* r2 = b2 ? b2 + (size_t)i * nu : 0;
        const uint32_t* r3 = b3 ? b3 + (size_t)i * nu : 0;
        const float* srow = scales + (size_t)i * ng;
        float acc = 0.0f;
        for (int g = 0; g < ng; g++) {
            float part = 0.0f;
            int ulim = (g + 1) * upg;
            if (ulim > nu) ulim = nu;
            for (int u = g * upg; u < ulim; u++) {
                if (bits == 2) nq_decode2(br[u], qf);
                else if (bits == 3) nq_decode3(br[u], r2[u], qf);
                else nq_decode4(br[u], r2[u], r3[u], qf);
                const float* xp = x + (size_t)u * 32;
                float t = 0.0f;
                for (int j = 0; j < 32; j++) t += qf[j] * xp[j];
                part += t;
            }
            acc += srow[g] * part;
        }
        y[i] = acc;
    }
}

void nq_gemv(int bits, int m, int nu, int upg, int ng,
             const uint64_t* base, const uint32_t* b2, const uint32_t* b3,
             const float* scales, const float* x, const float* xsg, float* y) {
#if NQ_HAVE_AVX512
    nq_gemv_avx512(bits, m, nu, upg, ng, base, b2, b3, scales, x, xsg, y);
#else
    (void)xsg;
    nq_gemv_portable(bits, m, nu, upg, ng, base, b2, b3, scales, x, y);
#endif
}

/* ------------------------------------------------------------------ */
/* blocked batched path                                                 */

#define NQ_MAX_BATCH 16

void nq_gemm(int bits, int m, int nu, int upg, int ng, int batch,
             const uint64_t* base, const uint32_t* b2, const uint32_t* b3,
             const float* scales, const float* X, int ldx, float* Y, int ldy) {
    if (batch > NQ_MAX_BATCH) batch = NQ_MAX_BATCH;
    float qf[32];
    float part[NQ_MAX_BATCH];
    float acc[NQ_MAX_BATCH];
    for (int i = 0; i < m; i++) {
        const uint64_t* br = base + (size_t)i * nu;
        const uint32_t* r2 = b2 ? b2 + (size_t)i * nu : 0;
        const uint32_t* r3 = b3 ? b3 + (size_t)i * nu : 0;
        const float* srow = scales + (size_t)i * ng;
        for (int b = 0; b < batch; b++) acc[b] = 0.0f;
        for (int g = 0; g < ng; g++) {
            for (int b = 0; b < batch; b++) part[b] = 0.0f;
            int ulim = (g + 1) * upg;
            if (ulim > nu) ulim = nu;
            for (int u = g * upg; u < ulim; u++) {
                if (bits == 2) nq_decode2(br[u], qf);
                else if (bits == 3) nq_decode3(br[u], r2[u], qf);
                else nq_decode4(br[u], r2[u], r3[u], qf);
                for (int b = 0; b < batch; b++) {
                    const float* xb = X + (size_t)b * ldx + (size_t)u * 32;
                    float t = 0.0f;
                    for (int j = 0; j < 32; j++) t += qf[j] * xb[j];
                    part[b] += t;
                }
            }
            float s = srow[g];
            for (int b = 0; b < batch; b++) acc[b] += s * part[b];
        }
        for (int b = 0; b < batch; b++) Y[(size_t)b * ldy + i] = acc[b];
    }
}
