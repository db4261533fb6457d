/* Stride-1 2-D convolution kernels with exact-zero weight skipping.
 *
 * Before the spatial loops run, each kernel compacts the weight tensor
 * into a per-output-channel list of (input offset, value) pairs holding
 * only the nonzero entries.  The hot loops then stream surviving weights
 * with no tests or branches, so a pruned network costs time proportional
 * to the weights it actually has left; skipping a multiply by +0.0f is
 * exact for finite activations.  Entries are emitted and accumulated in
 * a fixed order on every call, keeping runs bitwise reproducible.
 *
 * Layout notes
 *   - inputs are pre-padded; all convolutions here are "valid".
 *   - x: (B, Ci, Hp, Wp) contiguous, w: (Co, Ci, KH, KW), out: (B, Co, Ho, Wo).
 *   - the input gradient is a forward convolution of the re-padded output
 *     gradient with channel-transposed, spatially flipped weights; the
 *     compaction step applies the transpose/flip purely in index
 *     arithmetic, so no flipped copy of the weights is ever built.
 *
 * On AVX2+FMA machines the streaming kernels are register-blocked: a
 * block of output rows sits in vector accumulators while the compacted
 * weights stream past, one specialization per output width occurring in
 * the models (8/16/32/64 for feature maps, 10/18/34/66 for gradient
 * buffers).  The weight gradient shares each loaded gradient vector
 * across the three kernel columns; its per-column mask tests are
 * loop-invariant and get unswitched out of the hot loop.  Anything with
 * an unexpected shape falls back to the generic portable code.
 */

#ifndef STLTH_CONV_KERNELS_H
#define STLTH_CONV_KERNELS_H

#include <stddef.h>
#include <stdlib.h>

#if defined(__AVX2__) && defined(__FMA__)
#define STLTH_SIMD 1
#include <immintrin.h>
#else
#define STLTH_SIMD 0
#endif

/* ------------------------------------------------------------------ */
/* Portable row helpers                                                */
/* ------------------------------------------------------------------ */

/* y[0:n] += a * x[0:n].  Elementwise, so lane order never matters. */
static inline void stlth_row_axpy(const float a, const float* restrict x,
                                  float* restrict y, const ptrdiff_t n) {
    ptrdiff_t i = 0;
#if STLTH_SIMD
    const __m256 av = _mm256_set1_ps(a);
    for (; i + 8 <= n; i += 8) {
        __m256 yv = _mm256_loadu_ps(y + i);
        yv = _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), yv);
        _mm256_storeu_ps(y + i, yv);
    }
#endif
    for (; i < n; i++) {
        y[i] += a * x[i];
    }
}

/* Dot product over fixed accumulator lanes reduced in a fixed tree; the
 * lane structure pins the floating-point summation order, so repeated
 * calls are bitwise identical for a given n. */
static inline float stlth_row_dot(const float* restrict x,
                                  const float* restrict g,
                                  const ptrdiff_t n) {
    ptrdiff_t i = 0;
    float acc;
#if STLTH_SIMD
    __m256 s0 = _mm256_setzero_ps();
    __m256 s1 = _mm256_setzero_ps();
    for (; i + 16 <= n; i += 16) {
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i),
                             _mm256_loadu_ps(g + i), s0);
        s1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8),
                             _mm256_loadu_ps(g + i + 8), s1);
    }
    for (; i + 8 <= n; i += 8) {
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i),
                             _mm256_loadu_ps(g + i), s0);
    }
    float lane[16];
    _mm256_storeu_ps(lane, s0);
    _mm256_storeu_ps(lane + 8, s1);
    acc = ((lane[0] + lane[1]) + (lane[2] + lane[3]))
        + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
    acc += ((lane[8] + lane[9]) + (lane[10] + lane[11]))
         + ((lane[12] + lane[13]) + (lane[14] + lane[15]));
#else
    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
    float s4 = 0.f, s5 = 0.f, s6 = 0.f, s7 = 0.f;
    for (; i + 8 <= n; i += 8) {
        s0 += x[i]     * g[i];
        s1 += x[i + 1] * g[i + 1];
        s2 += x[i + 2] * g[i + 2];
        s3 += x[i + 3] * g[i + 3];
        s4 += x[i + 4] * g[i + 4];
        s5 += x[i + 5] * g[i + 5];
        s6 += x[i + 6] * g[i + 6];
        s7 += x[i + 7] * g[i + 7];
    }
    acc = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
#endif
    for (; i < n; i++) {
        acc += x[i] * g[i];
    }
    return acc;
}

/* ------------------------------------------------------------------ */
/* Generic fallbacks (any shape)                                       */
/* ------------------------------------------------------------------ */

static void stlth_conv_fwd_any(const float* restrict xpad,
                               const float* restrict w,
                               const float* restrict bias,
                               float* restrict out,
                               ptrdiff_t B, ptrdiff_t Ci, ptrdiff_t Hp,
                               ptrdiff_t Wp, ptrdiff_t Co, ptrdiff_t KH,
                               ptrdiff_t KW, ptrdiff_t Ho, ptrdiff_t Wo) {
    ptrdiff_t b, co, ci, kh, kw, ho, i;
    for (b = 0; b < B; b++) {
        const float* xb = xpad + b * Ci * Hp * Wp;
        for (co = 0; co < Co; co++) {
            float* ob = out + (b * Co + co) * Ho * Wo;
            const float* wc = w + co * Ci * KH * KW;
            const float bv = bias[co];
            for (i = 0; i < Ho * Wo; i++) {
                ob[i] = bv;
            }
            for (ci = 0; ci < Ci; ci++) {
                const float* xc = xb + ci * Hp * Wp;
                for (kh = 0; kh < KH; kh++) {
                    for (kw = 0; kw < KW; kw++) {
                        const float wv = wc[(ci * KH + kh) * KW + kw];
                        if (wv == 0.0f) {
                            continue;
                        }
                        for (ho = 0; ho < Ho; ho++) {
                            stlth_row_axpy(wv, xc + (ho + kh) * Wp + kw,
                                           ob + ho * Wo, Wo);
                        }
                    }
                }
            }
        }
    }
}

/* Input gradient as a forward pass over the re-padded output gradient;
 * the weight transpose/flip happens in the indexing. */
static void stlth_conv_dx_any(const float* restrict gpad,
                              const float* restrict w,
                              float* restrict dxpad,
                              ptrdiff_t B, ptrdiff_t Co, ptrdiff_t Hgp,
                              ptrdiff_t Wgp, ptrdiff_t Ci, ptrdiff_t KH,
                              ptrdiff_t KW, ptrdiff_t Hx, ptrdiff_t Wx) {
    ptrdiff_t b, co, ci, kh, kw, ho, i;
    for (b = 0; b < B; b++) {
        const float* gb = gpad + b * Co * Hgp * Wgp;
        for (ci = 0; ci < Ci; ci++) {
            float* ob = dxpad + (b * Ci + ci) * Hx * Wx;
            for (i = 0; i < Hx * Wx; i++) {
                ob[i] = 0.0f;
            }
            for (co = 0; co < Co; co++) {
                const float* gc = gb + co * Hgp * Wgp;
                const float* wc = w + (co * Ci + ci) * KH * KW;
                for (kh = 0; kh < KH; kh++) {
                    for (kw = 0; kw < KW; kw++) {
                        const float wv = wc[kh * KW + kw];
                        if (wv == 0.0f) {
                            continue;
                        }
                        for (ho = 0; ho < Hx; ho++) {
                            stlth_row_axpy(
                                wv,
                                gc + (ho + KH - 1 - kh) * Wgp + KW - 1 - kw,
                                ob + ho * Wx, Wx);
                        }
                    }
                }
            }
        }
    }
}

static void stlth_conv_dw_any(const float* restrict xpad,
                              const float* restrict gout,
                              float* restrict dw,
                              const unsigned char* restrict mask,
                              ptrdiff_t B, ptrdiff_t Ci, ptrdiff_t Hp,
                              ptrdiff_t Wp, ptrdiff_t Co, ptrdiff_t KH,
                              ptrdiff_t KW, ptrdiff_t Ho, ptrdiff_t Wo) {
    ptrdiff_t b, co, ci, kh, kw, ho;
    for (co = 0; co < Co; co++) {
        for (ci = 0; ci < Ci; ci++) {
            for (kh = 0; kh < KH; kh++) {
                for (kw = 0; kw < KW; kw++) {
                    const ptrdiff_t wi = ((co * Ci + ci) * KH + kh) * KW + kw;
                    float acc = 0.0f;
                    if (mask[wi] == 0) {
                        dw[wi] = 0.0f;
                        continue;
                    }
                    for (b = 0; b < B; b++) {
                        const float* xc = xpad + (b * Ci + ci) * Hp * Wp;
                        const float* gb = gout + (b * Co + co) * Ho * Wo;
                        for (ho = 0; ho < Ho; ho++) {
                            acc += stlth_row_dot(xc + (ho + kh) * Wp + kw,
                                                 gb + ho * Wo, Wo);
                        }
                    }
                    dw[wi] = acc;
                }
            }
        }
    }
}

#if STLTH_SIMD

/* ------------------------------------------------------------------ */
/* Nonzero-weight compaction                                           */
/* ------------------------------------------------------------------ */

/* Compacted weights: for output channel c, entries [start[c], start[c+1])
 * of (off, val) give the nonzero weights as offsets into the per-batch
 * input block (channel stride folded in). */
typedef struct {
    ptrdiff_t* start;
    ptrdiff_t* off;
    float* val;
    void* mem;
} stlth_packed_w;

static int stlth_pack_fwd(stlth_packed_w* p, const float* w,
                          ptrdiff_t Co, ptrdiff_t Ci, ptrdiff_t KH,
                          ptrdiff_t KW, ptrdiff_t Hp, ptrdiff_t Wp) {
    const ptrdiff_t cap = Co * Ci * KH * KW;
    char* mem = (char*)malloc((size_t)((Co + 1 + cap) * sizeof(ptrdiff_t)
                                       + cap * sizeof(float)));
    ptrdiff_t n = 0, co, ci, kh, kw;
    if (mem == NULL) {
        return -1;
    }
    p->mem = mem;
    p->start = (ptrdiff_t*)mem;
    p->off = p->start + (Co + 1);
    p->val = (float*)(p->off + cap);
    p->start[0] = 0;
    for (co = 0; co < Co; co++) {
        const float* wc = w + co * Ci * KH * KW;
        for (ci = 0; ci < Ci; ci++) {
            for (kh = 0; kh < KH; kh++) {
                for (kw = 0; kw < KW; kw++) {
                    const float wv = wc[(ci * KH + kh) * KW + kw];
                    if (wv != 0.0f) {
                        p->off[n] = ci * Hp * Wp + kh * Wp + kw;
                        p->val[n] = wv;
                        n++;
                    }
                }
            }
        }
        p->start[co + 1] = n;
    }
    return 0;
}

/* Same, but emitting the channel-transposed, spatially flipped view used
 * by the input gradient: output channel is ci, offsets index the padded
 * gradient (Co planes of Hgp x Wgp). */
static int stlth_pack_dx(stlth_packed_w* p, const float* w,
                         ptrdiff_t Co, ptrdiff_t Ci, ptrdiff_t KH,
                         ptrdiff_t KW, ptrdiff_t Hgp, ptrdiff_t Wgp) {
    const ptrdiff_t cap = Co * Ci * KH * KW;
    char* mem = (char*)malloc((size_t)((Ci + 1 + cap) * sizeof(ptrdiff_t)
                                       + cap * sizeof(float)));
    ptrdiff_t n = 0, co, ci, kh, kw;
    if (mem == NULL) {
        return -1;
    }
    p->mem = mem;
    p->start = (ptrdiff_t*)mem;
    p->off = p->start + (Ci + 1);
    p->val = (float*)(p->off + cap);
    p->start[0] = 0;
    for (ci = 0; ci < Ci; ci++) {
        for (co = 0; co < Co; co++) {
            const float* wc = w + (co * Ci + ci) * KH * KW;
            for (kh = 0; kh < KH; kh++) {
                for (kw = 0; kw < KW; kw++) {
                    const float wv = wc[kh * KW + kw];
                    if (wv != 0.0f) {
                        p->off[n] = co * Hgp * Wgp
                                  + (KH - 1 - kh) * Wgp + (KW - 1 - kw);
                        p->val[n] = wv;
                        n++;
                    }
                }
            }
        }
        p->start[ci + 1] = n;
    }
    return 0;
}

/* ------------------------------------------------------------------ */
/* Register-blocked streaming kernels                                  */
/* ------------------------------------------------------------------ */

/* One specialization per output width WO = NC*8 + T: R output rows are
 * held in R*NC vector accumulators while the compacted weights stream
 * past exactly once per block.  R divides the heights these widths occur
 * with, which the dispatcher checks.
 *
 * Widths with a T-column remainder get one extra accumulator fed by an
 * overlapping load of the row's final 8 columns, AND-masked so only the
 * last T lanes contribute.  It is stored (masked lanes as zeros) before
 * the aligned chunks, whose stores then overwrite the overlap, leaving
 * exactly the T tail columns behind. */
#define STLTH_DEF_FWD_BLOCK(NAME, R, NC, T)                                 \
static void NAME(const float* restrict x, const stlth_packed_w* restrict p, \
                 const float* restrict bias, float* restrict out,           \
                 ptrdiff_t B, ptrdiff_t Cx, ptrdiff_t Hp, ptrdiff_t Wp,     \
                 ptrdiff_t Cout, ptrdiff_t Ho) {                            \
    const ptrdiff_t WO = (NC) * 8 + (T);                                    \
    const __m256 tmask = _mm256_castsi256_ps(_mm256_setr_epi32(             \
        (T) > 7 ? -1 : 0, (T) > 6 ? -1 : 0, (T) > 5 ? -1 : 0,               \
        (T) > 4 ? -1 : 0, (T) > 3 ? -1 : 0, (T) > 2 ? -1 : 0,               \
        (T) > 1 ? -1 : 0, (T) > 0 ? -1 : 0));                               \
    for (ptrdiff_t b = 0; b < B; b++) {                                     \
        const float* xb = x + b * Cx * Hp * Wp;                             \
        for (ptrdiff_t co = 0; co < Cout; co++) {                           \
            float* ob = out + (b * Cout + co) * Ho * WO;                    \
            const ptrdiff_t e0 = p->start[co], e1 = p->start[co + 1];       \
            const float bs = bias == NULL ? 0.0f : bias[co];                \
            const __m256 bv = _mm256_set1_ps(bs);                           \
            for (ptrdiff_t h0 = 0; h0 < Ho; h0 += (R)) {                    \
                const float* xh = xb + h0 * Wp;                             \
                __m256 acc[R][NC];                                          \
                __m256 tacc[(T) > 0 ? (R) : 1];                             \
                for (int r = 0; r < (R); r++) {                             \
                    for (int c = 0; c < (NC); c++) acc[r][c] = bv;          \
                    if (T) tacc[r] = _mm256_and_ps(bv, tmask);              \
                }                                                           \
                for (ptrdiff_t e = e0; e < e1; e++) {                       \
                    const __m256 wvv = _mm256_set1_ps(p->val[e]);           \
                    const float* xr = xh + p->off[e];                       \
                    for (int r = 0; r < (R); r++) {                         \
                        for (int c = 0; c < (NC); c++)                      \
                            acc[r][c] = _mm256_fmadd_ps(wvv,                \
                                _mm256_loadu_ps(xr + r * Wp + c * 8),       \
                                acc[r][c]);                                 \
                        if (T) tacc[r] = _mm256_fmadd_ps(wvv,               \
                            _mm256_and_ps(_mm256_loadu_ps(                  \
                                xr + r * Wp + WO - 8), tmask),              \
                            tacc[r]);                                       \
                    }                                                       \
                }                                                           \
                for (int r = 0; r < (R); r++) {                             \
                    float* orow = ob + (h0 + r) * WO;                       \
                    if (T) _mm256_storeu_ps(orow + WO - 8, tacc[r]);        \
                    for (int c = 0; c < (NC); c++)                          \
                        _mm256_storeu_ps(orow + c * 8, acc[r][c]);          \
                }                                                           \
            }                                                               \
        }                                                                   \
    }                                                                       \
}

STLTH_DEF_FWD_BLOCK(stlth_fwd_w8,  8, 1, 0)
STLTH_DEF_FWD_BLOCK(stlth_fwd_w16, 4, 2, 0)
STLTH_DEF_FWD_BLOCK(stlth_fwd_w32, 2, 4, 0)
STLTH_DEF_FWD_BLOCK(stlth_fwd_w64, 1, 8, 0)
STLTH_DEF_FWD_BLOCK(stlth_fwd_w10, 2, 1, 2)
STLTH_DEF_FWD_BLOCK(stlth_fwd_w18, 2, 2, 2)
STLTH_DEF_FWD_BLOCK(stlth_fwd_w34, 2, 4, 2)
STLTH_DEF_FWD_BLOCK(stlth_fwd_w66, 1, 8, 2)

/* Returns 1 when a specialization ran, 0 when the caller must fall back. */
static int stlth_stream_blocked(const float* x, const stlth_packed_w* p,
                                const float* bias, float* out,
                                ptrdiff_t B, ptrdiff_t Cx, ptrdiff_t Hp,
                                ptrdiff_t Wp, ptrdiff_t Cout, ptrdiff_t Ho,
                                ptrdiff_t Wo) {
    switch (Wo) {
    case 8:
        if (Ho % 8) break;
        stlth_fwd_w8(x, p, bias, out, B, Cx, Hp, Wp, Cout, Ho);
        return 1;
    case 16:
        if (Ho % 4) break;
        stlth_fwd_w16(x, p, bias, out, B, Cx, Hp, Wp, Cout, Ho);
        return 1;
    case 32:
        if (Ho % 2) break;
        stlth_fwd_w32(x, p, bias, out, B, Cx, Hp, Wp, Cout, Ho);
        return 1;
    case 64:
        stlth_fwd_w64(x, p, bias, out, B, Cx, Hp, Wp, Cout, Ho);
        return 1;
    case 10:
        if (Ho % 2) break;
        stlth_fwd_w10(x, p, bias, out, B, Cx, Hp, Wp, Cout, Ho);
        return 1;
    case 18:
        if (Ho % 2) break;
        stlth_fwd_w18(x, p, bias, out, B, Cx, Hp, Wp, Cout, Ho);
        return 1;
    case 34:
        if (Ho % 2) break;
        stlth_fwd_w34(x, p, bias, out, B, Cx, Hp, Wp, Cout, Ho);
        return 1;
    case 66:
        stlth_fwd_w66(x, p, bias, out, B, Cx, Hp, Wp, Cout, Ho);
        return 1;
    default:
        break;
    }
    return 0;
}

/* ------------------------------------------------------------------ */
/* Weight gradient, 3-wide kernels                                     */
/* ------------------------------------------------------------------ */

static inline float stlth_hsum_tree(const __m256 a, const __m256 b) {
    float lane[16];
    float acc;
    _mm256_storeu_ps(lane, a);
    _mm256_storeu_ps(lane + 8, b);
    acc = ((lane[0] + lane[1]) + (lane[2] + lane[3]))
        + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
    acc += ((lane[8] + lane[9]) + (lane[10] + lane[11]))
         + ((lane[12] + lane[13]) + (lane[14] + lane[15]));
    return acc;
}

/* All three kernel columns of one (co, ci, kh) row accumulate together,
 * sharing each loaded gradient vector.  The surviving-column pattern is
 * constant over the whole accumulation loop, so the loop is instantiated
 * once per pattern: the hot bodies are branch-free, and a masked column
 * costs nothing. */
#define STLTH_DW_LOOP(D0, D1, D2)                                           \
    for (ptrdiff_t b = 0; b < B; b++) {                                     \
        const float* xc = xpad + (b * Ci + ci) * Hp * Wp;                   \
        const float* gb = gout + (b * Co + co) * Ho * Wo;                   \
        for (ptrdiff_t ho = 0; ho < Ho; ho++) {                             \
            const float* xr = xc + (ho + kh) * Wp;                          \
            const float* gr = gb + ho * Wo;                                 \
            for (ptrdiff_t c = 0; c < NC; c++) {                            \
                const __m256 gv = _mm256_loadu_ps(gr + c * 8);              \
                D0;                                                         \
                D1;                                                         \
                D2;                                                         \
                sel ^= 1;                                                   \
            }                                                               \
        }                                                                   \
    }

#define STLTH_DW_COL(a, shift)                                              \
    a[sel] = _mm256_fmadd_ps(_mm256_loadu_ps(xr + c * 8 + (shift)), gv,     \
                             a[sel])

static void stlth_conv_dw_k3(const float* restrict xpad,
                             const float* restrict gout,
                             float* restrict dw,
                             const unsigned char* restrict mask,
                             ptrdiff_t B, ptrdiff_t Ci, ptrdiff_t Hp,
                             ptrdiff_t Wp, ptrdiff_t Co, ptrdiff_t KH,
                             ptrdiff_t Ho, ptrdiff_t Wo) {
    const ptrdiff_t NC = Wo / 8;
    for (ptrdiff_t co = 0; co < Co; co++) {
        for (ptrdiff_t ci = 0; ci < Ci; ci++) {
            for (ptrdiff_t kh = 0; kh < KH; kh++) {
                const ptrdiff_t wi = ((co * Ci + ci) * KH + kh) * 3;
                const int pattern = mask[wi] | (mask[wi + 1] << 1)
                                  | (mask[wi + 2] << 2);
                __m256 a0[2], a1[2], a2[2];
                int sel = 0;
                a0[0] = a0[1] = a1[0] = a1[1] = _mm256_setzero_ps();
                a2[0] = a2[1] = _mm256_setzero_ps();
                switch (pattern) {
                case 0:
                    break;
                case 1:
                    STLTH_DW_LOOP(STLTH_DW_COL(a0, 0), (void)0, (void)0);
                    break;
                case 2:
                    STLTH_DW_LOOP((void)0, STLTH_DW_COL(a1, 1), (void)0);
                    break;
                case 3:
                    STLTH_DW_LOOP(STLTH_DW_COL(a0, 0), STLTH_DW_COL(a1, 1),
                                  (void)0);
                    break;
                case 4:
                    STLTH_DW_LOOP((void)0, (void)0, STLTH_DW_COL(a2, 2));
                    break;
                case 5:
                    STLTH_DW_LOOP(STLTH_DW_COL(a0, 0), (void)0,
                                  STLTH_DW_COL(a2, 2));
                    break;
                case 6:
                    STLTH_DW_LOOP((void)0, STLTH_DW_COL(a1, 1),
                                  STLTH_DW_COL(a2, 2));
                    break;
                default:
                    STLTH_DW_LOOP(STLTH_DW_COL(a0, 0), STLTH_DW_COL(a1, 1),
                                  STLTH_DW_COL(a2, 2));
                    break;
                }
                dw[wi]     = pattern & 1 ? stlth_hsum_tree(a0[0], a0[1])
                                         : 0.0f;
                dw[wi + 1] = pattern & 2 ? stlth_hsum_tree(a1[0], a1[1])
                                         : 0.0f;
                dw[wi + 2] = pattern & 4 ? stlth_hsum_tree(a2[0], a2[1])
                                         : 0.0f;
            }
        }
    }
}

#endif /* STLTH_SIMD */

/* ------------------------------------------------------------------ */
/* Entry points                                                        */
/* ------------------------------------------------------------------ */

static void stlth_conv_fwd(const float* xpad, const float* w,
                           const float* bias, float* out,
                           ptrdiff_t B, ptrdiff_t Ci, ptrdiff_t Hp,
                           ptrdiff_t Wp, ptrdiff_t Co, ptrdiff_t KH,
                           ptrdiff_t KW, ptrdiff_t Ho, ptrdiff_t Wo) {
#if STLTH_SIMD
    stlth_packed_w p;
    if (stlth_pack_fwd(&p, w, Co, Ci, KH, KW, Hp, Wp) == 0) {
        const int done = stlth_stream_blocked(xpad, &p, bias, out,
                                              B, Ci, Hp, Wp, Co, Ho, Wo);
        free(p.mem);
        if (done) {
            return;
        }
    }
#endif
    stlth_conv_fwd_any(xpad, w, bias, out, B, Ci, Hp, Wp, Co, KH, KW, Ho, Wo);
}

static void stlth_conv_dx(const float* gpad, const float* w, float* dxpad,
                          ptrdiff_t B, ptrdiff_t Co, ptrdiff_t Hgp,
                          ptrdiff_t Wgp, ptrdiff_t Ci, ptrdiff_t KH,
                          ptrdiff_t KW, ptrdiff_t Hx, ptrdiff_t Wx) {
#if STLTH_SIMD
    stlth_packed_w p;
    if (stlth_pack_dx(&p, w, Co, Ci, KH, KW, Hgp, Wgp) == 0) {
        const int done = stlth_stream_blocked(gpad, &p, NULL, dxpad,
                                              B, Co, Hgp, Wgp, Ci, Hx, Wx);
        free(p.mem);
        if (done) {
            return;
        }
    }
#endif
    stlth_conv_dx_any(gpad, w, dxpad, B, Co, Hgp, Wgp, Ci, KH, KW, Hx, Wx);
}

static void stlth_conv_dw(const float* xpad, const float* gout, float* dw,
                          const unsigned char* mask,
                          ptrdiff_t B, ptrdiff_t Ci, ptrdiff_t Hp,
                          ptrdiff_t Wp, ptrdiff_t Co, ptrdiff_t KH,
                          ptrdiff_t KW, ptrdiff_t Ho, ptrdiff_t Wo) {
#if STLTH_SIMD
    if (KW == 3 && Wo % 8 == 0) {
        stlth_conv_dw_k3(xpad, gout, dw, mask, B, Ci, Hp, Wp, Co, KH, Ho, Wo);
        return;
    }
#endif
    stlth_conv_dw_any(xpad, gout, dw, mask, B, Ci, Hp, Wp, Co, KH, KW, Ho, Wo);
}

#endif /* STLTH_CONV_KERNELS_H */
