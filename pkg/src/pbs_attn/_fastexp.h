/* Row primitives for the compiled kernel, written so GCC/Clang vectorize them.
 *
 * exp uses Cody-Waite range reduction (x = k ln2 + r, |r| <= ln2/2) and a
 * Taylor polynomial in r: degree 13 for double, 7 for float, both below one
 * ulp of truncation error. Inputs are always <= 0 here (scores minus the
 * running max); anything below the normal-range limit, -inf included,
 * returns exactly 0.
 */
#ifndef PBS_FASTEXP_H
#define PBS_FASTEXP_H

#include <math.h>
#include <stdint.h>
#include <string.h>

static inline double pbs_rowmax_d(const double *s, int n) {
    double m = -INFINITY;
#pragma omp simd reduction(max:m)
    for (int i = 0; i < n; i++) m = s[i] > m ? s[i] : m;
    return m;
}

static inline float pbs_rowmax_f(const float *s, int n) {
    float m = -INFINITY;
#pragma omp simd reduction(max:m)
    for (int i = 0; i < n; i++) m = s[i] > m ? s[i] : m;
    return m;
}

static inline void pbs_mask_d(double *s, const long long *kp, long long qp, int n) {
#pragma omp simd
    for (int i = 0; i < n; i++) s[i] = kp[i] > qp ? -INFINITY : s[i];
}

static inline void pbs_mask_f(float *s, const long long *kp, long long qp, int n) {
#pragma omp simd
    for (int i = 0; i < n; i++) s[i] = kp[i] > qp ? -INFINITY : s[i];
}

/* s[i] = exp(s[i] - m) in place; returns the row sum. */
static inline double pbs_exp_shift_d(double *s, int n, double m) {
    const double magic = 6755399441055744.0; /* 1.5 * 2^52 */
    const double log2e = 1.4426950408889634;
    const double ln2_hi = 6.93147180369123816490e-01;
    const double ln2_lo = 1.90821492927058770002e-10;
    double acc = 0.0;
#pragma omp simd reduction(+:acc)
    for (int i = 0; i < n; i++) {
        double x = s[i] - m;
        double xc = x < -708.0 ? -708.0 : x;
        double t = xc * log2e + magic;
        double kf = t - magic;
        double r = (xc - kf * ln2_hi) - kf * ln2_lo;
        double p = 1.0 / 6227020800.0;
        p = p * r + 1.0 / 479001600.0;
        p = p * r + 1.0 / 39916800.0;
        p = p * r + 1.0 / 3628800.0;
        p = p * r + 1.0 / 362880.0;
        p = p * r + 1.0 / 40320.0;
        p = p * r + 1.0 / 5040.0;
        p = p * r + 1.0 / 720.0;
        p = p * r + 1.0 / 120.0;
        p = p * r + 1.0 / 24.0;
        p = p * r + 1.0 / 6.0;
        p = p * r + 0.5;
        p = p * r + 1.0;
        p = p * r + 1.0;
        int64_t bits;
        memcpy(&bits, &t, sizeof bits);
        int64_t e = (bits - 0x4338000000000000LL + 1023) << 52;
        double sc;
        memcpy(&sc, &e, sizeof sc);
        double y = x < -708.0 ? 0.0 : p * sc;
        s[i] = y;
        acc += y;
    }
    return acc;
}

static inline float pbs_exp_shift_f(float *s, int n, float m) {
    const float magic = 12582912.0f; /* 1.5 * 2^23 */
    const float log2e = 1.44269504f;
    const float ln2_hi = 0.693359375f;
    const float ln2_lo = -2.12194440e-4f;
    float acc = 0.0f;
#pragma omp simd reduction(+:acc)
    for (int i = 0; i < n; i++) {
        float x = s[i] - m;
        float xc = x < -87.0f ? -87.0f : x;
        float t = xc * log2e + magic;
        float kf = t - magic;
        float r = (xc - kf * ln2_hi) - kf * ln2_lo;
        float p = 1.0f / 5040.0f;
        p = p * r + 1.0f / 720.0f;
        p = p * r + 1.0f / 120.0f;
        p = p * r + 1.0f / 24.0f;
        p = p * r + 1.0f / 6.0f;
        p = p * r + 0.5f;
        p = p * r + 1.0f;
        p = p * r + 1.0f;
        int32_t bits;
        memcpy(&bits, &t, sizeof bits);
        int32_t e = (bits - 0x4B400000 + 127) << 23;
        float sc;
        memcpy(&sc, &e, sizeof sc);
        float y = x < -87.0f ? 0.0f : p * sc;
        s[i] = y;
        acc += y;
    }
    return acc;
}

#endif
