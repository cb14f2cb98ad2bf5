/* Branch-free double-precision exp for auto-vectorised kernel loops.
 *
 * exp(x) = 2^n * exp(r), x = n*ln2 + r, |r| <= ln2/2, with exp(r) from a
 * degree-13 Taylor polynomial (truncation < 1e-17 relative). Inputs are
 * clamped to [-745, 709]; results below 2^-1022 flush to zero.
 */
#ifndef ACMGEN_FASTEXP_H
#define ACMGEN_FASTEXP_H

#include <stdint.h>
#include <string.h>

static inline double acm_exp(double x) {
    const double ln2_hi = 6.93147180369123816490e-01;
    const double ln2_lo = 1.90821492927058770002e-10;
    const double inv_ln2 = 1.44269504088896338700e+00;
    if (x < -708.0) x = -745.0;
    if (x > 709.0) x = 709.0;
    double fn = __builtin_floor(x * inv_ln2 + 0.5);
    double r = (x - fn * ln2_hi) - fn * ln2_lo;
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
    int64_t n = (int64_t)fn;
    int64_t bits = (n + 1023) << 52;
    double scale;
    memcpy(&scale, &bits, sizeof scale);
    double out = p * scale;
    return n < -1022 ? 0.0 : out;
}

/* tanh via exp; absolute error ~1e-16, which is what GELU needs. */
static inline double acm_tanh(double z) {
    double a = z < 0 ? -z : z;
    if (a > 20.0) a = 20.0;
    double e = acm_exp(2.0 * a);
    double t = 1.0 - 2.0 / (e + 1.0);
    return z < 0 ? -t : t;
}

#endif
