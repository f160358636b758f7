# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must stay arithmetically identical to _kernels_py."""

from libc.math cimport exp, log, floor
from scipy.special.cython_special cimport gammainc, gammaln


def wald_exceed_count(const double[:, ::1] z, double m, double rho,
                      double s, double c, double crit):
    cdef Py_ssize_t i, n = z.shape[0]
    cdef double x, nu, d, num, den
    cdef long long count = 0
    for i in range(n):
        x = z[i, 0]
        nu = m + rho * x + s * z[i, 1]
        d = nu - rho * x
        den = d * d + c * (x * x)
        num = (x * x) * (nu * nu)
        if num > crit * den:
            count += 1
    return count


def ncx2_cdf(double x, double k, double lam, double tol, long max_terms):
    cdef double h, lh, a0, w0, p0, g0, w, p, g, a, r, total
    cdef long j0, j, steps
    h = 0.5 * x
    if h <= 0.0:
        return 0.0
    if lam == 0.0:
        return gammainc(0.5 * k, h)
    lh = 0.5 * lam
    j0 = <long>floor(lh)
    a0 = 0.5 * k + j0
    # j0 = 0 covers subnormal lam, where lh underflows to 0
    if j0 == 0:
        w0 = exp(-lh)
    else:
        w0 = exp(-lh + j0 * log(lh) - gammaln(j0 + 1.0))
    p0 = gammainc(a0, h)
    g0 = exp(a0 * log(h) - h - gammaln(a0 + 1.0))
    total = w0 * p0

    # downward from the Poisson mode
    w = w0
    p = p0
    g = g0
    j = j0
    while j > 0:
        a = 0.5 * k + j
        g = g * a / h
        p = p + g
        w = w * j / lh
        j -= 1
        total += w * p
        r = j / lh
        if w * r / (1.0 - r) < tol:
            break

    # upward from the Poisson mode
    w = w0
    p = p0
    g = g0
    j = j0
    steps = 0
    while steps < max_terms:
        a = 0.5 * k + j
        p = p - g
        g = g * h / (a + 1.0)
        j += 1
        w = w * lh / j
        total += w * p
        steps += 1
        r = lh / (j + 1.0)
        if r < 1.0 and w * r / (1.0 - r) < tol:
            break
    if total < 0.0:
        return 0.0
    if total > 1.0:
        return 1.0
    return total
