"""Pure-Python fallback for the compiled kernels in ``_kernels.pyx``.

Operation order matches the Cython source line for line, so both backends
return identical numbers.
"""

import math

import numpy as np
from scipy.special import gammainc, gammaln


def wald_exceed_count(z, m, rho, s, c, crit):
    x = z[:, 0]
    nu = m + rho * x + s * z[:, 1]
    d = nu - rho * x
    den = d * d + c * (x * x)
    num = (x * x) * (nu * nu)
    return int(np.count_nonzero(num > crit * den))


def ncx2_cdf(x, k, lam, tol, max_terms):
    h = 0.5 * x
    if h <= 0.0:
        return 0.0
    if lam == 0.0:
        return float(gammainc(0.5 * k, h))
    lh = 0.5 * lam
    j0 = math.floor(lh)
    a0 = 0.5 * k + j0
    # j0 = 0 covers subnormal lam, where lh underflows to 0
    w0 = math.exp(-lh) if j0 == 0 else math.exp(-lh + j0 * math.log(lh) - float(gammaln(j0 + 1.0)))
    p0 = float(gammainc(a0, h))
    g0 = math.exp(a0 * math.log(h) - h - float(gammaln(a0 + 1.0)))
    total = w0 * p0

    w, p, g, j = w0, p0, g0, j0
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

    w, p, g, j = w0, p0, g0, j0
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
    return min(max(total, 0.0), 1.0)
