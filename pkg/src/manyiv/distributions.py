"""Normal and noncentral chi-squared machinery, the Wald-limit mixture, and
Monte Carlo calibration of the weak-instrument cutoff ``C``.

The limit of the B2SLS Wald statistic under many weak instruments is

    W = xi^2 / (1 - 2 rho xi / nu + xi^2 / nu^2)
      = xi^2 nu^2 / ((nu - rho xi)^2 + (1 - rho^2) xi^2),

with (xi, nu) bivariate normal, unit variances, correlation ``rho`` and
means (0, m). The second form is used everywhere: it has no division by
``nu`` and gives ``W = inf`` (always reject) on the degenerate path
``nu = rho * xi`` with ``|rho| = 1``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.special import ndtr, ndtri

from . import kernels, rng
from .errors import ConvergenceError, DomainError, InfeasibleError

NCX2_TAIL_TOL = 1e-14
NCX2_MAX_TERMS = 10_000_000

RHO_GRID = (1.0, 0.99, 0.95, 0.9, 0.75, 0.5, 0.25, 0.0,
            -0.25, -0.5, -0.75, -0.9, -0.95, -0.99, -1.0)
DEFAULT_CALIBRATION_REPS = 200_000
C_UPPER = 50.0
BISECTION_STEPS = 30
MS_C0 = 2.5

_CHUNK = 1 << 16


def normal_cdf(x):
    return ndtr(x)


def normal_quantile(q):
    q_arr = np.asarray(q, dtype=float)
    if np.any(~((q_arr > 0) & (q_arr < 1))):
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")
    return ndtri(q)


def _check_ncx2_args(K, lam):
    if not K >= 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {K}")
    if not lam >= 0:
        raise DomainError(f"noncentrality must be >= 0, got {lam}")


def noncentral_chisq_cdf(x: float, K: float, lam: float) -> float:
    """CDF of chi^2_K(lam) as a Poisson(lam/2) mixture of central CDFs.

    Summation starts at the Poisson mode and walks outwards using the
    recurrence ``P(a+1, h) = P(a, h) - h^a e^-h / Gamma(a+1)``, stopping when
    the bound on the remaining Poisson tail mass drops below 1e-14.
    """
    _check_ncx2_args(K, lam)
    return kernels.ncx2_cdf(float(x), float(K), float(lam), NCX2_TAIL_TOL, NCX2_MAX_TERMS)


def _normal_approx_quantile(K, lam, z):
    # large-K normal approximation of the (1 - tau)-quantile
    s = 2.0 * K + 4.0 * lam
    return (K + lam) / s * (z + math.sqrt(s)) ** 2


def noncentral_chisq_quantile(K: float, lam: float, tau: float) -> float:
    """The (1 - tau)-quantile of chi^2_K(lam).

    Bracketed bisection on :func:`noncentral_chisq_cdf`, seeded with the
    large-K normal approximation.

    Raises
    ------
    DomainError
        For ``K < 1``, ``lam < 0`` or ``tau`` outside (0, 1).
    ConvergenceError
        If no bracket containing the quantile is found.
    """
    _check_ncx2_args(K, lam)
    if not 0 < tau < 1:
        raise DomainError(f"significance must lie in (0, 1), got {tau}")
    target = 1.0 - tau
    z = float(normal_quantile(target))
    x0 = max(_normal_approx_quantile(K, lam, z), 1e-3)

    def cdf(x):
        return kernels.ncx2_cdf(x, float(K), float(lam), NCX2_TAIL_TOL, NCX2_MAX_TERMS)

    lo = hi = x0
    for _ in range(200):
        if cdf(lo) <= target:
            break
        lo *= 0.5
    else:
        raise ConvergenceError("could not bracket quantile from below", bracket=(lo, hi))
    for _ in range(200):
        if cdf(hi) >= target:
            break
        hi = 2.0 * hi + 1.0
    else:
        raise ConvergenceError("could not bracket quantile from above", bracket=(lo, hi))

    for _ in range(400):
        mid = 0.5 * (lo + hi)
        f = cdf(mid)
        if abs(f - target) <= 1e-13 or hi - lo <= 4 * np.finfo(float).eps * hi:
            return mid
        if f < target:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    if abs(cdf(mid) - target) > 1e-8:
        raise ConvergenceError("bisection did not converge", bracket=(lo, hi))
    return mid


@dataclass(frozen=True)
class MixtureParams:
    """Parameters of the Wald-limit mixture.

    ``m`` is the mean of ``nu``, i.e. ``sqrt((1 - alpha) / 2) * mu^2 / sqrt(K)``.
    """

    m: float
    rho: float

    def __post_init__(self):
        if not self.m >= 0:
            raise DomainError(f"mixture mean m must be >= 0, got {self.m}")
        if not -1.0 <= self.rho <= 1.0:
            raise DomainError(f"rho must lie in [-1, 1], got {self.rho}")


def mixture_mean(alpha: float, strength: float) -> float:
    """Mean of ``nu`` for rescaled strength ``mu^2 / sqrt(K)`` at ratio ``alpha``."""
    return math.sqrt((1.0 - alpha) / 2.0) * strength


def limit_correlation(sigma_uu2: float, sigma_vv2: float, sigma_vu: float) -> float:
    """Correlation of (xi, nu) implied by the structural error moments.

    Equals ``sigma_12 / (sigma_1 sigma_2)`` for the joint limit of
    ``(Y'P_b u, Y'P_b Y) / sqrt(K)``, which is
    ``sqrt(2) sigma_vu / sqrt(sigma_vv^2 sigma_uu^2 + sigma_vu^2)``.
    """
    r = math.sqrt(2.0) * sigma_vu / math.sqrt(sigma_vv2 * sigma_uu2 + sigma_vu**2)
    return max(-1.0, min(1.0, r))


def _exceed_count(m, rho, crit, reps, gen):
    s = math.sqrt(max(0.0, 1.0 - rho * rho))
    c = 1.0 - rho * rho
    count = 0
    left = reps
    while left > 0:
        size = min(_CHUNK, left)
        z = gen.standard_normal((size, 2))
        count += kernels.wald_exceed_count(z, m, rho, s, c, crit)
        left -= size
    return count


def chi2_1_critical(tau: float) -> float:
    """(1 - tau)-quantile of chi^2_1."""
    return float(normal_quantile(1.0 - tau / 2.0)) ** 2


def wald_limit_rejection(params: MixtureParams, tau: float, reps: int, seed: int) -> float:
    """Monte Carlo probability that the Wald-limit mixture exceeds the
    chi^2_1 critical value at level ``tau``.

    Deterministic given ``seed``. The standard error is
    ``sqrt(r (1 - r) / reps)``.
    """
    if reps < 10_000:
        raise DomainError(f"reps must be >= 1e4, got {reps}")
    if not 0 < tau < 1:
        raise DomainError(f"significance must lie in (0, 1), got {tau}")
    crit = chi2_1_critical(tau)
    gen = rng.substream(seed, rng.WALD)
    return _exceed_count(params.m, params.rho, crit, reps, gen) / reps


def c_from_c0(K: int, n: int, C0: float = MS_C0) -> float:
    """Cutoff for ``mu^2 / sqrt(K)`` from the reference cutoff ``C0``:
    ``C = sqrt(2 / (1 - K/n)) * C0``."""
    if not 0 < K < n:
        raise DomainError(f"need 0 < K < n, got K={K}, n={n}")
    if C0 < 0:
        raise DomainError(f"C0 must be >= 0, got {C0}")
    return math.sqrt(2.0 / (1.0 - K / n)) * C0


@dataclass
class CalibrationResult:
    """Outcome of :func:`calibrate_C`.

    ``bracket`` is the terminal bisection interval ``(lo, C)``: the smoothed
    worst-case rejection is above ``T`` at ``lo`` and at most ``T`` at ``C``.
    """

    C: float
    T: float
    tau: float
    alpha: float
    reps: int
    seed: int
    rho_grid: list
    worst_rho: float
    worst_rejection: float
    mc_se: float
    bracket: tuple
    rejection_by_rho: list = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["bracket"] = list(self.bracket)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationResult":
        d = json.loads(text)
        d["bracket"] = tuple(d["bracket"])
        return cls(**d)


def _worst_case(C, alpha, crit, reps, seed, step, abs_grid):
    """Rejection for every |rho| on the grid at cutoff ``C``.

    The mixture law is invariant under (xi, rho) -> (-xi, -rho), and with
    reflected draws the two paths give bit-identical statistics, so only
    |rho| is simulated and the result is mirrored. All grid points share the
    same draws (common random numbers), so the comparison across rho is far
    less noisy than the individual rates.
    """
    m = mixture_mean(alpha, C)
    rates = {}
    for a in abs_grid:
        gen = rng.substream(seed, rng.CALIBRATION, step)
        rates[a] = _exceed_count(m, a, crit, reps, gen) / reps
    return rates


def calibrate_C(
    T: float,
    tau: float,
    alpha: float,
    reps: int = DEFAULT_CALIBRATION_REPS,
    seed: int = 0,
    rho_grid=RHO_GRID,
    upper: float = C_UPPER,
    steps: int = BISECTION_STEPS,
) -> CalibrationResult:
    """Smallest ``C`` whose worst-case (over ``rho_grid``) Wald-limit rejection
    is at most ``T``.

    Bisection over ``[0, upper]``. Every evaluated point is kept, and the
    decision at each midpoint uses a nonincreasing isotonic fit of all
    evaluations so far, which absorbs Monte Carlo noise. Each bisection step
    draws from its own substream, shared by every rho on the grid.

    ``T = 1`` is accepted as the vacuous case and returns ``C = 0``.
    """
    if not 0 < tau < 1:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    if not tau < T <= 1:
        raise DomainError(f"need tau < T <= 1, got tau={tau}, T={T}")
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    grid = [float(r) for r in rho_grid]
    if any(abs(r) > 1 for r in grid):
        raise DomainError("rho grid must lie in [-1, 1]")
    abs_grid = sorted({abs(r) for r in grid}, reverse=True)
    crit = chi2_1_critical(tau)

    evaluated = {}  # C -> {|rho|: rate}

    def evaluate(C, step):
        evaluated[C] = _worst_case(C, alpha, crit, reps, seed, step, abs_grid)
        return max(evaluated[C].values())

    def smoothed(C):
        cs = sorted(evaluated)
        ys = [max(evaluated[c].values()) for c in cs]
        fit = isotonic_regression(ys, increasing=False).x
        return float(fit[cs.index(C)])

    def result(C, lo):
        rates = evaluated[C]
        by_rho = [rates[abs(r)] for r in grid]
        worst = max(by_rho)
        # ties between +rho and -rho are exact; prefer the positive one
        worst_rho = max(r for r, v in zip(grid, by_rho) if v == worst)
        return CalibrationResult(
            C=C, T=T, tau=tau, alpha=alpha, reps=reps, seed=seed, rho_grid=grid,
            worst_rho=worst_rho, worst_rejection=worst,
            mc_se=math.sqrt(worst * (1.0 - worst) / reps), bracket=(lo, C),
            rejection_by_rho=by_rho,
        )

    evaluate(upper, 0)
    if smoothed(upper) > T:
        raise InfeasibleError(
            f"worst-case rejection {max(evaluated[upper].values()):.4f} exceeds T={T} "
            f"even at C={upper}"
        )
    evaluate(0.0, 1)
    if smoothed(0.0) <= T:
        return result(0.0, 0.0)

    lo, hi = 0.0, upper
    for step in range(2, steps + 2):
        mid = 0.5 * (lo + hi)
        evaluate(mid, step)
        if smoothed(mid) <= T:
            hi = mid
        else:
            lo = mid
    return result(hi, lo)


def cache_dir() -> Path:
    env = os.environ.get("MANYIV_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".manyiv" / "calibrations"


def cache_key(alpha: float, T: float, tau: float, reps: int) -> str:
    return f"alpha={alpha:.3f}_T={T:g}_tau={tau:g}_reps={int(reps)}.json"


def save_calibration(result: CalibrationResult, directory=None) -> Path:
    directory = Path(directory) if directory is not None else cache_dir()
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / cache_key(result.alpha, result.T, result.tau, result.reps)
    path.write_text(result.to_json() + "\n", encoding="utf-8")
    return path


def load_calibration(alpha, T, tau, reps=None, directory=None) -> CalibrationResult | None:
    """Cached result for (alpha rounded to 1e-3, T, tau); with ``reps=None``
    the entry with the most replications wins."""
    directory = Path(directory) if directory is not None else cache_dir()
    if not directory.is_dir():
        return None
    if reps is not None:
        path = directory / cache_key(alpha, T, tau, reps)
        return CalibrationResult.from_json(path.read_text()) if path.is_file() else None
    prefix = cache_key(alpha, T, tau, 0).rsplit("reps=", 1)[0] + "reps="
    best = None
    for path in directory.glob(prefix.replace("[", "[[]") + "*.json"):
        res = CalibrationResult.from_json(path.read_text())
        if best is None or res.reps > best.reps:
            best = res
    return best
