"""Test statistics, estimators and asymptotic size formulas.

Notation: ``alpha = K/n``; ``omega`` is the mean squared leverage
``(1/n) sum_i P_ii^2``; ``kurt`` is ``E(v^4) / sigma_vv^4`` for the
first-stage errors. Instruments are balanced when ``omega = alpha^2``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from . import distributions as dist
from .dataset import MANY_IV_THRESHOLD, IVDataset, validate
from .errors import (
    DegenerateFitError,
    DomainError,
    SingularityError,
    UnsupportedError,
)
from .projection import ProjectionSummary, decompose, first_stage_residuals, summarize

EPS = np.finfo(float).eps
COND_LIMIT = 1e12
KURTOSIS_WARN = 0.5
HEURISTIC_INTERVAL = (1.0, 3.0)


@dataclass(frozen=True)
class TestDecision:
    """A one-sided test: instruments are declared strong iff
    ``statistic > critical_value``."""

    statistic: float
    critical_value: float
    strong: bool

    @property
    def decision(self) -> str:
        return "strong" if self.strong else "weak"


@dataclass(frozen=True)
class FStatistics:
    F: float
    Fc: float
    Fl: float | None
    C: float
    sigma_L2_hat: float | None


@dataclass(frozen=True)
class SYTestResult:
    F: float
    critical_value: float
    reject: bool
    predicted_size: float
    warnings: tuple = ()


def first_stage_F(summary: ProjectionSummary) -> float:
    """``F = (Y'P_Z Y / K) / (Y'M_Z Y / (n - K))`` for a single endogenous variable."""
    if summary.p != 1:
        raise UnsupportedError(f"first-stage F needs p = 1, got p = {summary.p}; use cd_trace")
    ypy = float(summary.YPY[0, 0])
    ymy = float(summary.YMY[0, 0])
    yy = float(summary.YY[0, 0])
    if ymy <= summary.n * EPS * yy:
        raise DegenerateFitError("Y lies numerically in the instrument space (Y'M_Z Y ~ 0)")
    return (ypy / summary.K) / (ymy / (summary.n - summary.K))


def predicted_classical_size(alpha: float, tau: float) -> float:
    """Limiting size of the classical F test for balanced instruments or
    mesokurtic errors: ``Phi(sqrt(1 - alpha) Phi^-1(tau))``."""
    return float(dist.normal_cdf(math.sqrt(1.0 - alpha) * dist.normal_quantile(tau)))


def classical_sy_test(F: float, K: int, n: int, mu0_sq: float, tau: float = 0.05) -> SYTestResult:
    """Stock-Yogo style test of ``mu^2 <= mu0_sq`` with the noncentral
    chi-squared critical value ``q_tau(chi^2_K(mu0_sq)) / K``.

    A warning is attached when ``K/n >= 0.05``, where this critical value
    is known to over-reject.
    """
    if mu0_sq < 0:
        raise DomainError(f"mu0^2 must be >= 0, got {mu0_sq}")
    if not 0 < K < n:
        raise DomainError(f"need 0 < K < n, got K={K}, n={n}")
    cv = dist.noncentral_chisq_quantile(K, mu0_sq, tau) / K
    alpha = K / n
    predicted = predicted_classical_size(alpha, tau)
    warnings = ()
    if alpha >= MANY_IV_THRESHOLD:
        warnings = (
            f"K/n = {alpha:.4f} >= {MANY_IV_THRESHOLD}: with many instruments the classical "
            f"F test is oversized; predicted size {100 * predicted:.1f}% at nominal "
            f"{100 * tau:g}% (balanced instruments or mesokurtic errors)",
        )
    return SYTestResult(F=F, critical_value=cv, reject=bool(F > cv), predicted_size=predicted,
                        warnings=warnings)


def corrected_F_test(F: float, K: int, n: int, C: float, tau: float = 0.05) -> TestDecision:
    """``F_c = sqrt(K (n - K) / (2 n)) (F - 1 - C / sqrt(K))``, compared with
    the standard normal ``(1 - tau)``-quantile."""
    if not 0 < K < n:
        raise DomainError(f"need 0 < K < n, got K={K}, n={n}")
    if C < 0:
        raise DomainError(f"C must be >= 0, got {C}")
    fc = math.sqrt(K * (n - K) / (2.0 * n)) * (F - 1.0 - C / math.sqrt(K))
    cv = float(dist.normal_quantile(1.0 - tau))
    return TestDecision(statistic=fc, critical_value=cv, strong=bool(fc > cv))


def sigma_L2(alpha: float, omega: float) -> float:
    """Kurtosis-free lower bound on the variance of ``sqrt(n) F``."""
    return (2 * alpha - 3 * omega + alpha**2) / (alpha**2 * (1 - alpha) ** 2)


def f_l_test(F: float, summary: ProjectionSummary, C: float, tau: float = 0.05) -> tuple[TestDecision, float]:
    """Corrected F test standardized by the estimated lower-bound variance.

    Returns the decision and ``sigma_L^2`` evaluated at the sample
    ``alpha_hat`` and ``omega_hat``.
    """
    a, w = summary.alpha_hat, summary.omega_hat
    s2 = sigma_L2(a, w)
    if not s2 > 0:
        raise DomainError(
            f"sigma_L^2 = {s2:.3g} <= 0 (alpha_hat={a:.4f}, omega_hat={w:.4f}); "
            "leverages are too unbalanced"
        )
    fl = math.sqrt(summary.n / s2) * (F - 1.0 - C / math.sqrt(summary.K))
    cv = float(dist.normal_quantile(1.0 - tau))
    return TestDecision(statistic=fl, critical_value=cv, strong=bool(fl > cv)), s2


def _check_moments(alpha, omega, kurt_ratio):
    slack = 1e-12
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if not alpha**2 - slack <= omega <= alpha + slack:
        raise DomainError(f"need alpha^2 <= omega <= alpha, got alpha={alpha}, omega={omega}")
    if not kurt_ratio >= 1:
        raise DomainError(f"kurtosis ratio must be >= 1, got {kurt_ratio}")


def sigma_F2(alpha: float, omega: float, kurt_ratio: float = 3.0) -> float:
    """Asymptotic variance of ``sqrt(n)(F - 1 - mu^2/K)``."""
    _check_moments(alpha, omega, kurt_ratio)
    return ((omega - alpha**2) * kurt_ratio + (2 * alpha - 3 * omega + alpha**2)) / (
        alpha**2 * (1 - alpha) ** 2
    )


def _positive_sigma_F2(alpha, omega, kurt_ratio):
    s2 = sigma_F2(alpha, omega, kurt_ratio)
    if not s2 > 0:
        raise DomainError("sigma_F^2 = 0: F is degenerate (kurt = 1 with omega = alpha)")
    return s2


def exact_size_condition(alpha: float, omega: float, kurt_ratio: float = 3.0) -> float:
    """Signed residual that vanishes iff the classical F test has
    asymptotically exact size."""
    _check_moments(alpha, omega, kurt_ratio)
    return (omega - alpha**2) * kurt_ratio + (5 * alpha**2 - 3 * omega - 2 * alpha**3)


def theoretical_classical_size(alpha: float, omega: float, kurt_ratio: float = 3.0,
                               tau: float = 0.05) -> float:
    """Limiting rejection probability of the classical F test at the
    boundary ``mu^2 = mu0^2``: ``Phi(sqrt(2 / (alpha sigma_F^2)) Phi^-1(tau))``."""
    s2 = _positive_sigma_F2(alpha, omega, kurt_ratio)
    return float(dist.normal_cdf(math.sqrt(2.0 / (alpha * s2)) * dist.normal_quantile(tau)))


def fc_asymptotic_size(alpha: float, omega: float, kurt_ratio: float = 3.0,
                       tau: float = 0.05) -> float:
    """Limiting size of the ``F_c`` test, ``Phi((sigma_Fc / sigma_F) Phi^-1(tau))``
    with ``sigma_Fc^2 = 2 / (alpha (1 - alpha))``."""
    s2 = _positive_sigma_F2(alpha, omega, kurt_ratio)
    s2c = 2.0 / (alpha * (1.0 - alpha))
    return float(dist.normal_cdf(math.sqrt(s2c / s2) * dist.normal_quantile(tau)))


def fl_asymptotic_size(alpha: float, omega: float, kurt_ratio: float = 3.0,
                       tau: float = 0.05) -> float:
    """Limiting size of the ``F_l`` test; needs ``sigma_L^2 > 0``."""
    s2 = _positive_sigma_F2(alpha, omega, kurt_ratio)
    s2l = sigma_L2(alpha, omega)
    if not s2l > 0:
        raise DomainError(f"sigma_L^2 = {s2l:.3g} <= 0 at alpha={alpha}, omega={omega}")
    return float(dist.normal_cdf(math.sqrt(s2l / s2) * dist.normal_quantile(tau)))


@dataclass(frozen=True)
class B2SLSResult:
    beta_hat: np.ndarray
    V_hat: float
    W: float
    sigma_uu_hat: float

    def reject(self, tau: float = 0.05) -> bool:
        return bool(self.W > dist.chi2_1_critical(tau))


def b2sls_wald(ds: IVDataset | None, summary: ProjectionSummary, beta0: float,
               ddof: int = 0) -> B2SLSResult:
    """Bias-corrected 2SLS with ``P_b = P_Z - (K/n) I`` and its Wald statistic
    ``W = n (beta_hat - beta0)^2 / V_hat``.

    ``sigma_uu_hat^2 = u'u / (n - ddof)`` from the B2SLS residuals. ``ds`` may
    be None, in which case the residual sum of squares is expanded from the
    cross products in ``summary``.

    An exact fit (residuals numerically zero) gives ``V_hat = 0`` and
    ``W = 0`` when ``beta_hat == beta0`` to rounding, else ``W = inf``. A
    non-positive ``V_hat`` (possible only when ``Y'P_b Y < 0``) also gives
    ``W = inf``.
    """
    if summary.p != 1:
        raise UnsupportedError(f"B2SLS Wald is implemented for p = 1, got p = {summary.p}")
    n, K = summary.n, summary.K
    a = K / n
    YY = float(summary.YY[0, 0])
    YPbY = float(summary.YPY[0, 0]) - a * YY
    YPby = float(summary.YPy[0]) - a * float(summary.Yy[0])
    if abs(YPbY) <= n * EPS * YY:
        raise DegenerateFitError("Y'P_b Y is numerically zero")
    beta = YPby / YPbY

    if ds is not None:
        u = ds.y - ds.Y[:, 0] * beta
        uu = float(u @ u)
        scale = float(ds.y @ ds.y)
    else:
        uu = summary.yy - 2.0 * beta * float(summary.Yy[0]) + beta**2 * YY
        scale = summary.yy
    Qu = summary.Qty - summary.QtY[:, 0] * beta
    uPu = float(Qu @ Qu)
    uMu = uu - uPu
    YMu = float(summary.YMy[0]) - float(summary.YMY[0, 0]) * beta
    sigma2 = uu / (n - ddof)

    if uu <= (64 * EPS) ** 2 * scale:
        tol = 64 * EPS * (abs(beta) + abs(beta0))
        W = 0.0 if abs(beta - beta0) <= tol else math.inf
        return B2SLSResult(beta_hat=np.array([beta]), V_hat=0.0, W=W, sigma_uu_hat=0.0)

    V = (n - K) / YPbY * sigma2 + K / (n - K) * (
        uMu * float(summary.YMY[0, 0]) + YMu**2
    ) / YPbY**2
    W = n * (beta - beta0) ** 2 / V if V > 0 else math.inf
    return B2SLSResult(beta_hat=np.array([beta]), V_hat=V, W=W, sigma_uu_hat=math.sqrt(sigma2))


@dataclass(frozen=True)
class CDStatistics:
    trace: float
    CDc: float | None
    p: int


def cd_trace(summary: ProjectionSummary) -> float:
    """Trace of the Cragg-Donald matrix ``((n-K)/K) (Y'M_Z Y)^-1 Y'P_Z Y``."""
    n, K = summary.n, summary.K
    ymy = summary.YMY
    if np.linalg.cond(ymy) > COND_LIMIT:
        raise DegenerateFitError("Y'M_Z Y is ill-conditioned (condition number > 1e12)")
    try:
        factor = scipy.linalg.cho_factor(ymy)
    except np.linalg.LinAlgError:
        raise DegenerateFitError("Y'M_Z Y is not positive definite") from None
    return (n - K) / K * float(np.trace(scipy.linalg.cho_solve(factor, summary.YPY)))


def cd_c_test(trace: float, K: int, n: int, C: float, p: int = 2, tau: float = 0.05) -> TestDecision:
    """``CD_c = sqrt(K (n - K) / (4 n)) (tr(CD) - 2 - C / sqrt(K))`` for two
    endogenous variables."""
    if p == 1:
        raise UnsupportedError("p = 1: use corrected_F_test (tr(CD) equals F)")
    if p != 2:
        raise UnsupportedError(
            f"p = {p}: the limiting variance of tr(CD) depends on unobservable fourth "
            "moments of the first-stage errors and is only available for p = 2"
        )
    if not 0 < K < n:
        raise DomainError(f"need 0 < K < n, got K={K}, n={n}")
    if C < 0:
        raise DomainError(f"C must be >= 0, got {C}")
    stat = math.sqrt(K * (n - K) / (4.0 * n)) * (trace - 2.0 - C / math.sqrt(K))
    cv = float(dist.normal_quantile(1.0 - tau))
    return TestDecision(statistic=stat, critical_value=cv, strong=bool(stat > cv))


@dataclass(frozen=True)
class BiasInputs:
    """Population inputs to the many-instrument relative bias limit.

    Theta is the limit of ``Pi'Z'Z Pi / n``.
    """

    Theta: np.ndarray
    Sigma_VV: np.ndarray
    Sigma_Vu: np.ndarray
    alpha: float

    def __post_init__(self):
        th = np.atleast_2d(np.asarray(self.Theta, dtype=float))
        sv = np.atleast_2d(np.asarray(self.Sigma_VV, dtype=float))
        su = np.atleast_1d(np.asarray(self.Sigma_Vu, dtype=float))
        p = th.shape[0]
        if th.shape != (p, p) or sv.shape != (p, p) or su.shape != (p,):
            raise DomainError("Theta, Sigma_VV must be p x p and Sigma_Vu length p")
        if not 0 < self.alpha <= 1:
            raise DomainError(f"alpha must lie in (0, 1], got {self.alpha}")
        if np.min(np.linalg.eigvalsh(0.5 * (sv + sv.T))) <= 0:
            raise DomainError("Sigma_VV must be positive definite")
        if np.min(np.linalg.eigvalsh(0.5 * (th + th.T))) < -1e-12 * max(1.0, np.abs(th).max()):
            raise DomainError("Theta must be positive semidefinite")
        object.__setattr__(self, "Theta", th)
        object.__setattr__(self, "Sigma_VV", sv)
        object.__setattr__(self, "Sigma_Vu", su)


@dataclass(frozen=True)
class BiasLimit:
    B2: float
    Bmax2: float


def _sym_sqrt(A):
    w, U = np.linalg.eigh(0.5 * (A + A.T))
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def relative_bias_limit(inputs: BiasInputs) -> BiasLimit:
    """Limit of the squared 2SLS/OLS relative bias and its worst case over
    the direction of ``Sigma_Vu``.

    ``Theta_1 = Theta + alpha Sigma_VV``, ``Theta_2 = Theta + Sigma_VV``;
    ``B^2 = alpha^2 s'Theta_1^-1 Theta_2 Theta_1^-1 s / (s'Theta_2^-1 s)`` and
    ``Bmax^2`` is the top eigenvalue of
    ``alpha^2 Theta_2^1/2 Theta_1^-1 Theta_2 Theta_1^-1 Theta_2^1/2``.
    """
    a = inputs.alpha
    s = inputs.Sigma_Vu
    th1 = inputs.Theta + a * inputs.Sigma_VV
    th2 = inputs.Theta + inputs.Sigma_VV
    if not np.any(s != 0):
        raise SingularityError("Sigma_Vu = 0: the relative bias is 0/0 (undefined)")
    b_2sls = np.linalg.solve(th1, s)
    den = float(s @ np.linalg.solve(th2, s))
    B2 = a**2 * float(b_2sls @ th2 @ b_2sls) / den
    r = _sym_sqrt(th2)
    inv1 = np.linalg.inv(th1)
    M = a**2 * r @ inv1 @ th2 @ inv1 @ r
    Bmax2 = float(np.max(np.linalg.eigvalsh(0.5 * (M + M.T))))
    return BiasLimit(B2=B2, Bmax2=Bmax2)


# --- report -----------------------------------------------------------------

@dataclass
class DiagnosticReport:
    n: int
    K: int
    p: int
    alpha_hat: float
    omega_hat: float
    F: float | None
    Fc: float | None
    Fl: float | None
    C: float | None
    C_source: str
    tau: float
    T: float
    decision: str
    warnings: list = field(default_factory=list)
    statistic: str | None = None
    critical_value: float | None = None
    sigma_L2_hat: float | None = None
    trace: float | None = None
    CDc: float | None = None
    strength_estimate: float | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_cutoff(K: int, n: int, *, C: float | None = None, C0: float | None = None,
                   T: float = 0.10, tau: float = 0.05, use_cache: bool = True):
    """Cutoff ``C`` and its provenance.

    Order: explicit ``C``; an explicit ``C0`` through :func:`c_from_c0`; a
    cached calibration for (K/n, T, tau); ``c_from_c0`` with ``C0 = 2.5``.
    """
    if C is not None:
        if C < 0:
            raise DomainError(f"C must be >= 0, got {C}")
        return float(C), "flag"
    if C0 is not None:
        return dist.c_from_c0(K, n, C0), f"c_from_c0(C0={C0:g})"
    if use_cache:
        cached = dist.load_calibration(K / n, T, tau)
        if cached is not None:
            return cached.C, f"calibration-cache(alpha={K / n:.3f}, reps={cached.reps})"
    return dist.c_from_c0(K, n, dist.MS_C0), f"c_from_c0(C0={dist.MS_C0:g})"


def excess_kurtosis(x) -> float:
    x = np.asarray(x, dtype=float)
    m2 = float(np.mean(x**2))
    return float(np.mean(x**4)) / m2**2 - 3.0 if m2 > 0 else 0.0


def build_report(ds: IVDataset, C: float, C_source: str, tau: float = 0.05,
                 T: float = 0.10) -> DiagnosticReport:
    """Run the many-instrument diagnostics on ``ds`` at cutoff ``C``.

    p = 1 uses ``F_c`` (with ``F_l`` alongside), p = 2 uses ``CD_c``, and
    p >= 3 reports the Cragg-Donald trace without a test decision.
    """
    meta = validate(ds)
    basis = decompose(ds)
    summary = summarize(basis, ds)
    n, K, p = meta.n, meta.K, meta.p
    warnings, notes = [], []
    if meta.many_iv_flag:
        warnings.append(
            f"many instruments: K/n = {meta.alpha_hat:.4f} >= {MANY_IV_THRESHOLD}; "
            "classical F critical values are size-distorted"
        )
    resid = first_stage_residuals(basis, ds)
    kurts = [excess_kurtosis(resid[:, j]) for j in range(p)]
    if any(abs(k) > KURTOSIS_WARN for k in kurts):
        warnings.append(
            "first-stage residual excess kurtosis "
            + ", ".join(f"{k:+.2f}" for k in kurts)
            + " exceeds +/-0.5: with unbalanced instruments the F_c size is distorted "
            "(oversized if leptokurtic, conservative if platykurtic)"
        )
    report = DiagnosticReport(
        n=n, K=K, p=p, alpha_hat=meta.alpha_hat, omega_hat=summary.omega_hat,
        F=None, Fc=None, Fl=None, C=C, C_source=C_source, tau=tau, T=T,
        decision="non-inferential", warnings=warnings, notes=notes,
    )
    if p == 1:
        F = first_stage_F(summary)
        fc = corrected_F_test(F, K, n, C, tau)
        report.F, report.Fc = F, fc.statistic
        try:
            fl, s2 = f_l_test(F, summary, C, tau)
            report.Fl, report.sigma_L2_hat = fl.statistic, s2
        except DomainError as exc:
            warnings.append(f"F_l unavailable: {exc}")
        report.statistic = "Fc"
        report.critical_value = fc.critical_value
        report.decision = fc.decision
        report.strength_estimate = math.sqrt(K) * (F - 1.0)
        return report
    trace = cd_trace(summary)
    report.trace = trace
    report.strength_estimate = math.sqrt(K) * (trace - p)
    if p == 2:
        cd = cd_c_test(trace, K, n, C, p=2, tau=tau)
        report.CDc = cd.statistic
        report.statistic = "CDc"
        report.critical_value = cd.critical_value
        report.decision = cd.decision
        notes.append(
            "CD_c assumes asymptotically balanced instruments or normal first-stage errors"
        )
        return report
    report.C = None
    report.C_source = "none"
    report.statistic = "trace"
    lo, hi = HEURISTIC_INTERVAL
    notes.append(
        f"p = {p}: no test is available; sqrt(K) (tr(CD) - p) = {report.strength_estimate:.3f} "
        f"estimates theta^2/sqrt(K). Values in the heuristic range [{lo:g}, {hi:g}] suggest "
        "many weak instruments (non-inferential)"
    )
    return report
