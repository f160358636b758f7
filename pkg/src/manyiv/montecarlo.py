"""Data-generating processes and the replication engine.

Every replication draws from its own counter-based substream keyed by
``(seed, tag, stream, replication)``, so results do not depend on the
number of worker threads or the order in which replications finish.
"""

from __future__ import annotations

import csv
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import distributions as dist
from . import rng
from .dataset import IVDataset, numerical_rank
from .errors import DomainError, ExperimentAborted, ManyIVError, RankError
from .projection import GroupProjectionBasis, ProjectionBasis, ProjectionSummary

STATISTICS = ("classical_F", "Fc", "Fl", "CDc", "W")
Z_DESIGNS = ("gaussian-iid", "fixed-matrix", "group-dummies")
MAX_FAILURE_RATE = 0.01
_FAMILY = re.compile(r"^\s*([a-z-]+)\s*(?:\(\s*([0-9.eE+-]+)\s*\))?\s*$")


# --- error families -----------------------------------------------------------

def parse_family(name: str) -> tuple[str, float | None]:
    """Split ``"scaled-t(6)"`` into ``("scaled-t", 6.0)`` and check the parameter."""
    m = _FAMILY.match(name)
    if not m:
        raise DomainError(f"cannot parse error family {name!r}")
    family, arg = m.group(1), m.group(2)
    arg = None if arg is None else float(arg)
    if family == "normal":
        if arg is not None:
            raise DomainError("normal takes no parameter")
    elif family == "scaled-t":
        if arg is None or not arg > 4:
            raise DomainError("scaled-t(df) needs df > 4 for a finite fourth moment")
    elif family == "centered-chi-squared":
        if arg is None or not arg > 0:
            raise DomainError("centered-chi-squared(df) needs df > 0")
    elif family == "two-point-mixture":
        if arg is None or not 0 <= arg <= 1:
            raise DomainError("two-point-mixture(a) needs 0 <= a <= 1")
    else:
        raise DomainError(f"unknown error family {family!r}")
    return family, arg


def family_kurtosis(name: str) -> float:
    """``E(e^4)`` for the unit-variance family."""
    family, arg = parse_family(name)
    if family == "normal":
        return 3.0
    if family == "scaled-t":
        return 3.0 + 6.0 / (arg - 4.0)
    if family == "centered-chi-squared":
        return 3.0 + 12.0 / arg
    return 3.0 - 2.0 * arg**4


def draw_errors(name: str, gen: np.random.Generator, size) -> np.ndarray:
    """Mean-zero, unit-variance draws.

    ``two-point-mixture(a)`` is ``a S + sqrt(1 - a^2) N`` with ``S = +-1``
    equiprobable; it is platykurtic for ``a > 0``.
    """
    family, arg = parse_family(name)
    if family == "normal":
        return gen.standard_normal(size)
    if family == "scaled-t":
        return gen.standard_t(arg, size) * math.sqrt((arg - 2.0) / arg)
    if family == "centered-chi-squared":
        return (gen.chisquare(arg, size) - arg) / math.sqrt(2.0 * arg)
    signs = 2.0 * gen.integers(0, 2, size=size) - 1.0
    return arg * signs + math.sqrt(1.0 - arg**2) * gen.standard_normal(size)


# --- specification ------------------------------------------------------------

@dataclass(frozen=True)
class DGPSpec:
    """One design for ``y = Y beta + u``, ``Y = Z Pi + V``.

    ``mu0_sq`` is the exact concentration ``tr(Pi'Z'Z Pi)`` (Sigma_VV = I)
    for the realized ``Z``. The columns of ``V`` and an independent ``e``
    are i.i.d. from ``error_family``; ``u = rho V[:, 0] + sqrt(1 - rho^2) e``.

    ``group_sizes`` lists ``(count, size)`` pairs for the group-dummies
    design; ``z_path`` names a ``.npy`` or comma-separated file for
    ``fixed-matrix``.
    """

    n: int
    K: int
    p: int = 1
    mu0_sq: float = 0.0
    rho: float = 0.0
    beta: tuple = ()
    error_family: str = "normal"
    z_design: str = "gaussian-iid"
    z_path: str | None = None
    group_sizes: tuple = ()
    redraw_Z: bool = True

    def __post_init__(self):
        if not (self.n > self.K >= 1 and self.p >= 1):
            raise DomainError(f"need n > K >= 1 and p >= 1, got n={self.n}, K={self.K}, p={self.p}")
        if not self.mu0_sq >= 0:
            raise DomainError(f"mu0_sq must be >= 0, got {self.mu0_sq}")
        if not -1 <= self.rho <= 1:
            raise DomainError(f"rho must lie in [-1, 1], got {self.rho}")
        beta = tuple(float(b) for b in self.beta) or (1.0,) * self.p
        if len(beta) != self.p:
            raise DomainError(f"beta has length {len(beta)}, expected p={self.p}")
        object.__setattr__(self, "beta", beta)
        parse_family(self.error_family)
        if self.z_design not in Z_DESIGNS:
            raise DomainError(f"z_design must be one of {Z_DESIGNS}")
        if self.p > self.K:
            raise DomainError("need p <= K for a full-rank first stage")
        if self.z_design == "group-dummies":
            sizes = tuple((int(c), int(s)) for c, s in self.group_sizes)
            if sum(c for c, _ in sizes) != self.K or sum(c * s for c, s in sizes) != self.n:
                raise DomainError("group_sizes must give K groups covering n observations")
            object.__setattr__(self, "group_sizes", sizes)
        if self.z_design == "fixed-matrix" and not self.z_path:
            raise DomainError("fixed-matrix design needs z_path")

    @property
    def kurt_ratio(self) -> float:
        return family_kurtosis(self.error_family)

    @property
    def alpha(self) -> float:
        return self.K / self.n

    @classmethod
    def from_dict(cls, d: dict) -> "DGPSpec":
        d = dict(d)
        d["beta"] = tuple(d.get("beta", ()))
        d["group_sizes"] = tuple(tuple(g) for g in d.get("group_sizes", ()))
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    """A replication experiment on one design.

    ``C`` is the cutoff for the corrected statistics; when None it is
    ``c_from_c0(K, n, C0)``. ``stream`` separates the random streams of
    cells that share a seed.
    """

    dgp: DGPSpec
    reps: int = 2000
    tau: float = 0.05
    statistics: tuple = ("classical_F",)
    seed: int = 0
    threads: int = 1
    C: float | None = None
    C0: float = dist.MS_C0
    beta0: float | None = None
    stream: int = 0

    def __post_init__(self):
        if self.reps < 100:
            raise DomainError(f"reps must be >= 100, got {self.reps}")
        if not 0 < self.tau < 1:
            raise DomainError(f"tau must lie in (0, 1), got {self.tau}")
        stats = tuple(self.statistics)
        if not stats:
            raise DomainError("statistics list is empty")
        bad = [s for s in stats if s not in STATISTICS]
        if bad:
            raise DomainError(f"unknown statistics {bad}; choose from {STATISTICS}")
        object.__setattr__(self, "statistics", stats)
        if self.dgp.p != 1 and set(stats) - {"CDc"}:
            raise DomainError("classical_F, Fc, Fl and W need p = 1")
        if self.dgp.p != 2 and "CDc" in stats:
            raise DomainError("CDc needs p = 2")
        if self.threads < 1:
            raise DomainError("threads must be >= 1")

    @property
    def cutoff(self) -> float:
        if self.C is not None:
            return float(self.C)
        return dist.c_from_c0(self.dgp.K, self.dgp.n, self.C0)


def boundary_spec(spec: DGPSpec, C: float) -> DGPSpec:
    """Move ``spec`` to the corrected-test null boundary ``mu^2 / sqrt(K) = C``."""
    return replace(spec, mu0_sq=C * math.sqrt(spec.K))


# --- generation ---------------------------------------------------------------

def _pi_direction(K, p):
    """``1_K / sqrt(K)`` for p = 1; indicators of p contiguous instrument blocks otherwise."""
    if p == 1:
        return np.full((K, 1), 1.0 / math.sqrt(K))
    D = np.zeros((K, p))
    for j, block in enumerate(np.array_split(np.arange(K), p)):
        D[block, j] = 1.0
    return D


def _scale_pi(D, gram, mu0_sq):
    """Scale ``D`` so that ``Pi'Z'Z Pi = (mu0_sq / p) I`` exactly for ``gram = D'Z'Z D``."""
    p = D.shape[1]
    if mu0_sq == 0:
        return np.zeros_like(D)
    w, U = np.linalg.eigh(0.5 * (gram + gram.T))
    inv_sqrt = (U / np.sqrt(w)) @ U.T
    return D @ inv_sqrt * math.sqrt(mu0_sq / p)


class _Design:
    """Realized instruments, the first-stage mean ``Z Pi`` and a projection basis."""

    def __init__(self, spec: DGPSpec, gen: np.random.Generator | None):
        n, K, p = spec.n, spec.K, spec.p
        D = _pi_direction(K, p)
        if spec.z_design == "group-dummies":
            labels = np.repeat(np.arange(K), [s for c, s in spec.group_sizes for _ in range(c)])
            self.basis = GroupProjectionBasis(labels)
            sizes = self.basis.sizes
            self.Z = None
            self.groups = labels
            gram = D.T @ (sizes[:, None] * D)
            self.Pi = _scale_pi(D, gram, spec.mu0_sq)
            self.ZPi = self.Pi[labels]
        else:
            if spec.z_design == "fixed-matrix":
                Z = load_matrix(spec.z_path)
                if Z.shape != (n, K):
                    raise DomainError(f"{spec.z_path} has shape {Z.shape}, expected {(n, K)}")
            else:
                Z = gen.standard_normal((n, K))
            rank, q = numerical_rank(Z)
            if rank < K:
                raise RankError(rank, K)
            self.Z = Z
            self.groups = None
            self.basis = ProjectionBasis(q)
            ZD = Z @ D
            self.Pi = _scale_pi(D, ZD.T @ ZD, spec.mu0_sq)
            self.ZPi = Z @ self.Pi
        self.QtZPi = self.basis.qt(self.ZPi)
        self.leverages = self.basis.leverages()
        self.omega_hat = float(np.mean(self.leverages**2))

    @property
    def dense_Z(self):
        if self.Z is not None:
            return self.Z
        return self.basis.Q * np.sqrt(self.basis.sizes)


def load_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _design(spec, seed, stream, rep, retry_ok=True):
    if spec.z_design != "gaussian-iid":
        return _Design(spec, None)
    gen = rng.substream(seed, rng.DESIGN, stream, rep)
    try:
        return _Design(spec, gen)
    except RankError:
        if not retry_ok:
            raise
        return _Design(spec, rng.substream(seed, rng.RETRY, stream, rep))


def _outcomes(spec, design, gen):
    n, p = spec.n, spec.p
    V = draw_errors(spec.error_family, gen, (n, p))
    e = draw_errors(spec.error_family, gen, n)
    u = spec.rho * V[:, 0] + math.sqrt(1.0 - spec.rho**2) * e
    Y = design.ZPi + V
    y = Y @ np.asarray(spec.beta) + u
    return y, Y


def generate(spec: DGPSpec, seed: int) -> IVDataset:
    """Draw one dataset. A rank-deficient ``Z`` is redrawn once from a fresh substream."""
    design = _design(spec, seed, 0, 0)
    y, Y = _outcomes(spec, design, rng.substream(seed, rng.ERRORS, 0, 0))
    return IVDataset(y=y, Y=Y, Z=design.dense_Z)


def realized_concentration(ds: IVDataset, Pi) -> float:
    ZPi = ds.Z @ np.atleast_2d(np.asarray(Pi, dtype=float).reshape(ds.K, -1))
    return float(np.trace(ZPi.T @ ZPi))


# --- replication engine -------------------------------------------------------

@dataclass
class SizeRow:
    n: int
    K: int
    mu0_sq: float
    statistic: str
    rejections: int
    reps: int
    rate: float
    mc_se: float
    prediction: float | None
    critical_value: float | None
    C: float | None
    corrected: bool
    failures: int = 0


@dataclass
class SizeTable:
    rows: list = field(default_factory=list)

    def to_records(self) -> list:
        return [asdict(r) for r in self.rows]

    def write_csv(self, path) -> None:
        _write_records(self.to_records(), path, [f.name for f in SizeRow.__dataclass_fields__.values()])

    def to_json(self) -> str:
        return json.dumps({"rows": self.to_records()}, sort_keys=True, indent=2, allow_nan=False)


def _write_records(records, path, fields):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in fields})


def _summary(spec, design, y, Y):
    return ProjectionSummary.from_products(
        QtY=design.basis.qt(Y),
        Qty=design.basis.qt(y),
        YY=Y.T @ Y,
        Yy=Y.T @ y,
        yy=float(y @ y),
        leverages=design.leverages,
        n=spec.n,
        omega_hat=design.omega_hat,
    )


def _replicate(config, fixed, rep):
    """Rejection indicators for one replication, keyed by statistic."""
    spec = config.dgp
    design = fixed if fixed is not None else _design(spec, config.seed, config.stream, rep)
    y, Y = _outcomes(spec, design, rng.substream(config.seed, rng.ERRORS, config.stream, rep))
    s = _summary(spec, design, y, Y)
    n, K, tau, C = spec.n, spec.K, config.tau, config.cutoff
    out = {}
    F = dg.first_stage_F(s) if {"classical_F", "Fc", "Fl"} & set(config.statistics) else None
    for name in config.statistics:
        if name == "classical_F":
            out[name] = F > _classical_cv(K, spec.mu0_sq, tau)
        elif name == "Fc":
            out[name] = dg.corrected_F_test(F, K, n, C, tau).strong
        elif name == "Fl":
            out[name] = dg.f_l_test(F, s, C, tau)[0].strong
        elif name == "CDc":
            out[name] = dg.cd_c_test(dg.cd_trace(s), K, n, C, spec.p, tau).strong
        elif name == "W":
            beta0 = spec.beta[0] if config.beta0 is None else config.beta0
            out[name] = dg.b2sls_wald(None, s, beta0).reject(tau)
    return out


_CV_CACHE: dict = {}


def _classical_cv(K, mu0_sq, tau):
    key = (K, mu0_sq, tau)
    if key not in _CV_CACHE:
        _CV_CACHE[key] = dist.noncentral_chisq_quantile(K, mu0_sq, tau) / K
    return _CV_CACHE[key]


def _run_reps(config: ExperimentConfig):
    """Per-replication outcomes in replication order; None marks a failure."""
    spec = config.dgp
    fixed = None
    if not spec.redraw_Z or spec.z_design != "gaussian-iid":
        fixed = _design(spec, config.seed, config.stream, 0)

    def task(rep):
        try:
            return _replicate(config, fixed, rep)
        except (ManyIVError, np.linalg.LinAlgError):
            return None

    if config.threads == 1:
        results = [task(r) for r in range(config.reps)]
    else:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(task, range(config.reps)))
    failures = sum(r is None for r in results)
    if failures > MAX_FAILURE_RATE * config.reps:
        raise ExperimentAborted(
            f"{failures} of {config.reps} replications failed (limit {MAX_FAILURE_RATE:.0%})"
        )
    return results, failures, fixed


def _prediction(config, name, omega):
    spec = config.dgp
    a, kurt, tau = spec.alpha, spec.kurt_ratio, config.tau
    omega = min(max(omega, a * a), a)
    formulas = {
        "classical_F": dg.theoretical_classical_size,
        "Fc": dg.fc_asymptotic_size,
        "Fl": dg.fl_asymptotic_size,
    }
    if name == "CDc":
        return tau
    if name not in formulas:
        return None
    try:
        return formulas[name](a, omega, kurt, tau)
    except DomainError:
        return None


def run_size_experiment(config: ExperimentConfig) -> SizeTable:
    """Rejection rates of the requested statistics at ``config.dgp``.

    Decisions use the classical critical value at ``dgp.mu0_sq`` and the
    cutoff ``config.cutoff`` for the corrected statistics; put the DGP on
    the relevant boundary (see :func:`boundary_spec`) to measure size.
    Predictions are the limiting sizes at the design's leverage balance
    and error kurtosis.
    """
    results, failures, fixed = _run_reps(config)
    ok = [r for r in results if r is not None]
    spec = config.dgp
    if fixed is not None:
        omega = fixed.omega_hat
    else:
        omega = spec.alpha**2
    table = SizeTable()
    for name in config.statistics:
        k = sum(bool(r[name]) for r in ok)
        m = len(ok)
        rate = k / m
        corrected = name in ("Fc", "Fl", "CDc")
        cv = None
        if name == "classical_F":
            cv = _classical_cv(spec.K, spec.mu0_sq, config.tau)
        elif name == "W":
            cv = dist.chi2_1_critical(config.tau)
        elif corrected:
            cv = float(dist.normal_quantile(1 - config.tau))
        table.rows.append(SizeRow(
            n=spec.n, K=spec.K, mu0_sq=spec.mu0_sq, statistic=name, rejections=k, reps=m,
            rate=rate, mc_se=math.sqrt(rate * (1 - rate) / m),
            prediction=_prediction(config, name, omega) if spec.p == 1 or name == "CDc" else None,
            critical_value=cv, C=config.cutoff if corrected else None, corrected=corrected,
            failures=failures,
        ))
    return table


@dataclass
class WaldSizeResult:
    rate: float
    mc_se: float
    reps: int
    limit: float
    m: float
    rho_limit: float
    failures: int = 0


def run_wald_size(config: ExperimentConfig, beta0: float | None = None,
                  limit_reps: int = 200_000) -> WaldSizeResult:
    """Finite-sample B2SLS-Wald rejection rate next to its many-instrument limit.

    The limit is :func:`wald_limit_rejection` at
    ``m = sqrt((1 - alpha) / 2) mu0^2 / sqrt(K)`` and the limiting
    correlation implied by ``dgp.rho`` with unit error variances.
    """
    spec = config.dgp
    if spec.p != 1:
        raise DomainError("run_wald_size needs p = 1")
    cfg = replace(config, statistics=("W",), beta0=beta0 if beta0 is not None else config.beta0)
    results, failures, _ = _run_reps(cfg)
    ok = [r for r in results if r is not None]
    rate = sum(bool(r["W"]) for r in ok) / len(ok)
    m = dist.mixture_mean(spec.alpha, spec.mu0_sq / math.sqrt(spec.K))
    rho_lim = dist.limit_correlation(1.0, 1.0, spec.rho)
    limit = dist.wald_limit_rejection(dist.MixtureParams(m, rho_lim), config.tau, limit_reps,
                                      config.seed)
    return WaldSizeResult(rate=rate, mc_se=math.sqrt(rate * (1 - rate) / len(ok)), reps=len(ok),
                          limit=limit, m=m, rho_limit=rho_lim, failures=failures)


# --- relative bias --------------------------------------------------------------

@dataclass
class BiasPoint:
    mu_sq: float
    B_SY: float
    B_SY_se: float
    B_many: float


@dataclass
class BiasCurve:
    n: int
    K_fixed: int
    K_many: int
    points: list = field(default_factory=list)

    def to_records(self):
        return [asdict(p) for p in self.points]

    def write_csv(self, path):
        _write_records(self.to_records(), path, ["mu_sq", "B_SY", "B_SY_se", "B_many"])

    def write_gnuplot(self, path):
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(f"# relative bias; n={self.n} K_fixed={self.K_fixed} K_many={self.K_many}\n")
            fh.write("# mu_sq B_SY B_SY_se B_many\n")
            for p in self.points:
                fh.write(f"{p.mu_sq!r} {p.B_SY!r} {p.B_SY_se!r} {p.B_many!r}\n")

    def to_json(self):
        return json.dumps({"n": self.n, "K_fixed": self.K_fixed, "K_many": self.K_many,
                           "points": self.to_records()}, sort_keys=True, indent=2)


def fixed_k_bias(mu_sq: float, K: int, reps: int, gen: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo ``|E[(lam + xi)'xi / ((lam + xi)'(lam + xi))]|`` with ``lam'lam = mu_sq``.

    Returns the estimate and its standard error.
    """
    lam = np.zeros(K)
    lam[0] = math.sqrt(mu_sq)
    total, total_sq, done = 0.0, 0.0, 0
    while done < reps:
        b = min(1 << 15, reps - done)
        xi = gen.standard_normal((b, K))
        s = xi + lam
        r = np.einsum("ij,ij->i", s, xi) / np.einsum("ij,ij->i", s, s)
        total += float(r.sum())
        total_sq += float((r * r).sum())
        done += b
    mean = total / reps
    var = max(total_sq / reps - mean**2, 0.0)
    return abs(mean), math.sqrt(var / reps)


def run_bias_curve(config: ExperimentConfig, mu_grid, fixed_K: int | None = None) -> BiasCurve:
    """Relative bias along ``mu_grid``: the fixed-K expectation by Monte Carlo
    with ``config.reps`` draws per point, and the many-instrument limit with
    ``Theta = mu^2 / n`` and ``alpha = K / n`` from ``config.dgp``."""
    spec = config.dgp
    if spec.p != 1:
        raise DomainError("run_bias_curve needs p = 1")
    grid = [float(m) for m in mu_grid]
    if not grid:
        raise DomainError("mu_grid is empty")
    K_fixed = spec.K if fixed_K is None else int(fixed_K)
    curve = BiasCurve(n=spec.n, K_fixed=K_fixed, K_many=spec.K)
    for i, mu in enumerate(grid):
        b_sy, se = fixed_k_bias(mu, K_fixed, config.reps,
                                rng.substream(config.seed, rng.BIAS, config.stream, i))
        lim = dg.relative_bias_limit(dg.BiasInputs(Theta=[[mu / spec.n]], Sigma_VV=[[1.0]],
                                                   Sigma_Vu=[1.0], alpha=spec.alpha))
        curve.points.append(BiasPoint(mu_sq=mu, B_SY=b_sy, B_SY_se=se, B_many=math.sqrt(lim.B2)))
    return curve


@dataclass
class BiasRatioResult:
    ratio: float
    bias_2sls: float
    bias_ols: float
    reps: int


def run_bias_ratio(config: ExperimentConfig) -> BiasRatioResult:
    """Monte Carlo ``E(b_2SLS - beta) / E(b_OLS - beta)`` for p = 1."""
    spec = config.dgp
    if spec.p != 1:
        raise DomainError("run_bias_ratio needs p = 1")
    fixed = None
    if not spec.redraw_Z or spec.z_design != "gaussian-iid":
        fixed = _design(spec, config.seed, config.stream, 0)
    b2, bo = 0.0, 0.0
    for rep in range(config.reps):
        design = fixed if fixed is not None else _design(spec, config.seed, config.stream, rep)
        y, Y = _outcomes(spec, design, rng.substream(config.seed, rng.ERRORS, config.stream, rep))
        s = _summary(spec, design, y, Y)
        b2 += float(s.YPy[0] / s.YPY[0, 0]) - spec.beta[0]
        bo += float(s.Yy[0] / s.YY[0, 0]) - spec.beta[0]
    return BiasRatioResult(ratio=b2 / bo, bias_2sls=b2 / config.reps, bias_ols=bo / config.reps,
                           reps=config.reps)


# --- config files ---------------------------------------------------------------

def config_schema() -> dict:
    from importlib import resources

    return json.loads(resources.files("manyiv").joinpath("schemas/experiment_config.json").read_text())


def bundled_config(name: str) -> dict:
    from importlib import resources

    return json.loads(resources.files("manyiv").joinpath(f"configs/{name}").read_text())


def validate_config(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` violates the experiment schema."""
    import jsonschema

    jsonschema.validate(doc, config_schema())


def expand_config(doc: dict) -> list[ExperimentConfig]:
    """Cartesian expansion of ``doc["grid"]`` over the base DGP.

    ``mu0_sq: "boundary"`` places the design at ``mu^2 = C sqrt(K)``.
    """
    validate_config(doc)
    base = dict(doc["dgp"])
    grid = doc.get("grid", {})
    keys = sorted(grid)
    combos = [{}]
    for k in keys:
        combos = [dict(c, **{k: v}) for c in combos for v in grid[k]]
    out = []
    for i, combo in enumerate(combos):
        d = dict(base, **combo)
        boundary = d.get("mu0_sq") == "boundary"
        if boundary:
            d["mu0_sq"] = 0.0
        spec = DGPSpec.from_dict(d)
        cfg = ExperimentConfig(
            dgp=spec, reps=doc.get("reps", 2000), tau=doc.get("tau", 0.05),
            statistics=tuple(doc.get("statistics", ["classical_F"])), seed=doc.get("seed", 0),
            threads=doc.get("threads", 1), C=doc.get("C"), C0=doc.get("C0", dist.MS_C0),
            beta0=doc.get("beta0"), stream=i,
        )
        if boundary:
            cfg = replace(cfg, dgp=boundary_spec(spec, cfg.cutoff))
        out.append(cfg)
    return out


def run_config(doc: dict, out_dir, threads: int | None = None) -> list[Path]:
    """Run every cell of an experiment document and write CSV/JSON outputs to ``out_dir``.

    Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = doc.get("name", "experiment")
    kind = doc.get("kind", "size")
    configs = expand_config(doc)
    if threads is not None:
        configs = [replace(c, threads=threads) for c in configs]
    paths = []
    if kind == "size":
        table = SizeTable()
        for cfg in configs:
            table.rows.extend(run_size_experiment(cfg).rows)
        table.write_csv(out_dir / f"{name}.csv")
        (out_dir / f"{name}.json").write_text(table.to_json() + "\n")
        paths += [out_dir / f"{name}.csv", out_dir / f"{name}.json"]
    elif kind == "bias":
        for i, cfg in enumerate(configs):
            curve = run_bias_curve(cfg, doc["mu_grid"], doc.get("fixed_K"))
            stem = name if len(configs) == 1 else f"{name}_{i}"
            curve.write_csv(out_dir / f"{stem}.csv")
            curve.write_gnuplot(out_dir / f"{stem}.dat")
            (out_dir / f"{stem}.json").write_text(curve.to_json() + "\n")
            paths += [out_dir / f"{stem}.{ext}" for ext in ("csv", "dat", "json")]
    elif kind == "wald":
        records = []
        for cfg in configs:
            r = run_wald_size(cfg)
            records.append(dict(asdict(r), n=cfg.dgp.n, K=cfg.dgp.K, mu0_sq=cfg.dgp.mu0_sq,
                                rho=cfg.dgp.rho))
        fields = ["n", "K", "mu0_sq", "rho", "rate", "mc_se", "reps", "limit", "m",
                  "rho_limit", "failures"]
        _write_records(records, out_dir / f"{name}.csv", fields)
        (out_dir / f"{name}.json").write_text(
            json.dumps({"rows": records}, sort_keys=True, indent=2) + "\n")
        paths += [out_dir / f"{name}.csv", out_dir / f"{name}.json"]
    return paths
