import json
import math

import jsonschema
import numpy as np
import pytest
from scipy import stats

from manyiv import distributions as dist
from manyiv import montecarlo as mc
from manyiv.errors import DomainError, ExperimentAborted

from conftest import SEED


# --- error families ---

@pytest.mark.parametrize(
    "name, kurt",
    [
        ("normal", 3.0),
        ("scaled-t(6)", 6.0),
        ("centered-chi-squared(8)", 4.5),
        ("two-point-mixture(0.95)", 3 - 2 * 0.95**4),
    ],
)
def test_family_kurtosis(name, kurt):
    assert mc.family_kurtosis(name) == pytest.approx(kurt)


@pytest.mark.parametrize(
    "name, tol",
    [("normal", 0.05), ("centered-chi-squared(8)", 0.15), ("two-point-mixture(0.95)", 0.02)],
)
def test_family_moments_by_simulation(name, tol):
    x = mc.draw_errors(name, np.random.default_rng(SEED), 10**6)
    assert x.mean() == pytest.approx(0.0, abs=5e-3)
    assert x.var() == pytest.approx(1.0, abs=5e-3)
    assert stats.kurtosis(x, fisher=False) == pytest.approx(mc.family_kurtosis(name), abs=tol)


def test_scaled_t_unit_variance():
    x = mc.draw_errors("scaled-t(6)", np.random.default_rng(SEED), 10**6)
    assert x.var() == pytest.approx(1.0, abs=0.01)


@pytest.mark.parametrize(
    "name",
    ["scaled-t(4)", "scaled-t", "laplace", "normal(2)", "two-point-mixture(1.5)"],
)
def test_bad_families(name):
    with pytest.raises(DomainError):
        mc.parse_family(name)


# --- generation ---

def test_null_strength_gives_zero_pi():
    design = mc._design(mc.DGPSpec(n=200, K=20), SEED, 0, 0)
    assert np.all(design.Pi == 0)


@pytest.mark.parametrize(
    "spec",
    [
        mc.DGPSpec(n=500, K=50, mu0_sq=37.5),
        mc.DGPSpec(n=500, K=50, p=2, mu0_sq=80.0),
        mc.DGPSpec(n=600, K=300, mu0_sq=12.0, z_design="group-dummies",
                   group_sizes=((200, 1), (100, 4))),
    ],
)
def test_realized_concentration_is_exact(spec):
    design = mc._design(spec, SEED, 0, 0)
    Z = design.dense_Z
    G = design.Pi.T @ Z.T @ Z @ design.Pi
    assert np.trace(G) == pytest.approx(spec.mu0_sq, rel=1e-8)
    if spec.p == 2:
        assert abs(G[0, 1]) < 1e-8 * spec.mu0_sq


def test_generate_deterministic_and_consistent():
    spec = mc.DGPSpec(n=300, K=30, mu0_sq=20, rho=0.5)
    a, b = mc.generate(spec, 4), mc.generate(spec, 4)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.Z, b.Z)
    design = mc._design(spec, 4, 0, 0)
    assert mc.realized_concentration(a, design.Pi) == pytest.approx(20, rel=1e-8)
    assert not np.array_equal(mc.generate(spec, 5).y, a.y)


def test_first_stage_errors_are_normal():
    spec = mc.DGPSpec(n=1000, K=300, mu0_sq=0.0)
    pooled = np.concatenate([mc.generate(spec, s).Y[:, 0] for s in range(100)])
    assert pooled.size == 10**5
    assert stats.kurtosis(pooled, fisher=False) == pytest.approx(3.0, abs=0.1)


def test_fixed_matrix_design(tmp_path):
    Z = np.random.default_rng(2).standard_normal((100, 4))
    np.save(tmp_path / "z.npy", Z)
    spec = mc.DGPSpec(n=100, K=4, mu0_sq=3, z_design="fixed-matrix", z_path=str(tmp_path / "z.npy"))
    np.testing.assert_array_equal(mc.generate(spec, 1).Z, Z)
    np.savetxt(tmp_path / "z.csv", Z, delimiter=",")
    spec = mc.DGPSpec(n=100, K=4, z_design="fixed-matrix", z_path=str(tmp_path / "z.csv"))
    np.testing.assert_allclose(mc.generate(spec, 1).Z, Z)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n=10, K=10),
        dict(n=100, K=10, mu0_sq=-1),
        dict(n=100, K=10, rho=1.5),
        dict(n=100, K=10, beta=(1.0, 2.0)),
        dict(n=100, K=10, z_design="group-dummies", group_sizes=((5, 2),)),
        dict(n=100, K=10, z_design="fixed-matrix"),
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(DomainError):
        mc.DGPSpec(**kwargs)


def test_config_validation():
    spec = mc.DGPSpec(n=100, K=10)
    with pytest.raises(DomainError):
        mc.ExperimentConfig(dgp=spec, reps=50)
    with pytest.raises(DomainError):
        mc.ExperimentConfig(dgp=spec, statistics=())
    with pytest.raises(DomainError):
        mc.ExperimentConfig(dgp=spec, statistics=("CDc",))
    with pytest.raises(DomainError):
        mc.ExperimentConfig(dgp=mc.DGPSpec(n=100, K=10, p=2), statistics=("Fc",))


# --- engine ---

def test_thread_count_does_not_change_results():
    spec = mc.DGPSpec(n=400, K=40, mu0_sq=30, rho=0.3)
    cfg = mc.ExperimentConfig(dgp=spec, reps=300, seed=SEED,
                              statistics=("classical_F", "Fc", "Fl", "W"))
    one = mc.run_size_experiment(cfg).to_json()
    four = mc.run_size_experiment(mc.replace(cfg, threads=4)).to_json()
    assert one == four


def test_fixed_Z_matches_exact_noncentral_F():
    spec = mc.DGPSpec(n=1000, K=300, mu0_sq=5.0, redraw_Z=False)
    row = mc.run_size_experiment(mc.ExperimentConfig(dgp=spec, reps=5000, seed=SEED)).rows[0]
    exact = stats.ncf.sf(row.critical_value, 300, 700, 5.0)
    assert abs(row.rate - exact) < 4 * math.sqrt(exact * (1 - exact) / 5000)
    assert row.mc_se == pytest.approx(math.sqrt(row.rate * (1 - row.rate) / row.reps))


def test_redraw_Z_mode_runs():
    spec = mc.DGPSpec(n=200, K=60, mu0_sq=5.0, redraw_Z=True)
    row = mc.run_size_experiment(mc.ExperimentConfig(dgp=spec, reps=400, seed=SEED)).rows[0]
    exact = stats.ncf.sf(row.critical_value, 60, 140, 5.0)
    assert abs(row.rate - exact) < 4 * math.sqrt(exact * (1 - exact) / 400)


def test_mc_error_shrinks_with_reps():
    spec = mc.boundary_spec(mc.DGPSpec(n=1000, K=300, redraw_Z=False), dist.c_from_c0(300, 1000))
    se = [mc.run_size_experiment(mc.ExperimentConfig(dgp=spec, reps=r, seed=SEED,
                                                     statistics=("Fc",))).rows[0].mc_se
          for r in (500, 2000)]
    assert se[1] < se[0]


def test_failures_counted_and_aborted(monkeypatch):
    spec = mc.DGPSpec(n=100, K=10)
    cfg = mc.ExperimentConfig(dgp=spec, reps=200, seed=SEED)
    real = mc._replicate

    def flaky(every):
        def inner(config, fixed, rep):
            if rep % every == 0:
                raise np.linalg.LinAlgError("boom")
            return real(config, fixed, rep)
        return inner

    monkeypatch.setattr(mc, "_replicate", flaky(200))
    assert mc.run_size_experiment(cfg).rows[0].failures == 1
    monkeypatch.setattr(mc, "_replicate", flaky(10))
    with pytest.raises(ExperimentAborted):
        mc.run_size_experiment(cfg)


def test_classical_size_increases_with_K():
    rates = []
    for K in (300, 500, 800):
        spec = mc.DGPSpec(n=1000, K=K, mu0_sq=5.0, redraw_Z=False)
        rates.append(mc.run_size_experiment(mc.ExperimentConfig(dgp=spec, reps=2000, seed=SEED)).rows[0].rate)
    assert rates[0] < rates[1] < rates[2]


def test_predictions_reported():
    spec = mc.DGPSpec(n=1000, K=300, mu0_sq=5.0, redraw_Z=False)
    rows = mc.run_size_experiment(mc.ExperimentConfig(dgp=spec, reps=200, seed=SEED,
                                                      statistics=("classical_F", "Fc"))).rows
    assert rows[0].prediction == pytest.approx(0.0844, abs=1e-3)
    assert rows[1].prediction == pytest.approx(0.05, abs=1e-3)


# --- Wald ---

def test_wald_strong_spec_near_nominal():
    spec = mc.DGPSpec(n=1000, K=300, mu0_sq=20 * math.sqrt(300), rho=0.9, redraw_Z=False)
    res = mc.run_wald_size(mc.ExperimentConfig(dgp=spec, reps=2000, seed=SEED))
    assert abs(res.rate - 0.05) <= 0.02
    assert res.rho_limit == pytest.approx(math.sqrt(2) * 0.9 / math.sqrt(1 + 0.81))


def test_wald_weak_spec_matches_limit():
    spec = mc.DGPSpec(n=1000, K=300, mu0_sq=0.0, rho=1.0, redraw_Z=False)
    res = mc.run_wald_size(mc.ExperimentConfig(dgp=spec, reps=2000, seed=SEED))
    assert abs(res.rate - res.limit) <= 0.02
    spec0 = mc.DGPSpec(n=1000, K=300, mu0_sq=0.0, rho=0.0, redraw_Z=False)
    res0 = mc.run_wald_size(mc.ExperimentConfig(dgp=spec0, reps=2000, seed=SEED))
    assert res0.rate <= res.rate + 0.02


# --- bias ---

def test_fixed_k_bias_at_zero_is_one():
    b, se = mc.fixed_k_bias(0.0, 5, 10_000, np.random.default_rng(0))
    assert b == pytest.approx(1.0, abs=1e-12)


def test_bias_curve_shapes():
    spec = mc.DGPSpec(n=1000, K=500)
    cfg = mc.ExperimentConfig(dgp=spec, reps=100_000, seed=SEED)
    curve = mc.run_bias_curve(cfg, [0, 5, 20, 80, 320], fixed_K=5)
    b_sy = [p.B_SY for p in curve.points]
    assert all(b < a for a, b in zip(b_sy, b_sy[1:]))
    for p in curve.points:
        theta = p.mu_sq / 1000
        assert p.B_many == pytest.approx(0.5 * (theta + 1) / (theta + 0.5), rel=1e-12)
    assert curve.points[0].B_many == pytest.approx(1.0)
    assert mc.run_bias_curve(cfg, [1e6]).points[0].B_many < 0.6


def test_bias_ratio_matches_limit():
    # Theta = 1, alpha = 0.5, Sigma_Vu = 0.3: the limit is 2/3
    n = 4000
    spec = mc.DGPSpec(n=n, K=n // 2, mu0_sq=float(n), rho=0.3, z_design="group-dummies",
                      group_sizes=((n // 2, 2),))
    res = mc.run_bias_ratio(mc.ExperimentConfig(dgp=spec, reps=200, seed=SEED))
    assert res.ratio == pytest.approx(2 / 3, rel=0.05)


# --- config files and writers ---

def test_bundled_configs_validate():
    for name in ("table1.json", "figure1.json"):
        mc.validate_config(mc.bundled_config(name))
    cells = mc.expand_config(mc.bundled_config("table1.json"))
    assert sorted((c.dgp.K, c.dgp.mu0_sq) for c in cells) == sorted(
        (K, m) for K in (5, 300, 500, 800) for m in (5, 500))
    assert len({c.stream for c in cells}) == len(cells)


def test_boundary_keyword():
    doc = {"dgp": {"n": 1000, "K": 300, "mu0_sq": "boundary"}, "statistics": ["Fc"], "C": 4.0}
    (cfg,) = mc.expand_config(doc)
    assert cfg.dgp.mu0_sq == pytest.approx(4.0 * math.sqrt(300))


@pytest.mark.parametrize(
    "doc",
    [
        {"dgp": {"n": 100, "K": 10}, "statistics": []},
        {"dgp": {"n": 100}},
        {"dgp": {"n": 100, "K": 10}, "reps": 5},
        {"dgp": {"n": 100, "K": 10, "error_family": "cauchy"}},
    ],
)
def test_config_schema_violations(doc):
    with pytest.raises(jsonschema.ValidationError):
        mc.validate_config(doc)


def test_run_config_writes_outputs(tmp_path):
    doc = {"name": "t", "kind": "size", "reps": 200, "seed": 1, "statistics": ["classical_F", "Fc"],
           "dgp": {"n": 200, "K": 40, "redraw_Z": False}, "grid": {"mu0_sq": [0, 5]}}
    paths = mc.run_config(doc, tmp_path)
    assert {p.name for p in paths} == {"t.csv", "t.json"}
    rows = json.loads((tmp_path / "t.json").read_text())["rows"]
    assert len(rows) == 4
    assert (tmp_path / "t.csv").read_text().splitlines()[0].startswith("n,K,mu0_sq,statistic")


def test_bias_config_writes_gnuplot(tmp_path):
    doc = {"name": "b", "kind": "bias", "reps": 1000, "fixed_K": 5, "dgp": {"n": 1000, "K": 500},
           "mu_grid": [0, 10]}
    mc.run_config(doc, tmp_path)
    lines = (tmp_path / "b.dat").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 4


def test_wald_config(tmp_path):
    doc = {"name": "w", "kind": "wald", "reps": 200, "dgp": {"n": 300, "K": 60, "rho": 0.5,
           "mu0_sq": 50, "redraw_Z": False}}
    mc.run_config(doc, tmp_path)
    rows = json.loads((tmp_path / "w.json").read_text())["rows"]
    assert 0 <= rows[0]["rate"] <= 1


@pytest.mark.parametrize("K", [300, 500])
def test_fc_boundary_matches_exact_finite_sample_law(K):
    # F_c > z iff F > 1 + C/sqrt(K) + z sqrt(2n/(K(n-K))); F is noncentral F
    n = 1000
    C = dist.c_from_c0(K, n)
    z = float(dist.normal_quantile(0.95))
    cut = 1 + C / math.sqrt(K) + z * math.sqrt(2 * n / (K * (n - K)))
    exact = stats.ncf.sf(cut, K, n - K, C * math.sqrt(K))
    spec = mc.boundary_spec(mc.DGPSpec(n=n, K=K, redraw_Z=False), C)
    row = mc.run_size_experiment(mc.ExperimentConfig(dgp=spec, reps=4000, seed=SEED,
                                                     statistics=("Fc",), C=C)).rows[0]
    assert abs(row.rate - exact) < 4 * math.sqrt(exact * (1 - exact) / 4000)
    assert exact > 0.09


@pytest.mark.parametrize("K", [5, 300, 500, 800])
def test_exact_classical_sizes(K):
    # exact boundary sizes of the classical test at both strengths
    n = 1000
    out = []
    for mu0 in (5.0, 500.0):
        cv = dist.noncentral_chisq_quantile(K, mu0, 0.05) / K
        out.append(stats.ncf.sf(cv, K, n - K, mu0))
    assert out[1] > out[0]


@pytest.mark.xfail(strict=True, reason="exact noncentral F sizes at mu0^2 = 5 and 500 differ by "
                                       "more than 2pp at K = 5 and K = 300")
def test_classical_size_insensitive_to_strength():
    n = 1000
    for K in (5, 300, 500, 800):
        sizes = [stats.ncf.sf(dist.noncentral_chisq_quantile(K, m, 0.05) / K, K, n - K, m)
                 for m in (5.0, 500.0)]
        assert abs(sizes[1] - sizes[0]) < 0.02
