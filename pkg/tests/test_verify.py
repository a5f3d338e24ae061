import numpy as np
import pytest

from pvlab.core import (Field, InvalidArgument, Nonlinearity, SpatialField, default_spec,
                        l2_norm_space, l2_norm_spacetime, norm_control)
from pvlab.io import dumps
from pvlab.optim import OptimizeOptions, minimize, objective, objective_increment, running_cost, \
    second_variation, value
from pvlab.pde import PRECISE, solve_linear_parabolic, solve_linearized, solve_state, \
    sparse_operator
from pvlab.verify import (CODES, DEFAULT_SCALES, EXPERIMENTS, VERIFY_OPTIONS, ExperimentConfig,
                          ExperimentReport, _cols, _e8_task, _growth_block, direction,
                          fit_slope, marginal_consistency, rejudge, resolve_id, run_experiment,
                          sample_rng, solve_base, spike_source)


@pytest.fixture(scope="module")
def small():
    return default_spec(nx=19, nt=40)


def singleton(spec, c=0.2):
    return spec.replace(ua=Field.full(spec.grid, c), ub=Field.full(spec.grid, c))


def cols(rep):
    return _cols(rep.columns, rep.table)


# configuration ------------------------------------------------------------------------

def test_identifiers():
    assert len(EXPERIMENTS) == 10 and CODES["E10_bellman"] == 10
    assert resolve_id("E4") == "E4_time_deriv"
    with pytest.raises(InvalidArgument):
        resolve_id("E11")


@pytest.mark.parametrize("scales", [(1e-2, 1e-1), (1e-1, 1e-1), (1e-1, 0.0), ()])
def test_scales_validated(small, scales):
    with pytest.raises(InvalidArgument):
        ExperimentConfig("E3", small, perturbation_scales=scales)


def test_default_scales():
    assert len(DEFAULT_SCALES) == 7
    assert DEFAULT_SCALES[0] == pytest.approx(1e-1) and DEFAULT_SCALES[-1] == pytest.approx(1e-4)
    assert np.all(np.diff(DEFAULT_SCALES) < 0)


def test_sample_rng_streams_are_keyed():
    a = sample_rng(0, "E1_adjoint", 3).random(4)
    assert np.array_equal(a, sample_rng(0, "E1_adjoint", 3).random(4))
    assert not np.array_equal(a, sample_rng(0, "E2_ibp", 3).random(4))
    assert not np.array_equal(a, sample_rng(1, "E1_adjoint", 3).random(4))


@pytest.mark.parametrize("smooth", [False, True])
def test_directions_unit_norm(small, smooth):
    e = direction(small.grid, np.random.default_rng(5), smooth)
    assert l2_norm_space(e) == pytest.approx(1.0, rel=1e-14)


def test_fit_slope_exact_power():
    x = np.logspace(-3, 0, 6)
    fit = fit_slope(x, 3 * x**2)
    assert fit["slope"] == pytest.approx(2.0, abs=1e-12)
    assert fit["ci"][0] == pytest.approx(2.0, abs=1e-9)


# E1 ---------------------------------------------------------------------------------

def test_e1_linear_state_is_exact(small):
    s = small.replace(nonlinearity=Nonlinearity.zero())
    rep = run_experiment(ExperimentConfig("E1", s, sample_count=6))
    assert rep.verdict and rep.summary["exact_samples"] == 6


def test_e1_default_rates(small):
    rep = run_experiment(ExperimentConfig("E1", small, sample_count=8))
    assert rep.verdict
    slopes = [r["slope"] for r in rep.fitted_rates.values() if np.isfinite(r["slope"])]
    assert all(1.9 <= s <= 2.1 for s in slopes)


def test_e1_zero_direction(small, rng):
    u = Field(small.grid, rng.uniform(-1, 1, (small.grid.nt + 1, small.grid.n_nodes)))
    assert objective_increment(small, u, Field.zeros(small.grid)) == 0.0


# E2 ---------------------------------------------------------------------------------

def test_e2_zero_pair_gives_zero(small):
    yb = solve_state(small, Field.zeros(small.grid)).y
    z = solve_linearized(small, yb, Field.zeros(small.grid), SpatialField.zeros(small.grid))
    assert np.all(z.values == 0.0)


def test_e2_identity(small):
    rep = run_experiment(ExperimentConfig("E2", small, sample_count=10))
    assert rep.verdict and rep.summary["max_rel_mismatch"] <= 1e-10
    assert rep.summary["taus"] == [0.0, 10.0, 20.0]


# E3 ---------------------------------------------------------------------------------

def test_e3_singleton_slope(small):
    rep = run_experiment(ExperimentConfig("E3", singleton(small), sample_count=4))
    assert rep.verdict
    for key in ("tau0", "tau20"):
        assert rep.summary[key]["median_slope"] >= 1.95


def test_e3_zero_scale_zero_remainder(small):
    base = solve_base(small, VERIFY_OPTIONS)
    j = 20
    a = value(small, j, base.state(j), base.inner(1e-4), u0=base.report.ubar).v
    b = value(small, j, base.state(j), base.inner(1e-4), u0=base.report.ubar).v
    assert a - b == 0.0


def test_exclusions_fail_the_verdict(small):
    rep = run_experiment(ExperimentConfig("E3", singleton(small), sample_count=4))
    i = rep.columns.index("used")
    for row in rep.table[:len(rep.table) // 5 + 1]:
        row[i] = 0.0
    rejudge(rep)
    assert not rep.checks["exclusions"] and not rep.verdict


# E4 ---------------------------------------------------------------------------------

def test_e4_singleton_matches_direct_quadrature(small):
    s = singleton(small)
    rep = run_experiment(ExperimentConfig("E4", s))
    c = cols(rep)
    u = Field.full(s.grid, 0.2)
    y = solve_state(s, u, opts=PRECISE).y
    for side, m, v in zip(c["side"], c["m"], c["v_shift"]):
        j = 20 + int(side * m)
        ws = s.window(j, y.slice(20))
        assert abs(v - objective(ws, Field.full(ws.grid, 0.2))) <= 1e-6
    assert rep.verdict


def test_e4_stationary_construction(small):
    g = small.grid
    ys = 0.3 * np.sin(np.pi * g.coords[0])
    L = sparse_operator(g, small.diffusion.values)
    c = L @ ys + small.nonlinearity.f(ys)
    steady = np.tile(ys, (g.nt + 1, 1))
    s = small.replace(y0=SpatialField(g, ys), yQ=Field(g, steady))
    # the steady control keeps the state fixed
    y = solve_state(s, Field(g, np.tile(c, (g.nt + 1, 1))), opts=PRECISE).y.values
    assert np.max(np.abs(y - steady)) <= 1e-12
    rep = run_experiment(ExperimentConfig("E4", s, perturbation_scales=(1e-2,)))
    tab = cols(rep)
    assert np.max(np.abs(tab["formula"])) <= 1e-10
    assert np.max(np.abs(tab["quotient"])) <= 1e-8


# E5 ---------------------------------------------------------------------------------

def test_e5_singleton_linear_decay(small):
    rep = run_experiment(ExperimentConfig("E5", singleton(small)))
    assert rep.verdict
    c = cols(rep)
    for d in (0, 1):
        m = (c["family"] == 2) & (c["direction"] == d)
        assert fit_slope(c["sigma"][m], c["ratio"][m])["slope"] >= 0.9


def test_e5_marginals_reproduce_e3_e4(small):
    s = singleton(small)
    reps = {e: run_experiment(ExperimentConfig(e, s, sample_count=2))
            for e in ("E3_grad_value", "E4_time_deriv", "E5_joint")}
    mc = marginal_consistency(reps)
    assert mc == {"time_rows_match_E4": True, "space_rows_match_E3": True}


# E6 ---------------------------------------------------------------------------------

def _heat_shift_norm(spec, d, start):
    g = spec.grid
    A = np.eye(g.n_nodes) + g.k * sparse_operator(g, spec.diffusion.values).toarray()
    total = 0.0
    for _ in range(start, g.nt):
        d = np.linalg.solve(A, d)
        total += g.k * g.cell_volume * float(d @ d)
    return np.sqrt(total)


def test_e6_linear_singleton_closed_form(small):
    s = singleton(small.replace(nonlinearity=Nonlinearity.zero()))
    rep = run_experiment(ExperimentConfig("E6", s, sample_count=9, refine=False))
    c = cols(rep)
    yb = solve_state(s, Field.full(s.grid, 0.2), opts=PRECISE).y.values
    j = 10
    for n in range(len(rep.table)):
        i, m = int(c["sample"][n]), int(c["m"][n])
        e = direction(s.grid, sample_rng(0, "E6_stability", i), smooth=i % 2 == 1)
        d = yb[j] + c["eta_norm"][n] * e.values - yb[j + m]
        assert c["lhs"][n] == pytest.approx(_heat_shift_norm(s, d, j + m), rel=1e-9)
    assert np.all(np.isfinite(c["ratio"]))


# E7 ---------------------------------------------------------------------------------

def test_e7_linear_ratio(small):
    rep = run_experiment(ExperimentConfig("E7", small, sample_count=24))
    assert rep.checks["linear_formula"] and rep.checks["linear_at_least_half"]
    c = cols(rep)
    m = c["family"] == 0
    assert np.all(c["r2"][m] > 0) and np.all(np.isfinite(c["r2"][m]))
    k = np.argmin(np.where(m, c["z_norm"], np.inf))
    assert 0 < c["r2"][k] < np.inf
    assert rep.verdict


# E8 ---------------------------------------------------------------------------------

def test_e8_zero_radius_reduces_to_base(small):
    base = solve_base(small, VERIFY_OPTIONS)
    r = base.report
    rows0 = _growth_block(small, r.ubar, r.ybar, r.pbar, 0, 6, -1, r.gap, 1.0)
    rows1 = _e8_task((small, r.ubar, 0, 0, 0.0, base.inner(1.0), 6))
    assert [row[1:8] for row in rows0] == [row[1:8] for row in rows1]


def test_e8_linear_second_variation_unchanged(small, rng):
    s = small.replace(nonlinearity=Nonlinearity.zero())
    g = s.grid
    opts = OptimizeOptions(method="lbfgsb", multistart=1)
    base = minimize(s, None, opts)
    eta = s.y0 + direction(g, rng, False).values * 1e-2
    pert = minimize(s, eta, opts)
    for _ in range(5):
        v = Field(g, rng.standard_normal((g.nt + 1, g.n_nodes)))
        a = second_variation(s, base.ubar, None, v, base.ybar, base.pbar)
        b = second_variation(s.with_y0(eta), pert.ubar, None, v, pert.ybar, pert.pbar)
        assert abs(a - b) <= 1e-10 * abs(a)


def test_e8_small_run(small):
    rep = run_experiment(ExperimentConfig("E8", small, sample_count=3))
    assert rep.verdict and rep.summary["max_drift"] <= 0.5


# E9 ---------------------------------------------------------------------------------

def test_e9_constant_source_against_fine_grid():
    spec = default_spec()
    rep = run_experiment(ExperimentConfig("E9", spec, sample_count=2, refine=False))
    c = cols(rep)
    fine = spec.refined().refined()
    g = fine.grid
    rho = Field.full(g, 1.0)
    z = solve_linear_parabolic(g, fine.diffusion.values, Field.zeros(g), rho)
    for s in (1.0, 2.0, 2.5):
        m = (c["family"] == 1) & (c["tau_index"] == 0) & (c["s"] == s)
        ref = l2_norm_spacetime(z, s) / norm_control(rho, 1.0)
        assert c["ratio"][m][0] == pytest.approx(ref, rel=0.03)


def test_e9_zero_source_is_zero(small):
    g = small.grid
    z = solve_linear_parabolic(g, small.diffusion.values, Field.zeros(g), Field.zeros(g))
    assert l2_norm_spacetime(z) == 0.0


def test_spike_unit_mass(small):
    for w in (0.2, 0.1, 0.05):
        rho = spike_source(small.grid, w)
        assert norm_control(rho, 1.0) == pytest.approx(1.0, rel=1e-14)
        assert rho.values.min() >= 0.0


def _e9_default():
    return run_experiment(ExperimentConfig("E9", default_spec(), sample_count=20))


def test_e9_spike_family_bounded():
    rep = _e9_default()
    assert rep.checks["tau0_spikes"] and rep.checks["tau50_spikes"]


@pytest.mark.xfail(strict=True, reason="spike ratios settle near 2.5x the constant-source ratio")
def test_e9_spike_within_twice_constant():
    rep = _e9_default()
    assert rep.summary["tau0"]["spike_over_constant"] <= 2.0


# E10 --------------------------------------------------------------------------------

def test_e10_endpoints(small):
    base = solve_base(small, VERIFY_OPTIONS)
    g = small.grid
    y = base.report.ybar
    assert running_cost(small, y, 0, 0) == 0.0
    assert value(small, g.nt, base.state(g.nt)).v == 0.0
    assert running_cost(small, y, 0, g.nt) == pytest.approx(base.report.J, rel=1e-13)


def test_e10_small_run(small):
    rep = run_experiment(ExperimentConfig("E10", small))
    assert rep.verdict and rep.summary["max_residual"] <= rep.summary["limit"]


# reports --------------------------------------------------------------------------------

def test_reports_deterministic(small):
    a = run_experiment(ExperimentConfig("E2", small, sample_count=5, seed=3))
    b = run_experiment(ExperimentConfig("E2", small, sample_count=5, seed=3))
    assert a.table == b.table and dumps(a.to_dict()) == dumps(b.to_dict())
    c = run_experiment(ExperimentConfig("E2", small, sample_count=5, seed=4))
    assert c.table != a.table


def test_parallel_matches_serial(small):
    a = run_experiment(ExperimentConfig("E1", small, sample_count=4), jobs=1)
    b = run_experiment(ExperimentConfig("E1", small, sample_count=4), jobs=2)
    assert dumps(a.to_dict()) == dumps(b.to_dict())


def test_rejudge_from_table_alone(small):
    rep = run_experiment(ExperimentConfig("E2", small, sample_count=5))
    clone = ExperimentReport.from_dict(rep.to_dict())
    clone.verdict, clone.checks = False, {}
    rejudge(clone)
    assert clone.verdict == rep.verdict and clone.checks == rep.checks
    clone.table[0][clone.columns.index("rel_mismatch")] = 1.0
    assert not rejudge(clone).verdict


def test_rows_are_finite(small):
    rep = run_experiment(ExperimentConfig("E1", small, sample_count=3))
    assert np.all(np.isfinite(np.asarray(rep.table, dtype=float)))
    assert rep.metadata["seed"] == 0 and rep.metadata["grid"]["nx"] == 19
