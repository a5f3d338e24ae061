"""Acceptance criteria on the default instance, one test per criterion.

Each test records a ``[PASS]``/``[FAIL]`` line that pytest prints in the
terminal summary.  Run directly with ``python tests/test_acceptance.py``.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_acceptance
from pvlab import cli
from pvlab.core import Field, Grid, Nonlinearity, ProblemSpec, SpatialField, default_spec
from pvlab.optim import (CONDITIONAL_GRADIENT, PROJECTED_GRADIENT, ControlBlocks,
                         OptimizeOptions, coarse_spec, minimize, oracle_enumerate)
from pvlab.pde import solve_state
from pvlab.verify import ExperimentConfig, marginal_consistency, run_experiment

_REPORTS: dict = {}


def report(eid):
    """Run an experiment on the default instance once and time it."""
    if eid not in _REPORTS:
        t0 = time.perf_counter()
        rep = run_experiment(ExperimentConfig(eid, default_spec()))
        _REPORTS[eid] = (rep, time.perf_counter() - t0)
    return _REPORTS[eid]


def check(number, title, passed, detail):
    record_acceptance(number, title, bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
    assert passed, detail


def test_01_adjoint():
    rep, secs = report("E1")
    s = rep.summary
    n = len(rep.fitted_rates)
    check(1, "discrete adjoint", rep.verdict and n == 20 and secs <= 60,
          f"{n} directions, rates {s['min_rate']:.3f}..{s['max_rate']:.3f} "
          f"({s['exact_samples']} at roundoff floor), {secs:.1f}s")


def test_02_integration_by_parts():
    rep, secs = report("E2")
    s = rep.summary
    n = len(rep.table)
    check(2, "integration by parts", rep.verdict and n == 150 and len(s["taus"]) == 3
          and secs <= 60, f"max rel mismatch {s['max_rel_mismatch']:.2e} over {n} pairs, "
          f"{secs:.1f}s")


def test_03_value_gradient():
    rep, secs = report("E3")
    s = rep.summary
    t0, t1 = s["tau0"], s["tau50"]
    check(3, "value gradient", rep.verdict and secs <= 900,
          f"median slopes {t0['median_slope']:.3f}/{t1['median_slope']:.3f}, secant "
          f"{t0['max_secant_rel']:.2%}/{t1['max_secant_rel']:.2%}, excluded "
          f"{s['excluded_fraction']:.0%}, {secs:.1f}s")


def test_04_time_derivative():
    rep, secs = report("E4")
    s = rep.summary
    check(4, "one-sided time derivatives", rep.verdict and secs <= 600,
          f"Richardson rel right {s['right_rel']:.2%} left {s['left_rel']:.2%}, {secs:.1f}s")


def test_05_joint():
    rep, secs = report("E5")
    mc = marginal_consistency({e: report(e)[0] for e in ("E3_grad_value", "E4_time_deriv")}
                              | {"E5_joint": rep})
    s = rep.summary
    ok = rep.verdict and mc == {"time_rows_match_E4": True, "space_rows_match_E3": True}
    check(5, "joint differentiability", ok,
          f"decay {s['dir0']['decay']:.1e}/{s['dir1']['decay']:.1e}, marginals {mc}")


def test_06_stability():
    rep, secs = report("E6")
    s = rep.summary
    meta = rep.metadata["fine_grid"]
    ok = rep.verdict and (meta["nx"], meta["nt"]) == (99, 200) and secs <= 1200
    check(6, "stability constant", ok,
          f"kappa {s['kappa_hat']:.3f}, trend slope "
          f"{rep.fitted_rates['trend_per_decade']['slope']:.3f}, refine {s['refine_rel']:.1%}, "
          f"{secs:.1f}s")


def test_07_growth():
    rep, secs = report("E7")
    s = rep.summary
    n = int(sum(1 for r in rep.table if r[0] == 0 and r[1] == 0))
    c2 = [lv["c2"] for lv in s["levels"].values()]
    check(7, "growth conditions", rep.verdict and n == 200,
          f"c2 levels {', '.join(f'{c:.2f}' for c in c2)}; tau25 {s['c2_tau25']:.2f} "
          f"tau50 {s['c2_tau50']:.2f}; linear deviation {s['linear_max_deviation']:.1e}")


def test_08_lsl1():
    rep, secs = report("E9")
    s = rep.summary
    check(8, "Ls-L1 lemma", rep.verdict and secs <= 300,
          f"sup {s['tau0']['sup']:.3f}/{s['tau50']['sup']:.3f}, spikes "
          f"{s['tau0']['spike_rel']:.1%}/{s['tau50']['spike_rel']:.1%}, refine "
          f"{s['refine_rel']:.1%}, tau {s['tau_rel']:.1%}, {secs:.1f}s")


def test_09_bellman():
    rep, secs = report("E10")
    s = rep.summary
    check(9, "Bellman principle", rep.verdict and len(rep.table) == 3,
          f"max residual {s['max_residual']:.1e} <= {s['limit']:.1e}")


def test_10_oracle():
    s = coarse_spec()
    blocks = ControlBlocks(2, 2)
    orc = oracle_enumerate(s, None, blocks)
    parts, ok = [], blocks.count(s.grid) == 4
    for m in (CONDITIONAL_GRADIENT, PROJECTED_GRADIENT):
        rep = minimize(s, None, OptimizeOptions(method=m, multistart=5), blocks=blocks)
        ok &= len(rep.starts) == 5 and rep.J <= orc.J + 1e-9
        parts.append(f"{m} {rep.J:.7f}")
    check(10, "oracle equivalence", ok, f"{', '.join(parts)} vs oracle {orc.J:.7f}")


def _heat(nx, nt):
    g = Grid(nx=nx, nt=nt)
    spec = ProblemSpec(g, SpatialField(g, np.full(g.n_nodes, 0.1)), Nonlinearity.zero(),
                       SpatialField.from_function(g, lambda x: np.sin(np.pi * x)),
                       Field.zeros(g), Field.full(g, -1.0), Field.full(g, 1.0))
    y = solve_state(spec, Field.zeros(g)).y.values
    exact = np.exp(-0.1 * np.pi**2 * g.times)[:, None] * np.sin(np.pi * g.coords[0])
    return float(np.max(np.abs(y - exact)))


def test_11_forward_solver():
    err = _heat(99, 400)
    ns = (8, 16, 32, 64)
    errs = [_heat(n - 1, n * n // 4) for n in ns]
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    check(11, "forward solver", err <= 5e-3 and slope >= 1.9,
          f"eigenmode error {err:.1e}, spatial order {slope:.3f}")


def _verify(out, *extra):
    code = cli.main(["verify", "--experiments", "E1,E2,E4,E9,E10", "--seed", "11",
                     "--out", str(out), *extra])
    files = sorted(p.name for p in Path(out).iterdir() if p.name != "manifest.json")
    return code, {f: (Path(out) / f).read_bytes() for f in files}


def test_12_determinism(tmp_path, capsys):
    a = _verify(tmp_path / "a")
    b = _verify(tmp_path / "b")
    c = _verify(tmp_path / "c", "--jobs", "8")
    capsys.readouterr()
    same = a[1] == b[1] and a[1] == c[1]
    seed = json.loads(a[1]["E1_adjoint.json"])["metadata"]["seed"]
    check(12, "determinism", a[0] == 0 and same and seed == 11,
          f"{len(a[1])} files byte-identical across repeat and --jobs 8")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
