import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from feedloop import analysis, sim
from feedloop.analysis import MACRO
from feedloop.config import ExperimentConfig
from feedloop.metrics import METRIC_COLUMNS


def traj_from(s, rho, c, steps=60):
    out = np.zeros((steps, len(METRIC_COLUMNS)))
    out[:, METRIC_COLUMNS.index("satisfaction_mean")] = s
    out[:, METRIC_COLUMNS.index("density")] = rho
    out[:, METRIC_COLUMNS.index("local_clustering_mean")] = c
    return out


# convergence and fixed points

def test_constant_trajectory_converges_at_first_eligible_step():
    assert analysis.convergence_step(traj_from(0.5, 0.02, 0.7)) == 2


def test_ramp_never_converges():
    steps = 60
    tr = traj_from(np.linspace(0, 1, steps), 0.02, 0.7, steps)
    assert analysis.convergence_step(tr) is None


def test_convergence_after_transient():
    tr = traj_from(0.5, 0.02, 0.7, 80)
    col = METRIC_COLUMNS.index("density")
    tr[:30, col] = np.linspace(0.0, 0.02, 30)  # moves 0.0007/step: already calm
    tr[:30, METRIC_COLUMNS.index("local_clustering_mean")] = np.linspace(0.2, 0.7, 30)
    t = analysis.convergence_step(tr)
    assert t == 31


def test_convergence_needs_ten_steps():
    with pytest.raises(ValueError):
        analysis.convergence_step(traj_from(0.5, 0.02, 0.7, 9))


def test_fixed_point_of_constant_runs():
    trs = [traj_from(0.5, 0.02, 0.7) for _ in range(5)]
    assert analysis.estimate_fixed_point(trs) == (0.5, 0.02, 0.7)


def test_fixed_point_excludes_unconverged_runs():
    ramp = traj_from(np.linspace(0, 1, 60), 0.02, 0.7)
    trs = [traj_from(0.5, 0.02, 0.7) for _ in range(4)] + [ramp]
    assert analysis.estimate_fixed_point(trs) == (0.5, 0.02, 0.7)
    with pytest.raises(ValueError):
        analysis.estimate_fixed_point([ramp])


# Jacobian and eigenvalues

def test_identity_map_jacobian():
    J = analysis.numerical_jacobian(lambda x: x, [0.5, 0.02, 0.7])
    np.testing.assert_allclose(J, np.eye(3), atol=1e-12)
    lams = analysis.eigenvalues_3x3(J)
    np.testing.assert_allclose([abs(l) for l in lams], 1.0)


def test_linear_map_recovered():
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        x0 = rng.uniform(0.1, 0.9, 3)
        J = analysis.numerical_jacobian(lambda x: A @ x, x0)
        np.testing.assert_allclose(J, A, atol=1e-4 * np.abs(A).max())


def test_realized_inputs_are_used():
    A = np.array([[0.5, 0.1, 0.0], [0.2, 0.9, 0.0], [0.0, 0.3, 0.4]])

    def phi(x):
        # the map can only reach half of the requested move
        x0 = np.array([0.5, 0.5, 0.5])
        xr = x0 + 0.5 * (np.asarray(x) - x0)
        return A @ xr, xr

    J = analysis.numerical_jacobian(phi, [0.5, 0.5, 0.5])
    np.testing.assert_allclose(J, A, atol=1e-10)


def test_infeasible_step_falls_back_with_warning():
    A = np.diag([0.5, 2.0, -1.0])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        J = analysis.numerical_jacobian(lambda x: A @ x, [0.5, 0.0, 0.5], lower=[0, 0, 0])
    assert len(caught) == 1 and "one-sided" in str(caught[0].message)
    np.testing.assert_allclose(J, A, atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
def test_eigenvalues_are_roots_of_the_characteristic_polynomial(vals):
    J = np.array(vals).reshape(3, 3)
    for lam in analysis.eigenvalues_3x3(J):
        assert abs(np.linalg.det(J - lam * np.eye(3))) < 1e-8


def test_eigenvalues_match_numpy():
    rng = np.random.default_rng(1)
    for _ in range(100):
        J = rng.normal(size=(3, 3))
        ours = sorted(analysis.eigenvalues_3x3(J), key=lambda z: (round(z.real, 6), z.imag))
        ref = sorted(np.linalg.eigvals(J), key=lambda z: (round(z.real, 6), z.imag))
        np.testing.assert_allclose(ours, ref, atol=1e-9)


def test_repeated_and_zero_roots():
    lams = analysis.eigenvalues_3x3(np.zeros((3, 3)))
    assert all(abs(l) < 1e-12 for l in lams)
    lams = analysis.eigenvalues_3x3(np.diag([2.0, 2.0, 2.0]))
    np.testing.assert_allclose([l.real for l in lams], 2.0, atol=1e-6)


def test_stability_report_invariants():
    rep = analysis.stability_report((0.5, 0.02, 0.7), np.diag([0.9, -0.5, 0.2]))
    assert rep.spectral_radius == pytest.approx(0.9) and rep.stable
    rep = analysis.stability_report((0.5, 0.02, 0.7), np.diag([1.1, -0.5, 0.2]))
    assert not rep.stable
    text = rep.to_text()
    assert text.count("eigenvalue ") == 3 and "stable false" in text


def test_macro_perturbations_hit_their_targets():
    cfg = ExperimentConfig(n_users=60, steps=20, t_activate=5)
    st0 = sim.init_platform(cfg, 0)
    for _ in range(20):
        sim.step(st0, measure=False)
    x0 = analysis.macro_state(st0)
    rng = np.random.default_rng(0)
    for delta in (0.01, -0.01):
        s = sim.clone_state(st0)
        analysis.shift_satisfaction(s, delta)
        active = s.agents.active
        assert s.agents.satisfaction[active].mean() == pytest.approx(
            st0.agents.satisfaction[active].mean() + delta, abs=1e-3)
        s = sim.clone_state(st0)
        analysis.shift_density(s, delta, rng)
        assert analysis.macro_state(s)[1] - x0[1] == pytest.approx(delta, abs=1.0 / (60 * 59 / 2))
        s = sim.clone_state(st0)
        analysis.shift_clustering(s, delta, rng)
        moved = analysis.macro_state(s) - x0
        assert moved[2] * delta > 0 and abs(moved[2]) >= abs(delta)
        assert moved[1] == pytest.approx(0.0, abs=1e-12)  # density preserved by rewiring
    # the original state is untouched
    np.testing.assert_array_equal(analysis.macro_state(st0), x0)


def test_mean_field_map_is_deterministic():
    cfg = ExperimentConfig(n_users=40, steps=12, t_activate=5)
    states, _ = analysis.end_states(cfg, [0, 1], steps=12)
    phi = analysis.MeanFieldMap(states, replicates=2)
    y1, x1 = phi(phi.x0 + np.array([0.01, 0.0, 0.0]))
    y2, x2 = phi(phi.x0 + np.array([0.01, 0.0, 0.0]))
    assert np.array_equal(y1, y2) and np.array_equal(x1, x2)
    assert x1[0] == pytest.approx(phi.x0[0] + 0.01, abs=2e-3)


# scaling fits

def test_power_law_exact():
    fit = analysis.fit_power_law([(n, 2 * n ** -0.1) for n in (100, 200, 500, 1000)])
    assert fit.coefficients["a"] == pytest.approx(2, abs=1e-10)
    assert fit.coefficients["alpha"] == pytest.approx(0.1, abs=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-10)
    y, lo, hi = fit.predict(5000)
    assert y == pytest.approx(2 * 5000 ** -0.1) and lo <= y <= hi


def test_log_linear_exact():
    fit = analysis.fit_log_linear([(n, 1.2 * np.log(n) + 0.8) for n in (100, 200, 500, 1000)])
    assert fit.coefficients["a"] == pytest.approx(1.2, abs=1e-10)
    assert fit.coefficients["b"] == pytest.approx(0.8, abs=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-10)


def test_fit_matches_scipy_linregress():
    rng = np.random.default_rng(2)
    n = np.array([100, 100, 200, 200, 500, 500, 1000, 1000.0])
    y = 1.1 * np.log(n) + 0.5 + rng.normal(0, 0.1, n.size)
    fit = analysis.fit_log_linear(np.column_stack([n, y]))
    ref = stats.linregress(np.log(n), y)
    assert fit.coefficients["a"] == pytest.approx(ref.slope)
    assert fit.std_errors["a"] == pytest.approx(ref.stderr)
    assert fit.std_errors["b"] == pytest.approx(ref.intercept_stderr)
    assert fit.r_squared == pytest.approx(ref.rvalue ** 2)
    assert 0 <= fit.r_squared <= 1
    y0, lo, hi = fit.predict(2000, level=0.95)
    assert lo < y0 < hi


def test_fit_preconditions():
    with pytest.raises(ValueError):
        analysis.fit_power_law([(100, 0.2), (200, 0.1)])
    with pytest.raises(ValueError):
        analysis.fit_power_law([(100, 0.2), (200, 0.0), (300, 0.1)])
    with pytest.raises(ValueError):
        analysis.fit_log_linear([(0, 1.0), (200, 2.0), (300, 3.0)])
    with pytest.raises(ValueError):
        analysis.fit_power_law([(100, 0.2), (100, 0.1), (200, 0.1)])


# KS

def brute_ks(a, b):
    pts = sorted(set(a) | set(b))
    return max(abs(np.mean(np.asarray(a) <= x) - np.mean(np.asarray(b) <= x)) for x in pts)


def test_ks_examples():
    assert analysis.ks_distance([1, 2, 3], [2, 3, 4])[0] == 1 / 3
    assert analysis.ks_distance([1, 2, 2], [2, 1, 2])[0] == 0.0
    assert analysis.ks_distance([1, 2], [3, 4])[0] == 1.0
    with pytest.raises(ValueError):
        analysis.ks_distance([], [1])


def test_ks_merge_equals_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = rng.integers(0, 8, rng.integers(1, 40)).astype(float)
        b = rng.integers(0, 8, rng.integers(1, 40)).astype(float)
        d, _ = analysis.ks_distance(a, b)
        bf = brute_ks(a, b)
        # exact as a ratio of integers: compare after scaling by n*m
        assert round(d * a.size * b.size) == round(bf * a.size * b.size)
        assert d == pytest.approx(bf, abs=1e-12)
        assert d == pytest.approx(stats.ks_2samp(a, b).statistic, abs=1e-12)


def test_ks_p_values():
    rng = np.random.default_rng(4)
    for _ in range(30):
        a = rng.normal(size=rng.integers(3, 30))
        b = rng.normal(0.5, size=rng.integers(3, 30))
        assert analysis.ks_exact_p(a, b) == pytest.approx(stats.ks_2samp(a, b, method="exact").pvalue, rel=1e-9)
    a = rng.normal(size=400)
    b = rng.normal(size=500)
    d, p = analysis.ks_distance(a, b)
    en = np.sqrt(400 * 500 / 900)
    assert p == pytest.approx(stats.kstwobign.sf(en * d))
    with pytest.raises(ValueError):
        analysis.ks_exact_p(a, b)
