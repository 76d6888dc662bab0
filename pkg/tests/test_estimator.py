import numpy as np
import pytest
from scipy.integrate import dblquad

from qverify.baths import BathCorrelator
from qverify.dynamics import (
    EqualTimeData,
    LindbladModel,
    Ordering,
    PiecewiseHamiltonian,
    TimeGrid,
)
from qverify.estimator import (
    CorrelatorGrid,
    build_correlator_grid,
    correction_integral,
    correction_integrand,
    correction_prefix_totals,
    correction_upper_bound,
    fit_correlator_decay,
    fourth_order_consistency,
    load_correlator_grid,
    longtime_markov_correction,
    save_correlator_grid,
)
from qverify.spaces import CompositeSpace, DensityMatrix, QOperator, pauli

SPIN = CompositeSpace((2,))


def mixed_state(a):
    return DensityMatrix(SPIN, np.diag([a, 1 - a]).astype(complex))


def decay_scenario(eps=1.0, gamma_decay=0.25, lam=0.02, gamma_bath=2.0,
                   a=0.8, span=8.0, n=512):
    model = LindbladModel.decaying_spin(eps, gamma_decay, 0.0, span)
    grid = TimeGrid(0.0, span, n)
    bath = BathCorrelator.single(lam, gamma_bath)
    corr = build_correlator_grid(model, mixed_state(a), pauli("x"), pauli("z"), grid)
    return model, grid, bath, corr


def analytic_decay_integrand(t, t1, t2, lam, gamma_bath, eps, gamma_decay, a, t0):
    """Independent closed form of the combined integrand for the decaying spin.

    Derived by propagating the conditional states of the four orderings
    through the analytic spin propagator and summing them against the real
    exponential bath correlator.
    """
    delta = t1 - t2
    pop = a * np.exp(-gamma_decay * (t2 - t0))
    return (
        4.0
        * lam
        * np.exp(-gamma_bath * delta)
        * np.exp(-gamma_decay * delta / 2.0)
        * np.cos(eps * delta)
        * np.exp(-gamma_decay * (t - t1))
        * (1.0 - 2.0 * pop)
    )


# ---------------------------------------------------------------------------
# integrand
# ---------------------------------------------------------------------------


def test_integrand_identity_insertion_cancels_exactly():
    span, n = 4.0, 32
    model = LindbladModel.decaying_spin(1.0, 0.3, 0.0, span)
    grid = TimeGrid(0.0, span, n)
    eye = QOperator(SPIN, np.eye(2), hermitian_hint=True)
    corr = build_correlator_grid(model, mixed_state(0.7), eye, pauli("z"), grid)
    bath = BathCorrelator.single(0.5, 1.0, 0.3)
    times = grid.times()
    for i, j in ((10, 3), (20, 20), (32, 0)):
        assert correction_integrand(times[i], times[j], corr, bath) == 0.0


def test_integrand_linear_in_bath_amplitude():
    _, grid, bath, corr = decay_scenario(n=64)
    times = grid.times()
    v1 = correction_integrand(times[40], times[10], corr, bath)
    v3 = correction_integrand(times[40], times[10], corr, bath.scaled(3.0))
    assert v3 == pytest.approx(3.0 * v1, rel=1e-12)
    zero_bath = BathCorrelator.single(0.0, 1.0)
    assert correction_integrand(times[40], times[10], corr, zero_bath) == 0.0


def test_integrand_equal_time_matches_sandwich_difference():
    model, grid, bath, corr = decay_scenario(n=64)
    times = grid.times()
    i = 40
    eq = corr.equal_time_data()
    expected = 2.0 * bath.zero_lag * (eq.sandwich[i] - eq.a_series[-1])
    got = correction_integrand(times[i], times[i], corr, bath)
    assert got == pytest.approx(expected, rel=1e-9)


def test_integrand_rejects_points_off_simplex():
    _, grid, bath, corr = decay_scenario(n=32)
    times = grid.times()
    with pytest.raises(ValueError):
        correction_integrand(times[3], times[10], corr, bath)
    with pytest.raises(ValueError):
        correction_integrand(times[10] + 0.3 * grid.dt, times[3], corr, bath)


# ---------------------------------------------------------------------------
# integral
# ---------------------------------------------------------------------------


def test_constant_correlators_reproduce_bath_closed_form():
    lam, gamma = 0.7, 1.0
    span, n = 1.0, 1024
    grid = TimeGrid(0.0, span, n)
    corr = CorrelatorGrid.constant(grid, (1.0, 1.0, 0.5, 0.5), a_value=1.0)
    bath = BathCorrelator.single(lam, gamma)
    breakdown = correction_integral(corr, bath)
    expected = lam * (span / gamma + (np.exp(-gamma * span) - 1.0) / gamma**2)
    assert breakdown.total.real == pytest.approx(expected, rel=1e-6)
    assert abs(breakdown.total.imag) < 1e-14


def test_total_equals_sum_of_terms():
    _, _, bath, corr = decay_scenario(n=64)
    breakdown = correction_integral(corr, bath)
    assert breakdown.total == pytest.approx(sum(breakdown.term_values), abs=1e-12)


def test_integral_matches_independent_analytic_oracle():
    eps, gamma_decay, lam, gamma_bath, a = 1.0, 0.25, 0.02, 2.0, 0.8
    span, n = 8.0, 512
    _, grid, bath, corr = decay_scenario(eps, gamma_decay, lam, gamma_bath, a, span, n)
    breakdown = correction_integral(corr, bath)
    oracle, err = dblquad(
        lambda t2, t1: analytic_decay_integrand(
            span, t1, t2, lam, gamma_bath, eps, gamma_decay, a, 0.0
        ),
        0.0,
        span,
        0.0,
        lambda t1: t1,
        epsabs=1e-12,
    )
    assert breakdown.total.real == pytest.approx(oracle, rel=2e-3)
    assert abs(breakdown.total.imag) <= 1e-8 * abs(breakdown.total)


def test_identity_coupling_gives_exact_zero_total():
    span, n = 4.0, 32
    model = LindbladModel.decaying_spin(1.0, 0.3, 0.0, span)
    grid = TimeGrid(0.0, span, n)
    eye = QOperator(SPIN, np.eye(2), hermitian_hint=True)
    corr = build_correlator_grid(model, mixed_state(0.7), eye, pauli("z"), grid)
    bath = BathCorrelator.single(0.5, 1.0, 0.2)
    assert correction_integral(corr, bath).total == 0.0


def test_amplitude_linearity_is_exact():
    _, _, bath, corr = decay_scenario(n=64)
    t1 = correction_integral(corr, bath).total
    t2 = correction_integral(corr, bath.scaled(2.5)).total
    assert abs(t2 - 2.5 * t1) <= 1e-12 * abs(t2)


def test_zero_amplitude_gives_zero():
    _, _, _, corr = decay_scenario(n=64)
    bath = BathCorrelator.single(0.0, 1.0)
    assert correction_integral(corr, bath).total == 0.0


def test_quadrature_convergence_factor():
    results = {}
    for n in (128, 256, 512):
        _, _, bath, corr = decay_scenario(n=n)
        results[n] = correction_integral(corr, bath).total
    d1 = abs(results[128] - results[256])
    d2 = abs(results[256] - results[512])
    assert d1 / d2 >= 3.5


def test_richardson_estimate_tracks_true_error():
    _, _, bath, corr = decay_scenario(n=256)
    fine = correction_integral(decay_scenario(n=1024)[3], bath).total
    breakdown = correction_integral(corr, bath)
    true_err = abs(breakdown.total - fine)
    assert breakdown.estimated_quadrature_error == pytest.approx(true_err, rel=0.8)
    assert not breakdown.resolution_flagged


def test_coarse_grid_flagged_not_fatal():
    _, _, bath, corr = decay_scenario(gamma_bath=12.0, n=16)
    breakdown = correction_integral(corr, bath)
    assert breakdown.resolution_flagged


def test_minimum_resolution_enforced():
    _, _, bath, corr = decay_scenario(n=64)
    small = CorrelatorGrid(
        grid=TimeGrid(0.0, 1.0, 8),
        values=np.zeros((4, 9, 9), dtype=complex),
        a_series=np.ones(9, dtype=complex),
    )
    with pytest.raises(ValueError):
        correction_integral(small, bath)


def test_prefix_totals_match_full_integral():
    _, grid, bath, corr = decay_scenario(n=64)
    prefixes = correction_prefix_totals(corr, bath)
    full = correction_integral(corr, bath).total
    assert prefixes[-1] == pytest.approx(full, rel=1e-12)
    half = CorrelatorGrid(
        grid=TimeGrid(grid.t0, grid.times()[32], 32),
        values=corr.values[:, :33, :33],
        a_series=corr.a_series[:33],
    )
    assert prefixes[32] == pytest.approx(correction_integral(half, bath).total, rel=1e-12)


def test_hermitian_pairing_defect_small():
    _, _, _, corr = decay_scenario(n=128)
    assert corr.hermitian_pairing_defect() < 1e-9


# ---------------------------------------------------------------------------
# upper bound
# ---------------------------------------------------------------------------


def test_bound_zero_amplitude():
    _, grid, _, corr = decay_scenario(n=64)
    bath = BathCorrelator.single(0.0, 1.0)
    assert correction_upper_bound(corr, bath, grid.t0, grid.t) == 0.0


def test_bound_pure_state_pauli_values():
    # For the excited spin at t = t0 the three equal-time correlators are
    # exactly 1 in magnitude, so the bound is 4*lam*(t - t0)/gamma.
    lam, gamma, span = 0.3, 2.0, 1.5
    bath = BathCorrelator.single(lam, gamma)
    bound = correction_upper_bound((1.0, 1.0, 1.0), bath, 0.0, span)
    assert bound == pytest.approx(4 * lam * span / gamma, rel=1e-12)


def test_bound_dominates_integral():
    model, grid, bath, corr = decay_scenario(n=256)
    total = abs(correction_integral(corr, bath).total)
    bound = correction_upper_bound(corr, bath, grid.t0, grid.t)
    assert bound >= total


# ---------------------------------------------------------------------------
# long-time single-integral form
# ---------------------------------------------------------------------------


def test_longtime_form_requires_involutory_coupling():
    model, grid, bath, _ = decay_scenario(n=64)
    bad = QOperator(SPIN, np.diag([1.0, 0.5]), hermitian_hint=True)
    with pytest.raises(ValueError):
        longtime_markov_correction(model, mixed_state(0.8), bad, pauli("z"), bath, grid)


def test_longtime_form_identity_coupling_zero():
    model, grid, bath, _ = decay_scenario(n=64)
    eye = QOperator(SPIN, np.eye(2), hermitian_hint=True)
    val = longtime_markov_correction(model, mixed_state(0.8), eye, pauli("z"), bath, grid)
    assert abs(val) < 1e-12


def test_longtime_form_matches_exact_expression():
    eps, gamma_decay, lam, gamma_bath, a = 1.0, 0.05, 5e-4, 1.0, 0.8
    span = 10.0 / gamma_decay
    model = LindbladModel.decaying_spin(eps, gamma_decay, 0.0, span)
    grid = TimeGrid(0.0, span, 800)
    bath = BathCorrelator.single(lam, gamma_bath)
    val = longtime_markov_correction(
        model, mixed_state(a), pauli("x"), pauli("z"), bath, grid
    )
    decayed = np.exp(-gamma_decay * span)
    exact = (2 * lam / gamma_bath) * (
        2 * (1 - decayed) / gamma_decay - 4 * a * span * decayed
    )
    assert val.real == pytest.approx(exact, rel=1e-4)
    assert abs(val.imag) < 1e-10
    # Long-time plateau: 4 lam / (gamma_bath * gamma_decay) up to transients.
    assert val.real == pytest.approx(4 * lam / (gamma_bath * gamma_decay), rel=1e-3)


def test_longtime_form_agrees_with_quadrature_when_bath_is_fast():
    # Validity regime: bath decay much faster than both the system decay and
    # the level splitting.
    eps, gamma_decay, gamma_bath = 0.05, 0.05, 1.0
    lam = 5e-4
    span = 10.0 / gamma_decay
    model = LindbladModel.decaying_spin(eps, gamma_decay, 0.0, span)
    grid = TimeGrid(0.0, span, 1000)
    bath = BathCorrelator.single(lam, gamma_bath)
    corr = build_correlator_grid(model, mixed_state(0.8), pauli("x"), pauli("z"), grid)
    quad = correction_integral(corr, bath).total
    lt = longtime_markov_correction(model, mixed_state(0.8), pauli("x"), pauli("z"), bath, grid)
    assert abs(quad - lt) / abs(lt) < 0.05


# ---------------------------------------------------------------------------
# decay-rate fit
# ---------------------------------------------------------------------------


def synthetic_equal_time(kappa, span, n, stationary=-1.0, amplitude=2.0):
    grid = TimeGrid(0.0, span, n)
    lags = grid.t - grid.times()
    sandwich = stationary + amplitude * np.exp(-kappa * lags)
    return EqualTimeData(
        grid=grid,
        sandwich=sandwich.astype(complex),
        oo_before=np.full(n + 1, stationary, dtype=complex),
        oo_after=np.full(n + 1, stationary, dtype=complex),
        a_series=np.full(n + 1, stationary, dtype=complex),
    )


def test_fit_recovers_synthetic_rate_exactly():
    kappa = 0.7
    data = synthetic_equal_time(kappa, span=40.0 / kappa, n=400)
    assert fit_correlator_decay(data) == pytest.approx(kappa, rel=1e-6)


def test_fit_recovers_model_decay_rate():
    gamma_decay = 0.25
    span = 12.0 / gamma_decay
    model = LindbladModel.decaying_spin(1.0, gamma_decay, 0.0, span)
    grid = TimeGrid(0.0, span, 300)
    corr = build_correlator_grid(model, mixed_state(0.8), pauli("x"), pauli("z"), grid)
    kappa = fit_correlator_decay(corr)
    assert kappa == pytest.approx(gamma_decay, rel=0.1)


def test_fit_fails_for_non_decaying_correlators():
    h = PiecewiseHamiltonian.constant(
        QOperator(SPIN, 0.5 * pauli("z").elements, hermitian_hint=True), 0.0, 20.0
    )
    grid = TimeGrid(0.0, 20.0, 100)
    corr = build_correlator_grid(h, mixed_state(0.8), pauli("x"), pauli("z"), grid)
    assert fit_correlator_decay(corr) is None


def test_fit_needs_enough_samples():
    data = synthetic_equal_time(0.5, span=10.0, n=4)
    with pytest.raises(ValueError):
        fit_correlator_decay(data)


# ---------------------------------------------------------------------------
# fourth-order consistency
# ---------------------------------------------------------------------------


def test_zero_ratio_gives_zero_estimate():
    bath = BathCorrelator.single(0.1, 1.0)
    est = fourth_order_consistency(0.0, 0.5, bath)
    assert est.fourth_order_ratio == 0.0
    assert not est.separable_growth


def test_five_term_identity_for_pauli_pair():
    span = 8.0
    model = LindbladModel.decaying_spin(1.0, 0.25, 0.0, span)
    grid = TimeGrid(0.0, span, 64)
    bath = BathCorrelator.single(0.02, 2.0)
    est = fourth_order_consistency(
        -0.04, 0.25, bath,
        model=model, rho0=mixed_state(0.8), o=pauli("x"), a=pauli("z"), grid=grid,
    )
    assert est.five_term_residual is not None
    assert est.five_term_residual <= 1e-10
    assert est.fourth_order_ratio == pytest.approx(0.04**2)


def test_missing_decay_sets_growth_flag_and_bound_fallback():
    bath = BathCorrelator.single(0.1, 1.0)
    est = fourth_order_consistency(0.02, None, bath, bound_ratio=0.5)
    assert est.separable_growth
    assert est.fourth_order_ratio == pytest.approx(0.25)
    with pytest.raises(ValueError):
        fourth_order_consistency(0.02, None, bath)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------


def test_grid_csv_round_trip(tmp_path):
    _, _, bath, corr = decay_scenario(n=24)
    path = tmp_path / "grid.csv"
    save_correlator_grid(path, corr)
    back = load_correlator_grid(path)
    tri = np.tril_indices(25)
    for k in range(4):
        assert np.abs(back.values[k][tri] - corr.values[k][tri]).max() < 1e-12
    assert np.abs(back.a_series - corr.a_series).max() < 1e-12
    assert back.grid.n_steps == corr.grid.n_steps
    ratio_orig = abs(correction_integral(corr, bath).total / corr.a_final)
    ratio_back = abs(correction_integral(back, bath).total / back.a_final)
    assert ratio_back == pytest.approx(ratio_orig, rel=1e-12)


def test_grid_csv_rejects_incomplete_files(tmp_path):
    _, _, _, corr = decay_scenario(n=24)
    path = tmp_path / "grid.csv"
    save_correlator_grid(path, corr)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:40]) + "\n")
    with pytest.raises(ValueError):
        load_correlator_grid(path)
