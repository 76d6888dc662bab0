import numpy as np
import pytest

from qverify.baths import (
    BathCorrelator,
    BathFitError,
    DiscretizedBath,
    abs_double_integral,
    correlator_value,
    exact_mode_correlator,
    fit_exponential,
    load_correlator_samples,
    save_correlator_samples,
)
from qverify.quadrature import simplex_trapezoid


def test_correlator_single_term_values():
    bath = BathCorrelator.single(2.0, 0.5)
    assert correlator_value(bath, 1.0, 1.0) == pytest.approx(2.0)
    assert correlator_value(bath, 3.0, 1.0) == pytest.approx(2.0 * np.exp(-1.0))
    # |t1 - t2| = 1/gamma gives lam/e.
    assert correlator_value(bath, 0.0, 2.0) == pytest.approx(2.0 / np.e)


def test_correlator_two_terms_add():
    b1 = BathCorrelator.single(1.0, 0.3, 0.2)
    b2 = BathCorrelator.single(0.5, 1.1, -0.7)
    both = BathCorrelator(b1.terms + b2.terms)
    t1, t2 = 1.7, 0.4
    assert correlator_value(both, t1, t2) == pytest.approx(
        correlator_value(b1, t1, t2) + correlator_value(b2, t1, t2)
    )


def test_correlator_hermiticity_pairing():
    bath = BathCorrelator(((1.0, 0.4, 0.9), (0.2, 1.5, -2.0)))
    rng = np.random.default_rng(0)
    for _ in range(20):
        t1, t2 = rng.uniform(0, 5, size=2)
        forward = correlator_value(bath, t1, t2)
        backward = correlator_value(bath, t2, t1)
        assert abs(forward - np.conj(backward)) <= 1e-12


def test_correlator_rejects_negative_decay():
    with pytest.raises(ValueError):
        BathCorrelator(((1.0, -0.1, 0.0),))


def test_correlator_warns_on_negative_zero_lag():
    with pytest.warns(UserWarning):
        BathCorrelator(((-1.0, 0.5, 0.0),))


def test_abs_double_integral_closed_form_limits():
    bath = BathCorrelator.single(0.7, 1.3)
    assert abs_double_integral(bath, 2.0, 2.0) == 0.0
    span = 4.0
    expected = 0.7 * (span / 1.3 + (np.exp(-1.3 * span) - 1.0) / 1.3**2)
    assert abs_double_integral(bath, 0.0, span) == pytest.approx(expected, rel=1e-14)


def test_abs_double_integral_approaches_linear_growth():
    gamma = 1.0
    lam = gamma
    span = 20.0 / gamma
    value = abs_double_integral(BathCorrelator.single(lam, gamma), 0.0, span)
    assert abs(value / span - lam / gamma) / (lam / gamma) < 0.05


def test_abs_double_integral_matches_quadrature_oracle():
    bath = BathCorrelator.single(1.4, 0.9)
    t0, t, n = 0.0, 3.0, 1024
    times = np.linspace(t0, t, n + 1)
    values = np.abs(correlator_value(bath, times[:, None], times[None, :]))
    numeric = simplex_trapezoid(values, (t - t0) / n).real
    assert numeric == pytest.approx(abs_double_integral(bath, t0, t), rel=1e-6)


def test_abs_double_integral_multi_term_numeric():
    bath = BathCorrelator(((0.8, 0.6, 0.0), (0.4, 2.0, 1.0)))
    value = abs_double_integral(bath, 0.0, 2.0, n_steps=512)
    finer = abs_double_integral(bath, 0.0, 2.0, n_steps=1024)
    assert value == pytest.approx(finer, rel=1e-4)


def test_abs_double_integral_monotone_and_linear_in_amplitude():
    bath = BathCorrelator.single(0.5, 0.8)
    values = [abs_double_integral(bath, 0.0, t) for t in (0.5, 1.0, 2.0, 4.0)]
    assert all(b > a for a, b in zip(values, values[1:]))
    scaled = abs_double_integral(bath.scaled(3.0), 0.0, 2.0)
    assert scaled == 3.0 * abs_double_integral(bath, 0.0, 2.0)


def test_exact_mode_correlator_zero_lag():
    bath = DiscretizedBath([(1.0, 0.3), (2.0, 0.4)])
    assert exact_mode_correlator(bath, 0.0) == pytest.approx(0.09 + 0.16)


def test_exact_mode_correlator_single_mode_phasor():
    bath = DiscretizedBath([(1.5, 0.2)])
    tau = 0.7
    assert exact_mode_correlator(bath, tau) == pytest.approx(
        0.04 * np.exp(-1.5j * tau)
    )


def test_exact_mode_correlator_thermal_zero_lag():
    bath = DiscretizedBath([(1.0, 0.3), (2.0, 0.4)], occupations=(0.5, 0.25))
    expected = 0.09 * (2 * 0.5 + 1) + 0.16 * (2 * 0.25 + 1)
    assert exact_mode_correlator(bath, 0.0) == pytest.approx(expected)


def test_correlator_terms_match_exact_values():
    bath = DiscretizedBath([(1.0, 0.3), (2.0, 0.4)], occupations=0.3)
    comb = bath.correlator_terms()
    taus = np.linspace(0.0, 3.0, 7)
    for tau in taus:
        assert correlator_value(comb, tau, 0.0) == pytest.approx(
            exact_mode_correlator(bath, tau), abs=1e-12
        )


def test_discretized_bath_validation():
    with pytest.raises(ValueError):
        DiscretizedBath([])
    with pytest.raises(ValueError):
        DiscretizedBath([(0.0, 0.1)])
    with pytest.raises(ValueError):
        DiscretizedBath([(1.0, 0.1)], truncation_dim=1)


def test_recurrence_time():
    bath = DiscretizedBath([(0.5, 0.1), (1.0, 0.1), (1.5, 0.1)])
    assert bath.recurrence_time() == pytest.approx(2 * np.pi / 0.5)
    assert DiscretizedBath([(1.0, 0.1)]).recurrence_time() == np.inf


def test_fit_recovers_exact_exponential():
    lam, gamma, omega = 1.7, 0.8, 1.3
    taus = np.linspace(0.0, 4.0, 60)
    vals = lam * np.exp(-gamma * taus - 1j * omega * taus)
    fit = fit_exponential(list(zip(taus, vals)), (0.2 / gamma, 3.0 / gamma))
    assert fit.amplitude == pytest.approx(lam, rel=1e-6)
    assert fit.decay == pytest.approx(gamma, rel=1e-6)
    assert fit.frequency == pytest.approx(omega, rel=1e-6)
    assert fit.residual < 1e-10


def test_fit_with_noise_recovers_decay_within_five_percent():
    rng = np.random.default_rng(42)
    lam, gamma = 1.0, 0.5
    taus = np.linspace(0.0, 6.0, 120)
    vals = lam * np.exp(-gamma * taus)
    vals = vals + 0.01 * rng.normal(size=taus.size)
    fit = fit_exponential(list(zip(taus, vals)), (0.2 / gamma, 3.0 / gamma))
    assert fit.decay == pytest.approx(gamma, rel=0.05)


def test_fit_rejects_growing_data():
    taus = np.linspace(0.0, 2.0, 30)
    vals = np.exp(+0.5 * taus)
    with pytest.raises(BathFitError):
        fit_exponential(list(zip(taus, vals)), 2.0)


def test_fit_requires_enough_samples():
    taus = np.linspace(0.0, 1.0, 5)
    vals = np.exp(-taus)
    with pytest.raises(BathFitError):
        fit_exponential(list(zip(taus, vals)), 1.0)


def test_fit_lorentzian_comb_recovers_width():
    lam, gamma, center = 0.9, 0.4, 2.0
    comb = DiscretizedBath.lorentzian_band(lam, gamma, center, n_modes=80)
    recurrence = comb.recurrence_time()
    hi = min(3.0 / gamma, 0.8 * recurrence)
    taus = np.linspace(0.0, hi, 100)
    vals = exact_mode_correlator(comb, taus)
    fit = fit_exponential(list(zip(taus, vals)), (0.2 / gamma, hi))
    assert fit.decay == pytest.approx(gamma, rel=0.2)
    assert fit.amplitude == pytest.approx(lam, rel=0.05)
    assert fit.frequency == pytest.approx(center, rel=0.05)


def test_flat_band_decays_before_recurrence():
    comb = DiscretizedBath.flat_band(40, cutoff=4.0, coupling=0.05)
    c0 = abs(exact_mode_correlator(comb, 0.0))
    # Dirichlet-kernel envelope: well below the peak before the revival.
    mid = abs(exact_mode_correlator(comb, 0.4 * comb.recurrence_time()))
    back = abs(exact_mode_correlator(comb, comb.recurrence_time()))
    assert mid < 0.2 * c0
    assert back == pytest.approx(c0, rel=1e-9)


def test_sample_csv_round_trip(tmp_path):
    taus = np.linspace(0.0, 1.0, 11)
    vals = np.exp(-taus) * np.exp(-0.3j * taus)
    path = tmp_path / "samples.csv"
    save_correlator_samples(path, taus, vals)
    taus2, vals2 = load_correlator_samples(path)
    assert np.abs(taus2 - taus).max() < 1e-15
    assert np.abs(vals2 - vals).max() < 1e-15
