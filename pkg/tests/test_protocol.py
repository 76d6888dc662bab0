import numpy as np
import pytest

from qverify.baths import BathCorrelator
from qverify.dynamics import LindbladModel, PiecewiseHamiltonian, TimeGrid
from qverify.estimator import CorrelatorGrid, build_correlator_grid
from qverify.protocol import (
    Channel,
    HorizonResult,
    MultiChannelConfig,
    decide_verdict,
    reliable_time_horizon,
    run_protocol,
    run_protocol_bounded,
    run_protocol_multichannel,
    run_protocol_suite,
)
from qverify.spaces import CompositeSpace, DensityMatrix, QOperator, embed, pauli

SPIN = CompositeSpace((2,))


def mixed_state(a):
    return DensityMatrix(SPIN, np.diag([a, 1 - a]).astype(complex))


def reliable_setup(lam_factor=0.01, n=600):
    eps, gamma_decay, gamma_bath = 0.1, 0.05, 1.0
    lam = lam_factor * gamma_bath * gamma_decay
    span = 10.0 / gamma_decay
    model = LindbladModel.decaying_spin(eps, gamma_decay, 0.0, span)
    grid = TimeGrid(0.0, span, n)
    bath = BathCorrelator.single(lam, gamma_bath)
    return model, grid, bath


def test_zero_coupling_is_reliable():
    model, grid, _ = reliable_setup()
    bath = BathCorrelator.single(0.0, 1.0)
    rep = run_protocol(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    assert rep.verdict == "reliable"
    assert rep.ratio == 0.0
    assert rep.all_times


def test_weak_coupling_scenario_reliable_with_expected_ratio():
    # lam/(gamma_bath * gamma_decay) = 0.01 gives ratio near 4 * 0.01 in the
    # regime where the bath is fast compared to both system scales.
    model, grid, bath = reliable_setup()
    rep = run_protocol(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    assert rep.verdict == "reliable"
    assert rep.ratio == pytest.approx(0.04, rel=0.08)
    assert rep.convergence.decay_rate == pytest.approx(0.05, rel=0.1)
    assert rep.all_times


def test_decoherence_free_spin_rejected():
    # Ideal system is decoherence free; the measured correlators decay at the
    # rate the bath itself induces, so the self-consistent ratio is ~4.
    gamma_bath = 5.0
    lam = gamma_bath**2 / 20.0
    induced = lam / gamma_bath
    span = 14.0 / induced
    model = LindbladModel.decaying_spin(0.05, induced, 0.0, span)
    grid = TimeGrid(0.0, span, 1000)
    bath = BathCorrelator.single(lam, gamma_bath)
    reports = run_protocol_suite(
        model, mixed_state(0.8),
        [("sigma_z", pauli("z")), ("sigma_x", pauli("x"))],
        pauli("x"), bath, grid, 0.1, source_tag="perturbed-measured",
    )
    by_name = {r.observable: r for r in reports}
    assert by_name["sigma_z"].verdict == "unreliable"
    assert by_name["sigma_z"].ratio == pytest.approx(4.0, rel=0.1)
    # In-plane observable vanishes identically: division guard, flagged as
    # accidental because the sibling observable failed.
    assert by_name["sigma_x"].verdict == "inconclusive"
    assert by_name["sigma_x"].by_accident
    assert not by_name["sigma_z"].by_accident


def test_verdict_monotonic_in_eta():
    for ratio, guard in ((0.03, 0.0009), (0.2, 0.04), (0.5, 0.25)):
        verdicts = [
            decide_verdict(eta, 1.0, 1e-6, ratio, guard_ratio=guard, all_times=False)
            for eta in (0.05, 0.1, 0.3, 0.6, 0.9)
        ]
        seen_reliable = False
        for v in verdicts:
            if seen_reliable:
                assert v == "reliable"
            seen_reliable = seen_reliable or v == "reliable"


def test_verdict_floor_guard():
    assert decide_verdict(0.1, 1e-9, 1e-6, 0.0, guard_ratio=0.0, all_times=True) == "inconclusive"


def test_small_ratio_without_guard_is_inconclusive():
    v = decide_verdict(0.1, 1.0, 1e-6, 0.05, guard_ratio=0.5, all_times=False)
    assert v == "inconclusive"


def test_bounded_mode_band():
    assert decide_verdict(0.1, 1.0, 1e-6, 0.05, guard_ratio=0.0025, all_times=False, mode="bounded") == "reliable"
    assert decide_verdict(0.1, 1.0, 1e-6, 0.2, guard_ratio=0.04, all_times=False, mode="bounded") == "inconclusive"
    assert decide_verdict(0.1, 1.0, 1e-6, 0.5, guard_ratio=0.25, all_times=False, mode="bounded") == "unreliable"


def test_bounded_run_zero_coupling_reliable():
    model, grid, _ = reliable_setup()
    bath = BathCorrelator.single(0.0, 1.0)
    rep = run_protocol_bounded(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    assert rep.verdict == "reliable"


def test_bound_ratio_dominates_full_ratio():
    model, grid, bath = reliable_setup()
    full = run_protocol(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    bounded = run_protocol_bounded(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    assert bounded.bound_ratio >= full.ratio
    assert full.bound_ratio == pytest.approx(bounded.bound_ratio, rel=1e-9)


def test_bounded_never_reliable_when_full_unreliable():
    scenarios = []
    for lam_factor in (0.01, 0.3, 1.5):
        model, grid, bath = reliable_setup(lam_factor=lam_factor, n=400)
        scenarios.append((model, grid, bath))
    for model, grid, bath in scenarios:
        full = run_protocol(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
        bounded = run_protocol_bounded(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
        if full.verdict == "unreliable":
            assert bounded.verdict != "reliable"


def test_protocol_accepts_external_grid():
    model, grid, bath = reliable_setup(n=400)
    corr = build_correlator_grid(model, mixed_state(0.8), pauli("x"), pauli("z"), grid)
    direct = run_protocol(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    fed = run_protocol(
        model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid, correlators=corr
    )
    assert fed.ratio == pytest.approx(direct.ratio, rel=1e-12)
    assert fed.verdict == direct.verdict


def test_report_serialization_round_trip():
    import json

    model, grid, bath = reliable_setup(n=400)
    rep = run_protocol(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    blob = json.loads(rep.to_json())
    assert blob["verdict"] == "reliable"
    assert blob["ratio"] == pytest.approx(rep.ratio)
    row = rep.to_csv_row()
    assert len(row.split(",")) == len(rep.CSV_FIELDS)
    assert "reliable" in row


# ---------------------------------------------------------------------------
# multichannel
# ---------------------------------------------------------------------------


def test_single_channel_matches_plain_protocol():
    model, grid, bath = reliable_setup(n=400)
    config = MultiChannelConfig(channels=(Channel(pauli("x"), bath),))
    multi = run_protocol_multichannel(model, mixed_state(0.8), pauli("z"), config, grid)
    plain = run_protocol(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    assert multi.c2_total == pytest.approx(plain.c2_total, rel=1e-12)
    assert multi.verdict == plain.verdict
    assert multi.n_channel_pairs == 1


def test_two_identical_channels_double_exactly():
    model, grid, bath = reliable_setup(n=400)
    one = MultiChannelConfig(channels=(Channel(pauli("x"), bath),))
    two = MultiChannelConfig(
        channels=(Channel(pauli("x"), bath), Channel(pauli("x"), bath))
    )
    r1 = run_protocol_multichannel(model, mixed_state(0.8), pauli("z"), one, grid)
    r2 = run_protocol_multichannel(model, mixed_state(0.8), pauli("z"), two, grid)
    assert abs(r2.c2_total - 2 * r1.c2_total) <= 1e-12 * abs(r2.c2_total)
    assert r2.n_channel_pairs == 2


def test_cross_terms_require_cross_baths():
    bath = BathCorrelator.single(0.01, 1.0)
    with pytest.raises(ValueError):
        MultiChannelConfig(
            channels=(Channel(pauli("x"), bath), Channel(pauli("z"), bath)),
            cross_terms=True,
        )


def test_cross_terms_counted_quadratically():
    model, grid, bath = reliable_setup(n=400)
    cross = {(0, 1): BathCorrelator.single(0.0, 1.0)}
    config = MultiChannelConfig(
        channels=(Channel(pauli("x"), bath), Channel(pauli("x"), bath)),
        cross_terms=True,
        cross_baths=cross,
    )
    rep = run_protocol_multichannel(model, mixed_state(0.8), pauli("z"), config, grid)
    assert rep.n_channel_pairs == 4


def test_factorizing_channel_contributes_zero():
    # Two non-interacting qubits, observable on qubit 1, channel on qubit 2:
    # the correlators factorize and the combination cancels identically.
    pair = CompositeSpace((2, 2))
    h1 = embed(QOperator(SPIN, 0.5 * 1.0 * pauli("z").elements, hermitian_hint=True), 0, pair)
    h2 = embed(QOperator(SPIN, 0.5 * 0.7 * pauli("z").elements, hermitian_hint=True), 1, pair)
    h = PiecewiseHamiltonian.constant(h1 + h2, 0.0, 6.0)
    rho0 = DensityMatrix(pair, np.kron(np.diag([0.8, 0.2]), np.diag([0.6, 0.4])).astype(complex))
    a = embed(pauli("z"), 0, pair)
    o2 = embed(pauli("x"), 1, pair)
    grid = TimeGrid(0.0, 6.0, 64)
    bath = BathCorrelator.single(0.05, 2.0)
    corr = build_correlator_grid(h, rho0, o2, a, grid)
    from qverify.estimator import correction_integral

    assert abs(correction_integral(corr, bath).total) < 1e-12


# ---------------------------------------------------------------------------
# horizon
# ---------------------------------------------------------------------------


def test_horizon_zero_coupling_all_times():
    model, grid, _ = reliable_setup(n=200)
    bath = BathCorrelator.single(0.0, 1.0)
    hz = reliable_time_horizon(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    assert hz.all_times
    assert hz.time == grid.t


def test_horizon_markovian_regime_all_times():
    model, grid, bath = reliable_setup(n=600)
    hz = reliable_time_horizon(model, mixed_state(0.8), pauli("z"), pauli("x"), bath, grid)
    assert hz.all_times
    assert hz.time == grid.t


def test_horizon_constant_grid_crossing():
    from scipy.optimize import brentq

    lam, gamma = 0.05, 1.0
    span, n = 8.0, 512
    grid = TimeGrid(0.0, span, n)
    corr = CorrelatorGrid.constant(grid, (1.0, 1.0, 0.5, 0.5), a_value=1.0)
    bath = BathCorrelator.single(lam, gamma)
    eta = 0.1
    hz = reliable_time_horizon(corr, bath=bath, eta=eta)
    closed = lambda t: lam * (t / gamma + (np.exp(-gamma * t) - 1.0) / gamma**2) - eta
    crossing = brentq(closed, 0.01, span)
    assert hz.time is not None
    assert abs(hz.time - crossing) <= grid.dt


def test_horizon_none_when_first_step_fails():
    span, n = 4.0, 64
    grid = TimeGrid(0.0, span, n)
    corr = CorrelatorGrid.constant(grid, (1.0, 1.0, 0.5, 0.5), a_value=1.0)
    bath = BathCorrelator.single(50.0, 1.0)
    hz = reliable_time_horizon(corr, bath=bath, eta=0.01)
    assert hz.time is None
