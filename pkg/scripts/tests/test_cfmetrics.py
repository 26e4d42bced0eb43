from dataclasses import replace

import numpy as np
import pytest

from cfmetrics import (
    DecompositionSeries,
    IdentityReport,
    coi_frequency,
    coi_tracking_ratio,
    complex_frequency_of_signal,
    dc_weighted_components,
    decompose,
    dominance_ratio,
    first_swing_amplitude,
    identity_report,
    loss_cf,
    relative_residual,
    rocof_at,
    segment_bounds,
    segment_gradient,
    settling_time,
    weighted_current_component,
    weighted_voltage_component,
)
from dynsim import Trajectory
from netmodel import Branch, Bus, Network, build_admittance


def make_trajectory(Y, V, vdot, dt, **extra):
    rows = len(V)
    return Trajectory(
        t=np.arange(rows) * dt,
        bus_ids=Y.bus_ids,
        V=V,
        I=(Y.matrix @ V.T).T,
        states=extra.pop("states", np.empty((rows, 0))),
        state_names=extra.pop("state_names", []),
        vdot=vdot,
        idot=None if vdot is None else (Y.matrix @ vdot.T).T,
        **extra,
    )


@pytest.fixture
def rotating(ring_network, rng):
    """Every phasor turns at the same 0.3 rad/s offset; no power changes"""
    Y = build_admittance(ring_network)
    dt = 1e-3
    t = np.arange(200) * dt
    V0 = (1 + 0.03 * rng.standard_normal(3)) * np.exp(1j * 0.1 * rng.standard_normal(3))
    V = V0[None, :] * np.exp(1j * 0.3 * t)[:, None]
    return Y, make_trajectory(Y, V, 1j * 0.3 * V, dt)


@pytest.fixture
def breathing():
    """Resistive two-bus network whose real voltages grow as e^(σt)"""
    network = Network(
        buses=[Bus(id=1), Bus(id=2)],
        branches=[Branch(from_bus=1, to_bus=2, resistance_r=0.1, reactance_x=0.0)],
    )
    Y = build_admittance(network)
    dt = 1e-3
    t = np.arange(100) * dt
    V = np.array([1.0, 0.95])[None, :] * np.exp(0.2 * t)[:, None] + 0j
    return Y, make_trajectory(Y, V, 0.2 * V, dt)


def test_constant_phasor_has_zero_complex_frequency():
    samples = np.full(50, 1.2 * np.exp(0.3j))
    np.testing.assert_allclose(complex_frequency_of_signal(samples, 1e-3), 0, atol=1e-12)


def test_exponential_recovers_its_exponent():
    t = np.arange(100) * 1e-3
    samples = 0.9 * np.exp((-0.5 + 2j) * t)
    eta = complex_frequency_of_signal(samples, 1e-3)
    np.testing.assert_allclose(eta, -0.5 + 2j, atol=1e-9)


@pytest.mark.parametrize("exponent", [-10, 10, 10j, -10j, 6 + 8j, -6 - 8j, -3 + 4j, 0.01j, -0.5 + 2j])
@pytest.mark.parametrize("mode", ["analytic", "diff"])
def test_exponent_recovered_across_the_range(exponent, mode):
    t = np.arange(400) * 1e-3
    samples = (0.7 - 0.2j) * np.exp(exponent * t)
    eta = complex_frequency_of_signal(samples, 1e-3, mode, derivative=exponent * samples)
    np.testing.assert_allclose(eta, exponent, rtol=1e-5)


def test_rotation_across_branch_cut_is_unwrapped():
    t = np.arange(100) * 0.01
    eta = complex_frequency_of_signal(np.exp(250j * t), 0.01)
    np.testing.assert_allclose(eta.imag, 250.0, rtol=1e-9)
    np.testing.assert_allclose(eta.real, 0.0, atol=1e-9)


def test_analytic_mode_divides_the_derivative():
    samples = np.array([1.0 + 1j, 2.0, 0.0])
    derivative = np.array([1j, 1.0, 1.0])
    eta = complex_frequency_of_signal(samples, 1e-3, "analytic", derivative=derivative)
    assert eta[0] == pytest.approx(1j / (1 + 1j))
    assert eta[1] == pytest.approx(0.5)
    assert np.isnan(eta[2])


def test_analytic_mode_needs_derivative():
    with pytest.raises(ValueError):
        complex_frequency_of_signal(np.ones(3), 1e-3, "analytic")


def test_unknown_mode_rejected():
    with pytest.raises(ValueError, match="mode"):
        complex_frequency_of_signal(np.ones(3), 1e-3, "spline")


def test_difference_error_shrinks_quadratically():
    def max_error(dt):
        t = np.arange(0, 2.0 + dt / 2, dt)
        samples = (1 + 0.1 * np.sin(3 * t)) * np.exp(1j * np.sin(5 * t))
        exact = 0.3 * np.cos(3 * t) / (1 + 0.1 * np.sin(3 * t)) + 5j * np.cos(5 * t)
        return np.max(np.abs(complex_frequency_of_signal(samples, dt) - exact))

    assert max_error(0.01) / max_error(0.005) > 3.0


def test_points_below_floor_are_undefined():
    samples = np.array([1.0, 1.0, 1e-9, 1.0, 1.0, 1.0], dtype=complex)
    eta = complex_frequency_of_signal(samples, 1e-3)
    assert np.isnan(eta[2])
    assert np.isfinite(eta[[0, 1, 3, 4, 5]]).all()


def test_segment_bounds_split_at_breaks_and_gaps():
    valid = np.array([True, True, True, False, True, True, True, True])
    starts, ends = segment_bounds(valid, breaks=[6])
    assert starts.tolist() == [0, 4, 6]
    assert ends.tolist() == [3, 6, 8]


def test_segment_gradient_never_differences_across_a_break():
    y = np.arange(10, dtype=float)
    y[5:] += 100.0
    np.testing.assert_allclose(segment_gradient(y, 1.0, breaks=[5]), 1.0)


def test_segment_gradient_short_segments():
    y = np.array([0.0, 2.0, 5.0, 7.0, 9.0])
    valid = np.array([True, True, False, True, False])
    grad = segment_gradient(y, 1.0, valid)
    assert grad[0] == pytest.approx(2.0)
    assert grad[1] == pytest.approx(2.0)
    assert np.isnan(grad[2])
    # lone valid point
    assert np.isnan(grad[3])
    assert np.isnan(grad[4])


def test_uniform_rotation_components(rotating):
    _, trajectory = rotating
    for mode in ("analytic", "diff"):
        series = decompose(trajectory, mode)
        np.testing.assert_allclose(series.eta_v_sys, 0.3j, atol=1e-8)
        np.testing.assert_allclose(series.eta_i_sys, 0.3j, atol=1e-8)
        np.testing.assert_allclose(series.eta_sl, 0.0, atol=1e-8)
        assert np.nanmax(series.residual) < 1e-6
        assert series.omega_coi is None


def test_weighted_components_match_decomposition(rotating):
    _, trajectory = rotating
    series = decompose(trajectory, "analytic")
    np.testing.assert_allclose(weighted_voltage_component(trajectory, "analytic"), series.eta_v_sys)
    np.testing.assert_allclose(weighted_current_component(trajectory, "analytic"), series.eta_i_sys)


def test_loss_cf_undefined_without_losses():
    s_l = np.zeros(10, dtype=complex)
    assert np.isnan(loss_cf(s_l, 1e-3)).all()


def test_decompose_without_analytic_derivatives_rejected(rotating):
    _, trajectory = rotating
    trajectory.vdot = None
    with pytest.raises(ValueError, match="diff"):
        decompose(trajectory, "analytic")


def test_identities_hold_under_uniform_rotation(rotating):
    Y, trajectory = rotating
    for mode in ("analytic", "diff"):
        report = identity_report(trajectory, Y, mode)
        assert report.max_power_residual[0] < 1e-6
        assert report.max_current_residual[0] < 1e-6
        assert report.excluded_buses == ()


def test_identities_hold_for_arbitrary_motion(ring_network, rng):
    Y = build_admittance(ring_network)
    dt = 1e-3
    t = np.arange(100) * dt
    V0 = (1 + 0.03 * rng.standard_normal(3)) * np.exp(1j * 0.1 * rng.standard_normal(3))
    rates = rng.standard_normal(3) * 0.5 + 1j * rng.standard_normal(3)
    V = V0[None, :] * np.exp(np.outer(t, rates))
    trajectory = make_trajectory(Y, V, V * rates[None, :], dt)
    report = identity_report(trajectory, Y, "analytic")
    assert report.max_power_residual[0] < 1e-10
    assert report.max_current_residual[0] < 1e-10
    assert np.nanmax(decompose(trajectory, "analytic").residual) < 1e-10


def test_dc_network_reduces_to_real_rates(breathing):
    _, trajectory = breathing
    rho_v, rho_i = dc_weighted_components(trajectory, "analytic")
    np.testing.assert_allclose(rho_v, 0.2, rtol=1e-9)
    np.testing.assert_allclose(rho_i, 0.2, rtol=1e-9)
    for mode in ("analytic", "diff"):
        series = decompose(trajectory, mode)
        np.testing.assert_allclose(series.eta_sl, 0.4, rtol=1e-6)
        for part in (series.eta_sl, series.eta_v_sys, series.eta_i_sys):
            np.testing.assert_allclose(part.imag, 0.0, atol=1e-12)


def test_relative_residual_scaling():
    assert relative_residual(np.array([1.0]), np.array([1.0 + 1e-8]))[0] == pytest.approx(1e-8, rel=1e-6)
    # tiny values are measured against the floor
    assert relative_residual(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-3)
    assert relative_residual(np.array([0.0]), np.array([0.0]), np.array([5.0]))[0] == 0.0


def test_identity_report_exclusions_and_maxima():
    report = IdentityReport(
        t=np.array([0.0, 0.1]),
        bus_ids=(1, 2, 3),
        power_residual=np.array([[1e-9, np.nan, 2e-9], [3e-9, np.nan, 1e-10]]),
        current_residual=np.array([[1e-12, np.nan, 1e-12], [1e-12, np.nan, 5e-12]]),
        excluded=np.array([[False, True, False], [False, True, False]]),
    )
    assert report.excluded_buses == (2,)
    assert report.max_power_residual == (3e-9, 0.1, 1)
    assert report.max_current_residual == (5e-12, 0.1, 3)
    frame = report.to_frame()
    assert len(frame) == 4
    assert list(frame.columns) == ["t", "bus", "eq9_residual", "eq13_residual"]


def test_coi_frequency_weighted_mean(rotating):
    Y, base = rotating
    rows = len(base)
    states = np.column_stack([np.full(rows, 0.99), np.full(rows, 1.01)])
    trajectory = make_trajectory(Y, base.V, base.vdot, base.dt, states=states, state_names=["a.omega", "b.omega"])
    np.testing.assert_allclose(coi_frequency(trajectory, {"a": 3.0, "b": 1.0}), 0.995)
    with pytest.raises(ValueError):
        coi_frequency(trajectory, {})


def test_rocof_of_linear_ramp():
    t = np.arange(0, 3.0005, 1e-3)
    values = np.where(t < 1.0, 1.0, 1.0 - 0.002 * (t - 1.0))
    assert rocof_at(t, values, 1.0) == pytest.approx(-0.002, rel=1e-9)


def test_rocof_window_must_lie_inside_series():
    t = np.arange(0, 1.2, 1e-3)
    with pytest.raises(ValueError, match="outside"):
        rocof_at(t, np.ones_like(t), 1.0)


def test_first_swing_stops_at_first_turn():
    t = np.arange(0, 2.0, 1e-3)
    values = -np.sin(2 * np.pi * t) * np.exp(-0.1 * t)
    amplitude = first_swing_amplitude(t, values, 0.0)
    assert amplitude == pytest.approx(np.max(np.abs(values[t <= 0.5])))
    assert amplitude > 0.95


def test_settling_time():
    t = np.arange(0, 5.0, 0.5)
    settle = np.where(t < 2.0, 1e-3, 1e-8)
    trajectory = Trajectory(t=t, bus_ids=(1,), V=np.ones((len(t), 1), dtype=complex),
                            I=np.zeros((len(t), 1), dtype=complex), states=np.empty((len(t), 0)),
                            state_names=[], settle=settle)
    assert settling_time(trajectory, 1.0, 1e-6) == pytest.approx(2.0)
    trajectory.settle = np.full(len(t), 1e-3)
    assert np.isnan(settling_time(trajectory, 1.0, 1e-6))


def test_dominance_ratio_and_export_units():
    t = np.linspace(0, 2, 5)
    omega_base = 2 * np.pi * 60
    series = DecompositionSeries(
        t=t,
        loss=np.full(5, 0.4 + 0.1j),
        eta_sl=np.zeros(5, dtype=complex),
        eta_v_sys=np.array([0, 0, 1j, -2j, 0]) * omega_base * 1e-3,
        eta_i_sys=np.array([0, 0, 3j, 4j, 0]) * omega_base * 1e-3,
        omega_coi=None,
        residual=np.zeros(5),
        mode="diff",
        omega_base=omega_base,
    )
    assert dominance_ratio(series, 1.0) == pytest.approx(2.0)
    frame = series.to_frame("pu")
    assert frame["omega_isys"].tolist() == pytest.approx([0, 0, 3e-3, 4e-3, 0])
    assert frame["omega_coi"].isna().all()
    assert frame["s_l_mag"].iloc[0] == pytest.approx(abs(0.4 + 0.1j))
    assert series.to_frame("rad/s")["omega_vsys"].iloc[3] == pytest.approx(-2e-3 * omega_base)


def test_coi_tracking_ratio_hand_value():
    t = np.linspace(0, 2, 5)
    omega_base = 2 * np.pi * 60
    series = DecompositionSeries(
        t=t,
        loss=np.full(5, 0.4 + 0.1j),
        eta_sl=np.zeros(5, dtype=complex),
        eta_v_sys=np.array([0, 0, -1e-3, -4e-3, -2.5e-3]) * 1j * omega_base,
        eta_i_sys=np.zeros(5, dtype=complex),
        omega_coi=np.array([1.0, 1.0, 0.996, 0.995, 0.997]),
        residual=np.zeros(5),
        mode="analytic",
        omega_base=omega_base,
    )
    assert coi_tracking_ratio(series, 1.0, 0.5) == pytest.approx(0.2)
    assert coi_tracking_ratio(series, 1.0) == pytest.approx(0.6)
    assert np.isnan(coi_tracking_ratio(replace(series, omega_coi=None), 1.0))
