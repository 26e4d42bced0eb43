import numpy as np
import pytest
from scipy.sparse import csr_matrix

from devices import Event, GfmVsm
from dynsim import IntegratorConfig, Trajectory, assemble, replay, run, trapezoidal_newton
from errors import SimulationError, ValidationError
from ieee39 import build_ieee39_ibr
from netmodel import branch_losses
from powerflow import solve_power_flow


def decay_problem():
    """x' = −x with no algebraic part"""

    def residual(x, y):
        return -x, np.empty(0)

    def jacobian(x, y):
        return csr_matrix([[-1.0]]), csr_matrix((1, 0)), csr_matrix((0, 1)), csr_matrix((0, 0))

    return residual, jacobian


def integrate_decay(dt, t_end=1.0, theta=0.5):
    residual, jacobian = decay_problem()
    x = np.array([1.0])
    for _ in range(int(round(t_end / dt))):
        result, _ = trapezoidal_newton(residual, jacobian, x, np.empty(0), -x, dt, theta=theta)
        x = result.x
    return x[0]


def build(scenario):
    network = scenario.effective_network()
    pf = solve_power_flow(network, scenario.power_flow_spec(), tol=1e-10)
    return assemble(network, scenario.gfm, scenario.gfl, scenario.loads, scenario.events, pf, scenario.integrator)


def with_events(scenario, events, t_end):
    return scenario.model_copy(update={"events": events, "integrator": IntegratorConfig(t_end=t_end)})


def test_trapezoidal_single_step_hand_value():
    residual, jacobian = decay_problem()
    x0 = np.array([1.0])
    result, lu = trapezoidal_newton(residual, jacobian, x0, np.empty(0), -x0, 0.1)
    assert result.x[0] == pytest.approx(0.95 / 1.05, rel=1e-12)
    assert result.iterations == 1
    assert lu is not None


def test_backward_euler_single_step():
    residual, jacobian = decay_problem()
    x0 = np.array([1.0])
    result, _ = trapezoidal_newton(residual, jacobian, x0, np.empty(0), -x0, 0.1, theta=1.0)
    assert result.x[0] == pytest.approx(1 / 1.1, rel=1e-12)


def test_trapezoidal_is_second_order():
    exact = np.exp(-1.0)
    coarse = abs(integrate_decay(0.1) - exact)
    fine = abs(integrate_decay(0.05) - exact)
    assert coarse / fine == pytest.approx(4.0, rel=0.05)


def test_converged_start_returns_without_iterating():
    residual, jacobian = decay_problem()
    x0 = np.array([0.0])
    result, lu = trapezoidal_newton(residual, jacobian, x0, np.empty(0), -x0, 0.1)
    assert result.iterations == 0
    assert lu is None
    assert result.x[0] == 0.0


def test_newton_failure_raises():
    residual, jacobian = decay_problem()
    x0 = np.array([1.0])
    with pytest.raises(SimulationError):
        trapezoidal_newton(residual, jacobian, x0, np.empty(0), -x0, 0.1, tol=1e-30, max_iter=0)


def test_assemble_starts_at_equilibrium(gfm_load_scenario):
    system = build(gfm_load_scenario)
    assert system.nx == 3
    assert np.max(np.abs(system.f)) < 1e-9
    assert np.max(np.abs(system.network_residual(system.x, system.V))) < 1e-9


def test_assemble_rejects_case_without_sources(gfm_load_scenario):
    network = gfm_load_scenario.network
    pf = solve_power_flow(network, gfm_load_scenario.power_flow_spec(), tol=1e-10)
    with pytest.raises(ValidationError, match="no sources"):
        assemble(network, [], [], gfm_load_scenario.loads, [], pf)


def test_assemble_rejects_conflicting_setpoint(gfm_load_scenario):
    scenario = gfm_load_scenario.model_copy(update={"gfm": [GfmVsm(name="gfm_1", bus=1, p_ref=0.1)]})
    with pytest.raises(ValidationError, match="gfm_1"):
        build(scenario)


def test_ieee39_state_count():
    system = build(build_ieee39_ibr(t_end=1.0, with_outage=False))
    assert system.nx == 5 * 3 + 5 * 4
    assert system.n == 39
    assert np.max(np.abs(system.f)) < 1e-9


def test_equilibrium_stays_constant(gfm_load_scenario):
    system = build(with_events(gfm_load_scenario, [], 0.2))
    trajectory = run(system)
    assert len(trajectory) == 201
    np.testing.assert_allclose(trajectory.states, np.broadcast_to(trajectory.states[0], trajectory.states.shape),
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(trajectory.V, np.broadcast_to(trajectory.V[0], trajectory.V.shape), rtol=0, atol=1e-12)
    assert trajectory.event_rows == ()
    assert np.max(trajectory.settle) < 1e-9


def test_event_is_recorded_on_its_step(gfm_load_scenario):
    scenario = with_events(gfm_load_scenario, [Event(time=1.0, kind="load-step", target=2, delta_p=0.1)], 1.1)
    trajectory = run(build(scenario))
    assert trajectory.event_rows == (1000,)
    assert trajectory.t[1000] == pytest.approx(1.0)
    # the event row already carries the post-event network solution
    assert abs(trajectory.V[1000, 1]) < abs(trajectory.V[999, 1])


def test_zero_load_step_leaves_trajectory_unchanged(gfm_load_scenario):
    step = Event(time=0.05, kind="load-step", target=2, delta_p=0.1)
    zero = Event(time=0.1, kind="load-step", target=2)
    quiet = run(build(with_events(gfm_load_scenario, [step], 0.2)))
    stepped = run(build(with_events(gfm_load_scenario, [step, zero], 0.2)))
    assert np.array_equal(quiet.V, stepped.V)
    assert np.array_equal(quiet.states, stepped.states)
    assert stepped.event_rows == quiet.event_rows == (50,)


def test_load_step_slows_the_converter(gfm_load_scenario):
    scenario = with_events(gfm_load_scenario, [Event(time=0.05, kind="load-step", target=2, delta_p=0.1)], 0.5)
    trajectory = run(build(scenario))
    omega = trajectory.state("gfm_1.omega")
    assert omega[-1] < 1.0
    assert trajectory.settle[60] > trajectory.settle[0]


def test_analytic_voltage_derivative_matches_differences(gfm_load_scenario):
    scenario = with_events(gfm_load_scenario, [Event(time=0.1, kind="load-step", target=2, delta_p=0.1)], 0.4)
    trajectory = run(build(scenario))
    dt = trajectory.dt
    rows = np.arange(150, 300)
    numeric = (trajectory.V[rows + 1] - trajectory.V[rows - 1]) / (2 * dt)
    analytic = trajectory.vdot[rows]
    assert np.max(np.abs(numeric - analytic)) <= 1e-3 * np.max(np.abs(analytic))
    np.testing.assert_allclose(trajectory.idot, (build(scenario).Y.matrix @ trajectory.vdot.T).T, atol=1e-12)


def test_losses_equal_branch_sum(gfm_load_scenario):
    scenario = with_events(gfm_load_scenario, [Event(time=0.05, kind="load-step", target=2, delta_p=0.1)], 0.1)
    trajectory = run(build(scenario))
    for row in (0, 50, 100):
        expected = branch_losses(scenario.network, trajectory.V[row])
        assert trajectory.S[row].sum() == pytest.approx(expected, abs=1e-12)


def test_csv_round_trip(gfm_load_scenario, tmp_path):
    scenario = with_events(gfm_load_scenario, [Event(time=0.05, kind="load-step", target=2, delta_p=0.1)], 0.1)
    trajectory = run(build(scenario))
    path = tmp_path / "trajectory.csv"
    trajectory.to_csv(path)
    restored = Trajectory.from_csv(path)
    assert restored.bus_ids == trajectory.bus_ids
    assert restored.state_names == trajectory.state_names
    assert restored.event_rows == trajectory.event_rows
    np.testing.assert_array_equal(restored.states, trajectory.states)
    np.testing.assert_allclose(restored.V, trajectory.V, rtol=1e-14, atol=1e-15)
    assert restored.vdot is None


def test_runs_are_deterministic(gfm_load_scenario, tmp_path):
    scenario = with_events(gfm_load_scenario, [Event(time=0.05, kind="load-step", target=2, delta_p=0.1)], 0.1)
    run(build(scenario)).to_csv(tmp_path / "a.csv")
    run(build(scenario)).to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_replay_restores_analytic_derivatives(gfm_load_scenario, tmp_path):
    scenario = with_events(gfm_load_scenario, [Event(time=0.05, kind="load-step", target=2, delta_p=0.1)], 0.1)
    trajectory = run(build(scenario))
    trajectory.to_csv(tmp_path / "trajectory.csv")
    replayed = replay(build(scenario), Trajectory.from_csv(tmp_path / "trajectory.csv"), scenario.events)
    np.testing.assert_allclose(replayed.vdot, trajectory.vdot, rtol=1e-9, atol=1e-12)
    assert replayed.inertia == pytest.approx({"gfm_1": 3.0})


def test_failed_step_keeps_partial_trajectory(gfm_load_scenario):
    scenario = gfm_load_scenario.model_copy(update={
        "events": [Event(time=0.0, kind="load-step", target=2, delta_p=0.2)],
        "integrator": IntegratorConfig(t_end=0.1, newton_max_iter=1, newton_tol=1e-15),
    })
    with pytest.raises(SimulationError) as info:
        run(build(scenario))
    partial = info.value.partial
    assert partial is not None
    assert len(partial) == 1
    assert partial.event_rows == (0,)
    assert info.value.time == pytest.approx(1e-3)


def test_outage_of_only_load_keeps_converter_consistent(gfm_load_scenario):
    scenario = with_events(gfm_load_scenario, [Event(time=0.05, kind="load-outage", target=2)], 0.1)
    trajectory = run(build(scenario))
    # no external current enters bus 2 once its load is gone
    assert abs(trajectory.S[60, 1]) < 1e-6
    assert abs(trajectory.S[40, 1] + (0.5 + 0.1j)) < 1e-6


def test_run_uses_events_given_at_assembly(gfm_load_scenario):
    scenario = with_events(gfm_load_scenario, [Event(time=0.05, kind="load-step", target=2, delta_p=0.1)], 0.1)
    system = build(scenario)
    assert system.events == tuple(scenario.events)
    implicit = run(system)
    explicit = run(build(scenario), scenario.events)
    assert implicit.event_rows == explicit.event_rows == (50,)
    assert np.array_equal(implicit.V, explicit.V)
    # an explicit empty list still overrides the assembled events
    assert run(build(scenario), []).event_rows == ()


def test_csv_round_trip_with_device_named_like_a_bus_column(gfm_load_scenario, tmp_path):
    scenario = with_events(gfm_load_scenario, [], 0.01).model_copy(
        update={"gfm": [GfmVsm(name="v_src", bus=1, avr_time_const=0.2)]}
    )
    trajectory = run(build(scenario))
    path = tmp_path / "trajectory.csv"
    trajectory.to_csv(path)
    restored = Trajectory.from_csv(path)
    assert restored.bus_ids == (1, 2)
    assert restored.state_names == trajectory.state_names
    np.testing.assert_array_equal(restored.states, trajectory.states)
