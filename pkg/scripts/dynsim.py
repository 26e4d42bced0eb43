"""
Fixed-step implicit-trapezoidal DAE integration

Differential states x are the converter states (devices.DeviceSet layout);
algebraic unknowns are the bus voltages in rectangular coordinates. Loads
and GFM coupling impedances are folded into an augmented network matrix so
the current balance g = Y_aug·V − I_src(x) is linear in V. Each step solves
the coupled trapezoidal residual by chord Newton on one sparse LU.
"""

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse import bmat, csc_matrix, diags, identity
from scipy.sparse.linalg import splu

from devices import DeviceSet, Event, GfmVsm, GflConverter, LoadModel, apply_event, validate_devices
from errors import SimulationError, ValidationError, Violation
from netmodel import AdmittanceMatrix, Network, build_admittance
from powerflow import PowerFlowSolution

logger = logging.getLogger(__name__)

INITIAL_RESIDUAL_TOLERANCE = 1e-9
BUS_COLUMN = re.compile(r"v_(-?\d+)")


class IntegratorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dt: float = Field(1e-3, gt=0)
    t_end: float = Field(40.0, gt=0)
    newton_tol: float = Field(1e-9, gt=0)
    newton_max_iter: int = Field(20, gt=0)
    refresh_after_iterations: int = Field(3, ge=1)

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class StepResult:
    x: np.ndarray
    y: np.ndarray
    f: np.ndarray
    iterations: int
    residual: float


def _step_matrix(jac, dt: float, theta: float, nx: int, ny: int) -> csc_matrix:
    f_x, f_y, g_x, g_y = jac
    top_left = identity(nx, format="csr") - theta * dt * f_x
    if ny == 0:
        return csc_matrix(top_left)
    if nx == 0:
        return csc_matrix(g_y)
    return bmat([[top_left, -theta * dt * f_y], [g_x, g_y]], format="csc")


def trapezoidal_newton(
    residual: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]],
    jacobian: Callable[[np.ndarray, np.ndarray], tuple],
    x_n: np.ndarray,
    y_n: np.ndarray,
    f_n: np.ndarray,
    dt: float,
    tol: float = 1e-9,
    max_iter: int = 20,
    lu=None,
    theta: float = 0.5,
):
    """
    One trapezoidal step of x' = f(x, y), 0 = g(x, y).

    residual(x, y) returns (f, g); jacobian(x, y) returns (f_x, f_y, g_x, g_y)
    as sparse matrices. Newton starts from (x_n, y_n) and reuses ``lu`` when
    given. theta = 1 turns the step into backward Euler. Returns the
    StepResult and the factorization used.
    """
    nx, ny = len(x_n), len(y_n)
    x, y = x_n.copy(), y_n.copy()
    error = float("nan")
    for iteration in range(max_iter + 1):
        f, g = residual(x, y)
        F = np.concatenate([x - x_n - dt * ((1.0 - theta) * f_n + theta * f), g])
        error = float(np.max(np.abs(F))) if F.size else 0.0
        if not np.isfinite(error):
            raise SimulationError("Newton iterate is not finite", residual=error)
        if error < tol:
            return StepResult(x, y, f, iteration, error), lu
        if iteration == max_iter:
            break
        if lu is None:
            try:
                lu = splu(_step_matrix(jacobian(x, y), dt, theta, nx, ny))
            except RuntimeError as exc:
                raise SimulationError(f"singular step Jacobian: {exc}", residual=error) from exc
        dz = lu.solve(F)
        x = x - dz[:nx]
        y = y - dz[nx:]
    raise SimulationError(
        f"Newton did not converge in {max_iter} iterations (residual {error:.3e})",
        residual=error,
    )


class DaeSystem:
    """Assembled network + devices; owns the current (t, x, V)"""

    def __init__(self, network: Network, Y: AdmittanceMatrix, devices: DeviceSet,
                 x0: np.ndarray, V0: np.ndarray, config: Optional[IntegratorConfig] = None,
                 events: Sequence[Event] = ()):
        self.network = network
        self.events = tuple(events)
        self.Y = Y
        self.devices = devices
        self.config = config or IntegratorConfig()
        self.n = Y.n
        self.nx = devices.nx
        self.t = 0.0
        self.x = np.array(x0, dtype=float)
        self.V = np.array(V0, dtype=complex)
        self._lu = None
        self._lu_key = None
        self.rebuild_network()
        self.f, self.guard = devices.derivatives(self.x, self.V)

    @property
    def state_names(self) -> List[str]:
        return self.devices.state_names

    def rebuild_network(self) -> None:
        """Refresh Y_aug after a load or device change and refactor it"""
        self.y_aug = (self.Y.matrix + diags(self.devices.norton_admittance())).tocsc()
        try:
            self._y_lu = splu(self.y_aug)
        except RuntimeError as exc:
            raise SimulationError(f"singular network matrix: {exc}", time=self.t) from exc
        g_block = self.y_aug.real
        b_block = self.y_aug.imag
        self._g_y = bmat([[g_block, -b_block], [b_block, g_block]], format="csr")
        self._lu = None

    def network_residual(self, x: np.ndarray, V: np.ndarray) -> np.ndarray:
        return self.y_aug @ V - self.devices.source_currents(x)

    def solve_network(self, x: Optional[np.ndarray] = None) -> np.ndarray:
        x = self.x if x is None else x
        return self._y_lu.solve(self.devices.source_currents(x).astype(complex))

    def _residual(self, x: np.ndarray, y: np.ndarray):
        V = y[: self.n] + 1j * y[self.n:]
        f, _ = self.devices.derivatives(x, V)
        g = self.network_residual(x, V)
        return f, np.concatenate([g.real, g.imag])

    def _jacobian(self, x: np.ndarray, y: np.ndarray):
        V = y[: self.n] + 1j * y[self.n:]
        f_x, f_vr, f_vi = self.devices.state_jacobian(x, V)
        sens = self.devices.current_sensitivity(x)
        g_x = bmat([[-sens.real], [-sens.imag]], format="csr")
        f_y = bmat([[f_vr, f_vi]], format="csr")
        return f_x, f_y, g_x, self._g_y

    def step(self, dt: float) -> StepResult:
        """Advance one trapezoidal step; the chord factorization is refreshed on failure"""
        if self._lu_key != dt:
            self._lu = None
        fresh = self._lu is None
        y_n = np.concatenate([self.V.real, self.V.imag])
        cfg = self.config

        def attempt(lu):
            return trapezoidal_newton(
                self._residual, self._jacobian, self.x, y_n, self.f, dt,
                cfg.newton_tol, cfg.newton_max_iter, lu,
            )

        try:
            result, self._lu = attempt(self._lu)
        except SimulationError as exc:
            if fresh:
                raise SimulationError(
                    f"step failed at t={self.t + dt:.4f}s: {exc}", time=self.t + dt, residual=exc.residual
                ) from exc
            logger.debug("stale step Jacobian at t=%.4fs, refactorizing", self.t + dt)
            try:
                result, self._lu = attempt(None)
            except SimulationError as retry:
                raise SimulationError(
                    f"step failed at t={self.t + dt:.4f}s: {retry}", time=self.t + dt, residual=retry.residual
                ) from retry
        self._lu_key = dt
        if result.iterations > cfg.refresh_after_iterations:
            logger.debug("t=%.4fs: %d Newton iterations, Jacobian refresh", self.t + dt, result.iterations)
            self._lu = None

        self.t += dt
        self.x = result.x
        self.V = result.y[: self.n] + 1j * result.y[self.n:]
        self.f, self.guard = self.devices.derivatives(self.x, self.V)
        return result

    def apply_events(self, events: Sequence[Event]) -> bool:
        """
        Mutate devices, then re-solve V at frozen x when Y_aug changed.

        Returns whether anything changed; an event without effect (zero step)
        leaves the integration untouched.
        """
        rebuild = False
        changed = False
        for event in events:
            rebuild = apply_event(event, self.devices) or rebuild
            changed = changed or event.kind == "setpoint-step" and event.delta != 0
        if rebuild:
            self.rebuild_network()
            self.V = self.solve_network()
        if rebuild or changed:
            self._lu = None
            self.f, self.guard = self.devices.derivatives(self.x, self.V)
        return rebuild or changed

    def synchronous_derivative(self) -> float:
        """Max state derivative with angle rates taken relative to their mean"""
        if self.nx == 0:
            return 0.0
        rates = np.abs(self.f)
        angle = self.devices.angle_state_mask
        if angle.any():
            angle_rates = self.f[angle]
            rates[angle] = np.abs(angle_rates - angle_rates.mean())
        return float(rates.max())


def voltage_derivatives(system: DaeSystem) -> np.ndarray:
    """Analytic V̇ at the current accepted point: Y_aug·V̇ = (dI_src/dx)·ẋ"""
    rhs = system.devices.current_sensitivity(system.x) @ system.f
    try:
        vdot = system._y_lu.solve(np.asarray(rhs, dtype=complex))
    except RuntimeError as exc:
        raise SimulationError(f"singular network matrix: {exc}", time=system.t) from exc
    return vdot


def assemble(network: Network, gfm: Sequence[GfmVsm], gfl: Sequence[GflConverter],
             loads: Sequence[LoadModel], events: Sequence[Event], pf_solution: PowerFlowSolution,
             config: Optional[IntegratorConfig] = None) -> DaeSystem:
    """Initialize every device at the power-flow point and build the DAE"""
    if not gfm and not gfl:
        raise ValidationError("Cannot assemble", [Violation("devices", "no sources on an energized network")])
    violations = validate_devices(network, gfm, gfl, loads, events)
    if violations:
        raise ValidationError("Invalid devices or events", violations)

    devices = DeviceSet(network, gfm, gfl, loads)
    x0 = devices.initialize(pf_solution.voltages, pf_solution.injections)
    system = DaeSystem(network, build_admittance(network), devices, x0, pf_solution.voltages, config, events)

    worst = int(np.argmax(np.abs(system.f))) if system.nx else 0
    if system.nx and abs(system.f[worst]) > INITIAL_RESIDUAL_TOLERANCE:
        device = system.state_names[worst].split(".")[0]
        raise ValidationError(
            "Device equilibrium inconsistent with power flow",
            [Violation(device, "nonzero initial derivative",
                       f"{system.state_names[worst]} = {system.f[worst]:.3e}")],
        )
    g0 = float(np.max(np.abs(system.network_residual(system.x, system.V))))
    if g0 > INITIAL_RESIDUAL_TOLERANCE:
        raise ValidationError(
            "Initial network residual too large",
            [Violation("network", "current balance", f"{g0:.3e} pu; tighten the power-flow tolerance")],
        )
    logger.info(
        "assembled DAE: %d buses, %d states (%d GFM, %d GFL, %d loads)",
        system.n, system.nx, len(devices.gfm), len(devices.gfl), len(devices.loads),
    )
    return system


@dataclass
class Trajectory:
    """Every recorded step of a run; rows are time steps, columns buses/states"""

    t: np.ndarray
    bus_ids: Tuple[int, ...]
    V: np.ndarray
    I: np.ndarray
    states: np.ndarray
    state_names: List[str]
    event_rows: Tuple[int, ...] = ()
    guard: Optional[np.ndarray] = None
    vdot: Optional[np.ndarray] = None
    idot: Optional[np.ndarray] = None
    source_mask: Optional[np.ndarray] = None
    settle: Optional[np.ndarray] = None
    omega_base: float = 2 * np.pi * 60.0
    inertia: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    @property
    def S(self) -> np.ndarray:
        return self.V * np.conj(self.I)

    @property
    def sdot(self) -> Optional[np.ndarray]:
        if self.vdot is None:
            return None
        return self.vdot * np.conj(self.I) + self.V * np.conj(self.idot)

    def state(self, name: str) -> np.ndarray:
        return self.states[:, self.state_names.index(name)]

    def truncate(self, rows: int) -> "Trajectory":
        def cut(a):
            return None if a is None else a[:rows]

        return replace(
            self,
            t=self.t[:rows], V=self.V[:rows], I=self.I[:rows], states=self.states[:rows],
            event_rows=tuple(r for r in self.event_rows if r < rows),
            guard=cut(self.guard), vdot=cut(self.vdot), idot=cut(self.idot),
            source_mask=cut(self.source_mask), settle=cut(self.settle),
        )

    def to_frame(self) -> pd.DataFrame:
        S = self.S
        columns = {"t": self.t}
        for prefix, values in (
            ("v", np.abs(self.V)), ("theta", np.angle(self.V)),
            ("p", S.real), ("q", S.imag),
            ("ir", self.I.real), ("ii", self.I.imag),
        ):
            for j, bus in enumerate(self.bus_ids):
                columns[f"{prefix}_{bus}"] = values[:, j]
        for j, name in enumerate(self.state_names):
            columns[name] = self.states[:, j]
        event = np.zeros(len(self.t), dtype=int)
        event[list(self.event_rows)] = 1
        columns["event"] = event
        guard = self.guard if self.guard is not None else np.zeros(len(self.t), dtype=bool)
        columns["guard"] = guard.astype(int)
        return pd.DataFrame(columns)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, omega_base: float = 2 * np.pi * 60.0) -> "Trajectory":
        """Rebuild from an exported CSV; analytic derivatives are not restored"""
        frame = pd.read_csv(path)
        bus_ids = tuple(int(m.group(1)) for m in map(BUS_COLUMN.fullmatch, frame.columns) if m)
        state_names = [c for c in frame.columns if "." in c]

        def block(prefix):
            return frame[[f"{prefix}_{b}" for b in bus_ids]].to_numpy(dtype=float)

        V = block("v") * np.exp(1j * block("theta"))
        I = block("ir") + 1j * block("ii")
        event_rows = tuple(np.flatnonzero(frame["event"].to_numpy())) if "event" in frame else ()
        guard = frame["guard"].to_numpy().astype(bool) if "guard" in frame else None
        return cls(
            t=frame["t"].to_numpy(dtype=float),
            bus_ids=bus_ids,
            V=V,
            I=I,
            states=frame[state_names].to_numpy(dtype=float) if state_names else np.empty((len(frame), 0)),
            state_names=state_names,
            event_rows=tuple(int(r) for r in event_rows),
            guard=guard,
            omega_base=omega_base,
        )


def _event_step(event: Event, dt: float) -> int:
    return max(0, int(np.ceil(event.time / dt - 1e-9)))


def run(system: DaeSystem, events: Optional[Sequence[Event]] = None,
        config: Optional[IntegratorConfig] = None) -> Trajectory:
    """
    Integrate from the assembled point to t_end, recording every step.

    ``events`` defaults to the events the system was assembled with.

    Events are applied at the first grid time >= event.time and the row of
    that time is recorded after the event (post-event algebraic solution).
    Only events that change the system mark an event row.
    """
    config = config or system.config
    events = system.events if events is None else events
    dt = config.dt
    steps = config.steps
    rows = steps + 1
    n, nx = system.n, system.nx

    pending = {}
    for event in events:
        k = _event_step(event, dt)
        if k > steps:
            logger.warning("event %s at t=%gs lies beyond t_end, ignored", event.kind, event.time)
            continue
        pending.setdefault(k, []).append(event)

    t = np.arange(rows) * dt
    V = np.empty((rows, n), dtype=complex)
    X = np.empty((rows, nx))
    vdot = np.empty((rows, n), dtype=complex)
    guard = np.zeros(rows, dtype=bool)
    mask = np.zeros((rows, n), dtype=bool)
    settle = np.empty(rows)
    event_rows: List[int] = []

    devices = system.devices
    inertia = {d.name: float(w) for d, w in zip(devices.gfm.devices, devices.gfm.inertia_weights)}

    def partial(k: int) -> Trajectory:
        I = (system.Y.matrix @ V[:k].T).T
        return Trajectory(
            t=t[:k], bus_ids=system.Y.bus_ids, V=V[:k], I=I, states=X[:k],
            state_names=system.state_names, event_rows=tuple(event_rows), guard=guard[:k],
            vdot=vdot[:k], idot=(system.Y.matrix @ vdot[:k].T).T, source_mask=mask[:k],
            settle=settle[:k], omega_base=system.network.omega_base, inertia=inertia,
        )

    logger.info("integrating %d steps of %.3g s (t_end %.3g s)", steps, dt, config.t_end)
    for k in range(rows):
        if k > 0:
            try:
                system.step(dt)
            except SimulationError as exc:
                raise SimulationError(str(exc), time=exc.time, residual=exc.residual, partial=partial(k)) from exc
            system.t = k * dt
        if k in pending and system.apply_events(pending[k]):
            event_rows.append(k)
        V[k] = system.V
        X[k] = system.x
        vdot[k] = voltage_derivatives(system)
        guard[k] = system.guard
        mask[k] = devices.source_mask()
        settle[k] = system.synchronous_derivative()

    trajectory = partial(rows)
    logger.info("run complete: %d rows, %d event rows", rows, len(event_rows))
    return trajectory


def replay(system: DaeSystem, trajectory: Trajectory, events: Optional[Sequence[Event]] = None) -> Trajectory:
    """
    Recompute V̇, İ and the settling measure along a recorded trajectory.

    ``system`` must be freshly assembled for the same case; its events (or
    ``events``) are re-applied at the recorded rows so the network matrix
    matches each row.
    """
    if trajectory.state_names != system.state_names:
        raise ValidationError(
            "Trajectory does not match the case",
            [Violation("trajectory", "state columns differ from the assembled devices")],
        )
    dt = trajectory.dt
    events = system.events if events is None else events
    pending = {}
    for event in events:
        pending.setdefault(_event_step(event, dt), []).append(event)

    rows = len(trajectory)
    vdot = np.empty((rows, system.n), dtype=complex)
    settle = np.empty(rows)
    mask = np.zeros((rows, system.n), dtype=bool)
    for k in range(rows):
        if k in pending:
            system.apply_events(pending[k])
        system.x = trajectory.states[k].copy()
        system.V = trajectory.V[k].copy()
        system.f, system.guard = system.devices.derivatives(system.x, system.V)
        vdot[k] = voltage_derivatives(system)
        settle[k] = system.synchronous_derivative()
        mask[k] = system.devices.source_mask()

    inertia = {d.name: float(w) for d, w in zip(system.devices.gfm.devices, system.devices.gfm.inertia_weights)}
    return replace(
        trajectory,
        vdot=vdot,
        idot=(system.Y.matrix @ vdot.T).T,
        settle=settle,
        source_mask=mask,
        omega_base=system.network.omega_base,
        inertia=inertia,
    )
