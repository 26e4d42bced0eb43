"""
Converter and load models plus the disturbance events that act on them

Grid-forming converters are virtual synchronous machines: a swing equation
with frequency droop and a first-order voltage regulator, behind a coupling
impedance. Grid-following converters are current sources synchronised by a
PI phase-locked loop, with droop-adjusted current commands tracked through a
first-order lag. Loads are constant impedances folded into the network matrix.

Equations are evaluated for all devices of a class at once ("banks"); the
single-device functions below wrap a one-device bank. Device parameters are
in device per unit (rating_mva), set points in system per unit.
"""

import logging
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.sparse import coo_matrix, csr_matrix

from errors import ValidationError, Violation
from netmodel import Network, bus_index

logger = logging.getLogger(__name__)

LOW_VOLTAGE_GUARD = 0.01
SETPOINT_TOLERANCE = 1e-6
FD_STEP = 1e-6


class GfmVsm(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    bus: int
    rating_mva: Optional[float] = None
    inertia_h: float = 3.0
    damping_d: float = 1.0
    p_ref: Optional[float] = None
    q_ref: Optional[float] = None
    v_ref: Optional[float] = None
    freq_droop_gain: float = 20.0
    volt_droop_gain: float = 10.0
    coupling_r: float = 0.0
    coupling_x: float = 0.15
    avr_time_const: float = 0.05


class GflConverter(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    bus: int
    rating_mva: Optional[float] = None
    p_ref: Optional[float] = None
    q_ref: Optional[float] = None
    v_ref: Optional[float] = None
    freq_droop_gain: float = 20.0
    volt_droop_gain: float = 10.0
    pll_kp: float = 10.0
    pll_ki: float = 50.0
    current_lag_t: float = 0.02


class LoadModel(BaseModel):
    """Consumption (p0, q0) in system pu, reproduced at the initial voltage"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    bus: int
    p0: float
    q0: float
    kind: Literal["constant-impedance"] = "constant-impedance"
    connected: bool = True


class Event(BaseModel):
    """
    Disturbance applied at the first integration step boundary >= time.

    load-outage and load-step target a load by bus id; setpoint-step targets a
    converter by name and adds ``delta`` to ``parameter``.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    time: float
    kind: Literal["load-outage", "load-step", "setpoint-step"]
    target: Union[int, str]
    delta_p: float = 0.0
    delta_q: float = 0.0
    parameter: Optional[Literal["p_ref", "q_ref", "v_ref"]] = None
    delta: float = 0.0


Converter = Union[GfmVsm, GflConverter]


def _rating_pu(device: Converter, base_mva: float) -> float:
    return (device.rating_mva or base_mva) / base_mva


def _optional(values) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=float)


class GfmBank:
    """All grid-forming VSMs; states per device: delta, omega, e"""

    STATES = ("delta", "omega", "e")
    ANGLE_STATES = (0,)

    def __init__(self, devices: Sequence[GfmVsm], rows: Sequence[int],
                 base_mva: float = 100.0, omega_base: float = 2 * np.pi * 60.0):
        self.devices = list(devices)
        self.rows = np.asarray(rows, dtype=int)
        self.omega_base = omega_base
        self.m = np.array([_rating_pu(d, base_mva) for d in devices], dtype=float)
        self.h = np.array([d.inertia_h for d in devices], dtype=float)
        self.d = np.array([d.damping_d for d in devices], dtype=float)
        self.kf = np.array([d.freq_droop_gain for d in devices], dtype=float)
        self.kv = np.array([d.volt_droop_gain for d in devices], dtype=float)
        self.ta = np.array([d.avr_time_const for d in devices], dtype=float)
        z_device = np.array([complex(d.coupling_r, d.coupling_x) for d in devices], dtype=complex)
        self.zc = z_device / self.m if len(devices) else z_device
        self.p_ref = _optional(d.p_ref for d in devices)
        self.q_ref = _optional(d.q_ref for d in devices)
        self.v_ref = _optional(d.v_ref for d in devices)

    def __len__(self) -> int:
        return len(self.devices)

    @property
    def inertia_weights(self) -> np.ndarray:
        """H on the system base, used to weight the centre of inertia"""
        return self.h * self.m

    def emf(self, x: np.ndarray) -> np.ndarray:
        return x[:, 2] * np.exp(1j * x[:, 0])

    def current(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (self.emf(x) - v) / self.zc

    def source_current(self, x: np.ndarray) -> np.ndarray:
        """Norton equivalent: ē/z_c in parallel with 1/z_c"""
        return self.emf(x) / self.zc

    def current_sensitivity(self, x: np.ndarray) -> np.ndarray:
        """d(source current)/d(delta, omega, e)"""
        source = self.source_current(x)
        sens = np.zeros((len(self), 3), dtype=complex)
        sens[:, 0] = 1j * source
        sens[:, 2] = np.exp(1j * x[:, 0]) / self.zc
        return sens

    def derivatives(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        delta, omega, e = x[:, 0], x[:, 1], x[:, 2]
        s = v * np.conj(self.current(x, v))
        p_e, q_e = s.real, s.imag
        dx = np.empty_like(x)
        dx[:, 0] = self.omega_base * (omega - 1.0)
        dx[:, 1] = (
            self.p_ref / self.m + self.kf * (1.0 - omega) - p_e / self.m - self.d * (omega - 1.0)
        ) / (2.0 * self.h)
        dx[:, 2] = (self.v_ref - np.abs(v) - self.kv * (q_e - self.q_ref) / self.m) / self.ta
        return dx

    def initialize(self, v: np.ndarray, s: np.ndarray) -> np.ndarray:
        current = np.conj(s / v)
        emf = v + self.zc * current
        x = np.column_stack([np.angle(emf), np.ones(len(self)), np.abs(emf)])
        _fill_setpoints(self, s, v)
        return x


class GflBank:
    """All grid-following converters; states: theta_pll, x_pll, i_d, i_q"""

    STATES = ("theta_pll", "x_pll", "i_d", "i_q")
    ANGLE_STATES = (0,)

    def __init__(self, devices: Sequence[GflConverter], rows: Sequence[int],
                 base_mva: float = 100.0, omega_base: float = 2 * np.pi * 60.0):
        self.devices = list(devices)
        self.rows = np.asarray(rows, dtype=int)
        self.omega_base = omega_base
        self.m = np.array([_rating_pu(d, base_mva) for d in devices], dtype=float)
        self.kf = np.array([d.freq_droop_gain for d in devices], dtype=float)
        self.kv = np.array([d.volt_droop_gain for d in devices], dtype=float)
        self.kp = np.array([d.pll_kp for d in devices], dtype=float)
        self.ki = np.array([d.pll_ki for d in devices], dtype=float)
        self.tc = np.array([d.current_lag_t for d in devices], dtype=float)
        self.p_ref = _optional(d.p_ref for d in devices)
        self.q_ref = _optional(d.q_ref for d in devices)
        self.v_ref = _optional(d.v_ref for d in devices)

    def __len__(self) -> int:
        return len(self.devices)

    def source_current(self, x: np.ndarray) -> np.ndarray:
        return (x[:, 2] + 1j * x[:, 3]) * np.exp(1j * x[:, 0])

    def current(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.source_current(x)

    def current_sensitivity(self, x: np.ndarray) -> np.ndarray:
        rotation = np.exp(1j * x[:, 0])
        sens = np.zeros((len(self), 4), dtype=complex)
        sens[:, 0] = 1j * self.source_current(x)
        sens[:, 2] = rotation
        sens[:, 3] = 1j * rotation
        return sens

    def pll_frequency(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        error = np.angle(v * np.exp(-1j * x[:, 0]))
        return 1.0 + self.kp * error + x[:, 1]

    def derivatives(self, x: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """State derivatives and the low-voltage guard mask"""
        theta, x_pll, i_d, i_q = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
        vm = np.abs(v)
        error = np.angle(v * np.exp(-1j * theta))
        omega_pll = 1.0 + self.kp * error + x_pll

        guard = vm < LOW_VOLTAGE_GUARD
        vm_safe = np.where(guard, 1.0, vm)
        i_d_cmd = (self.p_ref + self.m * self.kf * (1.0 - omega_pll)) / vm_safe
        i_q_cmd = -(self.q_ref + self.m * self.kv * (self.v_ref - vm)) / vm_safe

        dx = np.empty_like(x)
        dx[:, 0] = self.omega_base * (omega_pll - 1.0)
        dx[:, 1] = self.ki * error
        dx[:, 2] = np.where(guard, 0.0, (i_d_cmd - i_d) / self.tc)
        dx[:, 3] = np.where(guard, 0.0, (i_q_cmd - i_q) / self.tc)
        return dx, guard

    def initialize(self, v: np.ndarray, s: np.ndarray) -> np.ndarray:
        vm = np.abs(v)
        x = np.column_stack([np.angle(v), np.zeros(len(self)), s.real / vm, -s.imag / vm])
        _fill_setpoints(self, s, v)
        return x


def _fill_setpoints(bank, s: np.ndarray, v: np.ndarray) -> None:
    """Take missing set points from the operating point; reject conflicting ones"""
    violations = []
    for name, given, actual in (
        ("p_ref", bank.p_ref, s.real),
        ("q_ref", bank.q_ref, s.imag),
        ("v_ref", bank.v_ref, np.abs(v)),
    ):
        missing = np.isnan(given)
        conflict = ~missing & (np.abs(given - actual) > SETPOINT_TOLERANCE)
        for i in np.flatnonzero(conflict):
            violations.append(
                Violation(
                    bank.devices[i].name,
                    f"{name} inconsistent with power flow",
                    f"given {given[i]:.6g}, operating point {actual[i]:.6g}",
                )
            )
        given[missing] = actual[missing]
    if violations:
        raise ValidationError("Device equilibrium inconsistent with power flow", violations)


class LoadBank:
    """Constant-impedance loads, keyed by bus"""

    def __init__(self, loads: Sequence[LoadModel], rows: Sequence[int]):
        self.loads = list(loads)
        self.rows = np.asarray(rows, dtype=int)
        self.p0 = np.array([ld.p0 for ld in loads], dtype=float)
        self.q0 = np.array([ld.q0 for ld in loads], dtype=float)
        self.connected = np.array([ld.connected for ld in loads], dtype=bool)
        self.v_init = np.ones(len(self.loads))
        self.by_bus = {ld.bus: i for i, ld in enumerate(loads)}

    def __len__(self) -> int:
        return len(self.loads)

    def initialize(self, v: np.ndarray) -> None:
        self.v_init = np.abs(v)

    @property
    def admittance(self) -> np.ndarray:
        y = (self.p0 - 1j * self.q0) / self.v_init**2
        return np.where(self.connected, y, 0j)

    def consumption(self, v: np.ndarray) -> np.ndarray:
        return np.abs(v) ** 2 * np.conj(self.admittance)


def _bank_jacobian(evaluate, x: np.ndarray, v: np.ndarray):
    """Central differences of a bank's derivatives w.r.t. its states and bus voltage"""
    k, ns = x.shape
    dfdx = np.empty((k, ns, ns))
    for j in range(ns):
        step = FD_STEP * np.maximum(1.0, np.abs(x[:, j]))
        xp, xm = x.copy(), x.copy()
        xp[:, j] += step
        xm[:, j] -= step
        dfdx[:, :, j] = (evaluate(xp, v) - evaluate(xm, v)) / (2.0 * step[:, None])
    dfdvr = (evaluate(x, v + FD_STEP) - evaluate(x, v - FD_STEP)) / (2.0 * FD_STEP)
    dfdvi = (evaluate(x, v + 1j * FD_STEP) - evaluate(x, v - 1j * FD_STEP)) / (2.0 * FD_STEP)
    return dfdx, dfdvr, dfdvi


class DeviceSet:
    """
    Every dynamic device of one scenario run with its state layout.

    States are ordered GFM devices first, then GFL devices, each device's
    states contiguous in the order of the bank's STATES.
    """

    def __init__(self, network: Network, gfm: Sequence[GfmVsm] = (), gfl: Sequence[GflConverter] = (),
                 loads: Sequence[LoadModel] = ()):
        index = bus_index(network)
        self.n = network.n
        self.gfm = GfmBank(gfm, [index[d.bus] for d in gfm], network.base_mva, network.omega_base)
        self.gfl = GflBank(gfl, [index[d.bus] for d in gfl], network.base_mva, network.omega_base)
        self.loads = LoadBank(loads, [index[ld.bus] for ld in loads])
        self.gfm_size = 3 * len(self.gfm)
        self.nx = self.gfm_size + 4 * len(self.gfl)
        self.names: Dict[str, Tuple[str, int]] = {}
        for i, d in enumerate(gfm):
            self.names[d.name] = ("gfm", i)
        for i, d in enumerate(gfl):
            self.names[d.name] = ("gfl", i)

    @property
    def has_sources(self) -> bool:
        return len(self.gfm) + len(self.gfl) > 0

    @property
    def state_names(self) -> List[str]:
        names = [f"{d.name}.{s}" for d in self.gfm.devices for s in GfmBank.STATES]
        names += [f"{d.name}.{s}" for d in self.gfl.devices for s in GflBank.STATES]
        return names

    @property
    def angle_state_mask(self) -> np.ndarray:
        mask = np.zeros(self.nx, dtype=bool)
        mask[0:self.gfm_size:3] = True
        mask[self.gfm_size::4] = True
        return mask

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return x[: self.gfm_size].reshape(-1, 3), x[self.gfm_size:].reshape(-1, 4)

    def initialize(self, V: np.ndarray, S_net: np.ndarray) -> np.ndarray:
        """
        Equilibrium states for the operating point (V, net injections S_net).

        Each converter delivers its bus's net injection plus the local load.
        """
        self.loads.initialize(V[self.loads.rows])
        s_load = np.zeros(self.n, dtype=complex)
        np.add.at(s_load, self.loads.rows, self.loads.consumption(V[self.loads.rows]))
        s_device = S_net + s_load
        x_gfm = self.gfm.initialize(V[self.gfm.rows], s_device[self.gfm.rows]) if len(self.gfm) else np.empty((0, 3))
        x_gfl = self.gfl.initialize(V[self.gfl.rows], s_device[self.gfl.rows]) if len(self.gfl) else np.empty((0, 4))
        return np.concatenate([x_gfm.ravel(), x_gfl.ravel()])

    def derivatives(self, x: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, bool]:
        x_gfm, x_gfl = self.split(x)
        f = np.empty(self.nx)
        guard = False
        if len(self.gfm):
            f[: self.gfm_size] = self.gfm.derivatives(x_gfm, V[self.gfm.rows]).ravel()
        if len(self.gfl):
            f_gfl, guard_mask = self.gfl.derivatives(x_gfl, V[self.gfl.rows])
            f[self.gfm_size:] = f_gfl.ravel()
            guard = bool(guard_mask.any())
        return f, guard

    def norton_admittance(self) -> np.ndarray:
        """Per-bus shunt added to the network matrix: loads and GFM couplings"""
        y = np.zeros(self.n, dtype=complex)
        np.add.at(y, self.loads.rows, self.loads.admittance)
        np.add.at(y, self.gfm.rows, 1.0 / self.gfm.zc)
        return y

    def source_currents(self, x: np.ndarray) -> np.ndarray:
        x_gfm, x_gfl = self.split(x)
        current = np.zeros(self.n, dtype=complex)
        if len(self.gfm):
            np.add.at(current, self.gfm.rows, self.gfm.source_current(x_gfm))
        if len(self.gfl):
            np.add.at(current, self.gfl.rows, self.gfl.source_current(x_gfl))
        return current

    def injected_currents(self, x: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Net external current into every bus: converters minus loads"""
        x_gfm, x_gfl = self.split(x)
        current = np.zeros(self.n, dtype=complex)
        if len(self.gfm):
            np.add.at(current, self.gfm.rows, self.gfm.current(x_gfm, V[self.gfm.rows]))
        if len(self.gfl):
            np.add.at(current, self.gfl.rows, self.gfl.source_current(x_gfl))
        np.add.at(current, self.loads.rows, -self.loads.admittance * V[self.loads.rows])
        return current

    def current_sensitivity(self, x: np.ndarray) -> csr_matrix:
        """Sparse complex d(source currents)/dx, shape (n, nx)"""
        x_gfm, x_gfl = self.split(x)
        rows, cols, vals = [], [], []
        if len(self.gfm):
            sens = self.gfm.current_sensitivity(x_gfm)
            rows.append(np.repeat(self.gfm.rows, 3))
            cols.append(np.arange(self.gfm_size))
            vals.append(sens.ravel())
        if len(self.gfl):
            sens = self.gfl.current_sensitivity(x_gfl)
            rows.append(np.repeat(self.gfl.rows, 4))
            cols.append(self.gfm_size + np.arange(4 * len(self.gfl)))
            vals.append(sens.ravel())
        if not rows:
            return csr_matrix((self.n, self.nx), dtype=complex)
        return coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n, self.nx),
        ).tocsr()

    def state_jacobian(self, x: np.ndarray, V: np.ndarray) -> Tuple[csr_matrix, csr_matrix, csr_matrix]:
        """df/dx, df/dRe(V), df/dIm(V) as sparse matrices"""
        x_gfm, x_gfl = self.split(x)
        blocks = []
        if len(self.gfm):
            blocks.append((0, 3, self.gfm.rows,
                           _bank_jacobian(self.gfm.derivatives, x_gfm, V[self.gfm.rows])))
        if len(self.gfl):
            blocks.append((self.gfm_size, 4, self.gfl.rows,
                           _bank_jacobian(lambda xx, vv: self.gfl.derivatives(xx, vv)[0],
                                          x_gfl, V[self.gfl.rows])))

        xr, xc, xv = [], [], []
        vr_rows, vr_cols, vr_vals, vi_vals = [], [], [], []
        for offset, ns, bus_rows, (dfdx, dfdvr, dfdvi) in blocks:
            k = len(bus_rows)
            base = offset + ns * np.arange(k)
            a, b = np.meshgrid(np.arange(ns), np.arange(ns), indexing="ij")
            xr.append((base[:, None, None] + a[None]).ravel())
            xc.append((base[:, None, None] + b[None]).ravel())
            xv.append(dfdx.ravel())
            vr_rows.append((base[:, None] + np.arange(ns)[None]).ravel())
            vr_cols.append(np.repeat(bus_rows, ns))
            vr_vals.append(dfdvr.ravel())
            vi_vals.append(dfdvi.ravel())

        def build(rows, cols, vals, shape):
            if not rows:
                return csr_matrix(shape)
            return coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
            ).tocsr()

        f_x = build(xr, xc, xv, (self.nx, self.nx))
        f_vr = build(vr_rows, vr_cols, vr_vals, (self.nx, self.n))
        f_vi = build(vr_rows, vr_cols, vi_vals, (self.nx, self.n))
        return f_x, f_vr, f_vi

    def source_mask(self) -> np.ndarray:
        """Buses with a converter or a connected load"""
        mask = np.zeros(self.n, dtype=bool)
        mask[self.gfm.rows] = True
        mask[self.gfl.rows] = True
        mask[self.loads.rows[self.loads.connected]] = True
        return mask


def gfm_derivatives(device: GfmVsm, state: Sequence[float], v_bus: complex,
                    base_mva: float = 100.0, omega_base: float = 2 * np.pi * 60.0) -> np.ndarray:
    """(delta', omega', e') of one VSM; set points must be filled in"""
    bank = GfmBank([device], [0], base_mva, omega_base)
    return bank.derivatives(np.asarray(state, dtype=float).reshape(1, 3), np.array([v_bus]))[0]


def gfl_derivatives(device: GflConverter, state: Sequence[float], v_bus: complex,
                    base_mva: float = 100.0, omega_base: float = 2 * np.pi * 60.0) -> Tuple[np.ndarray, bool]:
    """(theta_pll', x_pll', i_d', i_q') of one converter and whether the guard is active"""
    bank = GflBank([device], [0], base_mva, omega_base)
    dx, guard = bank.derivatives(np.asarray(state, dtype=float).reshape(1, 4), np.array([v_bus]))
    return dx[0], bool(guard[0])


def injected_current(device: Union[GfmVsm, GflConverter, LoadModel], state: Sequence[float],
                     v_bus: complex, base_mva: float = 100.0) -> complex:
    """Current one device injects into its bus, system pu"""
    if isinstance(device, LoadModel):
        # folded into the network matrix
        return 0j
    x = np.asarray(state, dtype=float).reshape(1, -1)
    if isinstance(device, GfmVsm):
        bank = GfmBank([device], [0], base_mva)
        return complex(bank.current(x, np.array([v_bus]))[0])
    bank = GflBank([device], [0], base_mva)
    return complex(bank.source_current(x)[0])


def apply_event(event: Event, devices: DeviceSet) -> bool:
    """Mutate devices in place; True when the network matrix must be rebuilt"""
    if event.kind in ("load-outage", "load-step"):
        i = devices.loads.by_bus.get(_as_bus(event.target))
        if i is None:
            raise ValidationError("Unknown event target", [Violation(_event_label(event), "no load at target bus")])
        before = devices.loads.admittance[i]
        if event.kind == "load-outage":
            devices.loads.connected[i] = False
        else:
            devices.loads.p0[i] += event.delta_p
            devices.loads.q0[i] += event.delta_q
        changed = devices.loads.admittance[i] != before
        logger.info("t=%.4fs %s", event.time, _event_label(event))
        return bool(changed)

    kind_index = devices.names.get(str(event.target))
    if kind_index is None:
        raise ValidationError("Unknown event target", [Violation(_event_label(event), "no device with that name")])
    kind, i = kind_index
    bank = devices.gfm if kind == "gfm" else devices.gfl
    getattr(bank, event.parameter)[i] += event.delta
    logger.info("t=%.4fs %s", event.time, _event_label(event))
    return False


def _as_bus(target: Union[int, str]) -> Optional[int]:
    """8, "8" and "bus 8" all name bus 8"""
    if isinstance(target, str):
        target = target.strip().removeprefix("bus").strip()
    try:
        return int(target)
    except (TypeError, ValueError):
        return None


def _event_label(event: Event) -> str:
    return f"{event.kind} at {event.target} (t={event.time:g}s)"


def validate_devices(network: Network, gfm: Sequence[GfmVsm], gfl: Sequence[GflConverter],
                     loads: Sequence[LoadModel], events: Sequence[Event]) -> List[Violation]:
    """Device, load and event rules against the network; empty when consistent"""
    violations: List[Violation] = []
    buses = set(network.bus_ids)
    names = set()
    converter_buses = set()

    for device in [*gfm, *gfl]:
        label = f"device {device.name}"
        if device.name in names:
            violations.append(Violation(label, "duplicate device name"))
        names.add(device.name)
        if device.bus not in buses:
            violations.append(Violation(label, "references unknown bus", str(device.bus)))
        if device.bus in converter_buses:
            violations.append(Violation(label, "second converter on the same bus", str(device.bus)))
        converter_buses.add(device.bus)
        if device.rating_mva is not None and device.rating_mva <= 0:
            violations.append(Violation(label, "rating_mva must be positive"))

    for device in gfm:
        label = f"device {device.name}"
        if device.inertia_h <= 0:
            violations.append(Violation(label, "inertia_h must be positive"))
        if complex(device.coupling_r, device.coupling_x) == 0:
            violations.append(Violation(label, "coupling impedance must be nonzero"))
        if device.avr_time_const <= 0:
            violations.append(Violation(label, "avr_time_const must be positive"))
    for device in gfl:
        if device.current_lag_t <= 0:
            violations.append(Violation(f"device {device.name}", "current_lag_t must be positive"))

    load_buses = set()
    for load in loads:
        label = f"load at bus {load.bus}"
        if load.bus not in buses:
            violations.append(Violation(label, "references unknown bus"))
        if load.bus in load_buses:
            violations.append(Violation(label, "second load on the same bus"))
        load_buses.add(load.bus)

    for position, event in enumerate(events):
        label = f"event #{position} ({event.kind} at {event.target})"
        if event.time < 0:
            violations.append(Violation(label, "time must be >= 0"))
        if event.kind == "setpoint-step":
            if str(event.target) not in names:
                violations.append(Violation(label, "unknown device"))
            if event.parameter is None:
                violations.append(Violation(label, "setpoint-step needs a parameter"))
        elif _as_bus(event.target) not in load_buses:
            violations.append(Violation(label, "no load at target bus"))

    return violations
