"""
Complex-frequency metrics of recorded trajectories

η̄_x = ẋ/x̄ = ϱ_x + jω_x for any complex signal. The loss complex frequency
η̄_sl of s̄_l = Σ_h s̄_h splits exactly into a device-driven part (weighted
voltage complex frequencies) and a network-driven part (weighted, conjugated
net-current complex frequencies):

    η̄_sl = Σ s̄_h η̄_v_h / s̄_l + Σ s̄_h η̄*_i_h / s̄_l = η̄_v_sys + η̄*_i_sys

Two evaluation modes:
    "analytic" uses the simulator's V̇ (and İ = Y·V̇);
    "diff" differentiates the sampled series, never across events or gaps.

Undefined points are NaN throughout. ϱ is in 1/s, ω in rad/s unless a
function says otherwise; exports convert ω to per unit of Ω_b.
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from dynsim import Trajectory
from netmodel import AdmittanceMatrix

logger = logging.getLogger(__name__)

MAGNITUDE_FLOOR = 1e-6
INJECTION_FLOOR = 1e-9
RESIDUAL_FLOOR = 1e-6
MODES = ("analytic", "diff")


@dataclass(frozen=True)
class ComplexFrequencySeries:
    t: np.ndarray
    eta: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        return self.eta.real

    @property
    def omega(self) -> np.ndarray:
        return self.eta.imag

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.eta)

    def omega_pu(self, omega_base: float) -> np.ndarray:
        return self.eta.imag / omega_base


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown derivative mode {mode!r}, expected one of {MODES}")


def segment_bounds(valid: np.ndarray, breaks: Sequence[int] = ()) -> Tuple[np.ndarray, np.ndarray]:
    """[start, end) of each run of valid points; a break row starts a new run"""
    valid = np.asarray(valid, dtype=bool)
    n = len(valid)
    cut = np.zeros(n, dtype=bool)
    if n:
        cut[0] = True
        cut[np.asarray([b for b in breaks if 0 <= b < n], dtype=int)] = True
    prev_invalid = np.r_[True, ~valid[:-1]] if n else cut
    next_invalid = np.r_[~valid[1:], True] if n else cut
    next_cut = np.r_[cut[1:], True] if n else cut
    starts = np.flatnonzero(valid & (cut | prev_invalid))
    ends = np.flatnonzero(valid & (next_cut | next_invalid)) + 1
    return starts, ends


def segment_gradient(y: np.ndarray, dt: float, valid: Optional[np.ndarray] = None,
                     breaks: Sequence[int] = ()) -> np.ndarray:
    """
    dy/dt along axis 0, NaN outside valid points.

    Central differences inside each segment, second-order one-sided at its
    ends; two-point segments use first order, lone points are undefined.
    """
    y = np.asarray(y)
    squeeze = y.ndim == 1
    y2 = y.reshape(len(y), -1)
    if valid is None:
        valid = np.isfinite(y2)
    valid2 = np.asarray(valid, dtype=bool).reshape(len(y), -1)
    if valid2.shape[1] == 1 and y2.shape[1] > 1:
        valid2 = np.repeat(valid2, y2.shape[1], axis=1)

    out = np.full(y2.shape, np.nan, dtype=y2.dtype)
    for column in range(y2.shape[1]):
        starts, ends = segment_bounds(valid2[:, column], breaks)
        for s, e in zip(starts, ends):
            length = e - s
            if length >= 3:
                out[s:e, column] = np.gradient(y2[s:e, column], dt, edge_order=2)
            elif length == 2:
                out[s:e, column] = (y2[s + 1, column] - y2[s, column]) / dt
    return out.ravel() if squeeze else out


def _log_derivative(x: np.ndarray, dt: float, valid: np.ndarray, breaks: Sequence[int]) -> np.ndarray:
    """d/dt of ln|x| + j·unwrap(angle x) over valid segments"""
    x2 = x.reshape(len(x), -1)
    valid2 = valid.reshape(len(x), -1)
    log_mag = np.log(np.where(valid2, np.abs(x2), 1.0))
    angle = np.angle(x2)
    unwrapped = np.full(angle.shape, np.nan)
    for column in range(angle.shape[1]):
        starts, ends = segment_bounds(valid2[:, column], breaks)
        for s, e in zip(starts, ends):
            unwrapped[s:e, column] = np.unwrap(angle[s:e, column])
    eta = segment_gradient(log_mag, dt, valid2, breaks) + 1j * segment_gradient(unwrapped, dt, valid2, breaks)
    return eta.reshape(x.shape)


def complex_frequency_of_signal(samples: np.ndarray, dt: float, mode: str = "diff",
                                derivative: Optional[np.ndarray] = None,
                                floor: float = MAGNITUDE_FLOOR, breaks: Sequence[int] = ()) -> np.ndarray:
    """
    η̄ = ẋ/x̄ per sample (axis 0 is time); NaN where |x| <= floor.

    In analytic mode ``derivative`` supplies ẋ.
    """
    _check_mode(mode)
    x = np.asarray(samples, dtype=complex)
    valid = np.abs(x) > floor
    if mode == "analytic":
        if derivative is None:
            raise ValueError("analytic mode needs the signal derivative")
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(valid, np.asarray(derivative, dtype=complex) / np.where(valid, x, 1.0), np.nan)
    return _log_derivative(x, dt, valid, breaks)


def loss_series(trajectory: Trajectory) -> np.ndarray:
    """s̄_l(t) = Σ_h s̄_h(t); take abs() for the apparent losses"""
    return trajectory.S.sum(axis=1)


def loss_cf(s_l: np.ndarray, dt: float, mode: str = "diff", derivative: Optional[np.ndarray] = None,
            breaks: Sequence[int] = (), floor: float = MAGNITUDE_FLOOR) -> np.ndarray:
    """η̄_sl; undefined for a (near) lossless network"""
    return complex_frequency_of_signal(s_l, dt, mode, derivative, floor, breaks)


def _require_analytic(trajectory: Trajectory) -> None:
    if trajectory.vdot is None or trajectory.idot is None:
        raise ValueError("trajectory carries no analytic derivatives; use mode='diff'")


def _weighted(numerator: np.ndarray, S: np.ndarray, included: np.ndarray, floor: float) -> np.ndarray:
    total = S.sum(axis=1)
    weighted = np.where(included, numerator, 0.0).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(np.abs(total) > floor, weighted / total, np.nan)


def _included(trajectory: Trajectory, floor: float = INJECTION_FLOOR) -> np.ndarray:
    return np.abs(trajectory.S) >= floor


def voltage_numerators(trajectory: Trajectory, mode: str = "diff", floor: float = MAGNITUDE_FLOOR) -> np.ndarray:
    """s̄_h·η̄_v_h per row and bus"""
    _check_mode(mode)
    if mode == "analytic":
        _require_analytic(trajectory)
        return np.conj(trajectory.I) * trajectory.vdot
    eta_v = complex_frequency_of_signal(trajectory.V, trajectory.dt, "diff", floor=floor, breaks=trajectory.event_rows)
    return trajectory.S * eta_v


def current_numerators(trajectory: Trajectory, mode: str = "diff", floor: float = MAGNITUDE_FLOOR) -> np.ndarray:
    """s̄_h·η̄*_i_h per row and bus"""
    _check_mode(mode)
    if mode == "analytic":
        _require_analytic(trajectory)
        return trajectory.V * np.conj(trajectory.idot)
    eta_i = complex_frequency_of_signal(trajectory.I, trajectory.dt, "diff", floor=floor, breaks=trajectory.event_rows)
    return trajectory.S * np.conj(eta_i)


def weighted_voltage_component(trajectory: Trajectory, mode: str = "diff", magnitude_floor: float = MAGNITUDE_FLOOR,
                               injection_floor: float = INJECTION_FLOOR) -> np.ndarray:
    """η̄_v_sys; zero-injection buses carry zero weight"""
    numerators = voltage_numerators(trajectory, mode, magnitude_floor)
    return _weighted(numerators, trajectory.S, _included(trajectory, injection_floor), magnitude_floor)


def weighted_current_component(trajectory: Trajectory, mode: str = "diff", magnitude_floor: float = MAGNITUDE_FLOOR,
                               injection_floor: float = INJECTION_FLOOR) -> np.ndarray:
    """η̄_i_sys, defined through conj(η̄_i_sys) = Σ s̄_h η̄*_i_h / s̄_l"""
    numerators = current_numerators(trajectory, mode, magnitude_floor)
    component = _weighted(numerators, trajectory.S, _included(trajectory, injection_floor), magnitude_floor)
    return np.conj(component)


def relative_residual(lhs: np.ndarray, rhs: np.ndarray, *scales: np.ndarray,
                      floor: float = RESIDUAL_FLOOR) -> np.ndarray:
    """|lhs − rhs| over the largest magnitude involved, at least floor"""
    scale = np.maximum(np.abs(lhs), floor)
    for extra in (rhs, *scales):
        scale = np.fmax(scale, np.abs(extra))
    return np.abs(lhs - rhs) / scale


def coi_frequency(trajectory: Trajectory, inertia: Optional[Mapping[str, float]] = None) -> np.ndarray:
    """Inertia-weighted mean GFM speed in per unit; GFL units carry no inertia"""
    inertia = trajectory.inertia if inertia is None else inertia
    if not inertia:
        raise ValueError("centre-of-inertia frequency undefined: no inertial devices")
    weights = np.array(list(inertia.values()), dtype=float)
    speeds = np.column_stack([trajectory.state(f"{name}.omega") for name in inertia])
    return speeds @ weights / weights.sum()


@dataclass
class DecompositionSeries:
    t: np.ndarray
    loss: np.ndarray
    eta_sl: np.ndarray
    eta_v_sys: np.ndarray
    eta_i_sys: np.ndarray
    omega_coi: Optional[np.ndarray]
    residual: np.ndarray
    mode: str
    omega_base: float
    event_rows: Tuple[int, ...] = ()

    @property
    def loss_magnitude(self) -> np.ndarray:
        return np.abs(self.loss)

    def series(self, name: str) -> ComplexFrequencySeries:
        return ComplexFrequencySeries(self.t, getattr(self, name))

    def to_frame(self, omega_units: str = "pu") -> pd.DataFrame:
        scale = 1.0 / self.omega_base if omega_units == "pu" else 1.0
        coi = self.omega_coi if self.omega_coi is not None else np.full(len(self.t), np.nan)
        return pd.DataFrame(
            {
                "t": self.t,
                "s_l_mag": self.loss_magnitude,
                "rho_sl": self.eta_sl.real,
                "omega_sl": self.eta_sl.imag * scale,
                "rho_vsys": self.eta_v_sys.real,
                "omega_vsys": self.eta_v_sys.imag * scale,
                "rho_isys": self.eta_i_sys.real,
                "omega_isys": self.eta_i_sys.imag * scale,
                "omega_coi": coi,
                "eq16_residual": self.residual,
            }
        )


def decompose(trajectory: Trajectory, mode: str = "diff", inertia: Optional[Mapping[str, float]] = None,
              magnitude_floor: float = MAGNITUDE_FLOOR, injection_floor: float = INJECTION_FLOOR) -> DecompositionSeries:
    """η̄_sl, η̄_v_sys, η̄_i_sys and the relative residual of their sum, row by row"""
    _check_mode(mode)
    s_l = loss_series(trajectory)
    if mode == "analytic":
        _require_analytic(trajectory)
        eta_sl = loss_cf(s_l, trajectory.dt, "analytic", derivative=trajectory.sdot.sum(axis=1), floor=magnitude_floor)
    else:
        eta_sl = loss_cf(s_l, trajectory.dt, "diff", breaks=trajectory.event_rows, floor=magnitude_floor)
    eta_v = weighted_voltage_component(trajectory, mode, magnitude_floor, injection_floor)
    eta_i = weighted_current_component(trajectory, mode, magnitude_floor, injection_floor)
    rebuilt = eta_v + np.conj(eta_i)
    residual = relative_residual(eta_sl, rebuilt, eta_v, eta_i)

    omega_coi = None
    if inertia or trajectory.inertia:
        omega_coi = coi_frequency(trajectory, inertia or None)

    logger.info(
        "decomposition (%s): max residual %.3e over %d defined rows",
        mode, np.nanmax(residual) if np.isfinite(residual).any() else float("nan"),
        int(np.isfinite(residual).sum()),
    )
    return DecompositionSeries(
        t=trajectory.t,
        loss=s_l,
        eta_sl=eta_sl,
        eta_v_sys=eta_v,
        eta_i_sys=eta_i,
        omega_coi=omega_coi,
        residual=residual,
        mode=mode,
        omega_base=trajectory.omega_base,
        event_rows=tuple(trajectory.event_rows),
    )


@dataclass
class IdentityReport:
    """Per-row, per-bus residuals of the two per-bus identities"""

    t: np.ndarray
    bus_ids: Tuple[int, ...]
    power_residual: np.ndarray
    current_residual: np.ndarray
    excluded: np.ndarray

    @property
    def excluded_buses(self) -> Tuple[int, ...]:
        """Buses below the injection floor at every row"""
        return tuple(b for b, always in zip(self.bus_ids, self.excluded.all(axis=0)) if always)

    def _maximum(self, values: np.ndarray) -> Tuple[float, float, Optional[int]]:
        if not np.isfinite(values).any():
            return 0.0, float("nan"), None
        row, column = np.unravel_index(np.nanargmax(values), values.shape)
        return float(values[row, column]), float(self.t[row]), self.bus_ids[column]

    @property
    def max_power_residual(self) -> Tuple[float, float, Optional[int]]:
        """(value, time, bus) of the worst power-identity residual"""
        return self._maximum(self.power_residual)

    @property
    def max_current_residual(self) -> Tuple[float, float, Optional[int]]:
        return self._maximum(self.current_residual)

    def to_frame(self) -> pd.DataFrame:
        rows, columns = np.nonzero(~self.excluded)
        return pd.DataFrame(
            {
                "t": self.t[rows],
                "bus": np.asarray(self.bus_ids)[columns],
                "eq9_residual": self.power_residual[rows, columns],
                "eq13_residual": self.current_residual[rows, columns],
            }
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6g")
        power, current = self.max_power_residual, self.max_current_residual
        with open(path, "a", encoding="utf-8") as handle:
            handle.write(f"# max eq9_residual {power[0]:.6g} at t={power[1]:.6g} bus {power[2]}\n")
            handle.write(f"# max eq13_residual {current[0]:.6g} at t={current[1]:.6g} bus {current[2]}\n")
            handle.write(f"# excluded buses {list(self.excluded_buses)}\n")


def _branch_sum(Y: AdmittanceMatrix, V: np.ndarray, eta_v: np.ndarray) -> np.ndarray:
    """Σ_k s̄_hk η̄*_v_k = v̄_h·conj(Σ_k Y_hk v̄_k η̄_v_k) for all rows at once"""
    weighted = np.where(np.isfinite(eta_v), V * eta_v, np.nan)
    return V * np.conj((Y.matrix @ weighted.T).T)


def _identity_terms(trajectory: Trajectory, Y: AdmittanceMatrix, mode: str, floor: float = MAGNITUDE_FLOOR):
    _check_mode(mode)
    S = trajectory.S
    dt = trajectory.dt
    if mode == "analytic":
        _require_analytic(trajectory)
        eta_v = complex_frequency_of_signal(trajectory.V, dt, "analytic", derivative=trajectory.vdot, floor=floor)
        sdot = trajectory.sdot
        eta_i = complex_frequency_of_signal(trajectory.I, dt, "analytic", derivative=trajectory.idot, floor=floor)
        own = np.conj(trajectory.I) * trajectory.vdot
        current_lhs = S * np.conj(eta_i)
    else:
        breaks = trajectory.event_rows
        eta_v = complex_frequency_of_signal(trajectory.V, dt, "diff", floor=floor, breaks=breaks)
        eta_i = complex_frequency_of_signal(trajectory.I, dt, "diff", floor=floor, breaks=breaks)
        sdot = segment_gradient(S, dt, breaks=breaks)
        own = S * eta_v
        current_lhs = S * np.conj(eta_i)
    branch = _branch_sum(Y, trajectory.V, eta_v)
    return S, sdot, own, branch, current_lhs


def identity_report(trajectory: Trajectory, Y: AdmittanceMatrix, mode: str = "diff",
                    magnitude_floor: float = MAGNITUDE_FLOOR, injection_floor: float = INJECTION_FLOOR) -> IdentityReport:
    """Both per-bus identities in one pass"""
    S, sdot, own, branch, current_lhs = _identity_terms(trajectory, Y, mode, magnitude_floor)
    excluded = np.abs(S) < injection_floor
    power = np.where(excluded, np.nan, relative_residual(sdot, own + branch, own, branch))
    current = np.where(excluded, np.nan, relative_residual(current_lhs, branch))
    return IdentityReport(trajectory.t, tuple(trajectory.bus_ids), power, current, excluded)


def per_bus_power_identity(trajectory: Trajectory, Y: AdmittanceMatrix, mode: str = "diff") -> np.ndarray:
    """Residual of ṡ̄_h = s̄_h η̄_v_h + Σ_k s̄_hk η̄*_v_k; NaN at excluded buses"""
    return identity_report(trajectory, Y, mode).power_residual


def per_bus_current_identity(trajectory: Trajectory, Y: AdmittanceMatrix, mode: str = "diff") -> np.ndarray:
    """Residual of s̄_h η̄*_i_h = Σ_k s̄_hk η̄*_v_k; NaN at excluded buses"""
    return identity_report(trajectory, Y, mode).current_residual


def dc_weighted_components(trajectory: Trajectory, mode: str = "diff") -> Tuple[np.ndarray, np.ndarray]:
    """Σ p_h ϱ_v_h / p_l and Σ p_h ϱ_i_h / p_l, the all-real (DC) reduction"""
    S = trajectory.S
    if np.nanmax(np.abs(S.imag)) > 1e-9:
        logger.warning("dc_weighted_components on a trajectory with reactive power")
    dt = trajectory.dt
    if mode == "analytic":
        _require_analytic(trajectory)
        eta_v = complex_frequency_of_signal(trajectory.V, dt, "analytic", derivative=trajectory.vdot)
        eta_i = complex_frequency_of_signal(trajectory.I, dt, "analytic", derivative=trajectory.idot)
    else:
        eta_v = complex_frequency_of_signal(trajectory.V, dt, "diff", breaks=trajectory.event_rows)
        eta_i = complex_frequency_of_signal(trajectory.I, dt, "diff", breaks=trajectory.event_rows)
    p = S.real
    included = np.abs(p) >= INJECTION_FLOOR
    p_l = p.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho_v = np.where(included, p * eta_v.real, 0.0).sum(axis=1) / p_l
        rho_i = np.where(included, p * eta_i.real, 0.0).sum(axis=1) / p_l
    undefined = np.abs(p_l) <= MAGNITUDE_FLOOR
    rho_v[undefined] = np.nan
    rho_i[undefined] = np.nan
    return rho_v, rho_i


def rocof_at(t: np.ndarray, values: np.ndarray, t_event: float, offset: float = 0.5,
             window: float = 0.1) -> float:
    """Least-squares slope of values over a window centred at t_event + offset"""
    centre = t_event + offset
    lo, hi = centre - window / 2.0, centre + window / 2.0
    eps = 1e-9
    if lo < t[0] - eps or hi > t[-1] + eps:
        raise ValueError(f"RoCoF window [{lo:g}, {hi:g}] s outside series [{t[0]:g}, {t[-1]:g}] s")
    mask = (t >= lo - eps) & (t <= hi + eps) & np.isfinite(values)
    if mask.sum() < 2:
        raise ValueError("RoCoF window holds fewer than two defined samples")
    slope, _ = np.polyfit(t[mask], values[mask], 1)
    return float(slope)


def first_swing_amplitude(t: np.ndarray, values: np.ndarray, t_event: float) -> float:
    """Largest |value| after the event up to the first turn of the series"""
    after = values[(t >= t_event) & np.isfinite(values)]
    if len(after) == 0:
        return float("nan")
    steps = np.diff(after)
    signs = np.sign(steps[steps != 0])
    if len(signs) == 0:
        return float(np.max(np.abs(after)))
    turns = np.flatnonzero(signs != signs[0])
    nonzero = np.flatnonzero(steps != 0)
    end = nonzero[turns[0]] + 1 if len(turns) else len(after)
    return float(np.max(np.abs(after[:end])))


def settling_time(trajectory: Trajectory, t_event: float, tol: float = 1e-6) -> float:
    """First time after t_event from which the synchronous state derivative stays below tol"""
    if trajectory.settle is None:
        return float("nan")
    after = trajectory.t >= t_event
    above = np.flatnonzero(after & (trajectory.settle >= tol))
    if len(above) == 0:
        return float(trajectory.t[after][0]) if after.any() else float("nan")
    last = above[-1]
    if last + 1 >= len(trajectory.t):
        return float("nan")
    return float(trajectory.t[last + 1])


def dominance_ratio(series: DecompositionSeries, t_event: float) -> float:
    """peak |ω_i_sys| / peak |ω_v_sys| after the event"""
    after = series.t >= t_event
    omega_v = np.abs(series.eta_v_sys.imag[after])
    omega_i = np.abs(series.eta_i_sys.imag[after])
    if not (np.isfinite(omega_v).any() and np.isfinite(omega_i).any()):
        return float("nan")
    peak_v = np.nanmax(omega_v)
    peak_i = np.nanmax(omega_i)
    return float(peak_i / peak_v) if peak_v > 0 else float("nan")


def coi_tracking_ratio(series: DecompositionSeries, t_event: float, onset: float = 0.0) -> float:
    """
    max |ω_v_sys − (ω_CoI − 1)| from t_event + onset on, over the peak
    |ω_CoI − 1| after the event; both in per unit
    """
    if series.omega_coi is None:
        return float("nan")
    after = series.t >= t_event
    deviation = np.abs(series.omega_coi[after] - 1.0)
    peak = np.nanmax(deviation) if np.isfinite(deviation).any() else 0.0
    if peak <= 0:
        return float("nan")
    window = series.t >= t_event + onset
    gap = np.abs(series.eta_v_sys.imag[window] / series.omega_base - (series.omega_coi[window] - 1.0))
    if not np.isfinite(gap).any():
        return float("nan")
    return float(np.nanmax(gap) / peak)
