"""
Bus injections from phasors and Newton-Raphson power flow

Voltages, injections and branch terms are complex numpy arrays aligned with
the rows of the admittance matrix: v̄ = v·e^{jθ}, s̄ = p + jq, s̄_hk = p_hk + jq_hk.
Loads enter as negative injections.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy.sparse import csr_matrix, diags, hstack, vstack
from scipy.sparse.linalg import splu

from errors import PowerFlowError
from netmodel import AdmittanceMatrix, Network, build_admittance

logger = logging.getLogger(__name__)


def compute_injections(Y: AdmittanceMatrix, V: np.ndarray) -> np.ndarray:
    """p_h + jq_h from the polar power-flow equations, term by term"""
    V = np.asarray(V, dtype=complex)
    n = Y.n
    if V.shape != (n,):
        raise ValueError(f"expected {n} bus voltages, got shape {V.shape}")

    coo = Y.matrix.tocoo()
    h, k = coo.row, coo.col
    G, B = coo.data.real, coo.data.imag
    vm, va = np.abs(V), np.angle(V)
    theta_hk = va[h] - va[k]
    vv = vm[h] * vm[k]
    p_terms = vv * (G * np.cos(theta_hk) + B * np.sin(theta_hk))
    q_terms = vv * (G * np.sin(theta_hk) - B * np.cos(theta_hk))
    p = np.bincount(h, weights=p_terms, minlength=n)
    q = np.bincount(h, weights=q_terms, minlength=n)
    return p + 1j * q


def branch_power_matrix(Y: AdmittanceMatrix, V: np.ndarray) -> csr_matrix:
    """Sparse s̄_hk for every pair; row h sums to s̄_h"""
    V = np.asarray(V, dtype=complex)
    return (diags(V) @ Y.matrix.conj() @ diags(V.conj())).tocsr()


def branch_power_terms(Y: AdmittanceMatrix, V: np.ndarray, h: int) -> np.ndarray:
    """s̄_hk for all k at bus id h (zero where no admittance)"""
    row = Y.index(h)
    V = np.asarray(V, dtype=complex)
    y_row = Y.matrix.getrow(row).toarray().ravel()
    return V[row] * np.conj(y_row) * np.conj(V)


@dataclass
class PowerFlowSpec:
    """Bus types and specified net injections (generation minus load)"""

    slack_bus: int
    pv_voltages: Dict[int, float] = field(default_factory=dict)
    injections: Dict[int, complex] = field(default_factory=dict)
    slack_voltage: float = 1.0


@dataclass
class PowerFlowSolution:
    voltages: np.ndarray
    injections: np.ndarray
    mismatch_norm: float
    iterations: int
    bus_ids: Tuple[int, ...]

    @property
    def losses(self) -> complex:
        return complex(self.injections.sum())

    def voltage_at(self, bus_id: int) -> complex:
        return complex(self.voltages[self.bus_ids.index(bus_id)])

    def injection_at(self, bus_id: int) -> complex:
        return complex(self.injections[self.bus_ids.index(bus_id)])


def power_flow_jacobian(Y: AdmittanceMatrix, V: np.ndarray, pv: np.ndarray, pq: np.ndarray) -> csr_matrix:
    """d[P(pv,pq), Q(pq)] / d[θ(pv,pq), v(pq)] in polar coordinates"""
    V = np.asarray(V, dtype=complex)
    Ybus = Y.matrix
    I = Ybus @ V
    diag_v = diags(V)
    diag_i = diags(I)
    diag_vnorm = diags(V / np.abs(V))

    dS_dVm = diag_v @ (Ybus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    dS_dVa = 1j * diag_v @ (diag_i - Ybus @ diag_v).conj()

    pvpq = np.r_[pv, pq]
    dS_dVm = dS_dVm.tocsr()
    dS_dVa = dS_dVa.tocsr()
    J11 = dS_dVa[pvpq, :][:, pvpq].real
    J12 = dS_dVm[pvpq, :][:, pq].real
    J21 = dS_dVa[pq, :][:, pvpq].imag
    J22 = dS_dVm[pq, :][:, pq].imag
    return vstack([hstack([J11, J12]), hstack([J21, J22])], format="csc")


def power_flow_residual(Y: AdmittanceMatrix, V: np.ndarray, S_spec: np.ndarray,
                        pv: np.ndarray, pq: np.ndarray) -> np.ndarray:
    """Real mismatch at PV and PQ buses, reactive mismatch at PQ buses"""
    mismatch = V * np.conj(Y.matrix @ V) - S_spec
    return np.r_[mismatch[pv].real, mismatch[pq].real, mismatch[pq].imag]


def solve_power_flow(network: Network, spec: PowerFlowSpec, tol: float = 1e-8,
                     max_iter: int = 20, Y: AdmittanceMatrix = None) -> PowerFlowSolution:
    """Full Newton from a flat start; iterations counts mismatch evaluations"""
    if Y is None:
        Y = build_admittance(network)
    ids = network.bus_ids
    index = {bus_id: row for row, bus_id in enumerate(ids)}
    for bus_id in [spec.slack_bus, *spec.pv_voltages, *spec.injections]:
        if bus_id not in index:
            raise ValueError(f"power-flow spec references unknown bus {bus_id}")
    if spec.slack_bus in spec.pv_voltages:
        raise ValueError(f"bus {spec.slack_bus} is both slack and PV")

    n = network.n
    slack = index[spec.slack_bus]
    pv = np.array(sorted(index[b] for b in spec.pv_voltages), dtype=int)
    pv_rows = set(pv.tolist())
    pq = np.array([row for row in range(n) if row != slack and row not in pv_rows], dtype=int)
    pvpq = np.r_[pv, pq]

    S_spec = np.zeros(n, dtype=complex)
    for bus_id, s in spec.injections.items():
        S_spec[index[bus_id]] = s

    Vm = np.ones(n)
    Va = np.zeros(n)
    Vm[slack] = spec.slack_voltage
    for bus_id, magnitude in spec.pv_voltages.items():
        Vm[index[bus_id]] = magnitude
    V = Vm * np.exp(1j * Va)

    npv, npq = len(pv), len(pq)
    iterations = 0
    while True:
        iterations += 1
        F = power_flow_residual(Y, V, S_spec, pv, pq)
        error = float(np.linalg.norm(F, np.inf)) if F.size else 0.0
        logger.debug("power flow pass %d: mismatch %.3e", iterations, error)
        if not np.isfinite(error):
            raise PowerFlowError("power flow diverged", mismatch=error, iteration=iterations)
        if error < tol:
            break
        if iterations > max_iter:
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations "
                f"(mismatch {error:.3e} pu)",
                mismatch=error,
                iteration=iterations,
            )

        J = power_flow_jacobian(Y, V, pv, pq)
        try:
            dx = splu(J).solve(F)
        except RuntimeError as exc:
            raise PowerFlowError(
                f"singular power-flow Jacobian at iteration {iterations}: {exc}",
                mismatch=error,
                iteration=iterations,
            ) from exc

        Va[pvpq] -= dx[: npv + npq]
        Vm[pq] -= dx[npv + npq:]
        V = Vm * np.exp(1j * Va)
        Vm = np.abs(V)
        Va = np.angle(V)

    injections = V * np.conj(Y.matrix @ V)
    logger.info(
        "power flow converged: %d passes, mismatch %.2e pu, losses %.4f%+.4fj pu",
        iterations, error, injections.sum().real, injections.sum().imag,
    )
    return PowerFlowSolution(
        voltages=V,
        injections=injections,
        mismatch_norm=error,
        iterations=iterations,
        bus_ids=ids,
    )
