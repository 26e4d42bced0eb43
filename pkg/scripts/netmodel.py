"""
Per-unit network data model

Buses, branches and bases of a transmission network, the nodal admittance
matrix built from them, and the impedance-preserving R/X transform used by
the sensitivity sweeps.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.sparse import coo_matrix, csr_matrix

from errors import ValidationError, Violation

logger = logging.getLogger(__name__)


class Bus(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    id: int
    name: str = ""
    base_kv: float = 345.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0


class Branch(BaseModel):
    """Pi-model branch; the tap sits on the from side"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    from_bus: int
    to_bus: int
    resistance_r: float
    reactance_x: float
    charging_b: float = 0.0
    tap_ratio: float = 1.0
    in_service: bool = True
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or f"branch {self.from_bus}-{self.to_bus}"

    @property
    def impedance(self) -> complex:
        return complex(self.resistance_r, self.reactance_x)

    @property
    def is_transformer(self) -> bool:
        return self.tap_ratio != 1.0


class Network(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    buses: List[Bus]
    branches: List[Branch] = []
    base_mva: float = 100.0
    base_frequency: float = 60.0

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def omega_base(self) -> float:
        """Synchronous speed in rad/s"""
        return 2.0 * math.pi * self.base_frequency

    @property
    def bus_ids(self) -> Tuple[int, ...]:
        return tuple(bus.id for bus in self.buses)


def bus_index(network: Network) -> Dict[int, int]:
    """Bus id -> row of the admittance matrix (order of appearance)"""
    return {bus.id: row for row, bus in enumerate(network.buses)}


@dataclass(frozen=True)
class AdmittanceMatrix:
    matrix: csr_matrix
    bus_ids: Tuple[int, ...]

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def G(self) -> csr_matrix:
        return self.matrix.real

    @property
    def B(self) -> csr_matrix:
        return self.matrix.imag

    def index(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _branch_stamp(branch: Branch) -> Tuple[complex, complex, complex]:
    """(Y_ff, Y_tt, Y_ft = Y_tf) of one branch"""
    y = 1.0 / branch.impedance
    half_charging = 0.5j * branch.charging_b
    tap = branch.tap_ratio
    return (y + half_charging) / tap**2, y + half_charging, -y / tap


def build_admittance(network: Network) -> AdmittanceMatrix:
    """Nodal admittance matrix with entries ordered by (row, column)"""
    index = bus_index(network)
    rows: List[int] = []
    cols: List[int] = []
    vals: List[complex] = []

    for row, bus in enumerate(network.buses):
        rows.append(row)
        cols.append(row)
        vals.append(complex(bus.shunt_g, bus.shunt_b))

    for branch in network.branches:
        if not branch.in_service:
            continue
        if branch.impedance == 0:
            raise ValidationError(
                "Cannot build admittance matrix",
                [Violation(branch.label, "zero series impedance")],
            )
        f, t = index[branch.from_bus], index[branch.to_bus]
        y_ff, y_tt, y_ft = _branch_stamp(branch)
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [y_ff, y_tt, y_ft, y_ft]

    n = network.n
    matrix = coo_matrix(
        (np.asarray(vals, dtype=complex), (np.asarray(rows), np.asarray(cols))),
        shape=(n, n),
    ).tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return AdmittanceMatrix(matrix=matrix, bus_ids=network.bus_ids)


def set_rx_ratio(network: Network, ratio: float, include_transformers: bool = True) -> Network:
    """Same |z| on every branch, new R/X; returns a new Network"""
    if not ratio > 0:
        raise ValueError(f"R/X ratio must be positive, got {ratio}")

    scale = math.sqrt(1.0 + ratio**2)
    branches = []
    for branch in network.branches:
        if branch.is_transformer and not include_transformers:
            branches.append(branch)
            continue
        magnitude = abs(branch.impedance)
        sign = -1.0 if branch.reactance_x < 0 else 1.0
        branches.append(
            branch.model_copy(
                update={
                    "resistance_r": magnitude * ratio / scale,
                    "reactance_x": sign * magnitude / scale,
                }
            )
        )
    return network.model_copy(update={"branches": branches})


def validate(network: Network) -> List[Violation]:
    """All broken Network/Bus/Branch invariants; empty when well formed"""
    violations: List[Violation] = []

    if not network.buses:
        violations.append(Violation("network", "has no buses"))
        return violations
    if network.base_mva <= 0:
        violations.append(Violation("network", "base_mva must be positive", str(network.base_mva)))
    if network.base_frequency <= 0:
        violations.append(
            Violation("network", "base_frequency must be positive", str(network.base_frequency))
        )

    seen = set()
    for bus in network.buses:
        if bus.id in seen:
            violations.append(Violation(f"bus {bus.id}", "duplicate bus id"))
        seen.add(bus.id)
        if bus.base_kv <= 0:
            violations.append(Violation(f"bus {bus.id}", "base_kv must be positive", str(bus.base_kv)))

    for position, branch in enumerate(network.branches):
        entity = f"{branch.label} (#{position})"
        for end in (branch.from_bus, branch.to_bus):
            if end not in seen:
                violations.append(Violation(entity, "references unknown bus", str(end)))
        if branch.from_bus == branch.to_bus:
            violations.append(Violation(entity, "from_bus equals to_bus", str(branch.from_bus)))
        if branch.impedance == 0:
            violations.append(Violation(entity, "zero series impedance"))
        if branch.tap_ratio <= 0:
            violations.append(Violation(entity, "tap_ratio must be positive", str(branch.tap_ratio)))

    graph = nx.Graph()
    graph.add_nodes_from(bus.id for bus in network.buses)
    graph.add_edges_from(
        (b.from_bus, b.to_bus)
        for b in network.branches
        if b.in_service and b.from_bus in seen and b.to_bus in seen
    )
    reachable = nx.node_connected_component(graph, network.buses[0].id)
    unreachable = sorted(set(graph.nodes) - reachable)
    if unreachable:
        violations.append(
            Violation(
                "network",
                "not connected",
                f"unreachable from bus {network.buses[0].id}: {unreachable}",
            )
        )

    return violations


def branch_losses(network: Network, voltages: np.ndarray) -> complex:
    """Series, charging and bus-shunt complex power absorbed by the network"""
    index = bus_index(network)
    total = 0j
    for branch in network.branches:
        if not branch.in_service:
            continue
        v_from = voltages[index[branch.from_bus]] / branch.tap_ratio
        v_to = voltages[index[branch.to_bus]]
        series_current = (v_from - v_to) / branch.impedance
        total += abs(series_current) ** 2 * branch.impedance
        total += -0.5j * branch.charging_b * (abs(v_from) ** 2 + abs(v_to) ** 2)
    for row, bus in enumerate(network.buses):
        total += abs(voltages[row]) ** 2 * complex(bus.shunt_g, -bus.shunt_b)
    return total
