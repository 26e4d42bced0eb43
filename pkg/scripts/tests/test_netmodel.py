import math

import numpy as np
import pytest

from errors import ValidationError
from ieee39 import build_network
from netmodel import Branch, Bus, Network, branch_losses, build_admittance, bus_index, set_rx_ratio, validate


def test_two_bus_admittance_matches_hand_stamp(two_bus_network):
    Y = build_admittance(two_bus_network)
    y = 1 / complex(0.01, 0.1)
    expected = np.array([[y + 0.01j, -y], [-y, y + 0.01j]])
    np.testing.assert_allclose(Y.to_dense(), expected, rtol=1e-12)


def test_admittance_is_symmetric_without_phase_shifters(ring_network):
    dense = build_admittance(ring_network).to_dense()
    np.testing.assert_allclose(dense, dense.T, rtol=0, atol=1e-14)


def test_tap_sits_on_from_side():
    network = Network(
        buses=[Bus(id=1), Bus(id=2)],
        branches=[Branch(from_bus=1, to_bus=2, resistance_r=0.0, reactance_x=0.1, tap_ratio=1.1)],
    )
    dense = build_admittance(network).to_dense()
    y = 1 / 0.1j
    assert dense[0, 0] == pytest.approx(y / 1.21)
    assert dense[1, 1] == pytest.approx(y)
    assert dense[0, 1] == pytest.approx(-y / 1.1)


def test_out_of_service_branch_is_skipped(ring_network):
    branches = list(ring_network.branches)
    branches[2] = branches[2].model_copy(update={"in_service": False})
    dense = build_admittance(ring_network.model_copy(update={"branches": branches})).to_dense()
    assert dense[0, 2] == 0


def test_bus_shunt_on_diagonal(ring_network):
    Y = build_admittance(ring_network)
    without = build_admittance(
        ring_network.model_copy(update={"buses": [Bus(id=1), Bus(id=2), Bus(id=3)]})
    )
    assert (Y.to_dense() - without.to_dense())[2, 2] == pytest.approx(0.05j)


def test_zero_impedance_branch_raises():
    network = Network(
        buses=[Bus(id=1), Bus(id=2)],
        branches=[Branch(from_bus=1, to_bus=2, resistance_r=0.0, reactance_x=0.0)],
    )
    with pytest.raises(ValidationError, match="zero series impedance"):
        build_admittance(network)


def test_ieee39_admittance_shape_and_sparsity():
    network = build_network()
    Y = build_admittance(network)
    assert Y.n == 39
    assert Y.matrix.nnz == 39 + 2 * 46
    assert bus_index(network)[39] == 38


def test_set_rx_ratio_preserves_impedance_magnitude():
    network = build_network()
    changed = set_rx_ratio(network, 1.0)
    for before, after in zip(network.branches, changed.branches):
        assert abs(after.impedance) == pytest.approx(abs(before.impedance), rel=1e-12)
        assert after.resistance_r == pytest.approx(after.reactance_x, rel=1e-12)


def test_set_rx_ratio_example_value():
    network = Network(
        buses=[Bus(id=1), Bus(id=2)],
        branches=[Branch(from_bus=1, to_bus=2, resistance_r=0.0, reactance_x=0.1)],
    )
    branch = set_rx_ratio(network, 0.1).branches[0]
    scale = math.sqrt(1.01)
    assert branch.resistance_r == pytest.approx(0.01 / scale)
    assert branch.reactance_x == pytest.approx(0.1 / scale)


def test_set_rx_ratio_can_keep_transformers():
    network = build_network()
    changed = set_rx_ratio(network, 1.0, include_transformers=False)
    for before, after in zip(network.branches, changed.branches):
        if before.is_transformer:
            assert after == before
        else:
            assert after.resistance_r == pytest.approx(after.reactance_x)


def test_set_rx_ratio_rejects_nonpositive():
    with pytest.raises(ValueError):
        set_rx_ratio(build_network(), 0.0)


def test_validate_clean_network_has_no_violations(ring_network):
    assert validate(ring_network) == []


def test_validate_reports_every_problem():
    network = Network(
        buses=[Bus(id=1), Bus(id=1), Bus(id=3), Bus(id=4)],
        branches=[
            Branch(from_bus=1, to_bus=5, resistance_r=0.01, reactance_x=0.1),
            Branch(from_bus=3, to_bus=3, resistance_r=0.01, reactance_x=0.1),
            Branch(from_bus=1, to_bus=3, resistance_r=0.0, reactance_x=0.0, tap_ratio=-1.0),
        ],
    )
    rules = {v.rule for v in validate(network)}
    assert "duplicate bus id" in rules
    assert "references unknown bus" in rules
    assert "from_bus equals to_bus" in rules
    assert "zero series impedance" in rules
    assert "tap_ratio must be positive" in rules
    assert "not connected" in rules


def test_validate_flags_island():
    network = Network(
        buses=[Bus(id=1), Bus(id=2), Bus(id=3)],
        branches=[Branch(from_bus=1, to_bus=2, resistance_r=0.01, reactance_x=0.1)],
    )
    violations = validate(network)
    assert len(violations) == 1
    assert "[3]" in violations[0].detail


def test_branch_losses_equal_injection_sum(ring_network, rng):
    Y = build_admittance(ring_network)
    V = (1 + 0.05 * rng.standard_normal(3)) * np.exp(1j * 0.1 * rng.standard_normal(3))
    injections = V * np.conj(Y.matrix @ V)
    assert branch_losses(ring_network, V) == pytest.approx(injections.sum(), abs=1e-12)
