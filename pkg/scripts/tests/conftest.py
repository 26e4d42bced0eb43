import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from devices import GfmVsm, LoadModel  # noqa: E402
from netmodel import Branch, Bus, Network  # noqa: E402
from scenario import CaseScenario, Dispatch  # noqa: E402
from dynsim import IntegratorConfig  # noqa: E402


@pytest.fixture
def two_bus_network():
    return Network(
        buses=[Bus(id=1), Bus(id=2)],
        branches=[Branch(from_bus=1, to_bus=2, resistance_r=0.01, reactance_x=0.1, charging_b=0.02)],
    )


@pytest.fixture
def ring_network():
    return Network(
        buses=[Bus(id=1), Bus(id=2), Bus(id=3, shunt_b=0.05)],
        branches=[
            Branch(from_bus=1, to_bus=2, resistance_r=0.02, reactance_x=0.2, charging_b=0.04),
            Branch(from_bus=2, to_bus=3, resistance_r=0.01, reactance_x=0.1, tap_ratio=1.05),
            Branch(from_bus=3, to_bus=1, resistance_r=0.03, reactance_x=0.25, charging_b=0.02),
        ],
    )


@pytest.fixture
def gfm_load_scenario(two_bus_network):
    """One VSM at bus 1 feeding a constant-impedance load at bus 2; its AVR is slow next to the 1 ms step"""
    return CaseScenario(
        label="two_bus",
        network=two_bus_network,
        slack_bus=1,
        dispatch=[Dispatch(bus=1, p=0.0, v_set=1.0)],
        gfm=[GfmVsm(name="gfm_1", bus=1, avr_time_const=0.2)],
        loads=[LoadModel(bus=2, p0=0.5, q0=0.1)],
        integrator=IntegratorConfig(t_end=0.5),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(7)
