"""Full 39-bus load-outage runs; run with ``pytest -m slow``"""

import numpy as np
import pytest

from harness import HarnessSettings, run_scenario, run_sweep
from ieee39 import build_ieee39_ibr
from verify_identities import VerificationSuite

pytestmark = pytest.mark.slow

SETTINGS = HarnessSettings()
SWEEP_RATIOS = [0.1, 0.25, 0.5, 0.75, 1.0]


@pytest.fixture(scope="module")
def outage_runs():
    return {ratio: run_scenario(build_ieee39_ibr(rx_ratio=ratio), SETTINGS) for ratio in (0.1, 1.0)}


@pytest.fixture(scope="module")
def short_sweep():
    """Two seconds past the outage for every swept R/X value"""
    return run_sweep(build_ieee39_ibr(t_end=3.0), SWEEP_RATIOS, SETTINGS, write=False).set_index("rx_ratio")


@pytest.mark.parametrize("ratio", [0.1, 1.0])
def test_every_identity_check_passes(outage_runs, ratio):
    suite = VerificationSuite.for_bundle(outage_runs[ratio], SETTINGS).run_all()
    assert suite.failed == []
    assert suite.checks["mode_agreement"]["max_residual"] < 1e-3
    assert suite.checks["steady_state_settled"]["passed"]


def test_loss_offset_grows_with_rx_ratio(outage_runs):
    assert outage_runs[1.0].summary["steady_state_loss"] > outage_runs[0.1].summary["steady_state_loss"]


def test_outage_is_recorded_once(outage_runs):
    trajectory = outage_runs[0.1].trajectory
    assert trajectory.event_rows == (1000,)
    assert len(trajectory) == 40001
    assert outage_runs[0.1].summary["guard_rows"] == 0


def test_voltage_part_tracks_coi_frequency(outage_runs):
    assert outage_runs[0.1].summary["coi_tracking_ratio"] < 0.3


def test_every_swept_ratio_runs(short_sweep):
    assert (short_sweep["status"] == "ok").all()


def test_coi_rocof_barely_depends_on_rx_ratio(short_sweep):
    low, high = short_sweep.loc[0.1, "rocof_coi"], short_sweep.loc[1.0, "rocof_coi"]
    assert abs(high - low) < 0.2 * abs(low)


def test_voltage_part_rocof_falls_with_rx_ratio(short_sweep):
    assert abs(short_sweep.loc[1.0, "rocof_vsys"]) < abs(short_sweep.loc[0.1, "rocof_vsys"])


def test_current_part_rocof_rises_with_rx_ratio(short_sweep):
    assert abs(short_sweep.loc[1.0, "rocof_isys"]) > abs(short_sweep.loc[0.1, "rocof_isys"])


def test_peak_voltage_part_frequency_never_rises_with_rx_ratio(short_sweep):
    peaks = short_sweep.loc[SWEEP_RATIOS, "peak_omega_vsys"].to_numpy()
    assert np.all(np.diff(peaks) <= 0)
