"""
Identity Verification Suite
Checks the loss complex-frequency identities on a simulated run
"""

import json
from datetime import datetime
from typing import Mapping, Optional

import numpy as np

from cfmetrics import RESIDUAL_FLOOR, decompose, identity_report
from dynsim import Trajectory
from errors import IdentityBreach
from netmodel import AdmittanceMatrix


class VerificationSuite:
    """
    Chainable checks over one trajectory, in the style of

        suite.check_decomposition().check_power_identity().print_report()
    """

    def __init__(self, trajectory: Trajectory, Y: AdmittanceMatrix, name: str = "scenario",
                 inertia: Optional[Mapping[str, float]] = None, t_event: Optional[float] = None,
                 analytic_tolerance: float = 1e-6, difference_tolerance: float = 1e-3,
                 steady_state_tolerance: float = 1e-6):
        self.trajectory = trajectory
        self.Y = Y
        self.name = name
        self.inertia = dict(inertia or {})
        self.t_event = t_event
        self.tolerances = {"analytic": analytic_tolerance, "diff": difference_tolerance}
        self.steady_state_tolerance = steady_state_tolerance
        self.checks = {}
        self.passed = []
        self.failed = []
        self._decompositions = {}
        self._identities = {}

    @classmethod
    def for_bundle(cls, bundle, settings) -> "VerificationSuite":
        scenario = bundle.scenario
        return cls(
            bundle.trajectory,
            bundle.Y,
            name=f"{scenario.label} (R/X {scenario.rx_ratio})",
            inertia=scenario.inertia_weights(),
            t_event=scenario.event_time,
            analytic_tolerance=settings.analytic_tolerance,
            difference_tolerance=settings.difference_tolerance,
            steady_state_tolerance=settings.steady_state_tolerance,
        )

    def _decomposition(self, mode):
        if mode not in self._decompositions:
            self._decompositions[mode] = decompose(self.trajectory, mode, self.inertia or None)
        return self._decompositions[mode]

    def _identity(self, mode):
        if mode not in self._identities:
            self._identities[mode] = identity_report(self.trajectory, self.Y, mode)
        return self._identities[mode]

    def _record(self, key, label, value, tolerance):
        passed = bool(np.isfinite(value) and value < tolerance)
        self.checks[key] = {"max_residual": float(value), "tolerance": tolerance, "passed": passed}
        if passed:
            self.passed.append(label)
        else:
            self.failed.append(f"{label} ({value:.3e} >= {tolerance:.1e})")

    @staticmethod
    def _finite_max(values) -> float:
        finite = values[np.isfinite(values)]
        return float(finite.max()) if finite.size else 0.0

    def check_decomposition(self, mode="analytic"):
        """Loss complex frequency equals the voltage part plus the conjugated current part"""
        series = self._decomposition(mode)
        value = self._finite_max(series.residual)
        self._record(f"decomposition_{mode}", f"Decomposition ({mode})", value, self.tolerances[mode])
        return self

    def check_power_identity(self, mode="analytic"):
        """Bus power derivative equals its own voltage term plus the branch terms"""
        report = self._identity(mode)
        value = self._finite_max(report.power_residual)
        self._record(f"power_identity_{mode}", f"Per-bus power identity ({mode})", value, self.tolerances[mode])
        return self

    def check_current_identity(self, mode="analytic"):
        """Conjugated current term of every bus equals its branch terms"""
        report = self._identity(mode)
        value = self._finite_max(report.current_residual)
        self._record(f"current_identity_{mode}", f"Per-bus current identity ({mode})", value, self.tolerances[mode])
        return self

    def check_steady_state(self, settled_window=1.0):
        """
        All three metrics vanish before the event. In the last
        ``settled_window`` seconds only the loss complex frequency has to
        vanish; the two components keep a common frequency offset of
        opposite sign.
        """
        series = self._decomposition("analytic")
        t = series.t
        tol = self.steady_state_tolerance
        before = t < self.t_event if self.t_event is not None else np.ones(len(t), dtype=bool)
        if before.any():
            value = max(
                self._finite_max(np.abs(series.eta_sl[before])),
                self._finite_max(np.abs(series.eta_v_sys[before])),
                self._finite_max(np.abs(series.eta_i_sys[before])),
            )
            self._record("steady_state_pre_event", "Steady state before event", value, tol)
        if self.t_event is not None:
            settled = t >= t[-1] - settled_window
            value = self._finite_max(np.abs(series.eta_sl[settled]))
            self._record("steady_state_settled", "Loss complex frequency after settling", value, tol)
        return self

    def check_mode_agreement(self):
        """Analytic and difference modes agree, error relative to the series peak"""
        analytic = self._decomposition("analytic")
        diff = self._decomposition("diff")
        worst = 0.0
        for name in ("eta_sl", "eta_v_sys", "eta_i_sys"):
            a = getattr(analytic, name)
            d = getattr(diff, name)
            scale = max(self._finite_max(np.abs(a)), RESIDUAL_FLOOR)
            worst = max(worst, self._finite_max(np.abs(a - d)) / scale)
        self._record("mode_agreement", "Analytic vs difference modes", worst, self.tolerances["diff"])
        return self

    def run_all(self):
        """Every check the trajectory supports; difference mode always runs"""
        has_analytic = self.trajectory.vdot is not None
        if has_analytic:
            self.check_decomposition("analytic").check_power_identity("analytic").check_current_identity("analytic")
            self.check_steady_state().check_mode_agreement()
        return self.check_decomposition("diff").check_power_identity("diff").check_current_identity("diff")

    @property
    def exit_code(self) -> int:
        return 0 if not self.failed else IdentityBreach.exit_code

    def raise_on_failure(self):
        if self.failed:
            raise IdentityBreach(f"{len(self.failed)} identity check(s) failed: " + "; ".join(self.failed))
        return self

    def generate_report(self):
        total_checks = len(self.passed) + len(self.failed)
        return {
            "evaluation_timestamp": datetime.now().isoformat(),
            "scenario": self.name,
            "rows": len(self.trajectory),
            "total_checks": total_checks,
            "passed_checks": len(self.passed),
            "failed_checks": len(self.failed),
            "success_rate": len(self.passed) / total_checks if total_checks > 0 else 0,
            "checks": self.checks,
            "passed": self.passed,
            "failed": self.failed,
        }

    def print_report(self):
        print("\n" + "=" * 70)
        print("IDENTITY VERIFICATION REPORT")
        print(f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        print("=" * 70 + "\n")
        print(f"Scenario: {self.name}")
        print(f"Rows: {len(self.trajectory)}")
        print()

        print("CHECKS")
        print("-" * 70)
        for key, result in self.checks.items():
            status = "✅" if result["passed"] else "❌"
            print(f"  {status} {key:32s}: {result['max_residual']:.3e} (tolerance {result['tolerance']:.1e})")
        print()

        print("SUMMARY")
        print("-" * 70)
        total = len(self.passed) + len(self.failed)
        print(f"  Total Checks: {total}")
        print(f"  Passed: {len(self.passed)}")
        print(f"  Failed: {len(self.failed)}")
        print()
        if not self.failed:
            print("  ✅ All identity checks passed!")
        else:
            print(f"  ⚠️  {len(self.failed)} check(s) failed!")
        print("=" * 70)
        return self

    def save_report(self, filepath="verification_report.json"):
        report = self.generate_report()
        with open(filepath, "w") as f:
            json.dump(report, f, indent=2, default=str)
        print(f"✅ Verification report saved to: {filepath}")
        return self
