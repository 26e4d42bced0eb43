#!/usr/bin/env python3
"""
Scenario runner and command-line interface

Runs the pipeline power flow -> assemble -> simulate -> metrics -> export for
a case file, sweeps the R/X ratio, re-evaluates exported trajectories and
writes the built-in 39-bus case.

    python scripts/harness.py simulate --case cases/ieee39_ibr.case.json --rx 0.1
    python scripts/harness.py sweep --case cases/ieee39_ibr.case.json --rx 0.1,1.0
    python scripts/harness.py verify --case cases/ieee39_ibr.case.json
    python scripts/harness.py case39 --out cases/ieee39_ibr.case.json
    python scripts/harness.py metrics --traj out/ieee39_ibr/rx_0.1/trajectory.csv
"""

import argparse
import contextlib
import json
import logging
import multiprocessing
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict

from cfmetrics import (
    DecompositionSeries,
    IdentityReport,
    coi_tracking_ratio,
    decompose,
    dominance_ratio,
    first_swing_amplitude,
    identity_report,
    rocof_at,
    settling_time,
)
from dynsim import Trajectory, assemble, replay, run
from errors import SimulationToolError, StageError
from netmodel import AdmittanceMatrix, build_admittance
from powerflow import PowerFlowSolution, solve_power_flow
from scenario import CaseScenario, dump_case, load_case
from verify_identities import VerificationSuite

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parents[1]
DEFAULT_SETTINGS = REPO_ROOT / "config" / "simulation.yml"
PLOT_PANELS = {
    "losses_and_coi.csv": ["t", "s_l_mag", "omega_coi"],
    "voltage_component.csv": ["t", "rho_vsys", "omega_vsys"],
    "current_component.csv": ["t", "rho_isys", "omega_isys"],
    "loss_complex_frequency.csv": ["t", "rho_sl", "omega_sl"],
}


class HarnessSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    output_root: str = "out"
    workers: int = 1
    log_level: str = "INFO"
    power_flow_tolerance: float = 1e-10
    analytic_tolerance: float = 1e-6
    difference_tolerance: float = 1e-3
    steady_state_tolerance: float = 1e-6
    settle_tolerance: float = 1e-6
    coi_tracking_onset: float = 0.2
    omega_units: Literal["pu", "rad/s"] = "pu"


def load_settings(path: Optional[str] = None) -> HarnessSettings:
    """Harness settings from YAML; defaults when the default file is absent"""
    settings_path = Path(path) if path else DEFAULT_SETTINGS
    if not settings_path.exists():
        if path:
            raise FileNotFoundError(f"settings file not found: {settings_path}")
        return HarnessSettings()
    with open(settings_path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    return HarnessSettings(**data.get("harness", data))


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )


@contextlib.contextmanager
def run_log(out_dir: Optional[Path]):
    """Copy log records of one run into <out_dir>/run.log"""
    if out_dir is None:
        yield
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


def output_dir(root: str, scenario: CaseScenario) -> Path:
    """<root>/<label>/rx_<ratio>, rx_base without an override"""
    ratio = "base" if scenario.rx_ratio is None else f"{scenario.rx_ratio:.15g}"
    return Path(root) / scenario.label / f"rx_{ratio}"


@dataclass
class RunBundle:
    scenario: Optional[CaseScenario]
    Y: Optional[AdmittanceMatrix]
    power_flow: Optional[PowerFlowSolution]
    trajectory: Trajectory
    decomposition: DecompositionSeries
    identities: Optional[IdentityReport]
    summary: Dict = field(default_factory=dict)


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _safe_rocof(t, values, t_event, metrics) -> Optional[float]:
    try:
        return rocof_at(t, values, t_event, metrics.rocof_offset, metrics.rocof_window)
    except ValueError as exc:
        logger.warning("RoCoF unavailable: %s", exc)
        return None


def _max(values: np.ndarray) -> float:
    finite = np.isfinite(values)
    return float(np.max(values[finite])) if finite.any() else float("nan")


def summarize(bundle: RunBundle, settings: HarnessSettings) -> Dict:
    """Scalar results of one run: RoCoF values, loss offset, residual maxima, settling"""
    scenario = bundle.scenario
    series = bundle.decomposition
    t = series.t
    t_event = scenario.event_time
    omega_base = series.omega_base
    omega_v = series.eta_v_sys.imag / omega_base
    omega_i = series.eta_i_sys.imag / omega_base
    after = t >= (t_event if t_event is not None else t[0])

    summary = {
        "label": scenario.label,
        "rx_ratio": scenario.rx_ratio,
        "mode": series.mode,
        "event_time": t_event,
        "rows": int(len(t)),
        "steady_state_loss": float(series.loss_magnitude[-1]),
        "steady_state_loss_p": float(series.loss[-1].real),
        "peak_omega_vsys": _max(np.abs(omega_v[after])),
        "peak_omega_isys": _max(np.abs(omega_i[after])),
        "max_abs_eta": _max(np.abs(np.concatenate([series.eta_sl, series.eta_v_sys, series.eta_i_sys]))),
        "max_decomposition_residual": _max(series.residual),
        "max_power_identity_residual": bundle.identities.max_power_residual[0],
        "max_current_identity_residual": bundle.identities.max_current_residual[0],
        "excluded_buses": list(bundle.identities.excluded_buses),
        "guard_rows": int(np.sum(bundle.trajectory.guard)) if bundle.trajectory.guard is not None else 0,
    }
    if bundle.power_flow is not None:
        summary["power_flow_iterations"] = bundle.power_flow.iterations
        summary["power_flow_mismatch"] = bundle.power_flow.mismatch_norm

    if t_event is not None:
        metrics = scenario.metrics
        if series.omega_coi is not None:
            summary["rocof_coi"] = _safe_rocof(t, series.omega_coi, t_event, metrics)
            summary["coi_tracking_ratio"] = coi_tracking_ratio(series, t_event, settings.coi_tracking_onset)
        summary["rocof_vsys"] = _safe_rocof(t, omega_v, t_event, metrics)
        summary["rocof_isys"] = _safe_rocof(t, omega_i, t_event, metrics)
        summary["first_swing_rho_vsys"] = first_swing_amplitude(t, series.eta_v_sys.real, t_event)
        summary["first_swing_rho_isys"] = first_swing_amplitude(t, series.eta_i_sys.real, t_event)
        summary["first_swing_rho_sl"] = first_swing_amplitude(t, series.eta_sl.real, t_event)
        summary["dominance_ratio"] = dominance_ratio(series, t_event)
        summary["settling_time"] = settling_time(bundle.trajectory, t_event, settings.settle_tolerance)
    return summary


def export_plot_data(bundle: RunBundle, out_dir: Path, omega_units: str = "pu") -> List[Path]:
    """One CSV per figure panel: losses/CoI, voltage part, current part, loss CF"""
    frame = bundle.decomposition.to_frame(omega_units)
    written = []
    for filename, columns in PLOT_PANELS.items():
        path = out_dir / filename
        frame[columns].to_csv(path, index=False, float_format="%.17g")
        written.append(path)
    return written


def write_outputs(bundle: RunBundle, out_dir: Path, settings: HarnessSettings) -> None:
    """Trajectory, metrics, identities, plot data, effective case and summary"""
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle.trajectory.to_csv(out_dir / "trajectory.csv")
    bundle.decomposition.to_frame(settings.omega_units).to_csv(
        out_dir / "metrics.csv", index=False, float_format="%.17g"
    )
    bundle.identities.to_csv(out_dir / "identities.csv")
    export_plot_data(bundle, out_dir, settings.omega_units)
    dump_case(bundle.scenario, out_dir / "effective_config.json")
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(bundle.summary, f, indent=2, default=str)
    logger.info("outputs written to %s", out_dir)


def run_scenario(scenario: CaseScenario, settings: Optional[HarnessSettings] = None,
                 out_dir: Optional[Path] = None, mode: Optional[str] = None) -> RunBundle:
    """power flow -> assemble -> simulate -> metrics [-> export]; failures carry the stage"""
    settings = settings or HarnessSettings()
    mode = mode or scenario.metrics.mode
    with run_log(out_dir):
        with stage("power-flow"):
            network = scenario.effective_network()
            Y = build_admittance(network)
            pf = solve_power_flow(network, scenario.power_flow_spec(), tol=settings.power_flow_tolerance, Y=Y)
        with stage("assemble"):
            system = assemble(network, scenario.gfm, scenario.gfl, scenario.loads,
                              scenario.events, pf, scenario.integrator)
        with stage("simulate"):
            trajectory = run(system)
        with stage("metrics"):
            metrics = scenario.metrics
            decomposition = decompose(trajectory, mode, scenario.inertia_weights(),
                                      metrics.magnitude_floor, metrics.injection_floor)
            identities = identity_report(trajectory, Y, mode, metrics.magnitude_floor, metrics.injection_floor)
            bundle = RunBundle(scenario, Y, pf, trajectory, decomposition, identities)
            bundle.summary = summarize(bundle, settings)
        if out_dir is not None:
            with stage("export"):
                write_outputs(bundle, out_dir, settings)
    return bundle


SWEEP_COLUMNS = [
    "rx_ratio", "status", "rocof_coi", "rocof_vsys", "rocof_isys", "steady_state_loss",
    "peak_omega_vsys", "peak_omega_isys", "dominance_ratio", "max_decomposition_residual",
]


def _sweep_worker(task) -> Dict:
    scenario, ratio, settings, write = task
    variant = scenario.with_rx_ratio(ratio)
    out_dir = output_dir(settings.output_root, variant) if write else None
    try:
        bundle = run_scenario(variant, settings, out_dir)
    except SimulationToolError as exc:
        logger.error("R/X %g failed: %s", ratio, exc)
        return {"rx_ratio": ratio, "status": f"failed: {exc}"}
    row = {key: bundle.summary.get(key) for key in SWEEP_COLUMNS}
    row.update(rx_ratio=ratio, status="ok")
    return row


def run_sweep(scenario: CaseScenario, ratios: Sequence[float], settings: Optional[HarnessSettings] = None,
              write: bool = True) -> pd.DataFrame:
    """
    One run per distinct R/X value; a failed value is reported, the others
    still run. Repeated values share one run and one output directory and
    appear once per request in the table.
    """
    if not ratios:
        raise ValueError("sweep needs at least one R/X value")
    settings = settings or HarnessSettings()
    ratios = [float(ratio) for ratio in ratios]
    for ratio in ratios:
        scenario.with_rx_ratio(ratio)
    distinct = list(dict.fromkeys(ratios))
    tasks = [(scenario, ratio, settings, write) for ratio in distinct]
    if settings.workers > 1 and len(tasks) > 1:
        with multiprocessing.Pool(min(settings.workers, len(tasks))) as pool:
            results = pool.map(_sweep_worker, tasks)
    else:
        results = [_sweep_worker(task) for task in tasks]
    by_ratio = dict(zip(distinct, results))

    table = pd.DataFrame([by_ratio[ratio] for ratio in ratios], columns=SWEEP_COLUMNS)
    if write:
        path = Path(settings.output_root) / scenario.label / "sweep.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, float_format="%.17g")
        logger.info("sweep table written to %s", path)
    return table


def metrics_from_csv(traj_path: Path, scenario: Optional[CaseScenario], mode: str,
                     settings: HarnessSettings, base_frequency: float = 60.0) -> RunBundle:
    """Post-process an exported trajectory; analytic mode and CoI need the case"""
    omega_base = 2 * np.pi * (scenario.network.base_frequency if scenario else base_frequency)
    trajectory = Trajectory.from_csv(traj_path, omega_base)
    if scenario is None:
        if mode == "analytic":
            raise SimulationToolError("analytic mode needs --case to rebuild the derivatives")
        Y = None
        inertia = {}
        identities = None
    else:
        network = scenario.effective_network()
        Y = build_admittance(network)
        pf = solve_power_flow(network, scenario.power_flow_spec(), tol=settings.power_flow_tolerance, Y=Y)
        system = assemble(network, scenario.gfm, scenario.gfl, scenario.loads, scenario.events, pf,
                          scenario.integrator)
        trajectory = replay(system, trajectory)
        inertia = scenario.inertia_weights()
        identities = identity_report(trajectory, Y, mode, scenario.metrics.magnitude_floor,
                                     scenario.metrics.injection_floor)
    decomposition = decompose(trajectory, mode, inertia)
    return RunBundle(scenario, Y, None, trajectory, decomposition, identities)


def print_summary(summary: Dict) -> None:
    print("\n" + "=" * 70)
    print(f"RUN SUMMARY: {summary.get('label')}  (R/X {summary.get('rx_ratio')}, {summary.get('mode')} mode)")
    print("=" * 70)
    for key, value in summary.items():
        if key in ("label", "rx_ratio", "mode"):
            continue
        if isinstance(value, float):
            print(f"  {key:32s}: {value:.6g}")
        else:
            print(f"  {key:32s}: {value}")
    print("=" * 70)


def print_sweep(table: pd.DataFrame) -> None:
    print("\n" + "=" * 70)
    print("R/X SWEEP")
    print("=" * 70)
    for _, row in table.iterrows():
        mark = "✅" if row["status"] == "ok" else "❌"
        if row["status"] == "ok":
            print(
                f"  {mark} R/X {row['rx_ratio']:<6g} RoCoF coi {row['rocof_coi']:+.5f}  "
                f"vsys {row['rocof_vsys']:+.5f}  isys {row['rocof_isys']:+.5f}  "
                f"|s_l| {row['steady_state_loss']:.5f}"
            )
        else:
            print(f"  {mark} R/X {row['rx_ratio']:<6g} {row['status']}")
    print("=" * 70)


def cmd_simulate(args, settings: HarnessSettings) -> int:
    """Run one case, print its summary and optionally verify the identities"""
    scenario = load_case(args.case)
    if args.rx is not None:
        scenario = scenario.with_rx_ratio(args.rx)
    out_dir = Path(args.out) if args.out else output_dir(settings.output_root, scenario)
    bundle = run_scenario(scenario, settings, out_dir, args.mode)
    print_summary(bundle.summary)
    print(f"✅ Outputs written to: {out_dir}")
    if args.verify:
        suite = VerificationSuite.for_bundle(bundle, settings).run_all()
        suite.print_report()
        suite.save_report(out_dir / "verification_report.json")
        return suite.exit_code
    return 0


def cmd_sweep(args, settings: HarnessSettings) -> int:
    """Exit 0 when every R/X value ran, 2 when any failed"""
    scenario = load_case(args.case)
    ratios = [float(v) for v in args.rx.split(",") if v.strip()]
    if args.workers is not None:
        settings = settings.model_copy(update={"workers": args.workers})
    if args.out:
        settings = settings.model_copy(update={"output_root": args.out})
    table = run_sweep(scenario, ratios, settings)
    print_sweep(table)
    return 0 if (table["status"] == "ok").all() else 2


def cmd_verify(args, settings: HarnessSettings) -> int:
    """Analytic run followed by the full identity suite; exit 3 on breach"""
    scenario = load_case(args.case)
    if args.rx is not None:
        scenario = scenario.with_rx_ratio(args.rx)
    if args.tol is not None:
        settings = settings.model_copy(update={"difference_tolerance": args.tol})
    out_dir = Path(args.out) if args.out else output_dir(settings.output_root, scenario)
    bundle = run_scenario(scenario, settings, out_dir, "analytic")
    suite = VerificationSuite.for_bundle(bundle, settings).run_all()
    suite.print_report()
    suite.save_report(out_dir / "verification_report.json")
    return suite.exit_code


def cmd_case39(args, settings: HarnessSettings) -> int:
    """Write the built-in 39-bus case file"""
    from ieee39 import build_ieee39_ibr

    scenario = build_ieee39_ibr(rx_ratio=args.rx, t_end=args.t_end)
    dump_case(scenario, args.out)
    print(f"✅ 39-bus case written to: {args.out}")
    return 0


def cmd_metrics(args, settings: HarnessSettings) -> int:
    """Recompute metrics and identities from a trajectory CSV"""
    scenario = load_case(args.case) if args.case else None
    bundle = metrics_from_csv(Path(args.traj), scenario, args.mode, settings, args.base_frequency)
    out_dir = Path(args.out) if args.out else Path(args.traj).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle.decomposition.to_frame(settings.omega_units).to_csv(
        out_dir / "metrics.csv", index=False, float_format="%.17g"
    )
    export_plot_data(bundle, out_dir, settings.omega_units)
    if bundle.identities is not None:
        bundle.identities.to_csv(out_dir / "identities.csv")
    print(f"✅ Metrics written to: {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Complex frequency of system losses: simulation harness")
    parser.add_argument("--config", help="Harness settings YAML (default config/simulation.yml)")
    parser.add_argument("--log-level", help="Override the configured log level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Run one scenario and export all results")
    p.add_argument("--case", required=True, help="Case file (JSON)")
    p.add_argument("--rx", type=float, help="Override the R/X ratio of every branch")
    p.add_argument("--out", help="Output directory")
    p.add_argument("--mode", choices=["analytic", "diff"], help="Derivative mode for the metrics")
    p.add_argument("--verify", action="store_true", help="Run the identity suite; exit 3 on breach")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="Run the scenario for several R/X ratios")
    p.add_argument("--case", required=True)
    p.add_argument("--rx", required=True, help="Comma-separated R/X values, e.g. 0.1,1.0")
    p.add_argument("--workers", type=int, help="Parallel runs (1 = serial)")
    p.add_argument("--out", help="Output root")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="Run the identity verification suite")
    p.add_argument("--case", required=True)
    p.add_argument("--rx", type=float)
    p.add_argument("--tol", type=float, help="Relative tolerance for difference-mode checks")
    p.add_argument("--out", help="Output directory")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("case39", help="Write the built-in converter-based IEEE 39-bus case")
    p.add_argument("--out", required=True)
    p.add_argument("--rx", type=float)
    p.add_argument("--t-end", type=float, default=40.0)
    p.set_defaults(func=cmd_case39)

    p = sub.add_parser("metrics", help="Post-process an exported trajectory CSV")
    p.add_argument("--traj", required=True)
    p.add_argument("--case", help="Case file; needed for analytic mode, CoI and per-bus identities")
    p.add_argument("--mode", choices=["analytic", "diff"], default="diff")
    p.add_argument("--base-frequency", type=float, default=60.0)
    p.add_argument("--out", help="Output directory (default: next to the trajectory)")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI entry point; returns the process exit code"""
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config)
    except (FileNotFoundError, yaml.YAMLError, ValueError) as exc:
        print(f"❌ Invalid settings: {exc}")
        return 1
    setup_logging(args.log_level or settings.log_level)

    try:
        return args.func(args, settings)
    except SimulationToolError as exc:
        print(f"❌ {exc}")
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"❌ {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
