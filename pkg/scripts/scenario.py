"""
Case-file schema: network, converters, loads, events and run settings

Case files are JSON with a versioned schema. Every level rejects unknown
keys and every default is written back by dump_case, so the dumped file is
the effective configuration of a run.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as SchemaError

from devices import Event, GflConverter, GfmVsm, LoadModel, validate_devices
from dynsim import IntegratorConfig
from errors import CaseParseError, ValidationError, Violation
from netmodel import Network, set_rx_ratio, validate
from powerflow import PowerFlowSpec

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"


class Dispatch(BaseModel):
    """Scheduled generation at a converter bus (system pu) and its voltage set point"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    bus: int
    p: float
    v_set: float = 1.0


class MetricsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["analytic", "diff"] = "analytic"
    magnitude_floor: float = Field(1e-6, gt=0)
    injection_floor: float = Field(1e-9, gt=0)
    rocof_offset: float = Field(0.5, ge=0)
    rocof_window: float = Field(0.1, gt=0)


class CaseScenario(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal["1.0"] = SCHEMA_VERSION
    label: str
    network: Network
    slack_bus: int
    dispatch: List[Dispatch]
    gfm: List[GfmVsm] = []
    gfl: List[GflConverter] = []
    loads: List[LoadModel] = []
    events: List[Event] = []
    integrator: IntegratorConfig = IntegratorConfig()
    metrics: MetricsConfig = MetricsConfig()
    rx_ratio: Optional[float] = None
    rx_include_transformers: bool = True
    labels: Dict[str, str] = {}

    @property
    def event_time(self) -> Optional[float]:
        return min((e.time for e in self.events), default=None)

    def with_rx_ratio(self, ratio: Optional[float]) -> "CaseScenario":
        if ratio is not None and not ratio > 0:
            raise ValidationError(f"{self.label}: invalid R/X override",
                                  [Violation("rx_ratio", "must be positive", f"{ratio:g}")])
        return self.model_copy(update={"rx_ratio": ratio})

    def effective_network(self) -> Network:
        """The network the run uses, with the R/X override applied"""
        if self.rx_ratio is None:
            return self.network
        return set_rx_ratio(self.network, self.rx_ratio, self.rx_include_transformers)

    def power_flow_spec(self) -> PowerFlowSpec:
        """Slack and PV buses from the dispatch; loads as negative injections"""
        injections: Dict[int, complex] = {}
        for load in self.loads:
            injections[load.bus] = injections.get(load.bus, 0j) - complex(load.p0, load.q0)
        pv_voltages = {}
        slack_voltage = 1.0
        for entry in self.dispatch:
            injections[entry.bus] = injections.get(entry.bus, 0j) + entry.p
            if entry.bus == self.slack_bus:
                slack_voltage = entry.v_set
            else:
                pv_voltages[entry.bus] = entry.v_set
        return PowerFlowSpec(
            slack_bus=self.slack_bus,
            pv_voltages=pv_voltages,
            injections=injections,
            slack_voltage=slack_voltage,
        )

    def inertia_weights(self) -> Dict[str, float]:
        """H·S_rating/S_base per GFM device, the centre-of-inertia weights"""
        base = self.network.base_mva
        return {d.name: d.inertia_h * (d.rating_mva or base) / base for d in self.gfm}


def validate_scenario(scenario: CaseScenario) -> List[Violation]:
    """Every broken rule of a case; an empty list means the case can run"""
    violations = list(validate(scenario.network))
    violations += validate_devices(scenario.network, scenario.gfm, scenario.gfl, scenario.loads, scenario.events)

    buses = set(scenario.network.bus_ids)
    converter_buses = {d.bus for d in [*scenario.gfm, *scenario.gfl]}
    dispatch_buses = [d.bus for d in scenario.dispatch]

    if not converter_buses:
        violations.append(Violation("devices", "no sources on an energized network"))
    if scenario.slack_bus not in buses:
        violations.append(Violation("slack_bus", "references unknown bus", str(scenario.slack_bus)))
    elif scenario.slack_bus not in dispatch_buses:
        violations.append(Violation("slack_bus", "has no dispatch entry", str(scenario.slack_bus)))
    for bus in dispatch_buses:
        if bus not in converter_buses:
            violations.append(Violation(f"dispatch at bus {bus}", "no converter on that bus"))
        if dispatch_buses.count(bus) > 1:
            violations.append(Violation(f"dispatch at bus {bus}", "listed more than once"))
    for bus in sorted(converter_buses - set(dispatch_buses)):
        violations.append(Violation(f"converter at bus {bus}", "has no dispatch entry"))
    if scenario.rx_ratio is not None and scenario.rx_ratio <= 0:
        violations.append(Violation("rx_ratio", "must be positive", str(scenario.rx_ratio)))
    return violations


def _schema_violations(exc: SchemaError) -> List[Violation]:
    return [
        Violation(".".join(str(part) for part in error["loc"]) or "case", error["msg"])
        for error in exc.errors()
    ]


def parse_case(text: str, source: str = "<case>") -> CaseScenario:
    """JSON text to a validated case; syntax errors carry line and column"""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(source, exc.lineno, exc.colno, exc.msg) from exc
    try:
        scenario = CaseScenario.model_validate(data)
    except SchemaError as exc:
        raise ValidationError(f"{source}: case does not match schema {SCHEMA_VERSION}",
                              _schema_violations(exc)) from exc
    violations = validate_scenario(scenario)
    if violations:
        raise ValidationError(f"{source}: case failed validation", violations)
    return scenario


def load_case(path: Union[str, Path]) -> CaseScenario:
    """Read, parse and validate a case file"""
    path = Path(path)
    scenario = parse_case(path.read_text(encoding="utf-8"), str(path))
    logger.info(
        "loaded case %s: %d buses, %d GFM, %d GFL, %d loads, %d events",
        scenario.label, scenario.network.n, len(scenario.gfm), len(scenario.gfl),
        len(scenario.loads), len(scenario.events),
    )
    return scenario


def dump_case(scenario: CaseScenario, path: Optional[Union[str, Path]] = None) -> str:
    """Canonical JSON: sorted keys, two-space indent, shortest float repr"""
    text = json.dumps(scenario.model_dump(mode="json"), sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
