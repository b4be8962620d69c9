"""Benchmark arithmetic: throughput, energy, GOPS and GOPS/J from measured cells."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

# relative disagreement above which a published efficiency cell is flagged
CONSISTENCY_TOLERANCE = 0.02


@dataclass(frozen=True)
class BenchInputs:
    """Measured cells for one model.

    ``gop_per_inference`` turns throughput into GOPS.  When a measured
    performance figure exists, pass it as ``measured_gops`` instead; it takes
    precedence.  ``reported_efficiency`` is an optional published GOPS/J cell
    that the report checks against its own arithmetic.
    """

    label: str
    latency_ms: float
    cpu_power_mw: float
    gpu_power_mw: float = 0.0
    gop_per_inference: Optional[float] = None
    measured_gops: Optional[float] = None
    reported_efficiency: Optional[float] = None

    def __post_init__(self):
        if not (self.latency_ms > 0 and math.isfinite(self.latency_ms)):
            raise ValueError("latency_ms must be positive")
        if self.cpu_power_mw < 0 or self.gpu_power_mw < 0:
            raise ValueError("powers must be non-negative")
        for name in ("gop_per_inference", "measured_gops", "reported_efficiency"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class BenchReport:
    label: str
    throughput: float  # inferences / s
    energy_per_inference_mj: float
    performance_gops: Optional[float]
    energy_efficiency_gops_per_j: Optional[float]
    gops_source: str  # "measured" | "gop x throughput" | "unavailable"
    reported_efficiency: Optional[float] = None

    @property
    def efficiency_consistent(self) -> Optional[bool]:
        """Whether a published GOPS/J cell agrees with this row's arithmetic."""
        if self.reported_efficiency is None or self.energy_efficiency_gops_per_j is None:
            return None
        rel = abs(self.reported_efficiency - self.energy_efficiency_gops_per_j) / self.reported_efficiency
        return rel <= CONSISTENCY_TOLERANCE

    def to_json(self) -> dict:
        d = asdict(self)
        d["efficiency_consistent"] = self.efficiency_consistent
        return d


@dataclass(frozen=True)
class Comparison:
    speedup: float
    energy_improvement_pct: float

    def to_json(self) -> dict:
        return asdict(self)


def bench_report(inputs: BenchInputs) -> BenchReport:
    throughput = 1000.0 / inputs.latency_ms
    energy_mj = (inputs.cpu_power_mw + inputs.gpu_power_mw) * inputs.latency_ms / 1000.0
    if inputs.measured_gops is not None:
        gops, source = inputs.measured_gops, "measured"
    elif inputs.gop_per_inference is not None:
        gops, source = inputs.gop_per_inference * throughput, "gop x throughput"
    else:
        gops, source = None, "unavailable"
    eff = gops / (energy_mj / 1000.0) if gops is not None and energy_mj > 0 else None
    return BenchReport(inputs.label, throughput, energy_mj, gops, eff, source, inputs.reported_efficiency)


def compare(baseline: BenchReport, candidate: BenchReport) -> Comparison:
    """Candidate relative to baseline: speedup and energy saved per inference."""
    return Comparison(
        speedup=candidate.throughput / baseline.throughput,
        energy_improvement_pct=100.0 * (1.0 - candidate.energy_per_inference_mj / baseline.energy_per_inference_mj),
    )
