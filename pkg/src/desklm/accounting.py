"""Compute and carbon accounting: the 6*N*D FLOP approximation, ideal device
time at a stated per-device throughput, and energy/CO2eq arithmetic with
published large-model footprints as reference points."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

# Published training-footprint reference points (tons CO2eq).
REFERENCE_FOOTPRINTS_TONS = {
    "OPT-175B": 75.0,
    "GPT-3": 500.0,
    "Gopher": 380.0,
}

SECONDS_PER_DAY = 86_400.0


@dataclass(frozen=True)
class AccountingInput:
    param_count: float  # N
    training_tokens: float  # D
    device_count: int = 992
    throughput_flops: float = 147e12  # sustained per-device FLOP/s
    device_power_w: float = 400.0  # placeholder coefficient, marked in output
    pue: float = 1.1  # placeholder coefficient, marked in output
    grid_intensity_kg_per_kwh: float = 0.4
    overhead_multiplier: float = 1.0  # ablations/downtime multiplier, plain factor

    def __post_init__(self):
        for name in (
            "param_count", "training_tokens", "device_count", "throughput_flops",
            "device_power_w", "pue", "overhead_multiplier",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"accounting: {name} must be strictly positive")
        if self.grid_intensity_kg_per_kwh < 0:
            raise ConfigError("accounting: grid_intensity_kg_per_kwh must be >= 0")


def estimate_compute(inp: AccountingInput) -> tuple[float, float]:
    """(total FLOPs = 6*N*D, ideal device-days at the stated throughput).

    The time is an idealized lower bound: no restarts, no stragglers, perfect
    utilization at the stated per-device rate.
    """
    flops = 6.0 * inp.param_count * inp.training_tokens
    seconds = flops / (inp.device_count * inp.throughput_flops)
    return flops, seconds / SECONDS_PER_DAY


def estimate_energy_kwh(inp: AccountingInput, days: float) -> float:
    return inp.device_count * days * 24.0 * (inp.device_power_w / 1000.0) * inp.pue


def estimate_co2_tons(inp: AccountingInput, days: float) -> float:
    """CO2eq in metric tons: energy * grid intensity * overhead multiplier."""
    kwh = estimate_energy_kwh(inp, days)
    return kwh * inp.grid_intensity_kg_per_kwh * inp.overhead_multiplier / 1000.0


def accounting_report(inp: AccountingInput) -> dict:
    flops, days = estimate_compute(inp)
    kwh = estimate_energy_kwh(inp, days)
    tons = estimate_co2_tons(inp, days)
    return {
        "inputs": {
            "param_count": inp.param_count,
            "training_tokens": inp.training_tokens,
            "device_count": inp.device_count,
            "throughput_flops": inp.throughput_flops,
            "device_power_w": inp.device_power_w,
            "pue": inp.pue,
            "grid_intensity_kg_per_kwh": inp.grid_intensity_kg_per_kwh,
            "overhead_multiplier": inp.overhead_multiplier,
        },
        "total_flops": flops,
        "ideal_device_days": days,
        "energy_kwh": kwh,
        "co2_tons": tons,
        "notes": [
            "ideal time assumes zero restarts and perfect utilization",
            "device_power_w and pue are placeholder coefficients",
        ],
        "reference_footprints_tons": dict(REFERENCE_FOOTPRINTS_TONS),
    }


def format_report(report: dict) -> str:
    lines = [
        f"total FLOPs:        {report['total_flops']:.4e}",
        f"ideal device-days:  {report['ideal_device_days']:.2f}",
        f"energy:             {report['energy_kwh']:.1f} kWh",
        f"CO2eq:              {report['co2_tons']:.2f} t",
        "notes: " + "; ".join(report["notes"]),
        "published reference footprints:",
    ]
    for name, tons in report["reference_footprints_tons"].items():
        lines.append(f"  {name}: {tons:.0f} t")
    return "\n".join(lines)
