"""Closed-form FLOP, transfer and latency estimates for edge/cloud splitting.

The edge is David (untrusted, holds the dense residuals); the cloud is
Charlie (holds the hidden factors).  All FLOP counts are integers, with one
multiply-add counted as two FLOPs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .schema import stamp, unstamp


@dataclass(frozen=True)
class HardwareSpec:
    flops_per_sec: float
    utilization: float = 1.0

    def __post_init__(self):
        if not self.flops_per_sec > 0:
            raise ValueError("flops_per_sec must be positive")
        if not 0 < self.utilization <= 1:
            raise ValueError("utilization must lie in (0, 1]")


@dataclass(frozen=True)
class NetworkSpec:
    bandwidth_bytes_per_sec: float
    delay_sec: float = 0.0
    bytes_per_value: int = 4

    def __post_init__(self):
        if not self.bandwidth_bytes_per_sec > 0:
            raise ValueError("bandwidth must be positive")
        if self.delay_sec < 0 or self.bytes_per_value < 1:
            raise ValueError("delay must be >= 0 and bytes_per_value >= 1")


@dataclass(frozen=True)
class ModelShape:
    """``l`` layers of ``m x n`` weights, ``l_d`` of them split with ``k``
    hidden components; ``l_v`` noise vectors are sampled per split layer."""

    l: int
    l_d: int
    n: int
    m: int
    b: int = 1
    k: int = 0
    l_v: int = 0

    def __post_init__(self):
        if min(self.l, self.n, self.m, self.b) < 1 or min(self.l_d, self.k, self.l_v) < 0:
            raise ValueError("layer counts and dimensions must be positive")
        if self.l_d > self.l:
            raise ValueError(f"l_d={self.l_d} exceeds l={self.l}")


@dataclass(frozen=True)
class FlopBreakdown:
    flops_edge: int
    flops_cloud: int
    flops_full: int
    transfer_values: int

    def __iter__(self):
        return iter((self.flops_edge, self.flops_cloud, self.flops_full, self.transfer_values))

    @property
    def offload_fraction(self) -> float:
        return self.flops_cloud / self.flops_full


# Figures printed in the published performance table, kept for comparison.
PUBLISHED = {
    "flops_full": 240.547e9,
    "flops_edge": 240.538e9,
    "flops_cloud": 3.697e9,
    "transfer_values": 1.848e6,
    "t_edge": 150.34e-3,
    "t_cloud": 0.66e-3,
    "t_transfer": 71.31e-3,
    "t_total": 222.31e-3,
}


@dataclass
class CostReport:
    shape: ModelShape
    flops_full: int
    flops_edge: int
    flops_cloud: int
    transfer_values: int
    t_edge: float
    t_cloud: float
    t_transfer: float
    phases: list = field(default_factory=list)
    published: dict = field(default_factory=dict)
    discrepancies: dict = field(default_factory=dict)

    @property
    def t_total(self) -> float:
        return self.t_edge + self.t_cloud + self.t_transfer

    @property
    def offload_fraction(self) -> float:
        return self.flops_cloud / self.flops_full

    def to_dict(self) -> dict:
        out = {
            "shape": asdict(self.shape),
            "performance": {
                "flops_full": self.flops_full,
                "flops_edge": self.flops_edge,
                "flops_cloud": self.flops_cloud,
                "transfer_values": self.transfer_values,
                "t_edge_ms": self.t_edge * 1e3,
                "t_cloud_ms": self.t_cloud * 1e3,
                "t_transfer_ms": self.t_transfer * 1e3,
                "t_total_ms": self.t_total * 1e3,
                "cloud_offload_fraction": self.offload_fraction,
            },
            "phases": self.phases,
        }
        if self.published:
            out["published"] = self.published
            out["discrepancies"] = self.discrepancies
        return stamp(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def lines(self):
        """Human-readable summary, one metric per line."""
        rows = [
            ("FLOPs full model", f"{self.flops_full / 1e9:.3f} GFLOPs"),
            ("FLOPs edge (hybrid)", f"{self.flops_edge / 1e9:.3f} GFLOPs"),
            ("FLOPs cloud (hybrid)", f"{self.flops_cloud / 1e9:.3f} GFLOPs"),
            ("Transferred values", f"{self.transfer_values / 1e6:.3f} M"),
            ("Compute edge latency", f"{self.t_edge * 1e3:.2f} ms"),
            ("Compute cloud latency", f"{self.t_cloud * 1e3:.2f} ms"),
            ("Transfer latency", f"{self.t_transfer * 1e3:.2f} ms"),
            ("Total latency", f"{self.t_total * 1e3:.2f} ms"),
            ("Cloud offload fraction", f"{100 * self.offload_fraction:.2f} %"),
        ]
        out = [f"{name:<24}{value}" for name, value in rows]
        for key, d in self.discrepancies.items():
            out.append(f"DISCREPANCY {key}: formula {d['formula']:.6g} vs published {d['published']:.6g}"
                       f" (ratio {d['ratio']:.3f})")
        return out


def t_compute(flops, hw: HardwareSpec) -> float:
    """Seconds to run ``flops`` at the hardware's effective rate."""
    if flops < 0:
        raise ValueError("flops must be >= 0")
    return flops / (hw.flops_per_sec * hw.utilization)


def t_transfer(values, net: NetworkSpec, rounds: int = 1) -> float:
    """Network delay for each of ``rounds`` plus serialization of ``values``
    activation values (batch already included)."""
    if values < 0 or rounds < 0:
        raise ValueError("values and rounds must be >= 0")
    return rounds * net.delay_sec + values * net.bytes_per_value / net.bandwidth_bytes_per_sec


def flops_breakdown(shape: ModelShape) -> FlopBreakdown:
    l, l_d, n, m, b, k, l_v = shape.l, shape.l_d, shape.n, shape.m, shape.b, shape.k, shape.l_v
    flops_edge = 2 * m * n * b * l + n * b * (l - l_d)
    flops_full = 2 * m * n * b * l + n * b * l
    # 2 l_d b (mk + nk + 2 n l_v + 1.5 n), kept in integers
    flops_cloud = l_d * b * (2 * m * k + 2 * n * k + 4 * n * l_v + 3 * n)
    transfer_values = n * b * (2 * l_d + 1)
    return FlopBreakdown(flops_edge, flops_cloud, flops_full, transfer_values)


def phase_table(shape: ModelShape) -> list:
    """Per-phase operation counts with how often each phase occurs."""
    n, m, b, k, l_v = shape.n, shape.m, shape.b, shape.k, shape.l_v
    rows = [
        ("upload_input", "transfer", "once", 1, n * b),
        ("edge_only_compute", "compute", "each non-decomposed layer", shape.l - shape.l_d, 2 * m * n * b + n * b),
        ("edge_partial_compute", "compute", "each decomposed layer", shape.l_d, 2 * m * n * b),
        ("cloud_partial_compute", "compute", "each decomposed layer", shape.l_d, 2 * k * b * (m + n)),
        ("upload_edge_to_cloud", "transfer", "each decomposed layer", shape.l_d, n * b),
        ("cloud_activation", "compute", "each decomposed layer", shape.l_d, 2 * n * b * (l_v + 1)),
        ("cloud_noise_generation", "compute", "each decomposed layer", shape.l_d, 2 * n * b * l_v),
        ("cloud_noise_addition", "compute", "each decomposed layer", shape.l_d, n * b),
        ("activation_download", "transfer", "each decomposed layer", shape.l_d, n * b),
    ]
    return [
        {"phase": p, "op_type": t, "frequency": f, "count": c, "per_occurrence": v, "total": c * v}
        for p, t, f, c, v in rows
    ]


def _flag(formula, published, rtol):
    ratio = formula / published
    return None if abs(ratio - 1) <= rtol else {"formula": formula, "published": published, "ratio": ratio}


def total_latency(shape: ModelShape, edge_hw: HardwareSpec, cloud_hw: HardwareSpec, net: NetworkSpec,
                  per_round_trip_delay: bool = False, published: dict | None = None,
                  rtol: float = 0.01) -> CostReport:
    """Sum of edge compute, cloud compute and transfer time.

    The network delay is charged once for the whole transfer by default.
    With ``per_round_trip_delay`` it is charged for the input upload and
    again for every split layer's round trip.  When ``published`` figures
    are given, every metric off by more than ``rtol`` is reported in
    ``discrepancies``.
    """
    fb = flops_breakdown(shape)
    rounds = 1 + shape.l_d if per_round_trip_delay else 1
    t_xfer = t_transfer(fb.transfer_values, net, rounds=rounds)
    report = CostReport(
        shape=shape,
        flops_full=fb.flops_full,
        flops_edge=fb.flops_edge,
        flops_cloud=fb.flops_cloud,
        transfer_values=fb.transfer_values,
        t_edge=t_compute(fb.flops_edge, edge_hw),
        t_cloud=t_compute(fb.flops_cloud, cloud_hw),
        t_transfer=t_xfer,
        phases=phase_table(shape),
    )
    if published:
        report.published = dict(published)
        for key, value in published.items():
            formula = report.t_total if key == "t_total" else getattr(report, key)
            flag = _flag(formula, value, rtol)
            if flag is not None:
                report.discrepancies[key] = flag
    return report


# ---------------------------------------------------------------- presets

# Feed-forward view of a 32-block, 4096-wide decoder with ten blocks split.
DECODER_4096 = {
    "shape": ModelShape(l=224, l_d=70, n=4096, m=4096, b=32, k=50, l_v=50),
    "edge": HardwareSpec(4e12, 0.4),
    "cloud": HardwareSpec(14e12, 0.4),
    "net": NetworkSpec(25e6, 35e-3, 4),
}

PRESETS = {"decoder-4096": DECODER_4096}
# name required by the command-line interface
PRESET_ALIASES = {"paper-appendix-c": "decoder-4096"}


def preset_report(name: str = "decoder-4096", **kwargs) -> CostReport:
    p = PRESETS[PRESET_ALIASES.get(name, name)]
    return total_latency(p["shape"], p["edge"], p["cloud"], p["net"], published=PUBLISHED, **kwargs)


def protocol_shape(shape: ModelShape) -> ModelShape:
    """The same shape with no extra noise vectors, which is what the
    single-pad protocol in :mod:`slip.protocol` executes."""
    return replace(shape, l_v=0)


def load_spec(cls, path_or_dict):
    """Build a spec dataclass from a JSON file or a dict."""
    if isinstance(path_or_dict, dict):
        data = path_or_dict
    else:
        with open(path_or_dict) as fh:
            data = json.load(fh)
    return cls(**unstamp(data))
