"""Closed-form analytical cost model.

Total-time decomposition, per-tile compute/communication times, the
communication-hiding threshold on the reduction extent, and an analytic
predictor cross-checking the event-driven simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .hwmodel import (
    HardwareProfile,
    MechanismKind,
    aggregate_issue_bandwidth,
    effective_bandwidth,
    transfer_mechanisms,
)


class CostModelError(Exception):
    pass


@dataclass(frozen=True)
class TileCostInputs:
    """Inputs for per-output-tile compute/communication time."""

    m: int
    n: int
    k: int
    K: int  # full reduction extent
    s: int  # element size, bytes
    R: float  # FLOP/s
    B: float  # bytes/s

    def __post_init__(self):
        if min(self.m, self.n, self.k, self.s) <= 0 or self.K < 0:
            raise CostModelError("tile extents and element size must be positive")
        if self.R <= 0 or self.B <= 0:
            raise CostModelError("throughput and bandwidth must be positive")


def kernel_time(t_launch: float, t_comp: float, t_mem: float, t_comm: float,
                t_non_overlap: float, t_sync: float) -> float:
    """Total time: launch + max of the overlappable parts + residuals."""
    parts = (t_launch, t_comp, t_mem, t_comm, t_non_overlap, t_sync)
    if any(p < 0 for p in parts):
        raise CostModelError("time components must be nonnegative")
    return t_launch + max(t_comp, t_mem, t_comm) + t_non_overlap + t_sync

def tile_times(inputs: TileCostInputs) -> tuple[float, float]:
    """(compute, communication) time in ns for one m x n output tile.

    Compute covers all K/k reduction steps; communication is the single
    store of the finished tile.
    """
    t_comp = 2.0 * inputs.m * inputs.n * inputs.K / inputs.R * 1e9
    t_comm = inputs.s * inputs.m * inputs.n / inputs.B * 1e9
    return t_comp, t_comm


def hiding_threshold(s: float, R: float, B: float) -> float:
    """Reduction extent above which per-tile communication is hidden."""
    if s <= 0 or R <= 0:
        raise CostModelError("element size and throughput must be positive")
    if B <= 0:
        raise CostModelError("bandwidth must be positive")
    return s * R / (2.0 * B)


class AllReduceStrategy(Enum):
    INTRA_SM_ATOMIC_WRITES = "intra_sm_atomic_writes"
    INTER_SM_IN_FABRIC = "inter_sm_in_fabric"


def allreduce_comm_factor(strategy: AllReduceStrategy, n_devices: int) -> int:
    """Relative link-time units charged per tile by each all-reduce strategy."""
    if n_devices < 2:
        raise CostModelError("all-reduce needs at least 2 devices")
    if strategy is AllReduceStrategy.INTRA_SM_ATOMIC_WRITES:
        return n_devices
    return 1


@dataclass
class CostReport:
    """The total-time decomposition for one analyzed or simulated run."""

    t_launch: float = 0.0
    t_comp: float = 0.0
    t_mem: float = 0.0
    t_comm: float = 0.0
    t_sync: float = 0.0
    t_non_overlap: float = 0.0
    t_total: float = 0.0
    comm_ratio: float = 0.0
    achieved_flops: float = 0.0

    CSV_FIELDS = ("t_launch", "t_comp", "t_mem", "t_comm", "t_sync",
                  "t_non_overlap", "t_total", "comm_ratio", "achieved_flops")

    def csv_row(self) -> list[str]:
        return [f"{getattr(self, f):.6g}" for f in self.CSV_FIELDS]


@dataclass
class WorkloadAnalysis:
    """Per-device aggregate counts a workload exposes for analytic prediction.

    Byte counts are per device; ``ingress_weighted_bytes`` already includes
    any atomic read-modify-write factor on the destination port.
    """

    flops_per_device: float
    egress_bytes: float
    ingress_weighted_bytes: float
    msg_bytes: float
    mechanism: MechanismKind
    comm_sms: float  # SMs available to drive communication
    compute_sms: float
    hbm_bytes_per_device: float
    total_flops: float
    sync_events: int = 0
    inter_sm_sync: bool = False
    parallel_streams: int = 8
    baseline_ns: Optional[float] = None


def predict(analysis: WorkloadAnalysis, profile: HardwareProfile) -> CostReport:
    """Analytic CostReport from closed forms over per-device aggregates."""
    mechs = transfer_mechanisms(profile)
    mech = mechs[analysis.mechanism]
    link = profile.link_bandwidth_B

    t_launch = profile.launch_overhead_ns
    r_eff = profile.tensor_throughput_R * (
        analysis.compute_sms / profile.sms_per_device)
    t_comp = (analysis.flops_per_device / r_eff * 1e9) if r_eff > 0 else 0.0
    t_mem = analysis.hbm_bytes_per_device / profile.hbm_bandwidth * 1e9

    if analysis.egress_bytes > 0 or analysis.ingress_weighted_bytes > 0:
        eval_msg = analysis.msg_bytes
        if mech.max_message_bytes is not None:
            eval_msg = min(eval_msg, mech.max_message_bytes)
        per_stream = effective_bandwidth(mech, eval_msg, profile)
        caps = [link, per_stream * max(1, analysis.parallel_streams)]
        if not mech.host_initiated:
            caps.append(aggregate_issue_bandwidth(mech, analysis.comm_sms))
        egress_rate = min(caps)
        ingress_rate = min(link, per_stream * max(1, analysis.parallel_streams))
        t_comm = max(analysis.egress_bytes / egress_rate,
                     analysis.ingress_weighted_bytes / ingress_rate) * 1e9
    else:
        t_comm = 0.0

    sync_unit = (profile.inter_sm_sync_ns if analysis.inter_sm_sync
                 else profile.intra_sm_sync_ns)
    t_sync = analysis.sync_events * sync_unit

    total = kernel_time(t_launch, t_comp, t_mem, t_comm, 0.0, t_sync)
    report = CostReport(
        t_launch=t_launch, t_comp=t_comp, t_mem=t_mem, t_comm=t_comm,
        t_sync=t_sync, t_non_overlap=0.0, t_total=total,
    )
    if analysis.baseline_ns is not None and total > 0:
        report.comm_ratio = max(0.0, (total - analysis.baseline_ns) / total)
    if total > 0:
        report.achieved_flops = analysis.total_flops / (total / 1e9)
    return report
