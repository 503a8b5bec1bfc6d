"""Loader/storer/consumer/communicator kernel template executor.

Runs a workload's worker programs inside one deterministic engine,
assembles the wall-clock decomposition from engine telemetry, sweeps
communication-SM partitions, and decides remote-data reuse staging.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

from .costmodel import CostReport, kernel_time
from .engine import Engine, EngineConfig, EventRecord, OverheadConfig, Sleep, format_event_log
from .hwmodel import HardwareProfile

DEFAULT_PIPELINE_STAGES = 4

ROLES = ("loader", "storer", "consumer", "communicator")


class LcscError(Exception):
    pass


class ScheduleMode(Enum):
    INTRA_SM = "intra_sm"
    INTER_SM = "inter_sm"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class ComputeWorkItem:
    """One consumer step: the flops of a sub-tile reduction chunk."""

    flops: float
    coord: tuple = ()

    def __post_init__(self):
        if self.flops < 0:
            raise LcscError("work item flops must be nonnegative")


@dataclass(frozen=True)
class LcscKernelSpec:
    """Worker-role configuration for one fused kernel."""

    schedule_mode: ScheduleMode = ScheduleMode.INTRA_SM
    num_comm_sms: int = 0
    pipeline_stages: int = DEFAULT_PIPELINE_STAGES
    tile_m: int = 128
    tile_n: int = 128
    tile_k: int = 64
    roles: tuple[str, ...] = ROLES

    def __post_init__(self):
        if self.pipeline_stages < 1:
            raise LcscError("pipeline depth must be at least 1")
        if min(self.tile_m, self.tile_n, self.tile_k) <= 0:
            raise LcscError("tile extents must be positive")
        if self.schedule_mode is ScheduleMode.INTRA_SM and self.num_comm_sms != 0:
            raise LcscError("intra-SM scheduling keeps communication inside "
                            "compute SMs (num_comm_sms must be 0)")
        if self.schedule_mode is not ScheduleMode.INTRA_SM and self.num_comm_sms < 1:
            raise LcscError("dedicated-SM scheduling needs at least 1 "
                            "communication SM")

    def validate(self, profile: HardwareProfile) -> None:
        if self.num_comm_sms >= profile.sms_per_device:
            raise LcscError(
                f"num_comm_sms {self.num_comm_sms} must leave at least one "
                f"compute SM out of {profile.sms_per_device}")

    def compute_sms(self, profile: HardwareProfile) -> int:
        return profile.sms_per_device - self.num_comm_sms


def compute_ns(flops: float, n_sms: float, profile: HardwareProfile) -> float:
    """Time for flops spread over n_sms SMs at the profile's peak rate."""
    if flops <= 0:
        return 0.0
    if n_sms <= 0:
        raise LcscError("compute needs at least one SM")
    rate = profile.tensor_throughput_R * n_sms / profile.sms_per_device
    return flops / rate * 1e9


def comp_sleep(dur_ns: float, dev: int, lane: int) -> Sleep:
    return Sleep(dur_ns, account=("comp", dev, lane))


def sync_sleep(dur_ns: float, dev: int) -> Sleep:
    return Sleep(dur_ns, account=("sync", dev))


@dataclass
class ExecResult:
    """Everything one kernel execution produced."""

    report: CostReport
    pgls: dict
    events: list[EventRecord]
    engine: Engine

    def event_log(self) -> str:
        return format_event_log(self.events)


def assemble_report(engine: Engine, t_end: float, profile: HardwareProfile,
                    total_flops: float = 0.0,
                    baseline_ns: Optional[float] = None) -> CostReport:
    """Build the wall-clock decomposition from engine telemetry.

    The overlap residual is measured, not modeled: whatever part of the
    run is explained by neither launch, the max overlappable component,
    nor synchronization.
    """
    t_launch = profile.launch_overhead_ns
    t_comp = max(engine.comp_busy.values(), default=0.0)
    t_sync = max(engine.sync_busy.values(), default=0.0)
    t_comm = max((chg / engine.port_cap(key)
                  for key, chg in engine.port_charge.items()), default=0.0)
    t_mem = max((b / profile.hbm_bandwidth * 1e9
                 for b in engine.hbm_bytes.values()), default=0.0)
    t_total = t_launch + t_end
    t_non_overlap = max(0.0, t_total - t_launch - max(t_comp, t_mem, t_comm)
                        - t_sync)
    report = CostReport(t_launch=t_launch, t_comp=t_comp, t_mem=t_mem,
                        t_comm=t_comm, t_sync=t_sync,
                        t_non_overlap=t_non_overlap, t_total=t_total)
    if t_total > 0:
        if baseline_ns is not None:
            report.comm_ratio = max(0.0, (t_total - baseline_ns) / t_total)
        else:
            report.comm_ratio = t_non_overlap / t_total
        report.achieved_flops = total_flops / (t_total / 1e9)
    return report


def execute_kernel(spec: LcscKernelSpec, workload, profile: HardwareProfile,
                   overheads: Optional[OverheadConfig] = None, seed: int = 0,
                   cfg: Optional[EngineConfig] = None) -> ExecResult:
    """Run one workload plan under the given schedule and return the result.

    The plan supplies the actor programs (``spawn(engine, spec)``), its
    layouts (``pgls``), its total flop count, and a compute-only baseline
    for the communication ratio.
    """
    spec.validate(profile)
    engine = Engine(profile, overheads=overheads, cfg=cfg, seed=seed)
    workload.spawn(engine, spec)
    t_end = engine.run_until_idle()
    baseline = workload.baseline_ns(profile, spec)
    report = assemble_report(engine, t_end, profile,
                             total_flops=workload.total_flops,
                             baseline_ns=baseline)
    return ExecResult(report=report, pgls=dict(workload.pgls),
                      events=list(engine.records), engine=engine)


# -- SM-partition autotuning -------------------------------------------------

def autotune_partition(spec: LcscKernelSpec, workload_factory: Callable[[], object],
                       profile: HardwareProfile, stride: int = 1,
                       overheads: Optional[OverheadConfig] = None,
                       seed: int = 0,
                       max_comm_sms: Optional[int] = None,
                       ) -> tuple[int, list[tuple[int, float, float]]]:
    """Exhaustively sweep the communication-SM count for a dedicated-SM run.

    Returns (best count, table of (num_comm_sms, t_total_ns, achieved_flops));
    ties break toward fewer communication SMs.
    """
    if spec.schedule_mode is not ScheduleMode.INTER_SM:
        raise LcscError("partition sweep applies to dedicated-SM scheduling")
    if stride < 1:
        raise LcscError("stride must be at least 1")
    hi = max_comm_sms if max_comm_sms is not None else profile.sms_per_device - 1
    hi = min(hi, profile.sms_per_device - 1)
    table: list[tuple[int, float, float]] = []
    best_k, best_t = None, None
    for k in range(1, hi + 1, stride):
        cand = replace(spec, num_comm_sms=k)
        result = execute_kernel(cand, workload_factory(), profile,
                                overheads=overheads, seed=seed)
        row = (k, result.report.t_total, result.report.achieved_flops)
        table.append(row)
        if best_t is None or row[1] < best_t:
            best_k, best_t = k, row[1]
    return best_k, table


def sweep_table_csv(table: list[tuple[int, float, float]]) -> str:
    lines = ["num_comm_sms,t_total_ns,achieved_flops"]
    for k, t, fl in table:
        lines.append(f"{k},{t:.6g},{fl:.6g}")
    return "\n".join(lines) + "\n"


# -- remote-data reuse -------------------------------------------------------

class ReusePolicy(Enum):
    DIRECT_REMOTE_READ = "direct_remote_read"
    STAGE_TO_LOCAL_HBM = "stage_to_local_hbm"


def remote_reuse_policy(reuse_count: int, nbytes: float,
                        profile: HardwareProfile) -> ReusePolicy:
    """Choose between re-reading a peer buffer and staging it locally.

    Peer data is cached only on its owner, so k direct reads cross the
    link k times; staging crosses once and re-reads from local HBM.
    """
    if reuse_count < 0:
        raise LcscError("reuse count must be nonnegative")
    if reuse_count <= 1:
        return ReusePolicy.DIRECT_REMOTE_READ
    direct = reuse_count * nbytes / profile.link_bandwidth_B
    staged = (nbytes / profile.link_bandwidth_B
              + reuse_count * nbytes / profile.hbm_bandwidth)
    return (ReusePolicy.STAGE_TO_LOCAL_HBM if staged < direct
            else ReusePolicy.DIRECT_REMOTE_READ)
