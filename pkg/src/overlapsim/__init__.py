"""Desk-scale simulator and analytical planner for overlapped multi-GPU
kernels on a switched peer-to-peer fabric."""

from .costmodel import (
    AllReduceStrategy,
    CostReport,
    TileCostInputs,
    WorkloadAnalysis,
    allreduce_comm_factor,
    hiding_threshold,
    kernel_time,
    predict,
    tile_times,
)
from .engine import (
    DeadlockError,
    Engine,
    EngineConfig,
    OverheadConfig,
    SyncKind,
    sync_cost,
)
from .hwmodel import (
    Functionality,
    HardwareProfile,
    MechanismKind,
    TransferMechanism,
    aggregate_issue_bandwidth,
    effective_bandwidth,
    get_profile,
    select_mechanism,
    sms_to_saturate,
    supports,
)
from .lcsc import (
    ExecResult,
    LcscKernelSpec,
    ReusePolicy,
    ScheduleMode,
    autotune_partition,
    execute_kernel,
    remote_reuse_policy,
)
from .memsim import (
    BarrierField,
    ParallelGlobalLayout,
    SetupMode,
    SetupSession,
    SharedTile,
    TileCoord,
    allocate_pgl,
    attach_multicast,
)
from .workloads import (
    WorkloadKind,
    WorkloadSpec,
    build,
    check_oracle,
    list_builtin_scenarios,
)

__version__ = "0.1.0"
