"""Task-graph generators for the evaluated overlapped workloads.

Each generator yields a kernel spec plus a runnable plan: layouts,
worker programs, aggregate traffic/flop counts for analytic prediction,
and a brute-force functional oracle. Small plans materialize real data
and move it tile by tile; large plans run timing-only with
lane-aggregated chunk flows.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .costmodel import WorkloadAnalysis
from .engine import Engine, FlowSpec, WaitCounter, egress, ingress
from .hwmodel import (
    HardwareProfile,
    MechanismKind,
    aggregate_issue_bandwidth,
    transfer_mechanisms,
)
from .lcsc import (
    LcscKernelSpec,
    ScheduleMode,
    comp_sleep,
    compute_ns,
    sync_sleep,
)
from .memsim import (
    BarrierField,
    ParallelGlobalLayout,
    SharedTile,
    TileCoord,
    allocate_barrier,
    allocate_pgl,
    attach_multicast,
    read_tile,
)
from .primitives import (
    IssueCtx,
    all_reduce,
    await_token,
    barrier,
    signal,
    store_add_async,
    store_async,
    wait,
)

_FUNC_TILE = 16
_LANES = 4  # SM lanes aggregated per device in timing-only runs
_CHUNKS = 24  # chunk flows per lane
_CHUNK_MSG = 128 * 1024  # message size chunk flows are issued at
_MATERIALIZE_LIMIT = 1 << 20  # elements per buffer


class WorkloadError(Exception):
    pass


class WorkloadKind(Enum):
    AG_GEMM = "ag_gemm"
    GEMM_RS = "gemm_rs"
    GEMM_AR = "gemm_ar"
    RING_ATTENTION = "ring_attention"
    ULYSSES_ALL_TO_ALL = "ulysses_all_to_all"
    MOE_DISPATCH_GEMM = "moe_dispatch_gemm"
    ALL_GATHER_TENSOR_DIM = "all_gather_tensor_dim"
    REDUCE_SCATTER_TENSOR_DIM = "reduce_scatter_tensor_dim"
    ALL_TO_ALL_4D = "all_to_all_4d"


@dataclass
class WorkloadSpec:
    """Kind + dimensions describing one workload instance."""

    kind: WorkloadKind
    dims: dict
    element_bytes: int = 2
    num_devices: int = 8
    seed: int = 0
    materialize: Optional[bool] = None

    def __post_init__(self):
        if self.element_bytes <= 0:
            raise WorkloadError("element size must be positive")
        if self.num_devices < 2:
            raise WorkloadError("workloads need at least 2 devices")
        for key, val in self.dims.items():
            if int(val) <= 0:
                raise WorkloadError(f"dimension {key} must be positive")

    def dim(self, key: str) -> int:
        if key not in self.dims:
            raise WorkloadError(f"{self.kind.value} needs dimension {key!r}")
        return int(self.dims[key])


class WorkloadPlan:
    """Runnable form of one workload: layouts, programs, counts, oracle."""

    kind: WorkloadKind
    default_mode = ScheduleMode.INTRA_SM
    default_comm_sms = 0
    flow_kind = "store"
    ingress_weight = 1.0

    def __init__(self, spec: WorkloadSpec, profile: HardwareProfile):
        self.spec = spec
        self.profile = profile
        self.num_devices = spec.num_devices
        self.rng = np.random.default_rng(spec.seed)
        self.pgls: dict[str, ParallelGlobalLayout] = {}
        self.check_names: list[str] = []
        n = self.num_devices
        self.flops_by_dev = [0.0] * n
        self.egress_by_dev = [0.0] * n
        self.ingress_w_by_dev = [0.0] * n
        self.hbm_by_dev = [0.0] * n
        self.msg_bytes = float(_CHUNK_MSG)
        self.materialized = False
        self._mechs = transfer_mechanisms(profile)
        self._build()

    # -- per-kind hooks -------------------------------------------------------

    def _build(self) -> None:
        raise NotImplementedError

    def _spawn_functional(self, engine: Engine, kspec: LcscKernelSpec) -> None:
        raise NotImplementedError

    def oracle(self) -> dict[str, list[np.ndarray]]:
        raise NotImplementedError

    def mechanism(self, kspec: LcscKernelSpec) -> MechanismKind:
        return MechanismKind.TMA

    # -- shared API -----------------------------------------------------------

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def flops_per_device(self) -> float:
        return max(self.flops_by_dev)

    @property
    def total_flops(self) -> float:
        return float(sum(self.flops_by_dev))

    def default_kernel_spec(self, schedule_mode: Optional[ScheduleMode] = None,
                            num_comm_sms: Optional[int] = None,
                            pipeline_stages: int = 4) -> LcscKernelSpec:
        mode = schedule_mode or self.default_mode
        if mode is ScheduleMode.INTRA_SM:
            comm = 0
        elif num_comm_sms is not None:
            comm = num_comm_sms
        else:
            comm = self.default_comm_sms or 16
        return LcscKernelSpec(schedule_mode=mode, num_comm_sms=comm,
                              pipeline_stages=pipeline_stages)

    def baseline_ns(self, profile: HardwareProfile,
                    kspec: LcscKernelSpec) -> float:
        f = self.flops_per_device
        if f <= 0:
            return float(profile.launch_overhead_ns)
        return profile.launch_overhead_ns + compute_ns(
            f, kspec.compute_sms(profile), profile)

    def comm_sms(self, kspec: LcscKernelSpec,
                 profile: HardwareProfile) -> int:
        if kspec.schedule_mode is ScheduleMode.INTRA_SM:
            return kspec.compute_sms(profile)
        return kspec.num_comm_sms

    def analysis(self, kspec: LcscKernelSpec,
                 profile: HardwareProfile) -> WorkloadAnalysis:
        return WorkloadAnalysis(
            flops_per_device=self.flops_per_device,
            egress_bytes=max(self.egress_by_dev),
            ingress_weighted_bytes=max(self.ingress_w_by_dev),
            msg_bytes=self.msg_bytes,
            mechanism=self.mechanism(kspec),
            comm_sms=self.comm_sms(kspec, profile),
            compute_sms=kspec.compute_sms(profile),
            hbm_bytes_per_device=max(self.hbm_by_dev),
            total_flops=self.total_flops,
            baseline_ns=self.baseline_ns(profile, kspec),
        )

    def final_state(self) -> dict[str, list[np.ndarray]]:
        return {name: [buf.copy() for buf in self.pgls[name].buffers]
                for name in self.check_names}

    def spawn(self, engine: Engine, kspec: LcscKernelSpec) -> None:
        if self.materialized:
            self._spawn_functional(engine, kspec)
        else:
            self._spawn_timed(engine, kspec)

    # -- shared building blocks ----------------------------------------------

    def _decide_materialize(self, max_elements: int) -> None:
        if self.spec.materialize is not None:
            self.materialized = bool(self.spec.materialize)
        else:
            self.materialized = max_elements <= _MATERIALIZE_LIMIT

    def _randints(self, shape) -> np.ndarray:
        # Integer-valued data keeps every fold order bit-exact.
        return self.rng.integers(-8, 9, size=shape).astype(np.float64)

    def _dest_order(self, dev: int) -> list[int]:
        return [d for d in range(self.num_devices) if d != dev]

    def _chunk_flow(self, engine: Engine, kspec: LcscKernelSpec, src: int,
                    dsts, payload: float, usages, kind: Optional[str] = None):
        mech = self._mechs[self.mechanism(kspec)]
        spec = FlowSpec(src=src, dsts=tuple(dsts), payload_bytes=payload,
                        msg_bytes=self.msg_bytes, mech=mech,
                        kind=kind or self.flow_kind, usages=list(usages))
        return engine.start_flow(spec)

    def _emit(self, engine: Engine, kspec: LcscKernelSpec, dev: int,
              lane: int, i: int, lanes: int, chunks: int):
        """Default chunk emitter: point-to-point stores fanned over peers.

        One flow carries the chunk's whole egress share; each peer's
        ingress is charged its even fraction so the ports stay balanced.
        """
        payload = self.egress_by_dev[dev] / (lanes * chunks)
        if payload <= 0:
            return None
        dests = self._dest_order(dev)
        frac = self.ingress_weight / len(dests)
        usages = ([(("issue", dev), 1.0), (egress(dev), 1.0)]
                  + [(ingress(o), frac) for o in dests])
        return self._chunk_flow(engine, kspec, dev, tuple(dests), payload,
                                usages)

    def _spawn_timed(self, engine: Engine, kspec: LcscKernelSpec) -> None:
        prof = self.profile
        n = self.num_devices
        mech = self._mechs[self.mechanism(kspec)]
        issue = aggregate_issue_bandwidth(mech, self.comm_sms(kspec, prof))
        for d in range(n):
            engine.set_port_cap(("issue", d), max(issue, 1.0))
            if self.hbm_by_dev[d]:
                engine.add_hbm_bytes(d, self.hbm_by_dev[d])
        if kspec.schedule_mode is ScheduleMode.INTRA_SM:
            for d in range(n):
                for ln in range(_LANES):
                    engine.spawn(f"{self.name}/dev{d}/w{ln}",
                                 self._lane_intra(engine, kspec, d, ln,
                                                  _LANES, _CHUNKS))
        else:
            lanes = max(1, min(_LANES, kspec.num_comm_sms))
            handoff = BarrierField((lanes,), n)
            for d in range(n):
                for ln in range(lanes):
                    engine.spawn(f"{self.name}/dev{d}/comp{ln}",
                                 self._lane_comp(engine, kspec, d, ln,
                                                 lanes, _CHUNKS, handoff))
                    engine.spawn(f"{self.name}/dev{d}/comm{ln}",
                                 self._lane_comm(engine, kspec, d, ln,
                                                 lanes, _CHUNKS, handoff))

    def _comp_chunk_ns(self, kspec: LcscKernelSpec, dev: int, lanes: int,
                       chunks: int) -> float:
        f = self.flops_by_dev[dev]
        if f <= 0:
            return 0.0
        return compute_ns(f / (lanes * chunks),
                          kspec.compute_sms(self.profile) / lanes,
                          self.profile)

    def _lane_intra(self, engine, kspec, dev, lane, lanes, chunks):
        prof = self.profile
        comp = self._comp_chunk_ns(kspec, dev, lanes, chunks)

        def gen():
            # Chunk flows are fire-and-forget: backlog keeps the ports
            # saturated, and the lane only drains at the end.
            window = deque()
            for i in range(chunks):
                if comp > 0:
                    yield comp_sleep(comp, dev, lane)
                yield sync_sleep(prof.intra_sm_sync_ns, dev)
                tok = self._emit(engine, kspec, dev, lane, i, lanes, chunks)
                if tok is not None:
                    window.append(tok)
            while window:
                yield from await_token(window.popleft())
        return gen()

    def _lane_comp(self, engine, kspec, dev, lane, lanes, chunks, handoff):
        comp = self._comp_chunk_ns(kspec, dev, lanes, chunks)

        def gen():
            for _ in range(chunks):
                if comp > 0:
                    yield comp_sleep(comp, dev, lane)
                engine.mutate_counter(handoff, dev, (lane,), 1)
        return gen()

    def _lane_comm(self, engine, kspec, dev, lane, lanes, chunks, handoff):
        prof = self.profile

        def gen():
            window = deque()
            for i in range(chunks):
                yield WaitCounter(handoff, dev, (lane,), i + 1)
                yield sync_sleep(prof.inter_sm_sync_ns, dev)
                tok = self._emit(engine, kspec, dev, lane, i, lanes, chunks)
                if tok is not None:
                    window.append(tok)
                    while len(window) > kspec.pipeline_stages:
                        yield from await_token(window.popleft())
            while window:
                yield from await_token(window.popleft())
        return gen()

    def _windowed(self, kspec, window, tok):
        """Generator fragment: push a token, drain past the pipeline depth."""
        window.append(tok)
        while len(window) > kspec.pipeline_stages:
            yield from await_token(window.popleft())


# ---------------------------------------------------------------------------
# GEMM + reduce-scatter
# ---------------------------------------------------------------------------

class GemmRsPlan(WorkloadPlan):
    """Each device owns a row block; partial tiles are atomically added
    to their owner as soon as the consumer finishes them."""

    kind = WorkloadKind.GEMM_RS
    flow_kind = "store_add"

    def _build(self):
        sp = self.spec
        m, nd, k = sp.dim("M"), sp.dim("N"), sp.dim("K")
        s, n = sp.element_bytes, self.num_devices
        self.ingress_weight = self.profile.atomic_rmw_factor
        total = float(s * m * nd)
        self.egress_by_dev = [total * (n - 1) / n] * n
        self.ingress_w_by_dev = [self.ingress_weight * total * (n - 1) / n] * n
        self.hbm_by_dev = [2.0 * total / n] * n
        self.flops_by_dev = [2.0 * m * nd * k] * n
        self._decide_materialize(m * nd)
        if self.materialized:
            t = _FUNC_TILE
            if m % (t * n) or nd % t:
                raise WorkloadError("functional GEMM+RS needs M divisible by "
                                    f"{t * n} and N by {t}")
            partial = allocate_pgl((1, 1, m, nd), s, n)
            for d in range(n):
                partial.buffers[d][:] = self._randints(partial.shape)
            out = allocate_pgl((1, 1, m, nd), s, n)
            attach_multicast(out)
            self.pgls = {"partial": partial, "out": out}
            self.check_names = ["out"]

    def _spawn_functional(self, engine, kspec):
        t = _FUNC_TILE
        partial, out = self.pgls["partial"], self.pgls["out"]
        _, _, tr, tc = partial.tile_grid(t, t)
        rows_per_owner = tr // self.num_devices

        def actor(d):
            ctx = IssueCtx(engine, d)
            window = deque()
            for r in range(tr):
                owner = r // rows_per_owner
                for c in range(tc):
                    coord = TileCoord(0, 0, r, c)
                    tile = read_tile(partial, d, coord, t, t)
                    tok = store_add_async(ctx, out, tile, coord,
                                          targets=[owner])
                    yield from self._windowed(kspec, window, tok)
            while window:
                yield from await_token(window.popleft())

        for d in range(self.num_devices):
            engine.spawn(f"{self.name}/dev{d}", actor(d))

    def oracle(self):
        partial = self.pgls["partial"]
        total = np.sum(partial.buffers, axis=0)
        m = partial.shape[2]
        blk = m // self.num_devices
        outs = []
        for d in range(self.num_devices):
            exp = np.zeros(partial.shape)
            exp[:, :, d * blk:(d + 1) * blk, :] = \
                total[:, :, d * blk:(d + 1) * blk, :]
            outs.append(exp)
        return {"out": outs}


# ---------------------------------------------------------------------------
# GEMM + all-reduce
# ---------------------------------------------------------------------------

class GemmArPlan(WorkloadPlan):
    """Partial outputs all-reduced across devices.

    Dedicated-SM schedule: local accumulation, a signal to the tile's
    round-robin owner, and an in-fabric all_reduce once all partials
    arrived. Compute-embedded schedule: atomic adds fanned out to every
    device.
    """

    kind = WorkloadKind.GEMM_AR
    default_mode = ScheduleMode.INTER_SM
    default_comm_sms = 16

    def mechanism(self, kspec):
        if kspec.schedule_mode is ScheduleMode.INTRA_SM:
            return MechanismKind.TMA
        return MechanismKind.REGISTER_OP

    def _build(self):
        sp = self.spec
        m, nd, k = sp.dim("M"), sp.dim("N"), sp.dim("K")
        s, n = sp.element_bytes, self.num_devices
        self._total_bytes = float(s * m * nd)
        self.flops_by_dev = [2.0 * m * nd * k] * n
        self.hbm_by_dev = [2.0 * self._total_bytes] * n
        # Populated per schedule mode; defaults match the dedicated-SM form.
        self._set_mode_stats(ScheduleMode.INTER_SM)
        self._decide_materialize(m * nd)
        if self.materialized:
            t = _FUNC_TILE
            if m % t or nd % t:
                raise WorkloadError(f"functional GEMM+AR needs extents "
                                    f"divisible by {t}")
            acc = allocate_pgl((1, 1, m, nd), s, n)
            attach_multicast(acc)
            self.inputs = [self._randints(acc.shape) for _ in range(n)]
            self.bar = allocate_barrier((m // t, nd // t), n)
            self.pgls = {"acc": acc}
            self.check_names = ["acc"]

    def _set_mode_stats(self, mode: ScheduleMode):
        n = self.num_devices
        total = self._total_bytes
        rmw = self.profile.atomic_rmw_factor
        if mode is ScheduleMode.INTRA_SM:
            self.egress_by_dev = [total * (n - 1)] * n
            self.ingress_w_by_dev = [rmw * total * (n - 1)] * n
        else:
            self.egress_by_dev = [total / n] * n
            self.ingress_w_by_dev = [total / n] * n

    def analysis(self, kspec, profile):
        self._set_mode_stats(kspec.schedule_mode)
        return super().analysis(kspec, profile)

    def _spawn_timed(self, engine, kspec):
        self._set_mode_stats(kspec.schedule_mode)
        super()._spawn_timed(engine, kspec)

    def _emit(self, engine, kspec, dev, lane, i, lanes, chunks):
        if kspec.schedule_mode is ScheduleMode.INTRA_SM:
            return super()._emit(engine, kspec, dev, lane, i, lanes, chunks)
        payload = self.egress_by_dev[dev] / (lanes * chunks)
        usages = [(("issue", dev), 1.0), (ingress(dev), 1.0),
                  (egress(dev), 1.0)]
        return self._chunk_flow(engine, kspec, dev,
                                tuple(range(self.num_devices)), payload,
                                usages, kind="allreduce")

    def _spawn_functional(self, engine, kspec):
        if kspec.schedule_mode is ScheduleMode.INTRA_SM:
            self._spawn_functional_intra(engine, kspec)
        else:
            self._spawn_functional_inter(engine, kspec)

    def _tile_list(self):
        t = _FUNC_TILE
        acc = self.pgls["acc"]
        _, _, tr, tc = acc.tile_grid(t, t)
        return [(r, c) for r in range(tr) for c in range(tc)]

    def _input_tile(self, dev, r, c):
        t = _FUNC_TILE
        data = self.inputs[dev][0, 0, r * t:(r + 1) * t, c * t:(c + 1) * t]
        return SharedTile(t, t, self.spec.element_bytes, data.copy())

    def _spawn_functional_intra(self, engine, kspec):
        acc = self.pgls["acc"]

        def actor(d):
            ctx = IssueCtx(engine, d)
            window = deque()
            for r, c in self._tile_list():
                tile = self._input_tile(d, r, c)
                tok = store_add_async(ctx, acc, tile, TileCoord(0, 0, r, c))
                yield from self._windowed(kspec, window, tok)
            while window:
                yield from await_token(window.popleft())

        for d in range(self.num_devices):
            engine.spawn(f"{self.name}/dev{d}", actor(d))

    def _spawn_functional_inter(self, engine, kspec):
        acc, bar = self.pgls["acc"], self.bar
        n = self.num_devices
        tiles = self._tile_list()

        def storer(d):
            ctx = IssueCtx(engine, d)
            for task_id, (r, c) in enumerate(tiles):
                tile = self._input_tile(d, r, c)
                tok = store_add_async(ctx, acc, tile, TileCoord(0, 0, r, c),
                                      targets=[d])
                yield from await_token(tok)
                signal(ctx, bar, (r, c), task_id % n, 1)

        def communicator(d):
            ctx = IssueCtx(engine, d, width=32)
            for task_id, (r, c) in enumerate(tiles):
                if task_id % n != d:
                    continue
                yield from wait(ctx, bar, (r, c), d, n)
                yield from all_reduce(ctx, acc, TileCoord(0, 0, r, c),
                                      _FUNC_TILE, _FUNC_TILE, "sum")

        for d in range(n):
            engine.spawn(f"{self.name}/store{d}", storer(d))
            engine.spawn(f"{self.name}/comm{d}", communicator(d))

    def oracle(self):
        total = np.sum(self.inputs, axis=0)
        return {"acc": [total.copy() for _ in range(self.num_devices)]}


# ---------------------------------------------------------------------------
# All-gather + GEMM
# ---------------------------------------------------------------------------

class AgGemmPlan(WorkloadPlan):
    """Row shards broadcast through the fabric before consumption."""

    kind = WorkloadKind.AG_GEMM
    default_mode = ScheduleMode.INTER_SM
    default_comm_sms = 20

    def _build(self):
        sp = self.spec
        m, nd, k = sp.dim("M"), sp.dim("N"), sp.dim("K")
        s, n = sp.element_bytes, self.num_devices
        if m % n:
            raise WorkloadError("M must divide across devices")
        shard = float(s * (m // n) * k)
        self.egress_by_dev = [shard] * n
        self.ingress_w_by_dev = [(n - 1) * shard] * n
        self.hbm_by_dev = [2.0 * shard] * n
        self.flops_by_dev = [2.0 * m * (nd / n) * k] * n
        self._decide_materialize((m // n) * k)
        if self.materialized:
            t = _FUNC_TILE
            a = allocate_pgl((1, 1, t, t), s, n)
            for d in range(n):
                a.buffers[d][:] = self._randints(a.shape)
            ag = allocate_pgl((1, 1, n * t, t), s, n)
            attach_multicast(ag)
            self.pgls = {"a": a, "ag": ag}
            self.check_names = ["ag"]

    def _emit(self, engine, kspec, dev, lane, i, lanes, chunks):
        payload = self.egress_by_dev[dev] / (lanes * chunks)
        usages = ([(("issue", dev), 1.0), (egress(dev), 1.0)]
                  + [(ingress(o), 1.0) for o in self._dest_order(dev)])
        return self._chunk_flow(engine, kspec, dev,
                                tuple(range(self.num_devices)), payload,
                                usages, kind="store")

    def _spawn_functional(self, engine, kspec):
        t = _FUNC_TILE
        a, ag = self.pgls["a"], self.pgls["ag"]

        def actor(d):
            ctx = IssueCtx(engine, d)
            tile = read_tile(a, d, TileCoord(0, 0, 0, 0), t, t)
            tok = store_async(ctx, ag, tile, TileCoord(0, 0, d, 0))
            yield from await_token(tok)

        for d in range(self.num_devices):
            engine.spawn(f"{self.name}/dev{d}", actor(d))

    def oracle(self):
        t = _FUNC_TILE
        a = self.pgls["a"]
        exp = np.zeros((1, 1, self.num_devices * t, t))
        for d in range(self.num_devices):
            exp[0, 0, d * t:(d + 1) * t, :] = a.buffers[d][0, 0]
        return {"ag": [exp.copy() for _ in range(self.num_devices)]}


# ---------------------------------------------------------------------------
# Ring attention
# ---------------------------------------------------------------------------

class RingAttentionPlan(WorkloadPlan):
    """KV shards rotate around the device ring, staged into local HBM."""

    kind = WorkloadKind.RING_ATTENTION
    default_mode = ScheduleMode.INTER_SM
    default_comm_sms = 16
    flow_kind = "ring"

    def _build(self):
        sp = self.spec
        b, s_len = sp.dim("B"), sp.dim("S")
        h, d_head = sp.dim("H"), sp.dim("D")
        s, n = sp.element_bytes, self.num_devices
        if s_len % n:
            raise WorkloadError("sequence length must divide across devices")
        s_local = s_len // n
        self._kv_bytes = 2.0 * s * b * s_local * h * d_head
        self._step_flops = 4.0 * b * h * s_local * s_local * d_head
        self.flops_by_dev = [n * self._step_flops] * n
        self.egress_by_dev = [(n - 1) * self._kv_bytes] * n
        self.ingress_w_by_dev = [(n - 1) * self._kv_bytes] * n
        self.hbm_by_dev = [2.0 * (n - 1) * self._kv_bytes] * n
        self._decide_materialize(b * s_local * h * d_head)
        if self.materialized:
            t = _FUNC_TILE
            kv = allocate_pgl((1, 1, t, t), s, n)
            for d in range(n):
                kv.buffers[d][:] = self._randints(kv.shape)
            stage = allocate_pgl((2, 1, t, t), s, n)
            visited = allocate_pgl((1, 1, t, t), s, n)
            self.bar_arrive = allocate_barrier((n,), n)
            self.bar_step = allocate_barrier((1,), n)
            self.pgls = {"kv": kv, "stage": stage, "visited": visited}
            self.check_names = ["visited"]

    def _spawn_functional(self, engine, kspec):
        t = _FUNC_TILE
        n = self.num_devices
        s = self.spec.element_bytes
        kv, stage, visited = (self.pgls["kv"], self.pgls["stage"],
                              self.pgls["visited"])

        def actor(d):
            ctx = IssueCtx(engine, d)
            # Fold the locally held shard first.
            own = SharedTile(t, t, s, kv.buffers[d][0, 0].copy())
            tok = store_add_async(ctx, visited, own, TileCoord(0, 0, 0, 0),
                                  targets=[d])
            yield from await_token(tok)
            cur = kv.buffers[d][0, 0].copy()
            nxt = (d + 1) % n
            for step in range(1, n):
                slot = step % 2
                tile = SharedTile(t, t, s, cur.copy())
                tok = store_async(ctx, stage, tile,
                                  TileCoord(slot, 0, 0, 0), targets=[nxt])
                yield from await_token(tok)
                signal(ctx, self.bar_arrive, (step - 1,), nxt, 1)
                yield from wait(ctx, self.bar_arrive, (step - 1,), d, 1)
                arrived = SharedTile(t, t, s,
                                     stage.buffers[d][slot, 0].copy())
                tok = store_add_async(ctx, visited, arrived,
                                      TileCoord(0, 0, 0, 0), targets=[d])
                yield from await_token(tok)
                cur = stage.buffers[d][slot, 0].copy()
                # Keep the double buffer safe across rounds.
                yield from barrier(ctx, self.bar_step, (0,))

        for d in range(n):
            engine.spawn(f"{self.name}/dev{d}", actor(d))

    def _spawn_timed(self, engine, kspec):
        prof = self.profile
        n = self.num_devices
        mech = self._mechs[self.mechanism(kspec)]
        issue = aggregate_issue_bandwidth(mech, self.comm_sms(kspec, prof))
        for d in range(n):
            engine.set_port_cap(("issue", d), max(issue, 1.0))
            engine.add_hbm_bytes(d, self.hbm_by_dev[d])

        def lane(d, ln):
            nxt = (d + 1) % n
            comp = compute_ns(self._step_flops / _LANES,
                              kspec.compute_sms(prof) / _LANES, prof)
            for _ in range(1, n):
                usages = [(("issue", d), 1.0), (egress(d), 1.0),
                          (ingress(nxt), 1.0)]
                tok = self._chunk_flow(engine, kspec, d, (nxt,),
                                       self._kv_bytes / _LANES, usages)
                yield comp_sleep(comp, d, ln)
                yield from await_token(tok)
                yield sync_sleep(prof.inter_sm_sync_ns, d)
            yield comp_sleep(comp, d, ln)

        for d in range(n):
            for ln in range(_LANES):
                engine.spawn(f"{self.name}/dev{d}/w{ln}", lane(d, ln))

    def oracle(self):
        total = np.sum(self.pgls["kv"].buffers, axis=0)
        return {"visited": [total.copy() for _ in range(self.num_devices)]}


# ---------------------------------------------------------------------------
# Ulysses head-dimension all-to-all
# ---------------------------------------------------------------------------

class UlyssesPlan(WorkloadPlan):
    """Fine-grained all-to-all along the head dimension, no reshape staging."""

    kind = WorkloadKind.ULYSSES_ALL_TO_ALL
    flow_kind = "a2a"

    def _build(self):
        sp = self.spec
        b, s_len = sp.dim("B"), sp.dim("S")
        h, d_head = sp.dim("H"), sp.dim("D")
        s, n = sp.element_bytes, self.num_devices
        if h % n:
            raise WorkloadError("head count must divide across devices")
        total = float(s * b * s_len * h * d_head)
        slot = total / n
        self.egress_by_dev = [(n - 1) * slot] * n
        self.ingress_w_by_dev = [(n - 1) * slot] * n
        self.hbm_by_dev = [2.0 * slot] * n
        # Timing stand-in for the attention pass over the exchanged heads.
        self.flops_by_dev = [4.0 * b * s_len * h * d_head * d_head] * n
        self._decide_materialize(b * s_len * h * d_head)
        if self.materialized:
            t = _FUNC_TILE
            x = allocate_pgl((1, n, t, t), s, n)
            for d in range(n):
                x.buffers[d][:] = self._randints(x.shape)
            y = allocate_pgl((1, n, t, t), s, n)
            self.pgls = {"x": x, "y": y}
            self.check_names = ["y"]

    def _spawn_functional(self, engine, kspec):
        t = _FUNC_TILE
        x, y = self.pgls["x"], self.pgls["y"]

        def actor(i):
            ctx = IssueCtx(engine, i)
            window = deque()
            for j in range(self.num_devices):
                tile = read_tile(x, i, TileCoord(0, j, 0, 0), t, t)
                tok = store_async(ctx, y, tile, TileCoord(0, i, 0, 0),
                                  targets=[j])
                yield from self._windowed(kspec, window, tok)
            while window:
                yield from await_token(window.popleft())

        for d in range(self.num_devices):
            engine.spawn(f"{self.name}/dev{d}", actor(d))

    def oracle(self):
        x = self.pgls["x"]
        outs = []
        for j in range(self.num_devices):
            exp = np.zeros(x.shape)
            for i in range(self.num_devices):
                exp[0, i] = x.buffers[i][0, j]
            outs.append(exp)
        return {"y": outs}


# ---------------------------------------------------------------------------
# MoE token dispatch + grouped GEMM
# ---------------------------------------------------------------------------

class MoePlan(WorkloadPlan):
    """Seeded TopK routing; token copies stored to expert-owning devices."""

    kind = WorkloadKind.MOE_DISPATCH_GEMM

    def _build(self):
        sp = self.spec
        top_k, n_exp = sp.dim("TopK"), sp.dim("N_experts")
        h, h_exp = sp.dim("H"), sp.dim("H_expert")
        tokens = sp.dim("T")
        s, n = sp.element_bytes, self.num_devices
        if top_k > n_exp:
            raise WorkloadError("TopK cannot exceed the expert count")
        # Uniform TopK routing: distinct experts per token, seeded.
        scores = self.rng.random((n, tokens, n_exp))
        self.route = np.argsort(scores, axis=2)[:, :, :top_k]
        owners = self.route % n
        send = np.zeros((n, n), dtype=np.int64)
        for d in range(n):
            vals, cnts = np.unique(owners[d], return_counts=True)
            send[d, vals] = cnts
        recv = send.sum(axis=0)
        tok_bytes = float(s * h)
        self.egress_by_dev = [tok_bytes * (send[d].sum() - send[d, d])
                              for d in range(n)]
        self.ingress_w_by_dev = [tok_bytes * (recv[d] - send[d, d])
                                 for d in range(n)]
        self.hbm_by_dev = [tok_bytes * (recv[d] + 2 * send[d, d])
                           for d in range(n)]
        self.flops_by_dev = [2.0 * recv[d] * h * h_exp for d in range(n)]
        self._decide_materialize(tokens * top_k * _FUNC_TILE * _FUNC_TILE)
        if self.materialized:
            t = _FUNC_TILE
            self.token_data = [self._randints((tokens, t, t))
                               for _ in range(n)]
            slots: dict[int, list] = {d: [] for d in range(n)}
            for d in range(n):
                for tk in range(tokens):
                    for k in range(top_k):
                        slots[int(owners[d, tk, k])].append((d, tk, k))
            self.slot_of = {}
            smax = 1
            for d in range(n):
                slots[d].sort()
                smax = max(smax, len(slots[d]))
                for idx, triple in enumerate(slots[d]):
                    self.slot_of[triple] = idx
            recv_pgl = allocate_pgl((1, 1, smax * t, t), s, n)
            self.pgls = {"recv": recv_pgl}
            self.check_names = ["recv"]
            self._owners = owners

    def _spawn_functional(self, engine, kspec):
        t = _FUNC_TILE
        sp = self.spec
        recv = self.pgls["recv"]

        def actor(d):
            ctx = IssueCtx(engine, d)
            window = deque()
            for tk in range(sp.dim("T")):
                for k in range(sp.dim("TopK")):
                    o = int(self._owners[d, tk, k])
                    slot = self.slot_of[(d, tk, k)]
                    tile = SharedTile(t, t, sp.element_bytes,
                                      self.token_data[d][tk].copy())
                    tok = store_async(ctx, recv, tile,
                                      TileCoord(0, 0, slot, 0), targets=[o])
                    yield from self._windowed(kspec, window, tok)
            while window:
                yield from await_token(window.popleft())

        for d in range(self.num_devices):
            engine.spawn(f"{self.name}/dev{d}", actor(d))

    def oracle(self):
        t = _FUNC_TILE
        recv = self.pgls["recv"]
        outs = [np.zeros(recv.shape) for _ in range(self.num_devices)]
        for (d, tk, k), slot in self.slot_of.items():
            o = int(self._owners[d, tk, k])
            outs[o][0, 0, slot * t:(slot + 1) * t, :] = self.token_data[d][tk]
        return {"recv": outs}


# ---------------------------------------------------------------------------
# Pure collectives
# ---------------------------------------------------------------------------

class AllGatherTdPlan(WorkloadPlan):
    """Tensor-dimension all-gather: every shard multicast to all devices."""

    kind = WorkloadKind.ALL_GATHER_TENSOR_DIM

    def _build(self):
        sp = self.spec
        r, c = sp.dim("R"), sp.dim("C")
        s, n = sp.element_bytes, self.num_devices
        shard = float(s * r * c)
        self.egress_by_dev = [shard] * n
        self.ingress_w_by_dev = [(n - 1) * shard] * n
        self.hbm_by_dev = [shard] * n
        self._decide_materialize(n * r * c)
        if self.materialized:
            t = _FUNC_TILE
            x = allocate_pgl((1, 1, t, t), s, n)
            for d in range(n):
                x.buffers[d][:] = self._randints(x.shape)
            out = allocate_pgl((1, 1, n * t, t), s, n)
            attach_multicast(out)
            self.pgls = {"x": x, "out": out}
            self.check_names = ["out"]

    _emit = AgGemmPlan._emit

    def _spawn_functional(self, engine, kspec):
        t = _FUNC_TILE
        x, out = self.pgls["x"], self.pgls["out"]

        def actor(d):
            ctx = IssueCtx(engine, d)
            tile = read_tile(x, d, TileCoord(0, 0, 0, 0), t, t)
            tok = store_async(ctx, out, tile, TileCoord(0, 0, d, 0))
            yield from await_token(tok)

        for d in range(self.num_devices):
            engine.spawn(f"{self.name}/dev{d}", actor(d))

    def oracle(self):
        t = _FUNC_TILE
        x = self.pgls["x"]
        exp = np.zeros((1, 1, self.num_devices * t, t))
        for d in range(self.num_devices):
            exp[0, 0, d * t:(d + 1) * t, :] = x.buffers[d][0, 0]
        return {"out": [exp.copy() for _ in range(self.num_devices)]}


class ReduceScatterTdPlan(WorkloadPlan):
    """Tensor-dimension reduce-scatter via atomic adds to block owners."""

    kind = WorkloadKind.REDUCE_SCATTER_TENSOR_DIM
    flow_kind = "store_add"

    def _build(self):
        sp = self.spec
        r, c = sp.dim("R"), sp.dim("C")
        s, n = sp.element_bytes, self.num_devices
        self.ingress_weight = self.profile.atomic_rmw_factor
        total = float(s * r * c)
        self.egress_by_dev = [total * (n - 1) / n] * n
        self.ingress_w_by_dev = [self.ingress_weight * total * (n - 1) / n] * n
        self.hbm_by_dev = [2.0 * total / n] * n
        self._decide_materialize(r * c)
        if self.materialized:
            t = _FUNC_TILE
            x = allocate_pgl((1, 1, n * t, t), s, n)
            for d in range(n):
                x.buffers[d][:] = self._randints(x.shape)
            out = allocate_pgl((1, 1, n * t, t), s, n)
            self.pgls = {"x": x, "out": out}
            self.check_names = ["out"]

    def _spawn_functional(self, engine, kspec):
        t = _FUNC_TILE
        x, out = self.pgls["x"], self.pgls["out"]

        def actor(d):
            ctx = IssueCtx(engine, d)
            window = deque()
            for o in range(self.num_devices):
                tile = read_tile(x, d, TileCoord(0, 0, o, 0), t, t)
                tok = store_add_async(ctx, out, tile, TileCoord(0, 0, o, 0),
                                      targets=[o])
                yield from self._windowed(kspec, window, tok)
            while window:
                yield from await_token(window.popleft())

        for d in range(self.num_devices):
            engine.spawn(f"{self.name}/dev{d}", actor(d))

    def oracle(self):
        t = _FUNC_TILE
        x = self.pgls["x"]
        total = np.sum(x.buffers, axis=0)
        outs = []
        for d in range(self.num_devices):
            exp = np.zeros(x.shape)
            exp[0, 0, d * t:(d + 1) * t, :] = total[0, 0, d * t:(d + 1) * t, :]
            outs.append(exp)
        return {"out": outs}


class AllToAll4DPlan(WorkloadPlan):
    """Batch-dimension all-to-all permute: x[i] slot j becomes y[j] slot i."""

    kind = WorkloadKind.ALL_TO_ALL_4D
    flow_kind = "a2a"

    def _build(self):
        sp = self.spec
        r, c = sp.dim("R"), sp.dim("C")
        s, n = sp.element_bytes, self.num_devices
        slot = float(s * r * c)
        self.egress_by_dev = [(n - 1) * slot] * n
        self.ingress_w_by_dev = [(n - 1) * slot] * n
        self.hbm_by_dev = [2.0 * slot] * n
        self._decide_materialize(n * r * c)
        if self.materialized:
            t = _FUNC_TILE
            x = allocate_pgl((n, 1, t, t), s, n)
            for d in range(n):
                x.buffers[d][:] = self._randints(x.shape)
            y = allocate_pgl((n, 1, t, t), s, n)
            self.pgls = {"x": x, "y": y}
            self.check_names = ["y"]

    def _spawn_functional(self, engine, kspec):
        t = _FUNC_TILE
        x, y = self.pgls["x"], self.pgls["y"]

        def actor(i):
            ctx = IssueCtx(engine, i)
            window = deque()
            for j in range(self.num_devices):
                tile = read_tile(x, i, TileCoord(j, 0, 0, 0), t, t)
                tok = store_async(ctx, y, tile, TileCoord(i, 0, 0, 0),
                                  targets=[j])
                yield from self._windowed(kspec, window, tok)
            while window:
                yield from await_token(window.popleft())

        for d in range(self.num_devices):
            engine.spawn(f"{self.name}/dev{d}", actor(d))

    def oracle(self):
        x = self.pgls["x"]
        outs = []
        for j in range(self.num_devices):
            exp = np.zeros(x.shape)
            for i in range(self.num_devices):
                exp[i, 0] = x.buffers[i][j, 0]
            outs.append(exp)
        return {"y": outs}


# ---------------------------------------------------------------------------
# Construction and built-in scenarios
# ---------------------------------------------------------------------------

_PLAN_CLASSES = {cls.kind: cls for cls in (
    AgGemmPlan, GemmRsPlan, GemmArPlan, RingAttentionPlan, UlyssesPlan,
    MoePlan, AllGatherTdPlan, ReduceScatterTdPlan, AllToAll4DPlan)}


def build(kind: WorkloadKind, dims: dict, profile: HardwareProfile, *,
          element_bytes: int = 2, num_devices: Optional[int] = None,
          seed: int = 0, schedule_mode: Optional[ScheduleMode] = None,
          num_comm_sms: Optional[int] = None,
          materialize: Optional[bool] = None,
          pipeline_stages: int = 4) -> tuple[LcscKernelSpec, WorkloadPlan]:
    """Instantiate one workload: (kernel spec, runnable plan)."""
    spec = WorkloadSpec(kind=kind, dims=dict(dims),
                        element_bytes=element_bytes,
                        num_devices=num_devices or profile.num_devices,
                        seed=seed, materialize=materialize)
    plan = _PLAN_CLASSES[kind](spec, profile)
    kspec = plan.default_kernel_spec(schedule_mode, num_comm_sms,
                                     pipeline_stages)
    return kspec, plan


def check_oracle(plan: WorkloadPlan) -> Optional[tuple[str, tuple]]:
    """Compare final simulated state against the brute-force oracle.

    Returns None on bit-identical match, else (layout name, first
    divergent index).
    """
    expected = plan.oracle()
    actual = plan.final_state()
    for name, exp_bufs in expected.items():
        for dev, (exp, got) in enumerate(zip(exp_bufs, actual[name])):
            if not np.array_equal(exp, got):
                idx = np.argwhere(exp != got)[0]
                return name, (dev, *map(int, idx))
    return None


def reduced_dims(kind: WorkloadKind, num_devices: int) -> dict:
    """Tiny divisibility-safe dimensions for functional oracle runs."""
    n = num_devices
    return {
        WorkloadKind.GEMM_RS: dict(M=16 * n, N=32, K=64),
        WorkloadKind.GEMM_AR: dict(M=32, N=32, K=64),
        WorkloadKind.AG_GEMM: dict(M=8 * n, N=8 * n, K=64),
        WorkloadKind.RING_ATTENTION: dict(B=1, S=8 * n, H=2, D=4),
        WorkloadKind.ULYSSES_ALL_TO_ALL: dict(B=2, S=16, H=2 * n, D=4),
        WorkloadKind.MOE_DISPATCH_GEMM: dict(TopK=2, N_experts=2 * n,
                                             H=64, H_expert=64, T=4),
        WorkloadKind.ALL_GATHER_TENSOR_DIM: dict(R=16, C=16),
        WorkloadKind.REDUCE_SCATTER_TENSOR_DIM: dict(R=16, C=16),
        WorkloadKind.ALL_TO_ALL_4D: dict(R=16, C=16),
    }[kind]


@dataclass(frozen=True)
class Scenario:
    """A named (kind, dims) sweep point reproducing one report row."""

    name: str
    kind: WorkloadKind
    dims: tuple  # as sorted (key, value) pairs so the scenario is hashable
    element_bytes: int = 2
    groups: tuple[str, ...] = ()

    def dims_dict(self) -> dict:
        return dict(self.dims)


def _sc(name, kind, groups=(), s=2, **dims):
    return Scenario(name=name, kind=kind, dims=tuple(sorted(dims.items())),
                    element_bytes=s, groups=tuple(groups))


_BUILTIN_SCENARIOS = [
    _sc("gemm-rs-k512", WorkloadKind.GEMM_RS, ["gemm-rs-sweep"],
        M=32768, N=32768, K=512),
    _sc("gemm-rs-k1024", WorkloadKind.GEMM_RS, ["gemm-rs-sweep"],
        M=32768, N=32768, K=1024),
    _sc("gemm-rs-k2048", WorkloadKind.GEMM_RS, ["gemm-rs-sweep"],
        M=32768, N=32768, K=2048),
    _sc("gemm-rs-k4096", WorkloadKind.GEMM_RS, ["gemm-rs-sweep"],
        M=32768, N=32768, K=4096),
    _sc("gemm-rs-k8192", WorkloadKind.GEMM_RS, ["gemm-rs-sweep"],
        M=32768, N=32768, K=8192),
    _sc("gemm-ar", WorkloadKind.GEMM_AR, M=8192, N=8192, K=4096),
    _sc("ag-gemm", WorkloadKind.AG_GEMM, M=16384, N=8192, K=16384),
    _sc("ring-attention", WorkloadKind.RING_ATTENTION,
        B=16, S=49152, H=16, D=128),
    _sc("ulysses", WorkloadKind.ULYSSES_ALL_TO_ALL,
        B=16, S=8192, H=128, D=128),
    _sc("moe-dispatch", WorkloadKind.MOE_DISPATCH_GEMM,
        TopK=8, N_experts=256, H=7168, H_expert=2048, T=4096),
    _sc("all-gather-tdim", WorkloadKind.ALL_GATHER_TENSOR_DIM,
        R=16384, C=16384),
    _sc("reduce-scatter-tdim", WorkloadKind.REDUCE_SCATTER_TENSOR_DIM,
        R=16384, C=16384),
    _sc("all-to-all-4d", WorkloadKind.ALL_TO_ALL_4D, R=8192, C=8192),
]


def list_builtin_scenarios() -> list[Scenario]:
    return list(_BUILTIN_SCENARIOS)


def scenario_names() -> list[str]:
    return [sc.name for sc in _BUILTIN_SCENARIOS]


def expand_scenarios(selector: str) -> list[Scenario]:
    """Resolve a scenario name, group name, or 'all' to scenario rows."""
    if selector == "all":
        return list(_BUILTIN_SCENARIOS)
    hits = [sc for sc in _BUILTIN_SCENARIOS
            if sc.name == selector or selector in sc.groups]
    if not hits:
        raise WorkloadError(f"unknown scenario {selector!r}")
    return hits


def build_scenario(scenario: Scenario, profile: HardwareProfile, *,
                   seed: int = 0, schedule_mode: Optional[ScheduleMode] = None,
                   num_comm_sms: Optional[int] = None,
                   materialize: Optional[bool] = None,
                   num_devices: Optional[int] = None,
                   ) -> tuple[LcscKernelSpec, WorkloadPlan]:
    return build(scenario.kind, scenario.dims_dict(), profile,
                 element_bytes=scenario.element_bytes, seed=seed,
                 schedule_mode=schedule_mode, num_comm_sms=num_comm_sms,
                 materialize=materialize, num_devices=num_devices)
