"""Discrete-event fabric engine.

Simulated clock, link-port contention (weighted max-min fair processor
sharing with piecewise-constant rates), generator-based actors, barrier
waiting with deadlock detection, library-overhead toggles, and a
deterministic event log.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

from .hwmodel import (
    HardwareProfile,
    MechanismKind,
    TransferMechanism,
    aggregate_issue_bandwidth,
    effective_bandwidth,
    transfer_mechanisms,
)
from .memsim import BarrierField

_EPS_BYTES = 1e-6
_REL_EPS = 1e-12


class EngineError(Exception):
    pass


class DeadlockError(EngineError):
    """All remaining actors are blocked and no events are pending."""

    def __init__(self, blocked: list[str]):
        self.blocked = list(blocked)
        super().__init__("deadlock: blocked actors " + ", ".join(blocked))


class SyncKind(Enum):
    INTRA_SM_BARRIER = "intra_sm_barrier"
    INTER_SM_HBM = "inter_sm_hbm"
    INTER_DEVICE = "inter_device"


@dataclass
class OverheadConfig:
    """Library-style design overheads; all off reproduces the direct design."""

    two_way_handshake: bool = False
    staging_buffers: bool = False
    peer_addr_indirection: bool = False
    staging_channel_bytes: int = 512 * 1024

    def any_enabled(self) -> bool:
        return (self.two_way_handshake or self.staging_buffers
                or self.peer_addr_indirection)


@dataclass
class EngineConfig:
    link_round_trip_ns: float = 1500.0
    # Fixed per-access cost of loading a peer address from global memory
    # plus the forced group sync; None calibrates to a 4.5x element-wise
    # access latency ratio against the direct path.
    peer_addr_overhead_ns: Optional[float] = None


def sync_cost(kind: SyncKind, profile: HardwareProfile,
              cfg: Optional[EngineConfig] = None) -> float:
    cfg = cfg or EngineConfig()
    if kind is SyncKind.INTRA_SM_BARRIER:
        return profile.intra_sm_sync_ns
    if kind is SyncKind.INTER_SM_HBM:
        return profile.inter_sm_sync_ns
    return profile.inter_sm_sync_ns + cfg.link_round_trip_ns


# Actor commands -------------------------------------------------------------

@dataclass
class Sleep:
    dur_ns: float
    account: Optional[tuple] = None  # ('comp', dev, lane) or ('sync', dev)


@dataclass
class Await:
    token: "FlowToken"


@dataclass
class WaitCounter:
    bar: BarrierField
    dev: int
    coord: tuple
    expected: int


@dataclass
class FlowSpec:
    """One fluid transfer through the fabric.

    ``usages`` lists (port_key, weight) pairs; a flow progressing at rate r
    consumes weight*r of each listed port. ``payload_bytes`` is the data
    delivered; ``link_bytes`` is what the event log charges.
    """

    src: int
    dsts: tuple[int, ...]
    payload_bytes: float
    msg_bytes: float
    mech: Optional[TransferMechanism]
    kind: str
    usages: list[tuple[tuple, float]] = field(default_factory=list)
    sm_count: Optional[float] = None
    link_bytes: Optional[float] = None
    rate_cap_bps: Optional[float] = None
    propagate: bool = True  # charge one-way link latency before delivery


class FlowToken:
    __slots__ = ("flow_id", "done", "_awaiters")

    def __init__(self, flow_id: int):
        self.flow_id = flow_id
        self.done = False
        self._awaiters: list = []


class _Flow:
    __slots__ = ("fid", "spec", "work", "remaining", "rate", "cap",
                 "effects", "token", "link_bytes")

    def __init__(self, fid, spec, work, cap, effects, link_bytes):
        self.fid = fid
        self.spec = spec
        self.work = work
        self.remaining = work
        self.rate = 0.0
        self.cap = cap  # bytes/ns
        self.effects = effects
        self.token = FlowToken(fid)
        self.link_bytes = link_bytes


@dataclass
class EventRecord:
    time_ns: float
    kind: str
    src: str
    dst: str
    bytes: float
    mech: str
    flow_id: int

    def line(self) -> str:
        return (f"{self.time_ns:.3f} {self.kind} {self.src} {self.dst} "
                f"{self.bytes:.0f} {self.mech} {self.flow_id}")


def format_event_log(records: Iterable[EventRecord]) -> str:
    return "\n".join(r.line() for r in records) + "\n"


class Engine:
    """Single-threaded deterministic event engine for one simulation run."""

    def __init__(self, profile: HardwareProfile,
                 overheads: Optional[OverheadConfig] = None,
                 cfg: Optional[EngineConfig] = None, seed: int = 0):
        self.profile = profile
        self.overheads = overheads or OverheadConfig()
        self.cfg = cfg or EngineConfig()
        self.mechs = transfer_mechanisms(profile)
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._rng = random.Random(seed)
        self._active: dict[int, _Flow] = {}
        self._next_fid = 0
        self._advance_version = 0
        self._counter_waiters: dict[int, list] = {}
        self._actors: dict[str, object] = {}
        self.records: list[EventRecord] = []
        # Telemetry
        self.port_charge: dict[tuple, float] = {}
        self.comp_busy: dict[tuple, float] = {}
        self.sync_busy: dict[str, float] = {}
        self.hbm_bytes: dict[int, float] = {}
        self.requested_payload = 0.0
        self.delivered_payload = 0.0
        self.max_port_utilization = 0.0
        self._port_cap = profile.link_bandwidth_B / 1e9  # bytes/ns
        self.port_caps: dict[tuple, float] = {}  # per-key overrides, bytes/ns
        if self.cfg.peer_addr_overhead_ns is None:
            self.cfg.peer_addr_overhead_ns = 3.5 * self._direct_element_latency()

    # -- configuration helpers ----------------------------------------------

    def _direct_element_latency(self, nbytes: float = 128.0) -> float:
        reg = self.mechs[MechanismKind.REGISTER_OP]
        bw = effective_bandwidth(reg, nbytes, self.profile)
        return self.cfg.link_round_trip_ns / 2.0 + nbytes / (bw / 1e9)

    def set_port_cap(self, key: tuple, bytes_per_sec: float) -> None:
        """Override one port's capacity (e.g. a per-device issue ceiling)."""
        if bytes_per_sec <= 0:
            raise EngineError("port capacity must be positive")
        self.port_caps[key] = bytes_per_sec / 1e9

    def port_cap(self, key: tuple) -> float:
        return self.port_caps.get(key, self._port_cap)

    def flow_rate_cap(self, spec: FlowSpec) -> float:
        """Per-flow rate ceiling in bytes/ns."""
        if spec.rate_cap_bps is not None:
            return spec.rate_cap_bps / 1e9
        caps = []
        if spec.mech is not None and spec.msg_bytes > 0:
            msg = spec.msg_bytes
            if self.overheads.staging_buffers:
                msg = min(msg, self.overheads.staging_channel_bytes)
            if spec.mech.max_message_bytes is not None:
                msg = min(msg, spec.mech.max_message_bytes)
            caps.append(effective_bandwidth(spec.mech, msg, self.profile))
            if not spec.mech.host_initiated and spec.sm_count is not None:
                caps.append(aggregate_issue_bandwidth(spec.mech, spec.sm_count))
        if not caps:
            return float("inf")
        return min(caps) / 1e9

    # -- scheduling core ----------------------------------------------------

    def _push(self, t: float, fn: Callable[[], None]):
        self._seq += 1
        heapq.heappush(self._heap, (t, self._rng.random(), self._seq, fn))

    def schedule_call(self, delay_ns: float, fn: Callable[[], None]):
        if delay_ns < 0:
            raise EngineError("cannot schedule into the past")
        self._push(self.now + delay_ns, fn)

    def spawn(self, name: str, gen):
        if name in self._actors:
            raise EngineError(f"duplicate actor name {name}")
        self._actors[name] = gen
        self._push(self.now, lambda: self._resume(name, None))

    def _resume(self, name: str, value):
        gen = self._actors.get(name)
        if gen is None:
            return
        try:
            cmd = gen.send(value)
        except StopIteration:
            del self._actors[name]
            return
        self._dispatch(name, cmd)

    def _dispatch(self, name: str, cmd):
        if isinstance(cmd, Sleep):
            if cmd.account is not None:
                tag = cmd.account
                if tag[0] == "comp":
                    key = (tag[1], tag[2])
                    self.comp_busy[key] = self.comp_busy.get(key, 0.0) + cmd.dur_ns
                elif tag[0] == "sync":
                    self.sync_busy[name] = self.sync_busy.get(name, 0.0) + cmd.dur_ns
            self._push(self.now + cmd.dur_ns, lambda: self._resume(name, None))
        elif isinstance(cmd, Await):
            tok = cmd.token
            if tok.done:
                self._push(self.now, lambda: self._resume(name, None))
            else:
                tok._awaiters.append(name)
        elif isinstance(cmd, WaitCounter):
            if cmd.bar.value(cmd.dev, cmd.coord) >= cmd.expected:
                self._push(self.now, lambda: self._resume(name, None))
            else:
                self._counter_waiters.setdefault(id(cmd.bar), []).append(
                    (cmd, name))
        else:
            raise EngineError(f"unknown actor command {cmd!r}")

    # -- flows ---------------------------------------------------------------

    def start_flow(self, spec: FlowSpec,
                   effects: Optional[list[Callable[[], None]]] = None) -> FlowToken:
        work = float(spec.payload_bytes)
        link_bytes = float(spec.link_bytes if spec.link_bytes is not None
                           else spec.payload_bytes)
        delay = 0.0
        if spec.usages and spec.propagate:
            delay += self.cfg.link_round_trip_ns / 2.0
        if spec.usages:
            if self.overheads.two_way_handshake:
                delay += sync_cost(SyncKind.INTER_DEVICE, self.profile, self.cfg)
            if self.overheads.staging_buffers:
                work *= 2.0
                link_bytes *= 2.0
            if self.overheads.peer_addr_indirection:
                delay += self.cfg.peer_addr_overhead_ns
        cap = self.flow_rate_cap(spec)
        self._next_fid += 1
        flow = _Flow(self._next_fid, spec, work, cap, effects or [], link_bytes)
        self.requested_payload += float(spec.payload_bytes)
        if delay > 0:
            self._push(self.now + delay, lambda: self._activate(flow))
        else:
            self._activate(flow)
        return flow.token

    def _activate(self, flow: _Flow):
        if flow.work <= _EPS_BYTES:
            self._complete(flow)
            return
        self._active[flow.fid] = flow
        self._rerate()

    def _complete(self, flow: _Flow):
        self._active.pop(flow.fid, None)
        spec = flow.spec
        dst = "+".join(str(d) for d in spec.dsts) if spec.dsts else "-"
        self.records.append(EventRecord(
            self.now, spec.kind, str(spec.src), dst, flow.link_bytes,
            spec.mech.kind.value if spec.mech else "-", flow.fid))
        self.delivered_payload += float(spec.payload_bytes)
        for eff in flow.effects:
            eff()
        tok = flow.token
        tok.done = True
        for name in tok._awaiters:
            self._push(self.now, lambda n=name: self._resume(n, None))
        tok._awaiters.clear()

    def _rerate(self):
        flows = sorted(self._active.values(), key=lambda f: f.fid)
        if flows:
            rem_cap: dict[tuple, float] = {}
            load: dict[tuple, float] = {}
            users: dict[tuple, list] = {}
            for f in flows:
                for key, w in f.spec.usages:
                    rem_cap[key] = self.port_cap(key)
                    load[key] = load.get(key, 0.0) + w
                    users.setdefault(key, []).append((f, w))
            unfrozen = {f.fid: f for f in flows}
            rate: dict[int, float] = {}

            def freeze(f: _Flow, r: float):
                rate[f.fid] = r
                del unfrozen[f.fid]
                for key, w in f.spec.usages:
                    rem_cap[key] = max(0.0, rem_cap[key] - w * r)
                    load[key] -= w

            while unfrozen:
                lam = float("inf")
                for key, ld in load.items():
                    if ld > _REL_EPS:
                        lam = min(lam, rem_cap[key] / ld)
                capped = [f for f in sorted(unfrozen.values(), key=lambda f: f.fid)
                          if f.cap <= lam * (1 + 1e-9) or not f.spec.usages]
                if capped:
                    for f in capped:
                        freeze(f, min(f.cap, lam))
                    continue
                # freeze every flow on a bottleneck port at the fair level
                tight = [key for key, ld in load.items()
                         if ld > _REL_EPS
                         and rem_cap[key] / ld <= lam * (1 + 1e-9)]
                frozen_any = False
                for key in tight:
                    for f, _w in users[key]:
                        if f.fid in unfrozen:
                            freeze(f, lam)
                            frozen_any = True
                if not frozen_any:  # numerical corner: freeze everything left
                    for f in sorted(unfrozen.values(), key=lambda f: f.fid):
                        freeze(f, min(f.cap, lam))
            for f in flows:
                f.rate = rate[f.fid]
            for key, ld_users in users.items():
                util = sum(w * f.rate for f, w in ld_users) / self.port_cap(key)
                self.max_port_utilization = max(self.max_port_utilization, util)
        # schedule the next completion boundary
        self._advance_version += 1
        version = self._advance_version
        horizon = float("inf")
        for f in flows:
            if f.rate > 0:
                horizon = min(horizon, self.now + f.remaining / f.rate)
        if horizon < float("inf"):
            self._push(horizon, lambda: self._on_advance(version))

    def _on_advance(self, version: int):
        if version != self._advance_version:
            return
        done = [f for f in sorted(self._active.values(), key=lambda f: f.fid)
                if f.remaining <= _EPS_BYTES]
        for f in done:
            self._complete(f)
        self._rerate()

    def _settle(self, dt: float):
        if dt <= 0 or not self._active:
            return
        for f in self._active.values():
            if f.rate > 0:
                f.remaining = max(0.0, f.remaining - f.rate * dt)
                for key, w in f.spec.usages:
                    self.port_charge[key] = (self.port_charge.get(key, 0.0)
                                             + w * f.rate * dt)

    # -- counters ------------------------------------------------------------

    def mutate_counter(self, bar: BarrierField, dev: int, coord: tuple, val: int):
        bar.add(dev, coord, val)
        waiters = self._counter_waiters.get(id(bar))
        if not waiters:
            return
        still = []
        for cmd, name in waiters:
            if bar.value(cmd.dev, cmd.coord) >= cmd.expected:
                self._push(self.now, lambda n=name: self._resume(n, None))
            else:
                still.append((cmd, name))
        if still:
            self._counter_waiters[id(bar)] = still
        else:
            del self._counter_waiters[id(bar)]

    def add_hbm_bytes(self, dev: int, nbytes: float):
        self.hbm_bytes[dev] = self.hbm_bytes.get(dev, 0.0) + nbytes

    def log_event(self, kind: str, src, dst, nbytes: float, mech: str = "-"):
        self._next_fid += 1
        self.records.append(EventRecord(self.now, kind, str(src), str(dst),
                                        nbytes, mech, self._next_fid))

    # -- main loop -----------------------------------------------------------

    def run_until_idle(self, raise_on_deadlock: bool = True) -> float:
        while self._heap:
            t, _, _, fn = heapq.heappop(self._heap)
            self._settle(t - self.now)
            self.now = t
            fn()
        blocked = [name for waiters in self._counter_waiters.values()
                   for _, name in waiters]
        stalled = [f for f in self._active.values() if f.rate <= 0]
        if (blocked or stalled) and raise_on_deadlock:
            names = sorted(set(blocked)) + [f"flow-{f.fid}" for f in stalled]
            raise DeadlockError(names)
        return self.now

    # -- measurement helpers --------------------------------------------------

    def element_access_latency(self, nbytes: float = 128.0) -> float:
        """Latency of one element-wise peer access under current overheads."""
        base = self._direct_element_latency(nbytes)
        if self.overheads.peer_addr_indirection:
            return base + self.cfg.peer_addr_overhead_ns
        return base


def egress(dev: int) -> tuple:
    return ("egress", dev)


def ingress(dev: int) -> tuple:
    return ("ingress", dev)
