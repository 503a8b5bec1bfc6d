"""The eight device-side communication primitives.

P2P tile stores (plain and atomic-add), network-accelerated reduction
loads, and the signal/wait synchronization family. Each primitive
validates its mechanism capability, emits timed flows into the engine,
and applies its data effect when the simulated transfer completes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import hwmodel
from .engine import Await, Engine, FlowSpec, FlowToken, WaitCounter, egress, ingress
from .hwmodel import Functionality, MechanismKind
from .memsim import BarrierField, ParallelGlobalLayout, SharedTile, TileCoord

SIGNAL_BYTES = 8
WARP_WIDTH = 32

REDUCE_OPS = {
    "sum": lambda a, b: a + b,
    "max": np.maximum,
    "min": np.minimum,
}


class PrimitiveError(Exception):
    pass


@dataclass
class IssueCtx:
    """Identity of the issuing device/SM and its thread-group width."""

    engine: Engine
    dev: int
    sm: int = 0
    width: int = 1


class TokenGroup:
    """Aggregate completion token over several flows."""

    def __init__(self, tokens: list[FlowToken]):
        self.tokens = tokens

    @property
    def done(self) -> bool:
        return all(t.done for t in self.tokens)


def await_token(tok):
    """Generator: block until a token (or group, or None) completes."""
    if tok is None:
        return
    if isinstance(tok, TokenGroup):
        for t in tok.tokens:
            yield Await(t)
    else:
        yield Await(tok)


def _resolve_targets(pgl, targets, issuer: int) -> tuple[int, ...]:
    if targets is None:
        return tuple(range(pgl.num_devices))
    out = tuple(sorted(set(int(t) for t in targets)))
    if not out:
        raise PrimitiveError("empty target set")
    for t in out:
        if not (0 <= t < pgl.num_devices):
            raise PrimitiveError(f"target device {t} out of range")
    return out


def _store_mechanism(ctx: IssueCtx, multicast: bool, msg_bytes: float):
    f = Functionality.IN_FABRIC_BROADCAST if multicast else Functionality.P2P_TRANSFER
    return hwmodel.select_mechanism(f, msg_bytes, max(ctx.width // WARP_WIDTH, 1),
                                    ctx.engine.profile)


def _check_tma_size(ctx: IssueCtx, nbytes: int):
    if nbytes > ctx.engine.profile.max_tma_message_bytes:
        raise PrimitiveError(
            f"tile of {nbytes} B exceeds the "
            f"{ctx.engine.profile.max_tma_message_bytes} B bulk-transfer limit")


def _write_effect(pgl, dev, coord, tile):
    def eff():
        if pgl.materialized:
            sl = pgl._tile_slices(coord, tile.rows, tile.cols)
            pgl.buffers[dev][sl] = tile.data
    return eff


def _add_effect(pgl, dev, coord, tile):
    def eff():
        if pgl.materialized:
            sl = pgl._tile_slices(coord, tile.rows, tile.cols)
            pgl.buffers[dev][sl] += tile.data
    return eff


def store_async(ctx: IssueCtx, dst: ParallelGlobalLayout, src: SharedTile,
                coord: TileCoord, targets: Optional[Iterable[int]] = None) -> FlowToken:
    """Asynchronously store a shared tile to one or more devices.

    Multi-target stores fan out through the fabric multicast and consume
    egress only once; the issuing SM is free immediately.
    """
    if ctx.width != 1:
        raise PrimitiveError("bulk stores are issued by a single thread")
    tgts = _resolve_targets(dst, targets, ctx.dev)
    _check_tma_size(ctx, src.nbytes)
    dst._tile_slices(coord, src.rows, src.cols)  # range check
    effects = [_write_effect(dst, d, coord, src) for d in tgts]
    if len(tgts) > 1:
        if dst.multicast_alias is None:
            raise PrimitiveError("broadcast store needs completed multicast setup")
        mech = _store_mechanism(ctx, True, src.nbytes)
        # The fabric fans out after the sender's egress port; self-delivery
        # stays local and costs no ingress.
        usages = [(egress(ctx.dev), 1.0)] + [(ingress(d), 1.0)
                                             for d in tgts if d != ctx.dev]
        spec = FlowSpec(src=ctx.dev, dsts=tgts, payload_bytes=src.nbytes,
                        msg_bytes=src.nbytes, mech=mech, kind="store",
                        usages=usages, sm_count=1.0)
        return ctx.engine.start_flow(spec, effects)
    tgt = tgts[0]
    if tgt == ctx.dev:
        ctx.engine.add_hbm_bytes(ctx.dev, src.nbytes)
        spec = FlowSpec(src=ctx.dev, dsts=tgts, payload_bytes=src.nbytes,
                        msg_bytes=src.nbytes, mech=None, kind="store_local",
                        usages=[], rate_cap_bps=ctx.engine.profile.hbm_bandwidth,
                        propagate=False)
        return ctx.engine.start_flow(spec, effects)
    mech = _store_mechanism(ctx, False, src.nbytes)
    spec = FlowSpec(src=ctx.dev, dsts=tgts, payload_bytes=src.nbytes,
                    msg_bytes=src.nbytes, mech=mech, kind="store",
                    usages=[(egress(ctx.dev), 1.0), (ingress(tgt), 1.0)],
                    sm_count=1.0)
    return ctx.engine.start_flow(spec, effects)


def store_add_async(ctx: IssueCtx, dst: ParallelGlobalLayout, src: SharedTile,
                    coord: TileCoord,
                    targets: Optional[Iterable[int]] = None) -> TokenGroup:
    """Atomically add a shared tile on each target device.

    Atomic adds are not fabric-accelerated: a multi-target add issues one
    point-to-point write per destination, and each destination port pays
    the read-modify-write factor.
    """
    if ctx.width != 1:
        raise PrimitiveError("bulk stores are issued by a single thread")
    tgts = _resolve_targets(dst, targets, ctx.dev)
    _check_tma_size(ctx, src.nbytes)
    dst._tile_slices(coord, src.rows, src.cols)
    if len(tgts) > 1 and dst.multicast_alias is None:
        raise PrimitiveError("multi-device add needs completed multicast setup")
    mech = hwmodel.select_mechanism(Functionality.P2P_REDUCTION, src.nbytes, 1,
                                    ctx.engine.profile)
    rmw = ctx.engine.profile.atomic_rmw_factor
    tokens = []
    for d in tgts:
        eff = _add_effect(dst, d, coord, src)
        if d == ctx.dev:
            ctx.engine.add_hbm_bytes(ctx.dev, src.nbytes)
            spec = FlowSpec(src=ctx.dev, dsts=(d,), payload_bytes=src.nbytes,
                            msg_bytes=src.nbytes, mech=None, kind="store_add_local",
                            usages=[],
                            rate_cap_bps=ctx.engine.profile.hbm_bandwidth,
                            propagate=False)
        else:
            spec = FlowSpec(src=ctx.dev, dsts=(d,), payload_bytes=src.nbytes,
                            msg_bytes=src.nbytes, mech=mech, kind="store_add",
                            usages=[(egress(ctx.dev), 1.0), (ingress(d), rmw)],
                            sm_count=1.0)
        tokens.append(ctx.engine.start_flow(spec, [eff]))
    return TokenGroup(tokens)


def _fold(pgl: ParallelGlobalLayout, coord: TileCoord, rows: int, cols: int,
          op: str) -> np.ndarray:
    # Canonical ascending-device fold keeps results deterministic.
    fn = REDUCE_OPS[op]
    sl = pgl._tile_slices(coord, rows, cols)
    acc = pgl.buffers[0][sl].copy()
    for d in range(1, pgl.num_devices):
        acc = fn(acc, pgl.buffers[d][sl])
    return acc


def _require_fabric_reduce(ctx: IssueCtx, src: ParallelGlobalLayout, op: str):
    if src.multicast_alias is None:
        raise PrimitiveError("in-network reduction needs completed multicast setup")
    if ctx.width < WARP_WIDTH:
        raise PrimitiveError("network-accelerated primitives need at least "
                             f"warp-level participation ({WARP_WIDTH} threads)")
    if op not in REDUCE_OPS:
        raise PrimitiveError(f"unsupported reduce op {op!r}")
    return hwmodel.select_mechanism(Functionality.IN_FABRIC_REDUCTION, 0.0,
                                    max(ctx.width // WARP_WIDTH, 1),
                                    ctx.engine.profile)


def reduce(ctx: IssueCtx, dst: ParallelGlobalLayout, dst_coord: TileCoord,
           src: ParallelGlobalLayout, src_coord: TileCoord,
           rows: int, cols: int, op: str = "sum"):
    """Blocking in-network reduction load into the issuing device's buffer.

    The switch collapses all devices' streams, so only one ingress stream
    is charged at the reader.
    """
    mech = _require_fabric_reduce(ctx, src, op)
    nbytes = rows * cols * src.element_bytes
    dev = ctx.dev

    def eff():
        if src.materialized and dst.materialized:
            acc = _fold(src, src_coord, rows, cols, op)
            sl = dst._tile_slices(dst_coord, rows, cols)
            dst.buffers[dev][sl] = acc

    spec = FlowSpec(src=dev, dsts=(dev,), payload_bytes=nbytes, msg_bytes=nbytes,
                    mech=mech, kind="reduce",
                    usages=[(ingress(dev), 1.0)],
                    sm_count=ctx.width / WARP_WIDTH)
    tok = ctx.engine.start_flow(spec, [eff])
    yield Await(tok)


def all_reduce(ctx: IssueCtx, pgl: ParallelGlobalLayout, coord: TileCoord,
               rows: int, cols: int, op: str = "sum"):
    """Blocking in-network all-reduce of one tile across all devices.

    One reduction load plus one multicast write-back: a single link
    transfer per tile instead of one per destination.
    """
    mech = _require_fabric_reduce(ctx, pgl, op)
    nbytes = rows * cols * pgl.element_bytes
    dev = ctx.dev

    def eff():
        if pgl.materialized:
            acc = _fold(pgl, coord, rows, cols, op)
            sl = pgl._tile_slices(coord, rows, cols)
            for d in range(pgl.num_devices):
                pgl.buffers[d][sl] = acc

    spec = FlowSpec(src=dev, dsts=tuple(range(pgl.num_devices)),
                    payload_bytes=nbytes, msg_bytes=nbytes, mech=mech,
                    kind="allreduce",
                    usages=[(ingress(dev), 1.0), (egress(dev), 1.0)],
                    sm_count=ctx.width / WARP_WIDTH)
    tok = ctx.engine.start_flow(spec, [eff])
    yield Await(tok)


def signal(ctx: IssueCtx, bar: BarrierField, coord: tuple, dst_dev: int,
           val: int) -> None:
    """Fire-and-forget atomic add to one device's barrier counter."""
    bar._check(dst_dev, tuple(coord))
    eng = ctx.engine
    eng.log_event("signal", ctx.dev, dst_dev, SIGNAL_BYTES)
    delay = 0.0 if dst_dev == ctx.dev else eng.cfg.link_round_trip_ns / 2.0
    eng.schedule_call(delay,
                      lambda: eng.mutate_counter(bar, dst_dev, tuple(coord), val))


def signal_all(ctx: IssueCtx, bar: BarrierField, coord: tuple, val: int) -> None:
    """Multicast atomic add to every device's counter in one fabric operation."""
    if bar.multicast_alias is None:
        raise PrimitiveError("signal_all needs completed multicast setup")
    bar._check(0, tuple(coord))
    eng = ctx.engine
    eng.log_event("signal_all", ctx.dev, "*", SIGNAL_BYTES)
    delay = eng.cfg.link_round_trip_ns / 2.0

    def apply():
        for d in range(bar.num_devices):
            eng.mutate_counter(bar, d, tuple(coord), val)

    eng.schedule_call(delay, apply)


def wait(ctx: IssueCtx, bar: BarrierField, coord: tuple, dev: int,
         expected: int):
    """Block until a device's counter reaches the expected value."""
    if expected < 0:
        raise PrimitiveError("expected counter value must be nonnegative")
    bar._check(dev, tuple(coord))
    if expected == 0:
        return
    yield WaitCounter(bar, dev, tuple(coord), expected)


def barrier(ctx: IssueCtx, bar: BarrierField, coord: tuple):
    """All-device rendezvous: one multicast signal, then wait for everyone."""
    epoch = bar.next_epoch(ctx.dev, tuple(coord))
    signal_all(ctx, bar, coord, 1)
    yield from wait(ctx, bar, coord, ctx.dev, epoch * bar.num_devices)
