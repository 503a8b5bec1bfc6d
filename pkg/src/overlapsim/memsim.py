"""Simulated multi-device memory.

Per-device buffers grouped into a parallel global layout (identically
shaped regions on every device, optionally aliased by a multicast
handle), shared-memory tiles, barrier counter fields, and the
IPC/VMM/multicast memory-setup protocol state machines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

SHARED_MEMORY_BYTES = 227 * 1024
DEFAULT_VMM_GRANULARITY = 2 * 1024 * 1024
MIN_TILE_DIM = 16


class MemSimError(Exception):
    pass


class ProtocolViolation(MemSimError):
    """A setup step was taken before its prerequisite completed."""


class MulticastReadError(MemSimError):
    """Reading through a multicast alias is undefined behavior."""


@dataclass(frozen=True)
class TileCoord:
    """4-component tile index (batch, depth, row, col) into a layout's grid."""

    b: int = 0
    d: int = 0
    r: int = 0
    c: int = 0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.b, self.d, self.r, self.c)


@dataclass
class SharedTile:
    """A per-SM shared-memory tile of values."""

    rows: int
    cols: int
    element_bytes: int
    data: np.ndarray
    owner_sm: int = 0

    def __post_init__(self):
        if self.rows % MIN_TILE_DIM or self.cols % MIN_TILE_DIM:
            raise MemSimError(f"tile dims must be multiples of {MIN_TILE_DIM}")
        if self.nbytes > SHARED_MEMORY_BYTES:
            raise MemSimError(
                f"tile of {self.nbytes} B exceeds the "
                f"{SHARED_MEMORY_BYTES} B shared-memory capacity")
        if self.data.shape != (self.rows, self.cols):
            raise MemSimError("tile data shape mismatch")

    @property
    def nbytes(self) -> int:
        return self.rows * self.cols * self.element_bytes

    @classmethod
    def filled(cls, rows: int, cols: int, element_bytes: int, value,
               owner_sm: int = 0) -> "SharedTile":
        data = np.full((rows, cols), value, dtype=np.float64)
        return cls(rows, cols, element_bytes, data, owner_sm)


@dataclass
class MulticastAlias:
    """Handle over all devices' physical regions; writable, never readable."""

    num_devices: int

    def read(self, *args, **kwargs):
        raise MulticastReadError(
            "reading from a multicast address is undefined behavior")


class ParallelGlobalLayout:
    """Identically shaped and sized buffers allocated across all devices.

    The shape is a 4-dim extent (b, d, r, c). Buffers are dense row-major
    float64 arrays when materialized; large timing-only layouts skip
    materialization and track only sizes.
    """

    def __init__(self, shape: tuple[int, int, int, int], element_bytes: int,
                 num_devices: int, materialize: bool = True):
        if len(shape) != 4 or any(int(e) <= 0 for e in shape):
            raise MemSimError("shape must be 4 positive extents")
        if element_bytes <= 0:
            raise MemSimError("element size must be positive")
        if num_devices < 2:
            raise MemSimError("a parallel layout needs at least 2 devices")
        self.shape = tuple(int(e) for e in shape)
        self.element_bytes = int(element_bytes)
        self.num_devices = int(num_devices)
        self.materialized = materialize
        self.buffers: Optional[list[np.ndarray]] = None
        if materialize:
            self.buffers = [np.zeros(self.shape, dtype=np.float64)
                            for _ in range(num_devices)]
        self.multicast_alias: Optional[MulticastAlias] = None
        self.reserved_bytes = self.buffer_bytes  # padded by VMM setup

    @property
    def buffer_bytes(self) -> int:
        b, d, r, c = self.shape
        return b * d * r * c * self.element_bytes

    def tile_grid(self, rows: int, cols: int) -> tuple[int, int, int, int]:
        b, d, r, c = self.shape
        if r % rows or c % cols:
            raise MemSimError("tile size does not divide the layout extents")
        return (b, d, r // rows, c // cols)

    def _tile_slices(self, coord: TileCoord, rows: int, cols: int):
        gb, gd, gr, gc = self.tile_grid(rows, cols)
        if not (0 <= coord.b < gb and 0 <= coord.d < gd
                and 0 <= coord.r < gr and 0 <= coord.c < gc):
            raise MemSimError(f"tile coord {coord} out of range for grid "
                              f"{(gb, gd, gr, gc)}")
        return (coord.b, coord.d,
                slice(coord.r * rows, (coord.r + 1) * rows),
                slice(coord.c * cols, (coord.c + 1) * cols))

    def _buffer(self, dev: int) -> np.ndarray:
        if not self.materialized:
            raise MemSimError("layout was allocated timing-only")
        if not (0 <= dev < self.num_devices):
            raise MemSimError(f"device index {dev} out of range")
        return self.buffers[dev]


def allocate_pgl(shape, element_bytes: int, num_devices: int,
                 materialize: bool = True) -> ParallelGlobalLayout:
    """Allocate zero-initialized identical buffers on every device."""
    return ParallelGlobalLayout(tuple(shape), element_bytes, num_devices,
                                materialize=materialize)


def read_tile(pgl: ParallelGlobalLayout, dev: int, coord: TileCoord,
              rows: int, cols: int) -> SharedTile:
    """Oracle access: plain local read, bypassing timing."""
    if dev == "multicast":
        raise MulticastReadError(
            "reading from a multicast address is undefined behavior")
    sl = pgl._tile_slices(coord, rows, cols)
    return SharedTile(rows, cols, pgl.element_bytes,
                      pgl._buffer(dev)[sl].copy())


def write_tile(pgl: ParallelGlobalLayout, dev: int, coord: TileCoord,
               tile: SharedTile) -> None:
    """Oracle access: plain local write, bypassing timing."""
    sl = pgl._tile_slices(coord, tile.rows, tile.cols)
    pgl._buffer(dev)[sl] = tile.data


class BarrierField:
    """A parallel layout of integer counters mutated only by signals."""

    def __init__(self, shape, num_devices: int):
        self.shape = tuple(int(e) for e in shape)
        if any(e <= 0 for e in self.shape):
            raise MemSimError("barrier shape extents must be positive")
        self.num_devices = num_devices
        self.counters = [np.zeros(self.shape, dtype=np.int64)
                         for _ in range(num_devices)]
        self.multicast_alias: Optional[MulticastAlias] = None
        self._epochs: dict = {}

    def _check(self, dev: int, coord: tuple):
        if not (0 <= dev < self.num_devices):
            raise MemSimError(f"device index {dev} out of range")
        try:
            self.counters[dev][coord]
        except IndexError:
            raise MemSimError(f"barrier coord {coord} out of range") from None

    def value(self, dev: int, coord: tuple) -> int:
        self._check(dev, coord)
        return int(self.counters[dev][coord])

    def add(self, dev: int, coord: tuple, val: int) -> None:
        self._check(dev, coord)
        self.counters[dev][coord] += val

    def next_epoch(self, dev: int, coord: tuple) -> int:
        key = (dev, tuple(coord))
        self._epochs[key] = self._epochs.get(key, 0) + 1
        return self._epochs[key]


# ---------------------------------------------------------------------------
# Memory-setup protocol state machines
# ---------------------------------------------------------------------------

class SetupMode(Enum):
    IPC = "ipc"
    VMM = "vmm"
    MULTICAST = "multicast"


class IpcStep(Enum):
    GET_MEM_HANDLE = "get_mem_handle"
    SHARE_STUB = "share_stub"
    OPEN_MEM_HANDLE = "open_mem_handle"


class VmmStep(Enum):
    CREATE_PHYSICAL = "create_physical"
    EXPORT_HANDLE = "export_handle"
    TRANSFER_HANDLE_OVER_SOCKET = "transfer_handle_over_socket"
    IMPORT_HANDLE = "import_handle"
    MAP_VIRTUAL = "map_virtual"


class MulticastStep(Enum):
    CREATE_MULTICAST_STUB = "create_multicast_stub"
    REGISTER_ALL_DEVICES = "register_all_devices"
    BIND_EACH_DEVICE_MEMORY = "bind_each_device_memory"
    EXPORT_STUB = "export_stub"
    TRANSFER_STUB = "transfer_stub"
    IMPORT_STUB = "import_stub"
    MAP_VIRTUAL = "map_virtual"


# Prerequisite DAG per mode. Binding device memory needs every registration
# done; mapping the imported stub needs the import done. The export branch
# only needs the stub itself, so it may interleave with register/bind.
_PREREQS = {
    SetupMode.IPC: {
        IpcStep.GET_MEM_HANDLE: (),
        IpcStep.SHARE_STUB: (IpcStep.GET_MEM_HANDLE,),
        IpcStep.OPEN_MEM_HANDLE: (IpcStep.SHARE_STUB,),
    },
    SetupMode.VMM: {
        VmmStep.CREATE_PHYSICAL: (),
        VmmStep.EXPORT_HANDLE: (VmmStep.CREATE_PHYSICAL,),
        VmmStep.TRANSFER_HANDLE_OVER_SOCKET: (VmmStep.EXPORT_HANDLE,),
        VmmStep.IMPORT_HANDLE: (VmmStep.TRANSFER_HANDLE_OVER_SOCKET,),
        VmmStep.MAP_VIRTUAL: (VmmStep.IMPORT_HANDLE,),
    },
    SetupMode.MULTICAST: {
        MulticastStep.CREATE_MULTICAST_STUB: (),
        MulticastStep.REGISTER_ALL_DEVICES: (MulticastStep.CREATE_MULTICAST_STUB,),
        MulticastStep.BIND_EACH_DEVICE_MEMORY: (MulticastStep.REGISTER_ALL_DEVICES,),
        MulticastStep.EXPORT_STUB: (MulticastStep.CREATE_MULTICAST_STUB,),
        MulticastStep.TRANSFER_STUB: (MulticastStep.EXPORT_STUB,),
        MulticastStep.IMPORT_STUB: (MulticastStep.TRANSFER_STUB,),
        MulticastStep.MAP_VIRTUAL: (MulticastStep.IMPORT_STUB,),
    },
}


def setup_steps(mode: SetupMode) -> list:
    return list(_PREREQS[mode])


def setup_prereq_dag(mode: SetupMode) -> dict:
    """The prerequisite DAG, for independent linearization checks."""
    return {k: tuple(v) for k, v in _PREREQS[mode].items()}


class SetupSession:
    """One memory-setup protocol run; steps must follow the mode's DAG."""

    def __init__(self, mode: SetupMode,
                 pgl: Optional[ParallelGlobalLayout] = None,
                 size_bytes: Optional[int] = None,
                 granularity: int = DEFAULT_VMM_GRANULARITY,
                 strict_granularity: bool = False):
        self.mode = mode
        self.pgl = pgl
        self.size_bytes = size_bytes if size_bytes is not None else (
            pgl.buffer_bytes if pgl is not None else None)
        self.granularity = granularity
        self.strict_granularity = strict_granularity
        self.done: set = set()
        self.transcript: list = []

    @property
    def complete(self) -> bool:
        return self.done == set(_PREREQS[self.mode])

    def advance(self, step) -> "SetupSession":
        prereqs = _PREREQS[self.mode]
        if step not in prereqs:
            raise ProtocolViolation(
                f"step {step} is not part of the {self.mode.value} protocol")
        if step in self.done:
            raise ProtocolViolation(f"step {step} already taken")
        for need in prereqs[step]:
            if need not in self.done:
                raise ProtocolViolation(
                    f"{step} requires {need} to complete first")
        if (step in (VmmStep.CREATE_PHYSICAL, MulticastStep.CREATE_MULTICAST_STUB)
                and self.size_bytes is not None
                and self.size_bytes % self.granularity):
            if self.strict_granularity:
                raise MemSimError(
                    f"allocation of {self.size_bytes} B violates the "
                    f"{self.granularity} B granularity requirement")
            # Real allocations round the reservation up to the granularity.
            if self.pgl is not None:
                self.pgl.reserved_bytes = -(-self.size_bytes // self.granularity
                                            ) * self.granularity
        self.done.add(step)
        self.transcript.append(step)
        if self.complete and self.mode is SetupMode.MULTICAST and self.pgl is not None:
            self.pgl.multicast_alias = MulticastAlias(self.pgl.num_devices)
        return self

    def transcript_text(self) -> str:
        return "\n".join(f"{self.mode.value} {s.value}" for s in self.transcript)


def advance_setup(session: SetupSession, step) -> SetupSession:
    return session.advance(step)


def attach_multicast(target, granularity: int = DEFAULT_VMM_GRANULARITY):
    """Run the full multicast setup in canonical order and set the alias."""
    pgl = target if isinstance(target, ParallelGlobalLayout) else None
    session = SetupSession(SetupMode.MULTICAST, pgl=pgl, granularity=granularity)
    for step in MulticastStep:
        session.advance(step)
    if pgl is None:
        target.multicast_alias = MulticastAlias(target.num_devices)
    return session


def allocate_barrier(shape, num_devices: int, multicast: bool = True) -> BarrierField:
    bar = BarrierField(shape, num_devices)
    if multicast:
        attach_multicast(bar)
    return bar
