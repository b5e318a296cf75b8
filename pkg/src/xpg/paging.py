"""Virtualized expert tensor pages over a fixed block-pool arena.

Every expert tensor owns a stable virtual address inside a reserved per-kind
region; residency comes from binding one of 2L reusable physical blocks per
kind (4L total) to the page. Pages move strictly through
Unmapped -> Loading -> Resident -> Evicting -> Unmapped, and the forward
(page -> block) and reverse (block -> page) maps stay mutual inverses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

from .errors import (
    DoubleMapError,
    NotMappedError,
    OutOfRangeError,
    PageFaultError,
    PoolExhaustedError,
)
from .model import ExpertTensorId, ModelSpec, TensorKind, check_id

DEFAULT_VADDR_BASE = 0x10_0000_0000
VADDR_GUARD = 4096


def target_layer(i: int, n: int) -> int:
    """Layer whose blocks are recycled when materializing layer i.

    The second preceding layer with cyclic wraparound: ((i-3+n) mod n) + 1.
    """
    if n < 2:
        raise OutOfRangeError(f"need at least 2 layers, got {n}")
    if not 1 <= i <= n:
        raise OutOfRangeError(f"layer {i} outside [1, {n}]")
    return ((i - 3 + n) % n) + 1


class PageState(Enum):
    UNMAPPED = "unmapped"
    LOADING = "loading"
    RESIDENT = "resident"
    EVICTING = "evicting"


@dataclass(frozen=True)
class AddressSpace:
    """Reserved per-kind virtual regions; plain integers stand in for pointers."""

    spec: ModelSpec
    base_gate_up: int
    base_down: int

    @classmethod
    def for_spec(cls, spec: ModelSpec, base: int = DEFAULT_VADDR_BASE) -> "AddressSpace":
        extent1 = spec.num_layers * spec.experts_per_layer * spec.sigma_gate_up
        return cls(spec, base, base + extent1 + VADDR_GUARD)

    def base(self, kind: TensorKind) -> int:
        return self.base_gate_up if kind == TensorKind.GATE_UP else self.base_down

    def extent(self, kind: TensorKind) -> int:
        return self.spec.num_layers * self.spec.experts_per_layer * self.spec.sigma(kind)


def page_vaddr(tid: ExpertTensorId, space: AddressSpace) -> int:
    """Stable virtual address of a page; a pure function of (id, space)."""
    spec = space.spec
    check_id(tid, spec)
    sigma = spec.sigma(tid.kind)
    return (
        space.base(tid.kind)
        + (tid.layer - 1) * spec.experts_per_layer * sigma
        + (tid.expert - 1) * sigma
    )


@dataclass
class TensorPage:
    tid: ExpertTensorId
    vaddr: int
    size: int
    state: PageState = PageState.UNMAPPED


@dataclass
class PhysicalBlock:
    block_id: int  # 1-based within its kind's pool
    kind: TensorKind
    capacity: int
    arena_offset: int
    bound_page: ExpertTensorId | None = None


class PageTable:
    """Forward/reverse page-block maps plus the backing arena.

    All mutations happen under one lock so transitions appear atomic;
    callers must never wait on events while holding it.
    """

    def __init__(self, spec: ModelSpec, space: AddressSpace | None = None, trace=None):
        self.spec = spec
        self.space = space or AddressSpace.for_spec(spec)
        self.trace = trace  # anything with .append(str), or None
        self._lock = threading.Lock()
        self._step = 0

        self.pages = {
            tid: TensorPage(tid, page_vaddr(tid, self.space), spec.sigma(tid.kind))
            for tid in self._all_ids()
        }
        pool = 2 * spec.experts_per_layer
        self.blocks = {}
        offset = 0
        for kind in (TensorKind.GATE_UP, TensorKind.DOWN):
            for m in range(1, pool + 1):
                self.blocks[(kind, m)] = PhysicalBlock(m, kind, spec.sigma(kind), offset)
                offset += spec.sigma(kind)
        self.arena = bytearray(offset)
        self._free = {
            TensorKind.GATE_UP: list(range(1, pool + 1)),
            TensorKind.DOWN: list(range(1, pool + 1)),
        }
        self._forward = {}  # tid -> (kind, block_id)
        self._reverse = {}  # (kind, block_id) -> tid
        self._bound_bytes = 0
        self._peak_bytes = 0

    def _all_ids(self):
        from .model import iter_tensor_ids

        return iter_tensor_ids(self.spec)

    def _emit(self, event: str, tid: ExpertTensorId, block_id, extra: str = ""):
        if self.trace is None:
            return
        line = (
            f"event={event} layer={tid.layer} expert={tid.expert} "
            f"kind={int(tid.kind)} block={block_id} t={self._step}"
        )
        if extra:
            line += f" {extra}"
        self.trace.append(line)

    def map_page(self, tid: ExpertTensorId) -> PhysicalBlock:
        """Bind a free block to an unmapped page; the page enters Loading."""
        check_id(tid, self.spec)
        with self._lock:
            page = self.pages[tid]
            if tid in self._forward or page.state != PageState.UNMAPPED:
                raise DoubleMapError(f"{tid} is already mapped ({page.state.value})")
            free = self._free[tid.kind]
            if not free:
                raise PoolExhaustedError(
                    f"no free kind-{int(tid.kind)} block for {tid}; protocol bug"
                )
            free.sort()
            block_id = free.pop(0)  # lowest id first, for reproducible traces
            key = (tid.kind, block_id)
            block = self.blocks[key]
            block.bound_page = tid
            self._forward[tid] = key
            self._reverse[key] = tid
            page.state = PageState.LOADING
            self._bound_bytes += block.capacity
            self._peak_bytes = max(self._peak_bytes, self._bound_bytes)
            self._step += 1
            self._emit("map", tid, block_id)
            return block

    def mark_resident(self, tid: ExpertTensorId) -> None:
        """Load-complete signal: Loading -> Resident."""
        with self._lock:
            page = self.pages[tid]
            if page.state != PageState.LOADING:
                raise NotMappedError(f"{tid} is {page.state.value}, expected loading")
            page.state = PageState.RESIDENT
            self._step += 1
            self._emit("state", tid, self._forward[tid][1], "state=resident")

    def unmap_page(self, tid: ExpertTensorId) -> None:
        """Resident -> Evicting -> Unmapped; the block returns to the free list.

        Eviction is instantaneous at desk scale, but both transitions are
        traced so interleaving tests can observe the four-state lifecycle.
        """
        with self._lock:
            page = self.pages[tid]
            key = self._forward.get(tid)
            if key is None or page.state not in (PageState.RESIDENT, PageState.EVICTING):
                raise NotMappedError(f"{tid} is {page.state.value}; nothing to unmap")
            block = self.blocks[key]
            page.state = PageState.EVICTING
            self._step += 1
            self._emit("state", tid, key[1], "state=evicting")
            del self._forward[tid]
            del self._reverse[key]
            block.bound_page = None
            self._free[tid.kind].append(key[1])
            page.state = PageState.UNMAPPED
            self._bound_bytes -= block.capacity
            self._step += 1
            self._emit("unmap", tid, key[1])

    def page_state(self, tid: ExpertTensorId) -> PageState:
        with self._lock:
            return self.pages[tid].state

    def block_of(self, tid: ExpertTensorId) -> PhysicalBlock | None:
        with self._lock:
            key = self._forward.get(tid)
            return self.blocks[key] if key else None

    def loading_view(self, tid: ExpertTensorId) -> memoryview:
        """Writable view of the page's block while it is being populated."""
        with self._lock:
            page = self.pages[tid]
            if page.state != PageState.LOADING:
                raise PageFaultError(f"write through {tid} while {page.state.value}")
            block = self.blocks[self._forward[tid]]
            return memoryview(self.arena)[
                block.arena_offset : block.arena_offset + block.capacity
            ]

    def read_page(self, tid: ExpertTensorId) -> bytes:
        """Read a resident page's bytes; faults loudly instead of returning garbage."""
        with self._lock:
            page = self.pages[tid]
            if page.state != PageState.RESIDENT:
                raise PageFaultError(f"read through {tid} while {page.state.value}")
            block = self.blocks[self._forward[tid]]
            return bytes(
                self.arena[block.arena_offset : block.arena_offset + block.capacity]
            )

    def arena_peak_bytes(self) -> int:
        """High-water mark of device-arena bytes ever bound."""
        with self._lock:
            return self._peak_bytes

    @property
    def pool_bytes(self) -> int:
        return len(self.arena)

    def mapped_layers(self, kind: TensorKind) -> set:
        with self._lock:
            return {tid.layer for tid in self._forward if tid.kind == kind}

    def resident_layers(self) -> set:
        with self._lock:
            return {
                tid.layer
                for tid, page in self.pages.items()
                if page.state == PageState.RESIDENT
            }

    def check_consistency(self) -> None:
        """Assert forward/reverse maps are mutual inverses (test helper)."""
        with self._lock:
            for tid, key in self._forward.items():
                assert self._reverse.get(key) == tid, (tid, key)
            for key, tid in self._reverse.items():
                assert self._forward.get(tid) == key, (key, tid)
            bound = {key for key in self._reverse}
            free = {(k, m) for k, ids in self._free.items() for m in ids}
            assert not (bound & free)
            pool = 2 * self.spec.experts_per_layer
            assert len(bound) + len(free) == 2 * pool
