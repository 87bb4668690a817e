"""GPU memory model: physical page pool, VA ranges, demand paging, aliasing.

Two allocation families exist. External ranges (device allocations and
VMM-mapped allocations) are fully populated up front and never serviced by
demand paging. Managed ranges reserve address space only; physical chunks are
installed lazily on first access. VMM separates physical allocation from
mapping, so one allocation can back ranges in several processes at once and
stays alive while any handle or mapping still references it.

A driver-global dummy pool holds one pre-zeroed 4 KiB page and one pre-zeroed
2 MiB chunk; installing either never allocates new physical pages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import InvalidSize, KindMismatch, OutOfPhysicalPages, UnknownHandle
from .execmodel import EngineClass
from .kernel import DUMMY_CHUNK_PAGES, PAGE_SIZE

# Mixes simulated payload writes into a 64-bit running checksum.
_TAG_PRIME = 1099511628211
_TAG_MASK = (1 << 64) - 1


class RangeKind(str, Enum):
    MANAGED = "managed"
    EXTERNAL = "external"


class Residency(str, Enum):
    UNPOPULATED = "unpopulated"
    CPU = "cpu"
    GPU = "gpu"


class Protection(str, Enum):
    READ_ONLY = "read-only"
    READ_WRITE = "read-write"


class Lifecycle(str, Enum):
    LIVE = "live"
    ZOMBIE = "zombie"


class AccessType(str, Enum):
    READ = "read"
    WRITE = "write"
    PREFETCH = "prefetch"


@dataclass
class PhysicalAllocation:
    handle: int
    size: int
    pages: list[int]
    refcount: int = 1
    content_tag: int = 0
    driver_owned: bool = False

    def write_tag(self, value: int):
        self.content_tag = ((self.content_tag * _TAG_PRIME) ^ value) & _TAG_MASK


@dataclass
class Chunk:
    id: int
    pages: list[int]
    source: str  # "normal-pool" | "dummy-pool"


@dataclass
class PageRec:
    residency: Residency = Residency.UNPOPULATED
    protection: Protection = Protection.READ_WRITE
    backing: Optional[tuple] = None  # ("chunk", id) | ("alloc", handle) | None


@dataclass
class VaRange:
    rid: int
    owner_pid: str
    base: int
    length: int
    kind: RangeKind
    pages: list[PageRec]
    lifecycle: Lifecycle = Lifecycle.LIVE
    migratable: bool = True
    backing_handle: Optional[int] = None
    semaphore_pool: bool = False

    @property
    def end(self) -> int:
        return self.base + self.length

    def page_index(self, va: int) -> int:
        return (va - self.base) // PAGE_SIZE


@dataclass
class FaultSeed:
    va: int
    access: AccessType
    engine: EngineClass
    channel_id: Optional[str] = None


@dataclass
class Hit:
    page: int


@dataclass
class Miss:
    seed: FaultSeed


class MemoryModel:
    def __init__(self, world):
        self.params = world.params
        self.allocations: dict[int, PhysicalAllocation] = {}
        self.chunks: dict[int, Chunk] = {}
        self.ranges: dict[int, VaRange] = {}
        self.live_pages = 0
        self._pages_allocated_total = 0
        self._next_page = 1
        self._next_handle = 1
        self._next_chunk = 1
        self._next_rid = 1
        self._va_cursor: dict[str, int] = {}
        # Driver-global dummy pool, created once at init. Contents always read
        # as zero, so a redirected client can never observe another client's data.
        self.dummy_page_4k = self._new_chunk(world, 1, source="dummy-pool")
        self.dummy_chunk_2m = self._new_chunk(world, DUMMY_CHUNK_PAGES, source="dummy-pool")
        world.trace.emit(world.clock.now, "mem", "dummy_pool_init",
                         page_4k=self.dummy_page_4k.id, chunk_2m=self.dummy_chunk_2m.id)

    # -- page accounting ----------------------------------------------------

    def _take_pages(self, count: int) -> list[int]:
        if self.live_pages + count > self.params.gpu_pages:
            raise OutOfPhysicalPages(
                f"need {count} pages, {self.params.gpu_pages - self.live_pages} free"
            )
        pages = list(range(self._next_page, self._next_page + count))
        self._next_page += count
        self.live_pages += count
        self._pages_allocated_total += count
        return pages

    def _release_pages(self, count: int):
        self.live_pages -= count

    def check_conservation(self):
        """Total live pages must equal the sum over live backing objects."""
        total = sum(len(a.pages) for a in self.allocations.values())
        total += sum(len(c.pages) for c in self.chunks.values())
        assert total == self.live_pages, (
            f"footprint skew: tracked {self.live_pages}, recomputed {total}"
        )

    def client_pages(self) -> int:
        """Live pages attributable to clients; each aliased allocation counts once."""
        total = sum(len(a.pages) for a in self.allocations.values() if not a.driver_owned)
        total += sum(len(c.pages) for c in self.chunks.values() if c.source == "normal-pool")
        return total

    def driver_pages(self) -> int:
        return self.live_pages - self.client_pages()

    # -- backing objects ----------------------------------------------------

    def _new_chunk(self, world, pages: int, source: str) -> Chunk:
        chunk = Chunk(id=self._next_chunk, pages=self._take_pages(pages), source=source)
        self._next_chunk += 1
        self.chunks[chunk.id] = chunk
        return chunk

    def _free_chunk(self, world, chunk_id: int):
        chunk = self.chunks.pop(chunk_id)
        self._release_pages(len(chunk.pages))
        world.trace.emit(world.clock.now, "mem", "chunk_free", chunk=chunk_id)

    def _new_allocation(self, world, size: int, driver_owned=False) -> PhysicalAllocation:
        npages = -(-size // PAGE_SIZE)
        alloc = PhysicalAllocation(
            handle=self._next_handle, size=size,
            pages=self._take_pages(npages), driver_owned=driver_owned,
        )
        self._next_handle += 1
        self.allocations[alloc.handle] = alloc
        world.trace.emit(world.clock.now, "mem", "alloc",
                         handle=alloc.handle, pages=npages)
        return alloc

    def release_handle(self, world, handle: int):
        alloc = self.allocations.get(handle)
        if alloc is None:
            raise UnknownHandle(f"no allocation {handle}")
        alloc.refcount -= 1
        world.trace.emit(world.clock.now, "mem", "unref",
                         handle=handle, refcount=alloc.refcount)
        if alloc.refcount == 0:
            del self.allocations[handle]
            self._release_pages(len(alloc.pages))
            world.trace.emit(world.clock.now, "mem", "alloc_free", handle=handle)

    # -- VA space -----------------------------------------------------------

    def _place_range(self, pid: str, length: int) -> int:
        # One guard page between ranges so a write just past the end lands on
        # an unmapped address.
        base = self._va_cursor.get(pid, 0x10_0000)
        self._va_cursor[pid] = base + length + PAGE_SIZE
        return base

    def _add_range(self, world, pid, length, kind, pages, **extra) -> VaRange:
        rng = VaRange(
            rid=self._next_rid, owner_pid=pid, base=self._place_range(pid, length),
            length=length, kind=kind, pages=pages, **extra,
        )
        self._next_rid += 1
        self.ranges[rng.rid] = rng
        world.trace.emit(world.clock.now, "mem", "range_create",
                         rid=rng.rid, owner=pid, range_kind=kind.value,
                         base=rng.base, length=length)
        return rng

    def range_at(self, pid: str, va: int) -> Optional[VaRange]:
        for rng in self.ranges.values():
            if rng.owner_pid == pid and rng.base <= va < rng.end:
                return rng
        return None

    # -- allocation APIs ----------------------------------------------------

    def alloc_device(self, world, pid: str, size: int) -> VaRange:
        """Device allocation: physical pages and mapping in one step."""
        if size <= 0:
            raise InvalidSize("allocation size must be > 0")
        alloc = self._new_allocation(world, size)
        npages = len(alloc.pages)
        pages = [
            PageRec(Residency.GPU, Protection.READ_WRITE, ("alloc", alloc.handle))
            for _ in range(npages)
        ]
        return self._add_range(world, pid, npages * PAGE_SIZE, RangeKind.EXTERNAL,
                               pages, backing_handle=alloc.handle)

    def alloc_managed(self, world, pid: str, size: int) -> VaRange:
        """Managed allocation: address space now, physical pages on first touch."""
        if size <= 0:
            raise InvalidSize("allocation size must be > 0")
        npages = -(-size // PAGE_SIZE)
        pages = [PageRec() for _ in range(npages)]
        return self._add_range(world, pid, npages * PAGE_SIZE, RangeKind.MANAGED, pages)

    def vmm_create(self, world, size: int) -> int:
        """Create a physical allocation with no mapping; returns its handle."""
        if size <= 0:
            raise InvalidSize("allocation size must be > 0")
        alloc = self._new_allocation(world, size)
        return alloc.handle

    def vmm_map(self, world, pid: str, handle: int) -> VaRange:
        """Map an existing allocation into `pid`; bumps the refcount."""
        alloc = self.allocations.get(handle)
        if alloc is None:
            raise UnknownHandle(f"no allocation {handle}")
        alloc.refcount += 1
        pages = [
            PageRec(Residency.GPU, Protection.READ_WRITE, ("alloc", handle))
            for _ in alloc.pages
        ]
        rng = self._add_range(world, pid, len(alloc.pages) * PAGE_SIZE,
                              RangeKind.EXTERNAL, pages, backing_handle=handle)
        world.trace.emit(world.clock.now, "mem", "vmm_map",
                         rid=rng.rid, handle=handle, refcount=alloc.refcount)
        return rng

    def vmm_create_map(self, world, pid: str, size: int) -> tuple[int, VaRange]:
        """Create and map in one step; the mapping carries the only reference,
        as when a caller releases its creation handle right after mapping."""
        handle = self.vmm_create(world, size)
        rng = self.vmm_map(world, pid, handle)
        self.release_handle(world, handle)
        return handle, rng

    # -- state knobs --------------------------------------------------------

    def set_access(self, world, rng: VaRange, protection: Protection):
        for rec in rng.pages:
            rec.protection = protection
            if rng.kind is RangeKind.MANAGED and rec.residency is Residency.UNPOPULATED:
                # Advising an access policy establishes a CPU copy, so the
                # pages have a definite residency when the policy is enforced.
                rec.residency = Residency.CPU
        world.trace.emit(world.clock.now, "mem", "set_access",
                         rid=rng.rid, protection=protection.value)

    def make_zombie(self, world, rng: VaRange):
        """De-register the backing while GPU-side mappings linger."""
        if rng.kind is not RangeKind.MANAGED:
            raise KindMismatch("only managed ranges can become zombies")
        for rec in rng.pages:
            if rec.backing is not None and rec.backing[0] == "chunk":
                self._free_chunk(world, rec.backing[1])
            rec.backing = None
        rng.lifecycle = Lifecycle.ZOMBIE
        world.trace.emit(world.clock.now, "mem", "zombie", rid=rng.rid)

    def pin_non_migratable(self, world, rng: VaRange):
        """Pin the range to host memory and forbid migration."""
        if rng.kind is not RangeKind.MANAGED:
            raise KindMismatch("only managed ranges can be pinned")
        rng.migratable = False
        for rec in rng.pages:
            rec.residency = Residency.CPU
            if rec.backing is not None and rec.backing[0] == "chunk":
                self._free_chunk(world, rec.backing[1])
                rec.backing = None
        world.trace.emit(world.clock.now, "mem", "pin_host", rid=rng.rid)

    def semaphore_pool_for(self, world, pid: str) -> VaRange:
        """Driver-internal semaphore pool; populated lazily like managed memory."""
        for rng in self.ranges.values():
            if rng.owner_pid == pid and rng.semaphore_pool:
                return rng
        pages = [PageRec()]
        return self._add_range(world, pid, PAGE_SIZE, RangeKind.MANAGED, pages,
                               semaphore_pool=True)

    # -- translation --------------------------------------------------------

    def resolve_va(self, world, pid: str, va: int, access: AccessType,
                   engine: EngineClass, channel_id: Optional[str] = None):
        """Translate one access; every failure mode is a Miss carrying a seed."""
        seed = FaultSeed(va=va, access=access, engine=engine, channel_id=channel_id)
        rng = self.range_at(pid, va)
        if access is AccessType.PREFETCH:
            if rng is None or rng.kind is not RangeKind.MANAGED:
                return Miss(seed)
            self.populate_page(world, rng, rng.page_index(va))
            rec = rng.pages[rng.page_index(va)]
            return Hit(page=rec.backing[1] if rec.backing else 0)
        if rng is None:
            return Miss(seed)
        if rng.lifecycle is Lifecycle.ZOMBIE:
            return Miss(seed)
        rec = rng.pages[rng.page_index(va)]
        if not rng.migratable and rec.residency is Residency.CPU:
            return Miss(seed)
        if access is AccessType.WRITE and rec.protection is Protection.READ_ONLY:
            return Miss(seed)
        if rec.residency is Residency.GPU:
            page = rec.backing[1] if rec.backing else 0
            return Hit(page=page)
        # External ranges are always fully populated; reaching here means the
        # page is CPU-resident or unpopulated, which only managed ranges allow.
        return Miss(seed)

    # -- fault servicing helpers -------------------------------------------

    def populate_page(self, world, rng: VaRange, idx: int):
        """First-touch population or CPU->GPU migration of one managed page."""
        rec = rng.pages[idx]
        if rec.residency is Residency.GPU:
            return
        migrated = rec.residency is Residency.CPU
        if rec.backing is None:
            chunk = self._new_chunk(world, 1, source="normal-pool")
            rec.backing = ("chunk", chunk.id)
        rec.residency = Residency.GPU
        world.trace.emit(world.clock.now, "mem",
                         "migrate" if migrated else "populate",
                         rid=rng.rid, page=idx)

    def install_dummy_page(self, world, rng: VaRange, idx: int):
        """Back one page with the shared 4 KiB dummy page; allocates nothing."""
        rec = rng.pages[idx]
        freed = None
        if rec.backing is not None and rec.backing[0] == "chunk":
            freed = rec.backing[1]
            self._free_chunk(world, freed)
        rec.backing = ("chunk", self.dummy_page_4k.id)
        rec.residency = Residency.GPU
        rec.protection = Protection.READ_WRITE
        world.trace.emit(world.clock.now, "mem", "dummy_install",
                         rid=rng.rid, page=idx, freed_chunk=freed if freed else 0)

    def create_managed_at(self, world, pid: str, base: int) -> VaRange:
        """One-page managed range at a fixed address (fault-address redirection)."""
        rng = VaRange(rid=self._next_rid, owner_pid=pid, base=base, length=PAGE_SIZE,
                      kind=RangeKind.MANAGED, pages=[PageRec()])
        self._next_rid += 1
        self.ranges[rng.rid] = rng
        world.trace.emit(world.clock.now, "mem", "range_create",
                         rid=rng.rid, owner=pid, range_kind="managed",
                         base=base, length=PAGE_SIZE)
        return rng

    def convert_external_to_managed(self, world, rng: VaRange) -> VaRange:
        """Destroy an external range and recreate it managed over the same span.

        The shared 2 MiB dummy chunk is pre-installed so the populate path
        short-circuits without allocating.
        """
        if rng.kind is not RangeKind.EXTERNAL:
            raise KindMismatch("conversion applies to external ranges")
        self.destroy_range(world, rng)
        pages = [
            PageRec(Residency.GPU, Protection.READ_WRITE,
                    ("chunk", self.dummy_chunk_2m.id))
            for _ in rng.pages
        ]
        newr = VaRange(rid=self._next_rid, owner_pid=rng.owner_pid, base=rng.base,
                       length=rng.length, kind=RangeKind.MANAGED, pages=pages)
        self._next_rid += 1
        self.ranges[newr.rid] = newr
        world.trace.emit(world.clock.now, "mem", "range_convert",
                         old_rid=rng.rid, rid=newr.rid, base=newr.base)
        return newr

    # -- teardown -----------------------------------------------------------

    def destroy_range(self, world, rng: VaRange):
        if rng.rid not in self.ranges:
            return
        del self.ranges[rng.rid]
        for rec in rng.pages:
            if rec.backing is None:
                continue
            what, ref = rec.backing
            if what == "chunk" and ref in self.chunks:
                if self.chunks[ref].source == "normal-pool":
                    self._free_chunk(world, ref)
            rec.backing = None
        if rng.backing_handle is not None and rng.backing_handle in self.allocations:
            self.release_handle(world, rng.backing_handle)
        world.trace.emit(world.clock.now, "mem", "range_destroy", rid=rng.rid)

    def release_client(self, world, pid: str):
        for rng in [r for r in self.ranges.values() if r.owner_pid == pid]:
            self.destroy_range(world, rng)

    def dummy_read(self, which: str) -> int:
        """Dummy-pool contents always read as zero, for every client."""
        assert which in ("page_4k", "chunk_2m")
        return 0
