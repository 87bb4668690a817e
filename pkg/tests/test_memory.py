"""Memory model: allocation families, aliasing, translation, dummy pool."""

import pytest

from mpssim import machine
from mpssim.errors import InvalidSize, KindMismatch, OutOfPhysicalPages, UnknownHandle
from mpssim.execmodel import EngineClass
from mpssim.kernel import PAGE_SIZE, SimParams
from mpssim.memory import (
    AccessType,
    Hit,
    Lifecycle,
    Miss,
    Protection,
    RangeKind,
    Residency,
)


def fresh():
    w = machine.build_world(SimParams(per_process_overhead_pages=0))
    client = machine.create_client(w, "standalone")
    return w, client.pid


def test_device_alloc_rounds_to_pages_and_is_populated():
    w, pid = fresh()
    rng = w.mem.alloc_device(w, pid, 8192)
    assert len(rng.pages) == 2
    assert rng.kind is RangeKind.EXTERNAL
    assert all(p.residency is Residency.GPU for p in rng.pages)
    assert all(p.protection is Protection.READ_WRITE for p in rng.pages)


def test_write_one_byte_past_the_end_misses_as_oob():
    w, pid = fresh()
    rng = w.mem.alloc_device(w, pid, 8192)
    res = w.mem.resolve_va(w, pid, rng.end, AccessType.WRITE, EngineClass.SM)
    assert isinstance(res, Miss)
    assert res.seed.va == rng.end


def test_zero_size_allocations_rejected():
    w, pid = fresh()
    with pytest.raises(InvalidSize):
        w.mem.alloc_device(w, pid, 0)
    with pytest.raises(InvalidSize):
        w.mem.alloc_managed(w, pid, 0)


def test_managed_alloc_starts_unpopulated_and_populates_on_touch():
    w, pid = fresh()
    rng = w.mem.alloc_managed(w, pid, 3 * PAGE_SIZE)
    assert all(p.residency is Residency.UNPOPULATED for p in rng.pages)
    res = w.mem.resolve_va(w, pid, rng.base, AccessType.READ, EngineClass.SM)
    assert isinstance(res, Miss)  # benign demand-paging seed
    w.mem.populate_page(w, rng, 0)
    assert rng.pages[0].residency is Residency.GPU
    res2 = w.mem.resolve_va(w, pid, rng.base, AccessType.READ, EngineClass.SM)
    assert isinstance(res2, Hit)


def test_cpu_resident_page_migrates_on_populate():
    w, pid = fresh()
    rng = w.mem.alloc_managed(w, pid, PAGE_SIZE)
    rng.pages[0].residency = Residency.CPU
    w.mem.populate_page(w, rng, 0)
    assert rng.pages[0].residency is Residency.GPU
    assert "kind=migrate" in w.trace.render()


def test_read_only_advice_plus_write_misses():
    w, pid = fresh()
    rng = w.mem.alloc_managed(w, pid, PAGE_SIZE)
    w.mem.set_access(w, rng, Protection.READ_ONLY)
    assert rng.pages[0].residency is Residency.CPU
    res = w.mem.resolve_va(w, pid, rng.base, AccessType.WRITE, EngineClass.SM)
    assert isinstance(res, Miss)
    # Reads of a read-only page are still legal.
    res2 = w.mem.resolve_va(w, pid, rng.base, AccessType.READ, EngineClass.SM)
    assert isinstance(res2, Miss)  # cpu-resident: benign migrate first


def test_vmm_aliasing_counts_pages_once():
    w, pid = fresh()
    other = machine.create_client(w, "standalone").pid
    before = w.mem.client_pages()
    handle, _ = w.mem.vmm_create_map(w, pid, 16 * PAGE_SIZE)
    w.mem.vmm_map(w, other, handle)
    assert w.mem.client_pages() == before + 16
    assert w.mem.allocations[handle].refcount == 2  # two mappings


def test_aliased_allocation_survives_owner_release():
    w, pid = fresh()
    other = machine.create_client(w, "standalone").pid
    handle, rng_a = w.mem.vmm_create_map(w, pid, 4 * PAGE_SIZE)
    rng_b = w.mem.vmm_map(w, other, handle)
    w.mem.destroy_range(w, rng_a)
    assert handle in w.mem.allocations
    assert w.mem.allocations[handle].refcount == 1
    w.mem.destroy_range(w, rng_b)
    assert handle not in w.mem.allocations


def test_vmm_map_of_unknown_handle_raises():
    w, pid = fresh()
    with pytest.raises(UnknownHandle):
        w.mem.vmm_map(w, pid, 999)


def test_zombie_requires_managed_kind():
    w, pid = fresh()
    dev = w.mem.alloc_device(w, pid, PAGE_SIZE)
    with pytest.raises(KindMismatch):
        w.mem.make_zombie(w, dev)
    with pytest.raises(KindMismatch):
        w.mem.pin_non_migratable(w, dev)


def test_zombie_frees_backing_but_keeps_the_range():
    w, pid = fresh()
    rng = w.mem.alloc_managed(w, pid, PAGE_SIZE)
    w.mem.populate_page(w, rng, 0)
    pages_before = w.mem.live_pages
    w.mem.make_zombie(w, rng)
    assert rng.lifecycle is Lifecycle.ZOMBIE
    assert w.mem.live_pages == pages_before - 1
    assert w.mem.range_at(pid, rng.base) is rng
    res = w.mem.resolve_va(w, pid, rng.base, AccessType.READ, EngineClass.SM)
    assert isinstance(res, Miss)


def test_pinned_range_cannot_migrate():
    w, pid = fresh()
    rng = w.mem.alloc_managed(w, pid, PAGE_SIZE)
    w.mem.pin_non_migratable(w, rng)
    assert not rng.migratable
    res = w.mem.resolve_va(w, pid, rng.base, AccessType.READ, EngineClass.SM)
    assert isinstance(res, Miss)


def test_hit_on_resident_rw_page():
    w, pid = fresh()
    rng = w.mem.alloc_device(w, pid, PAGE_SIZE)
    res = w.mem.resolve_va(w, pid, rng.base, AccessType.READ, EngineClass.SM)
    assert isinstance(res, Hit)


def test_footprint_conservation_holds_through_a_workout():
    w, pid = fresh()
    w.mem.check_conservation()
    d = w.mem.alloc_device(w, pid, 8 * PAGE_SIZE)
    w.mem.check_conservation()
    m = w.mem.alloc_managed(w, pid, 4 * PAGE_SIZE)
    w.mem.populate_page(w, m, 1)
    w.mem.check_conservation()
    h, v = w.mem.vmm_create_map(w, pid, 2 * PAGE_SIZE)
    w.mem.check_conservation()
    w.mem.make_zombie(w, m)
    w.mem.check_conservation()
    w.mem.destroy_range(w, d)
    w.mem.destroy_range(w, v)
    assert h not in w.mem.allocations
    w.mem.check_conservation()


def test_out_of_physical_pages():
    w = machine.build_world(SimParams(gpu_pages=520, per_process_overhead_pages=0))
    pid = machine.create_client(w, "standalone").pid
    with pytest.raises(OutOfPhysicalPages):
        w.mem.alloc_device(w, pid, 100 * PAGE_SIZE)


def test_dummy_pool_is_singular_prezeroed_and_shared():
    w, pid = fresh()
    assert w.mem.dummy_read("page_4k") == 0
    assert w.mem.dummy_read("chunk_2m") == 0
    assert len(w.mem.dummy_page_4k.pages) == 1
    assert len(w.mem.dummy_chunk_2m.pages) == 512
    # Installing the shared page must not allocate.
    rng = w.mem.alloc_managed(w, pid, PAGE_SIZE)
    before = w.mem.live_pages
    w.mem.install_dummy_page(w, rng, 0)
    assert w.mem.live_pages == before
    assert rng.pages[0].residency is Residency.GPU


def test_external_conversion_preserves_span_and_installs_dummy_chunk():
    w, pid = fresh()
    handle, rng = w.mem.vmm_create_map(w, pid, 2 * PAGE_SIZE)
    w.mem.release_handle(w, handle)
    base, length = rng.base, rng.length
    newr = w.mem.convert_external_to_managed(w, rng)
    assert (newr.base, newr.length) == (base, length)
    assert newr.kind is RangeKind.MANAGED
    assert all(p.backing == ("chunk", w.mem.dummy_chunk_2m.id) for p in newr.pages)
    # The external backing lost its last reference and was freed.
    assert handle not in w.mem.allocations
    w.mem.check_conservation()


def test_content_tag_tracks_writes_deterministically():
    w, pid = fresh()
    h1, _ = w.mem.vmm_create_map(w, pid, PAGE_SIZE)
    h2, _ = w.mem.vmm_create_map(w, pid, PAGE_SIZE)
    for h in (h1, h2):
        w.mem.allocations[h].write_tag(11)
        w.mem.allocations[h].write_tag(22)
    assert w.mem.allocations[h1].content_tag == w.mem.allocations[h2].content_tag
    w.mem.allocations[h1].write_tag(33)
    assert w.mem.allocations[h1].content_tag != w.mem.allocations[h2].content_tag
