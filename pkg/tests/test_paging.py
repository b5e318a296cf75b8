import random
import re

import pytest

from xpg.errors import (
    DoubleMapError,
    NotMappedError,
    OutOfRangeError,
    PageFaultError,
    PoolExhaustedError,
)
from xpg.model import ExpertTensorId, ModelSpec, TensorKind, iter_tensor_ids
from xpg.paging import AddressSpace, PageState, PageTable, page_vaddr, target_layer

SPEC = ModelSpec(num_layers=4, experts_per_layer=3, hidden_dim=8, intermediate_dim=16)


def tid(layer, expert, kind=TensorKind.GATE_UP):
    return ExpertTensorId(layer, expert, kind)


# -- virtual addresses ---------------------------------------------------------


def test_vaddr_base_case():
    space = AddressSpace.for_spec(SPEC)
    assert page_vaddr(tid(1, 1), space) == space.base_gate_up
    assert page_vaddr(tid(1, 1, TensorKind.DOWN), space) == space.base_down


def test_vaddr_formula():
    spec = ModelSpec(4, 8, 5, 5)
    space = AddressSpace(spec, base_gate_up=0, base_down=10**9)
    sigma = spec.sigma_gate_up
    # hand evaluation with L=8: (i-1)*L*sigma + (j-1)*sigma
    assert page_vaddr(ExpertTensorId(2, 3, TensorKind.GATE_UP), space) == 10 * sigma


def test_vaddr_last_page_ends_at_extent():
    space = AddressSpace.for_spec(SPEC)
    last = tid(SPEC.num_layers, SPEC.experts_per_layer, TensorKind.DOWN)
    assert (
        page_vaddr(last, space)
        == space.base_down + space.extent(TensorKind.DOWN) - SPEC.sigma_down
    )


def test_vaddr_regions_disjoint():
    space = AddressSpace.for_spec(SPEC)
    end_gate_up = space.base_gate_up + space.extent(TensorKind.GATE_UP)
    assert end_gate_up <= space.base_down


def test_vaddr_stable_across_mapping_churn():
    table = PageTable(SPEC)
    before = {t: page_vaddr(t, table.space) for t in iter_tensor_ids(SPEC)}
    for t in [tid(1, e) for e in range(1, 4)] + [tid(2, e) for e in range(1, 4)]:
        table.map_page(t)
        table.mark_resident(t)
        table.unmap_page(t)
    after = {t: page_vaddr(t, table.space) for t in iter_tensor_ids(SPEC)}
    assert before == after


def test_vaddr_out_of_range():
    space = AddressSpace.for_spec(SPEC)
    with pytest.raises(OutOfRangeError):
        page_vaddr(tid(5, 1), space)


# -- target layer ---------------------------------------------------------------


@pytest.mark.parametrize(
    "i,n,expected",
    [
        (2, 48, 48),  # wraparound case: second preceding layer of layer 2
        (3, 48, 1),
        (5, 48, 3),
        (1, 8, 7),
        (2, 8, 8),
        (1, 2, 1),
        (2, 2, 2),
    ],
)
def test_target_layer_cases(i, n, expected):
    assert target_layer(i, n) == expected


def test_target_layer_matches_formula_exhaustively():
    for n in (2, 3, 8, 48):
        for i in range(1, n + 1):
            assert target_layer(i, n) == ((i - 3 + n) % n) + 1


# -- mapping lifecycle -----------------------------------------------------------


def test_pool_capacity_and_exhaustion():
    spec = ModelSpec(4, 2, 4, 4)  # 2L = 4 blocks per kind
    table = PageTable(spec)
    mapped = []
    for layer in (1, 2):
        for e in (1, 2):
            mapped.append(table.map_page(ExpertTensorId(layer, e, TensorKind.GATE_UP)))
    assert len({b.block_id for b in mapped}) == 4
    with pytest.raises(PoolExhaustedError):
        table.map_page(ExpertTensorId(3, 1, TensorKind.GATE_UP))
    # the other kind's pool is independent
    table.map_page(ExpertTensorId(3, 1, TensorKind.DOWN))


def test_double_map_rejected():
    table = PageTable(SPEC)
    table.map_page(tid(1, 1))
    with pytest.raises(DoubleMapError):
        table.map_page(tid(1, 1))


def test_lifecycle_and_block_reuse():
    table = PageTable(SPEC)
    block = table.map_page(tid(1, 1))
    assert table.page_state(tid(1, 1)) == PageState.LOADING
    table.mark_resident(tid(1, 1))
    assert table.page_state(tid(1, 1)) == PageState.RESIDENT
    table.unmap_page(tid(1, 1))
    assert table.page_state(tid(1, 1)) == PageState.UNMAPPED
    # freed block is reused, lowest id first
    again = table.map_page(tid(2, 1))
    assert again.block_id == block.block_id


def test_unmap_unmapped_page():
    table = PageTable(SPEC)
    with pytest.raises(NotMappedError):
        table.unmap_page(tid(1, 1))


def test_unmap_loading_page_rejected():
    table = PageTable(SPEC)
    table.map_page(tid(1, 1))
    with pytest.raises(NotMappedError):
        table.unmap_page(tid(1, 1))


def test_reads_fault_unless_resident():
    table = PageTable(SPEC)
    with pytest.raises(PageFaultError):
        table.read_page(tid(1, 1))
    table.map_page(tid(1, 1))
    with pytest.raises(PageFaultError):
        table.read_page(tid(1, 1))  # still loading
    payload = bytes(i % 256 for i in range(SPEC.sigma_gate_up))
    table.loading_view(tid(1, 1))[:] = payload
    table.mark_resident(tid(1, 1))
    assert table.read_page(tid(1, 1)) == payload
    with pytest.raises(PageFaultError):
        table.loading_view(tid(1, 1))  # writes only while loading


def test_arena_peak_bytes():
    spec = ModelSpec(8, 4, 8, 8)
    sigma1, sigma2 = spec.sigma_gate_up, spec.sigma_down
    table = PageTable(spec)
    assert table.arena_peak_bytes() == 0
    # fill both pools completely, then churn
    for layer in (1, 2):
        for e in range(1, 5):
            for kind in (TensorKind.GATE_UP, TensorKind.DOWN):
                t = ExpertTensorId(layer, e, kind)
                table.map_page(t)
                table.mark_resident(t)
    expected = 2 * 4 * (sigma1 + sigma2)
    assert table.arena_peak_bytes() == expected == table.pool_bytes
    for e in range(1, 5):
        for kind in (TensorKind.GATE_UP, TensorKind.DOWN):
            table.unmap_page(ExpertTensorId(1, e, kind))
    assert table.arena_peak_bytes() == expected  # high-water mark sticks


def test_peak_never_exceeds_pool():
    spec = ModelSpec(8, 4, 8, 8)
    assert spec.total_bytes * 2 // spec.num_layers == 2 * 4 * (
        spec.sigma_gate_up + spec.sigma_down
    )


# -- shadow model property -------------------------------------------------------


def test_random_ops_against_shadow_model():
    spec = ModelSpec(6, 4, 4, 4)
    trace = []
    table = PageTable(spec, trace=trace)
    rng = random.Random(1234)
    ids = list(iter_tensor_ids(spec))
    shadow = {}  # tid -> state string
    for _ in range(10_000):
        t = rng.choice(ids)
        op = rng.choice(("map", "resident", "unmap"))
        state = shadow.get(t, "unmapped")
        free_of_kind = 2 * spec.experts_per_layer - sum(
            1 for s, st in shadow.items() if s.kind == t.kind and st != "unmapped"
        )
        if op == "map":
            if state == "unmapped" and free_of_kind > 0:
                table.map_page(t)
                shadow[t] = "loading"
            else:
                with pytest.raises((DoubleMapError, PoolExhaustedError)):
                    table.map_page(t)
        elif op == "resident":
            if state == "loading":
                table.mark_resident(t)
                shadow[t] = "resident"
            else:
                with pytest.raises(NotMappedError):
                    table.mark_resident(t)
        else:
            if state == "resident":
                table.unmap_page(t)
                shadow[t] = "unmapped"
            else:
                with pytest.raises(NotMappedError):
                    table.unmap_page(t)
        table.check_consistency()
    # the emitted trace parses and matches the documented grammar
    pattern = re.compile(
        r"^event=(map|unmap|state) layer=\d+ expert=\d+ kind=[12] block=\d+ t=\d+"
    )
    assert trace and all(pattern.match(line) for line in trace)


def test_block_reuse_outlives_pool_size():
    spec = ModelSpec(6, 2, 4, 4)
    table = PageTable(spec)
    distinct = set()
    for sweep in range(3):  # 3 iterations x 6 layers x 2 experts >> 4 blocks
        for layer in range(1, 7):
            for e in (1, 2):
                t = ExpertTensorId(layer, e, TensorKind.GATE_UP)
                table.map_page(t)
                table.mark_resident(t)
                distinct.add((sweep, t))
                table.unmap_page(t)
    assert len(distinct) == 36
    assert len([b for b in table.blocks.values() if b.kind == TensorKind.GATE_UP]) == 4
