import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amepim import layout as L
from amepim.device import DEFAULT_BANK_CAPACITY, CmdKind, DeviceConfig, PseudoChannel
from amepim.errors import LayoutError
from amepim.layout import Residency, TileRegion, TileRegisterTable, addr_of

CAP = 1 << 18


def small_device(record=False):
    return PseudoChannel(DeviceConfig(bank_capacity=CAP), record=record)


def locate_by_enumeration(rows, cols, residency):
    """Pack a matrix of unique tags and find where each tag landed."""
    dev = small_device()
    region = TileRegion(0, residency, rows, cols)
    tags = (np.arange(rows * cols, dtype=np.uint32) + 1).astype(np.uint16).reshape(rows, cols)
    L.pack(dev, tags, region)
    where = {}
    for bank in range(16):
        for off in np.nonzero(dev.state.banks[bank])[0]:
            where[int(dev.state.banks[bank, off])] = (bank, 2 * int(off))
    return tags, where


def test_addr_of_examples():
    r = TileRegion(0, Residency.EVEN, 128, 4096)
    assert addr_of(r, 0, 0) == (0, 0)
    assert addr_of(r, 17, 3) == (2, 98)
    assert addr_of(r, 127, 4095) == (14, 131070)
    assert addr_of(TileRegion(256, Residency.ODD, 128, 8), 17, 3) == (3, 256 + 98)


@pytest.mark.parametrize("res", list(Residency))
def test_addr_of_matches_enumeration_oracle(res):
    tags, where = locate_by_enumeration(128, 8, res)
    region = TileRegion(0, res, 128, 8)
    for r in range(128):
        for c in range(8):
            assert addr_of(region, r, c) == where[int(tags[r, c])]


def test_addr_of_injective_and_aligned():
    region = TileRegion(4096, Residency.EVEN, 128, 64)
    seen = set()
    for r in range(128):
        for c in range(64):
            bank, off = addr_of(region, r, c)
            assert (bank, off) not in seen
            seen.add((bank, off))
            assert (off - 2 * (r % 16)) % 32 == 0  # lane 0 of each block is 32-byte aligned
    with pytest.raises(LayoutError):
        addr_of(region, 128, 0)
    with pytest.raises(LayoutError):
        addr_of(region, 0, 64)


def test_region_validation():
    with pytest.raises(LayoutError):
        TileRegion(0, Residency.EVEN, 129, 8)
    with pytest.raises(LayoutError):
        TileRegion(0, Residency.EVEN, 8, 4097)
    with pytest.raises(LayoutError):
        TileRegion(100, Residency.EVEN, 8, 8)


def test_pack_round_trips(rng):
    dev = small_device()
    one = np.array([[0x3C00]], np.uint16)
    r1 = TileRegion(0, Residency.EVEN, 1, 1)
    L.pack(dev, one, r1)
    assert np.array_equal(L.unpack(dev, r1), one)
    m = rng.integers(0, 0x10000, (128, 64)).astype(np.uint16)
    r = TileRegion(4096, Residency.ODD, 128, 64)
    L.pack(dev, m, r)
    assert np.array_equal(L.unpack(dev, r), m)


def test_pack_zero_fills_padding(rng):
    dev = small_device()
    big = TileRegion(0, Residency.EVEN, 128, 16)
    L.pack(dev, np.full((128, 16), 0x1234, np.uint16), big)
    small = rng.integers(1, 0x7000, (20, 5)).astype(np.uint16)
    n = L.pack(dev, small, big)
    assert n == 8 * 16
    out = L.unpack(dev, big)
    assert np.array_equal(out[:20, :5], small)
    assert not out[20:].any() and not out[:, 5:].any()


def test_pack_dimension_overflow():
    with pytest.raises(LayoutError):
        L.pack_commands(np.zeros((9, 8), np.uint16), TileRegion(0, Residency.EVEN, 8, 8))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 128), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_pack_unpack_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    dev = small_device()
    m = rng.integers(0, 0x10000, (rows, cols)).astype(np.uint16)
    region = TileRegion(512, Residency.EVEN if seed % 2 else Residency.ODD, rows, cols)
    L.pack(dev, m, region)
    assert np.array_equal(L.unpack(dev, region), m)


def test_max_tile_is_tlen_bits():
    region = L.home_region("tr0")
    assert region.nbytes * 8 * 8 == 2**23       # 8 even banks
    assert region.nbytes == 4096 * 32


def test_four_tiles_and_four_accumulators_fit():
    regions = [L.home_region(r) for r in L.REGISTERS]
    t = TileRegisterTable()
    for name, region in zip(L.REGISTERS, regions):
        region.check_capacity(DEFAULT_BANK_CAPACITY)
        t.remap(name, region)
    assert max(r.end for r in regions) <= L.STAGING_BASE
    assert L.POOL_BASE + L.SLOT_BYTES <= DEFAULT_BANK_CAPACITY


def test_remap_alias_and_overlap():
    t = TileRegisterTable()
    tr0 = L.home_region("tr0", 128, 64)
    t.remap("tr0", tr0)
    t.remap("tr1", t.get("tr0"))       # mmov: pointer copy
    assert t.get("tr1") == tr0 and t.shared("tr0")
    assert addr_of(t.get("tr1"), 1, 1) == addr_of(tr0, 1, 1)
    with pytest.raises(LayoutError, match="overlaps"):
        t.remap("tr2", TileRegion(tr0.base + 256, Residency.EVEN, 8, 8))
    t.remap("acc0", TileRegion(tr0.base, Residency.ODD, 8, 8))  # other residency is fine
    moved = TileRegion(L.home_region("tr3").base, Residency.EVEN, 128, 64)
    t.remap("tr1", moved)
    assert addr_of(t.get("tr1"), 0, 2) == (0, moved.base + 64)


def test_remap_produces_no_column_writes():
    dev = small_device(record=True)
    t = TileRegisterTable()
    t.remap("tr0", TileRegion(0, Residency.EVEN, 16, 8))
    t.remap("tr1", t.get("tr0"))
    assert not [e for e in dev.trace if e.command.kind is CmdKind.COL_WRITE]


def test_relocate_noop_and_copy(rng):
    dev = small_device(record=True)
    t = TileRegisterTable()
    m = rng.integers(0, 0x10000, (40, 20)).astype(np.uint16)
    src = TileRegion(L.TILE_BASE, Residency.ODD, 40, 20)
    L.pack(dev, m, src)
    t.remap("acc0", src)
    assert L.relocate(t, "acc0", Residency.ODD, CAP).copies == []
    plan = L.relocate(t, "acc0", Residency.EVEN, CAP)
    assert plan.commands == 2 * 3 * 24      # ceil(40/16) units x ceil8(20) blocks, read + write
    n0 = len(dev.trace)
    L.execute_relocation(dev, plan)
    assert len(dev.trace) - n0 == plan.commands
    assert t.get("acc0").residency is Residency.EVEN
    assert np.array_equal(L.unpack(dev, t.get("acc0")), m)


def test_fresh_slots_exhaust():
    t = TileRegisterTable()
    cap = L.POOL_BASE + L.SLOT_BYTES
    for i, reg in enumerate(["tr0", "tr1", "tr2", "tr3", "acc0"]):
        base = t.fresh(Residency.EVEN, cap)
        t.remap(reg, TileRegion(base, Residency.EVEN, 128, 4096))
    with pytest.raises(LayoutError, match="no free"):
        t.fresh(Residency.EVEN, cap)


def test_matrix_files(tmp_path, rng):
    m = rng.integers(0, 0x10000, (3, 5)).astype(np.uint16)
    p = tmp_path / "m.mat"
    L.write_matrix(p, m)
    data = p.read_bytes()
    assert data[:7] == b"AMEM16\0" and len(data) == 7 + 8 + 30
    assert np.array_equal(L.read_matrix(p), m)
    c = tmp_path / "m.csv"
    c.write_text("1.0,2.5\n-0.5,65504\n")
    assert L.read_matrix(c).tolist() == [[0x3C00, 0x4100], [0xB800, 0x7BFF]]
    (tmp_path / "bad.mat").write_bytes(b"AMEM16\0" + bytes(8) + b"xx")
    with pytest.raises(LayoutError):
        L.read_matrix(tmp_path / "bad.mat")
