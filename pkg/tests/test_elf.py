import pytest
from hypothesis import given, settings, strategies as st

from mend.elf import (EHDR, alloc_patch_region, emit_elf, load_elf, load_elf_bytes,
                      program_headers, write_bytes)
from mend.errors import IoError, NotElf, OutsideEditableRange, TruncatedFile, UnmappedAddress, UnsupportedArch
from mend.isa import LR, PC, THUMB
from mend.oracle.asm import Asm
from mend.oracle.elfgen import DataObject, Function, Program, build, flat


def _prog(slack=0, strip=False):
    a = Asm()
    a.push(4, LR).movs(0, 7).pop(4, PC)
    g = Asm()
    g.ldr_lit(0, 0x1234).i("bx", LR).pool()
    return Program(functions=[Function("f", a.pool()), Function("g", g)],
                   objects=[DataObject("buf", bytes(16)), DataObject("msg", b"hi\0", writable=False)],
                   imports=["puts"], slack=slack, strip=strip)


def _loads(data):
    return [(p[1], p[2]) for p in program_headers(data) if p[0] == 1]


def test_minimal_single_load():
    elf = flat(0x8000, 0x100, {0x8000: b"\x70\x47"})  # bx lr
    img = load_elf_bytes(elf)
    assert len(img.load_segments) == 1
    assert img.mode_hint(0x8000) in (None, THUMB)


def test_sections_symbols_plt():
    b = build(_prog())
    img = load_elf_bytes(b.elf)
    assert img.symbols["f"].vaddr & ~1 == b.symbols["f"] and img.symbols["f"].kind == "func"
    assert "puts" in img.plt_stubs.values()
    assert img.sections


def test_stripped_section_headers():
    b = build(_prog(strip=True))
    data = bytearray(b.elf)
    # drop the section table entirely
    hdr = list(EHDR.unpack_from(data))
    hdr[6], hdr[11], hdr[12], hdr[13] = 0, 0, 0, 0
    EHDR.pack_into(data, 0, *hdr)
    img = load_elf_bytes(bytes(data))
    assert img.sections == [] and img.load_segments


def test_elf64_rejected():
    data = bytearray(build(_prog()).elf)
    data[4] = 2  # ELFCLASS64
    with pytest.raises(UnsupportedArch):
        load_elf_bytes(bytes(data))


def test_big_endian_rejected():
    data = bytearray(build(_prog()).elf)
    data[5] = 2
    with pytest.raises(UnsupportedArch):
        load_elf_bytes(bytes(data))


def test_not_elf_and_truncated():
    with pytest.raises(NotElf):
        load_elf_bytes(b"\x7fELG" + bytes(60))
    with pytest.raises(TruncatedFile):
        load_elf_bytes(build(_prog()).elf[:40])


def test_round_trip_identity(tmp_path):
    elf = build(_prog()).elf
    src = tmp_path / "in.elf"
    src.write_bytes(elf)
    out = tmp_path / "out.elf"
    emit_elf(load_elf(str(src)), str(out))
    assert out.read_bytes() == elf


def test_in_place_extension_when_slack():
    b = build(_prog(slack=0x3000))
    img = load_elf_bytes(b.elf)
    before = program_headers(img.bytes)
    region = alloc_patch_region(img, 4096)
    assert region.in_place
    after = program_headers(img.bytes)
    assert len(before) == len(after)
    for x, y in zip(before, after):
        # only filesz/memsz of the extended segment may change
        assert x[:4] == y[:4] and x[6:] == y[6:]
    assert img.is_executable(region.vaddr)


def test_append_segment_without_slack():
    elf = build(_prog()).elf
    img = load_elf_bytes(elf)
    region = alloc_patch_region(img, 4096)
    assert not region.in_place
    assert _loads(img.bytes)[:len(_loads(elf))] == _loads(elf)
    assert any(s.name == ".patch" for s in img.sections)
    # file contents of the original segments are untouched
    for seg in load_elf_bytes(elf).load_segments:
        lo = max(seg.offset, EHDR.size)  # the ELF header points at the new tables
        assert img.bytes[lo:seg.offset + seg.filesz] == elf[lo:seg.offset + seg.filesz]
    assert img.is_executable(region.vaddr) and img.is_executable(region.end - 1)


def test_zero_size_rejected():
    img = load_elf_bytes(build(_prog()).elf)
    with pytest.raises(ValueError):
        alloc_patch_region(img, 0)


def test_write_locality_and_bounds():
    elf = build(_prog()).elf
    img = load_elf_bytes(elf)
    region = alloc_patch_region(img, 256)
    base = bytes(img.bytes)
    write_bytes(img, region.vaddr, b"\x01\x02\x03\x04")
    diff = [i for i in range(len(base)) if base[i] != img.bytes[i]]
    assert len(diff) == 4
    with pytest.raises(OutsideEditableRange):
        write_bytes(img, region.end - 2, b"\0\0\0\0")
    with pytest.raises(UnmappedAddress):
        write_bytes(img, 0x7000_0000, b"\0")


def test_data_slot_round_trip(tmp_path):
    img = load_elf_bytes(build(_prog()).elf)
    region = alloc_patch_region(img, 256)
    slot = region.alloc_data(8)
    write_bytes(img, slot, b"abcdefg\0")
    path = tmp_path / "p.elf"
    emit_elf(img, str(path))
    assert load_elf(str(path)).read(slot, 8) == b"abcdefg\0"


def test_emit_unwritable(tmp_path):
    img = load_elf_bytes(build(_prog()).elf)
    with pytest.raises(IoError):
        emit_elf(img, str(tmp_path / "missing-dir" / "x.elf"))


def test_region_cursors():
    img = load_elf_bytes(build(_prog()).elf)
    r = alloc_patch_region(img, 64)
    a = r.alloc_code(10)
    d = r.alloc_data(8)
    assert a == r.vaddr and d == r.end - 8
    assert r.code_cursor <= r.data_cursor


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 0x4000).map(lambda s: s & ~0xF), st.integers(16, 0x3000))
def test_layout_preservation(slack, size):
    elf = build(_prog(slack=slack)).elf
    img = load_elf_bytes(elf)
    old = _loads(elf)
    alloc_patch_region(img, size)
    new = _loads(img.bytes)
    assert new[:len(old)] == old
    # every pre-existing mapping translates as before, so pairwise distances
    # (code to GOT in particular) cannot have moved
    ref = load_elf_bytes(elf)
    for seg in ref.load_segments:
        for a in (seg.vaddr, seg.vaddr + seg.filesz - 1):
            assert img.vaddr_to_offset(a) == ref.vaddr_to_offset(a)
