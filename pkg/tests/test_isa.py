import struct

import pytest
from hypothesis import given, settings, strategies as st

from mend.errors import MendError, Misaligned, OutOfRange, UnknownEncoding
from mend.isa import (ARM, LOAD, PC, TEMPLATES, THUMB, decode, disassemble, encode,
                      imm, literal, reencode, reg, target, widen_delta, word_to_bytes)


def test_ldr_literal_uses_aligned_pc():
    ins = encode("ldr", (reg(1), literal(0x1020)), 0x1004, THUMB)
    assert ins.width == 2
    back = decode(ins.raw, 0x1004, THUMB)
    assert back.operands[1].kind == LOAD
    assert back.target == 0x1020 == ((0x1004 + 4) & ~3) + 0x18


def test_add_pc_reads_address_plus_four():
    ins = decode(encode("add", (reg(1), reg(PC)), 0x100C).raw, 0x100C)
    assert ins.mnemonic == "add" and ins.operands == (reg(1), reg(PC))
    assert ins.uses_pc_value and ins.pc == 0x1010


def test_undefined_thumb_pattern_rejected():
    # 0xB1xx is cbz, deliberately outside the subset
    with pytest.raises(UnknownEncoding):
        decode(struct.pack("<H", 0xB100), 0x2000)


def test_it_block_not_supported():
    with pytest.raises(UnknownEncoding):
        decode(struct.pack("<H", 0xBF08), 0x2000)  # it eq


def test_short_conditional_branch_is_t1():
    ins = encode("b", (target(0x4026),), 0x4018, THUMB, cond=12)  # bgt
    assert ins.width == 2 and ins.encoding == "b.T1"
    assert ins.target - ins.pc == 10


def test_far_conditional_branch_is_t3():
    ins = encode("b", (target(0x4026),), 0xF018, THUMB, cond=12)
    assert ins.width == 4 and ins.encoding == "b.T3"
    assert decode(ins.raw, 0xF018).target == 0x4026


def test_unconditional_branch_beyond_16m_out_of_range():
    with pytest.raises(OutOfRange):
        encode("b", (target(0x2000000),), 0x1000, THUMB)


def test_widen_delta_cases():
    near = encode("b", (target(0x1010),), 0x1000, THUMB, cond=0)
    assert widen_delta(near, 0x2000, 0x2010) == 0
    assert widen_delta(near, 0x2000, 0x2200) == 2
    wide = encode("b", (target(0x9000),), 0x1000, THUMB, cond=0)
    assert wide.width == 4
    assert widen_delta(wide, 0x1000, 0x1010) == 0  # never narrowed


def test_misaligned_thumb_address():
    with pytest.raises(Misaligned):
        encode("mov", (reg(0), reg(1)), 0x1001, THUMB)


def test_arm_branch_and_literal():
    b = encode("bl", (target(0x9000),), 0x8000, ARM)
    assert b.width == 4 and decode(b.raw, 0x8000, ARM).target == 0x9000
    ld = encode("ldr", (reg(2), literal(0x8100)), 0x8000, ARM)
    assert decode(ld.raw, 0x8000, ARM).target == 0x8100


def test_blx_immediate_target_is_word_aligned_in_thumb():
    ins = encode("blx", (target(0x2000),), 0x1002, THUMB)
    assert decode(ins.raw, 0x1002).target == 0x2000


def test_disassemble_stops_at_undecodable():
    data = encode("mov", (reg(0), reg(1)), 0).raw + struct.pack("<H", 0xB100)
    assert len(disassemble(data, 0)) == 1


# -- properties --------------------------------------------------------------------

def _tpl_words(limit):
    for tpl in TEMPLATES:
        for w in tpl.field_words(limit):
            yield tpl, w


def test_round_trip_sampled():
    """Light version of the exhaustive acceptance run."""
    n = 0
    for tpl, w in _tpl_words(64):
        raw = word_to_bytes(w, tpl.width, tpl.mode)
        try:
            ins = decode(raw, 0x8000, tpl.mode)
        except MendError:
            continue
        back = encode(ins.mnemonic, ins.operands, 0x8000, ins.mode, ins.cond, ins.setflags, ins.width)
        again = decode(back.raw, 0x8000, tpl.mode)
        assert (again.mnemonic, again.operands, again.width, again.cond, again.setflags) == \
               (ins.mnemonic, ins.operands, ins.width, ins.cond, ins.setflags), str(ins)
        n += 1
    assert n > 2000


thumb_addr = st.integers(0x1000, 0x400000).map(lambda a: a & ~1)


@settings(max_examples=300, deadline=None)
@given(thumb_addr, st.integers(-(1 << 21), 1 << 21).map(lambda d: d & ~1), st.integers(0, 14))
def test_branch_range_soundness(addr, disp, cond):
    dest = addr + 4 + disp
    try:
        ins = encode("b", (target(dest),), addr, THUMB, cond=cond)
    except OutOfRange:
        return
    assert decode(ins.raw, addr).target == dest & 0xFFFFFFFF


@settings(max_examples=300, deadline=None)
@given(thumb_addr, st.integers(-4000, 4000).map(lambda d: d & ~3))
def test_literal_load_range_soundness(addr, disp):
    dest = ((addr + 4) & ~3) + disp
    try:
        ins = encode("ldr", (reg(3), literal(dest)), addr, THUMB)
    except OutOfRange:
        return
    got = decode(ins.raw, addr)
    assert got.target == dest
    assert got.target % 4 == 0  # pc-literal base is word aligned


@settings(max_examples=300, deadline=None)
@given(thumb_addr, thumb_addr, st.integers(-300, 300).map(lambda d: d & ~1), st.integers(0, 14))
def test_widening_monotone(src, dst, disp, cond):
    try:
        old = encode("b", (target(src + 4 + disp),), src, THUMB, cond=cond)
        new_target = dst + 4 + disp * 7
        delta = widen_delta(old, dst, new_target)
    except OutOfRange:
        return
    assert delta >= 0
    assert reencode(old, dst, new_target).width >= old.width


@settings(max_examples=200, deadline=None)
@given(thumb_addr, st.sampled_from(["mov", "add", "cmp"]), st.integers(0, 7), st.integers(0, 255))
def test_thumb_alignment(addr, mnem, rd, value):
    ops = (reg(rd), imm(value))
    ins = encode(mnem, ops, addr, THUMB, setflags=mnem != "cmp")
    assert ins.addr % 2 == 0 and ins.width in (2, 4)
