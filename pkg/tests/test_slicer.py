import random

import pytest
from hypothesis import given, settings, strategies as st

from helpers import WALK_ADD, WALK_GLOBAL, WALK_LITERAL, WALK_PLACED_ADD, walkthrough_image, single_function
from mend.errors import Inconsistent, NonAffine, SliceEscapes, Underdetermined
from mend.flow import build_cfg, build_dfg, extract_references, global_loc
from mend.isa import LR, PC, imm
from mend.oracle.asm import Asm
from mend.oracle.elfgen import DataObject
from mend.oracle.slicegen import check, random_system, reval
from mend.slicer import (Const, EquationSystem, Op, Slot, Var, backward_slice, build_equations,
                         dump_slice, solve, solve_reference)


@pytest.fixture(scope="module")
def walk():
    cfg = build_cfg(walkthrough_image(), 0x1000)
    dfg = build_dfg(cfg)
    ref = next(r for r in extract_references(cfg, dfg)
               if r.kind == "data" and r.dst_addr == 0x100E and r.memloc == global_loc(0x2400))
    return dfg, ref


def test_walkthrough_slice_shape(walk):
    dfg, ref = walk
    stmts, target = backward_slice(dfg, ref, {})
    assert [s.instr.addr for s in stmts] == [0x1004, WALK_ADD]
    text = dump_slice(stmts)
    assert f"[{WALK_LITERAL:#x}:data]" in text and "INT_ADD" in text


def test_walkthrough_after_placement(walk):
    dfg, ref = walk
    res = solve_reference(dfg, ref, {WALK_ADD: WALK_PLACED_ADD}, WALK_GLOBAL)
    [(slot, value)] = res.assignments
    assert slot.orig_addr == WALK_LITERAL
    assert value == WALK_GLOBAL - (WALK_PLACED_ADD + 4) == 0x11F0


def test_walkthrough_unmoved(walk):
    dfg, ref = walk
    [(_, value)] = solve_reference(dfg, ref, {}, WALK_GLOBAL).assignments
    assert value == 0x14F0


@settings(max_examples=200, deadline=None)
@given(st.integers(0x1000, 0x7FFFFF).map(lambda a: a & ~1), st.integers(0, 0xFFFFFFFF))
def test_walkthrough_any_placement(walk, placed, required):
    dfg, ref = walk
    [(_, value)] = solve_reference(dfg, ref, {WALK_ADD: placed}, required).assignments
    assert (value + placed + 4) & 0xFFFFFFFF == required


def _slot(addr, free=True, value=0):
    return Slot(ins_addr=addr, orig_addr=addr + 0x100, value=value, free=free)


def test_non_affine_opcode_rejected():
    x = Var("r1", 1)
    ops = [Op(x, "INT_MULT", (_slot(0x10), Const(3)))]

    class Stmt:  # duck-typed slice statement
        instr = None
        ir = ops
    with pytest.raises(NonAffine):
        build_equations([Stmt()], x, 5)


def test_non_affine_instruction_in_slice():
    def mk(lit):
        a = Asm()
        a.ldr_lit(1, lit).i("lsl", 1, 1, imm(1), s=True).label("f.k").i("add", 1, PC)
        a.i("ldrb", 0, 1, imm(0)).i("bx", LR)
        return single_function(a, objects=[DataObject("buf", bytes(16))])
    # two passes so that (literal << 1) + pc really points at buf
    _, b = mk(0)
    img, b = mk((b.symbols["buf"] - (b.labels["f.k"] + 4)) // 2)
    cfg = build_cfg(img, b.symbols["f"])
    dfg = build_dfg(cfg)
    [ref] = [r for r in extract_references(cfg, dfg) if r.kind == "data"]
    assert ref.memloc == global_loc(b.symbols["buf"])
    with pytest.raises(NonAffine):
        solve_reference(dfg, ref, {}, 0x4000)


def test_two_free_slots_underdetermined():
    x, y = Var("r1", 1), Var("r2", 1)
    sys = EquationSystem([Op(x, "COPY", (_slot(0x10),)), Op(y, "INT_ADD", (x, _slot(0x14)))], y, 7,
                         [_slot(0x10), _slot(0x14)])
    with pytest.raises(Underdetermined):
        solve(sys)


def test_pinned_chain_inconsistent():
    x = Var("r1", 1)
    s = _slot(0x10, free=False, value=4)
    sys = EquationSystem([Op(x, "INT_ADD", (s, Const(1)))], x, 6, [s])
    with pytest.raises(Inconsistent):
        solve(sys)
    sys.required = 5
    assert solve(sys).assignments == []


def test_even_coefficient():
    x, y = Var("r1", 1), Var("r1", 2)
    s = _slot(0x10)
    ops = [Op(x, "COPY", (s,)), Op(y, "INT_ADD", (x, x))]
    with pytest.raises(Inconsistent):
        solve(EquationSystem(ops, y, 7, [s]))
    res = solve(EquationSystem(ops, y, 8, [s]))
    assert check(EquationSystem(ops, y, 8, [s]), res.as_dict())


def test_undefined_input_escapes():
    x = Var("r1", 1)

    class Stmt:
        instr = None
        ir = [Op(x, "INT_ADD", (Var("r3", 7), Const(1)))]
    with pytest.raises(SliceEscapes):
        build_equations([Stmt()], x, 1)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_systems_solve(seed):
    sys, secret = random_system(random.Random(seed))
    res = solve(sys)
    assert check(sys, res.as_dict())
    free = [s for s in sys.slots if s.free]
    if free:
        # the secret is a witness; any returned root must agree with it on the target
        assert reval(sys, {free[0]: secret}) == sys.required
