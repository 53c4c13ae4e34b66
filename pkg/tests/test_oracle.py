import struct

import pytest
from hypothesis import given, settings, strategies as st

from helpers import single_function
from mend.elf import load_elf_bytes
from mend.errors import FuelExhausted, UndefinedInstruction, UnmappedAccess
from mend.isa import LR, THUMB, imm
from mend.oracle.asm import Asm
from mend.oracle.corpus import (SMALL_PATCH, TEMPLATES, differential_check, generate_corpus, make_case,
                                observe, verify_patched)
from mend.oracle.elfgen import flat
from mend.oracle.interp import DisplacementMismatch, Machine, independent_target, run


def _fn(build):
    a = Asm()
    build(a)
    img, b = single_function(a)
    return img, b.symbols["f"]


def test_straight_line_add():
    img, f = _fn(lambda a: a.i("add", 0, 0, 1, s=True).i("bx", LR))
    assert run(img, f, THUMB, (2, 3)).r0 == 5


def test_loop_and_flags():
    def body(a):
        a.movs(1, 0)
        a.label("f.top").i("add", 1, 1, 0, s=True).i("sub", 0, imm(1), s=True).b("f.top", "ne")
        a.i("mov", 0, 1).i("bx", LR)
    img, f = _fn(body)
    assert run(img, f, THUMB, (4,)).r0 == 10


def test_trap_instruction():
    img = load_elf_bytes(flat(0x1000, 0x100, {0x1000: b"\x00\xde"}))
    with pytest.raises(UndefinedInstruction):
        run(img, 0x1000, THUMB)


def test_fuel_and_wild_access():
    img, f = _fn(lambda a: a.label("f.spin").b("f.spin"))
    with pytest.raises(FuelExhausted):
        run(img, f, THUMB, fuel=100)
    img, f = _fn(lambda a: a.i("ldr", 0, 0, imm(0)).i("bx", LR))
    with pytest.raises(UnmappedAccess):
        run(img, f, THUMB, (0x7000_0000,))


def test_codec_and_bit_decoder_must_agree(monkeypatch):
    # the interpreter recomputes targets from raw bits; a codec that disagrees is a bug
    img = load_elf_bytes(flat(0x1000, 0x100, {0x1000: b"\x00\xe0", 0x1004: b"\x70\x47"}))  # b 0x1004
    ins = Machine(img)._decode(0x1000, THUMB)
    assert independent_target(ins) == ins.target == 0x1004
    import mend.oracle.interp as interp
    monkeypatch.setattr(interp, "independent_target", lambda i: i.target + 2)
    with pytest.raises(DisplacementMismatch):
        Machine(img)._decode(0x1000, THUMB)


def test_instruction_width_consumed():
    def body(a):
        a.i("ldr", 2, 1, imm(0), wide=True).movs(0, 1).i("add", 0, 0, 2, s=True).i("bx", LR)
    img, f = _fn(body)
    m = Machine(img)
    m.r[1] = img.load_segments[0].vaddr
    m.pc, m.mode = f, THUMB
    seen = []
    for _ in range(3):
        ins = m._decode(m.pc, THUMB)
        before = m.pc
        m.step()
        seen.append(ins.width)
        assert m.pc == before + ins.width
    assert seen == [4, 2, 2]


def _self_check(case, fixed):
    syms = case.symbols["fixed"]
    res = differential_check(fixed, fixed, case.vectors + [case.pov], syms, syms, case.params["table_len"])
    return all(ok for _, ok, _ in res)


def test_identical_binaries_pass_all_vectors(small_corpus):
    case = small_corpus[0]
    _, fixed = case.images()
    res = differential_check(fixed, fixed, case.vectors, case.symbols["fixed"], case.symbols["fixed"],
                             case.params["table_len"])
    assert res and all(ok for _, ok, _ in res)


def test_corpus_deterministic():
    a, b = generate_corpus(11, 6), generate_corpus(11, 6)
    assert [(c.vuln, c.fixed) for c in a] == [(c.vuln, c.fixed) for c in b]
    assert [c.manifest() for c in a] == [c.manifest() for c in b]
    assert generate_corpus(12, 1)[0].vuln != a[0].vuln


def test_generate_covers_templates(small_corpus):
    assert [c.template for c in small_corpus] == list(TEMPLATES)
    assert set(SMALL_PATCH) <= set(TEMPLATES)
    assert any(c.name.endswith("stripped") for c in small_corpus)


def test_fixed_passes_own_vectors_and_pov_diverges(small_corpus):
    for case in small_corpus:
        vuln, fixed = case.images()
        assert _self_check(case, fixed), case.name
        # the vulnerable build must fail the pov and nothing else is required of it
        ok, res = verify_patched(case, vuln)
        assert not ok and ("pov", False) in [(n, o) for n, o, _ in res]


def test_observe_reports_faults():
    case = make_case(1, 0, "bounds")
    vuln, _ = case.images()
    got = observe(vuln, {"F": 0x10}, "F", [0, 0], case.params["table_len"])
    assert set(got) == {"fault"}


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(TEMPLATES))
def test_every_generated_case_is_sound(seed, template):
    # make_case itself refuses to emit a case whose pov does not diverge
    case = make_case(seed, 0, template, strip=False)
    _, fixed = case.images()
    assert _self_check(case, fixed)
    assert struct.unpack_from("<4s", case.vuln)[0] == b"\x7fELF"
