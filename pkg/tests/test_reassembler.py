import pytest

from helpers import WALK_STRING, walkthrough_image
from mend.elf import load_elf_bytes
from mend.errors import CapExceeded, UndefinedInstruction, UnmappedAddress
from mend.isa import THUMB, decode
from mend.oracle.corpus import make_case, verify_patched
from mend.oracle.elfgen import flat
from mend.oracle.interp import independent_target, run
from mend.pipeline import patch
from mend.reassembler import TRAP_THUMB, load_data_from


def test_load_data_string_then_double_nul():
    img = walkthrough_image()
    got = load_data_from(img, 0x2400)
    assert got == WALK_STRING and len(got) == 20


def test_load_data_immediate_double_nul():
    assert load_data_from(walkthrough_image(), 0x2400 + len(WALK_STRING)) == b"\0"


def test_load_data_cap():
    img = load_elf_bytes(flat(0x1000, 0x2000, {0x1000: b"\x70\x47", 0x1800: b"A" * 0x1400}))
    with pytest.raises(CapExceeded):
        load_data_from(img, 0x1800)
    with pytest.raises(UnmappedAddress):
        load_data_from(img, 0x9000_0000)


@pytest.fixture(scope="module")
def bounds():
    case = make_case(1, 0, "bounds")
    vuln, fixed = case.images()
    return case, vuln, patch(vuln, fixed, case.functions)


def test_bounds_patched_and_verified(bounds):
    case, _, out = bounds
    [r] = out.results
    assert r.status == "patched", r.error
    ok, res = verify_patched(case, load_elf_bytes(out.image.bytes))
    assert ok, [x for x in res if not x[1]]


def test_vuln_region_redirect_then_trap(bounds):
    _, vuln, out = bounds
    plan = out.results[0].plan
    lo, hi = plan.vuln_region
    img = out.image
    br = decode(img.read(lo, 4), lo, THUMB)
    assert br.mnemonic == "b" and br.target == plan.redirect[1]
    rest = img.read(lo + br.width, hi - lo - br.width)
    assert rest == TRAP_THUMB * (len(rest) // 2)
    if rest:
        # falling into the trap fill stops the interpreter
        with pytest.raises(UndefinedInstruction):
            run(img, lo + br.width, THUMB)
    # everything outside the region and the redirect is untouched
    before, after = vuln.bytes, img.bytes
    changed = [i for i in range(len(before)) if before[i] != after[i]]
    lo_off, hi_off = vuln.vaddr_to_offset(lo), vuln.vaddr_to_offset(hi - 1) + 1
    assert all(lo_off <= i < hi_off for i in changed if i < len(before) and i >= 0x40)


def test_decode_back_matches_intent(bounds):
    _, _, out = bounds
    plan = out.results[0].plan
    img = out.image
    for ins in plan.emitted:
        got = decode(img.read(ins.addr, ins.width), ins.addr, THUMB)
        assert got.raw == ins.raw
    for at, dest in plan.intended.items():
        raw = img.read(at, 4) if img.is_mapped(at, 4) else img.read(at, 2)
        got = decode(raw, at, THUMB)
        assert got.target == dest
        assert independent_target(got) == dest, str(got)


def test_region_doubles_when_too_small():
    case = make_case(2, 3, "widen")
    vuln, fixed = case.images()
    out = patch(vuln, fixed, case.functions, region_size=32)
    [r] = out.results
    assert r.status == "patched", r.error
    assert out.region.size > 32 and r.plan.bytes_used <= out.region.size
    assert verify_patched(case, load_elf_bytes(out.image.bytes))[0]


def test_widen_ledger_accounts_for_every_shift():
    case = make_case(1, 3, "widen")
    vuln, fixed = case.images()
    out = patch(vuln, fixed, case.functions)
    plan = out.results[0].plan
    assert plan.shift_ledger and plan.shift_total > 0
    assert all(r.delta > 0 for r in plan.shift_ledger)
    src = sorted(plan.placements)
    base_src, base_dst = src[0], plan.placements[src[0]]
    for a in src:
        moved = sum(r.delta for r in plan.shift_ledger if r.cause < a)
        assert plan.placements[a] - base_dst == a - base_src + moved, hex(a)


def test_patch_only_callee_is_transplanted():
    case = make_case(1, 4, "helper", strip=False)
    vuln, fixed = case.images()
    out = patch(vuln, fixed, case.functions)
    plan = out.results[0].plan
    assert out.results[0].status == "patched", out.results[0].error
    entries = [e for e, _ in plan.pending_functions]
    assert case.symbols["fixed"]["clamp_index"] in entries
    assert verify_patched(case, load_elf_bytes(out.image.bytes))[0]


def test_noop_returns_input_unchanged():
    case = make_case(1, 0, "bounds")
    vuln, _ = case.images()
    out = patch(vuln, vuln, ["F"])
    assert not out.changed and out.image.bytes == vuln.bytes
    assert out.results[0].status == "noop"


def test_abort_leaves_binary_unchanged():
    case = make_case(1, 0, "bounds")
    vuln, fixed = case.images()
    out = patch(vuln, fixed, ["missing"])
    assert out.results[0].status == "aborted:FunctionNotFound"
    assert out.image.bytes == vuln.bytes
