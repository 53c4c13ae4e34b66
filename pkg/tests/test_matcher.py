import pytest
from hypothesis import given, settings, strategies as st

from helpers import single_function
from mend.errors import FunctionNotFound
from mend.flow import build_cfg
from mend.isa import LR, imm
from mend.matcher import block_key, is_perfect_match, is_trampoline, match_functions, real_blocks
from mend.oracle.asm import Asm
from mend.oracle.corpus import make_case
from mend.pipeline import analyze


def _analyze(case):
    v, f = case.images()
    fp = match_functions(v, f, case.functions)[0]
    ms, _, _ = analyze(v, f, fp)
    return fp, ms


def test_bounds_fix_two_blocks_each_side():
    # both comparisons of the guard changed: two unmatched blocks per side
    fp, ms = _analyze(make_case(1, 0, "bounds"))
    c = ms.counts()
    assert c["unmatched_patch_blocks"] == 2 and c["unmatched_vuln_blocks"] == 2
    assert fp.how_matched == "symbol"
    for p in ms.pairs:
        if p.perfect:
            assert is_perfect_match(p.vuln_block, p.patch_block)


def test_identical_binaries_noop():
    case = make_case(1, 0, "bounds")
    v, _ = case.images()
    fp = match_functions(v, v, ["F"])[0]
    ms, _, _ = analyze(v, v, fp)
    assert ms.is_noop and ms.counts()["unmatched_patch_blocks"] == 0


def test_stripped_vuln_uses_similarity():
    case = make_case(1, 4, "helper", strip=True)
    v, f = case.images()
    assert "F" not in v.symbols
    fp = match_functions(v, f, ["F"])[0]
    assert fp.how_matched == "similarity" and fp.score >= 0.8
    assert fp.vuln_entry == case.symbols["vuln"]["F"]


def test_unknown_function():
    v, f = make_case(1, 0, "bounds").images()
    with pytest.raises(FunctionNotFound):
        match_functions(v, f, ["no_such_function"])


def test_width_ignored_in_perfect_match():
    def fn(wide):
        a = Asm()
        a.i("ldr", 0, 1, imm(4), wide=wide).i("add", 0, 0, 1, s=True).i("bx", LR)
        img, b = single_function(a)
        return build_cfg(img, b.symbols["f"])
    x, y = fn(False), fn(True)
    bx, by = x.blocks[x.entry], y.blocks[y.entry]
    assert bx.size != by.size and is_perfect_match(bx, by)


def test_immediate_difference_breaks_match():
    def fn(v):
        a = Asm()
        a.i("cmp", 0, imm(v)).i("bx", LR)
        img, b = single_function(a)
        return build_cfg(img, b.symbols["f"])
    x, y = fn(3), fn(4)
    assert not is_perfect_match(x.blocks[x.entry], y.blocks[y.entry])


@pytest.mark.parametrize("template", ["bounds", "fallback", "diag", "widen", "helper", "global"])
def test_against_ground_truth(template):
    case = make_case(7, 3, template, strip=False)
    _, ms = _analyze(case)
    region = {b.start for b in ms.patch_region}
    gt = case.ground_truth
    # every block the fix touched is transplanted
    assert set(gt["fixed"]["changed"]) <= region
    # every untouched named block outside the region pairs with its twin
    trampolines = {b.start for b in ms.patch_cfg.blocks.values() if is_trampoline(b)}
    for v, p in gt["pairs"]:
        if p not in region and p not in trampolines:
            assert ms.block_map.get(p) == v, (hex(v), hex(p))
    # the region is one address-contiguous run of fixed blocks
    blocks = sorted(ms.patch_region, key=lambda b: b.start)
    for a, b in zip(blocks, blocks[1:]):
        assert a.end == b.start
    assert ms.vuln_region[0] <= ms.vuln_region[1]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["bounds", "global", "fallback"]))
def test_block_map_injective_and_perfect(seed, template):
    case = make_case(seed, 0, template, strip=False)
    _, ms = _analyze(case)
    assert len(set(ms.block_map.values())) == len(ms.block_map)
    reals = {b.start: b for b in real_blocks(ms.vuln_cfg)}
    for p, v in ms.block_map.items():
        pb = ms.patch_cfg.blocks[p]
        assert block_key(pb) == block_key(ms.vuln_cfg.blocks[v])
        assert v in reals or v in ms.vuln_cfg.blocks
