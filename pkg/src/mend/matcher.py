"""Function identification, block matching and reference matching.

Two blocks match perfectly when their instruction sequences agree on
mnemonic, condition, flag-setting and every operand that is not an address
(the width of an encoding is ignored).  A terminating unconditional direct
branch is not part of the comparison: it only encodes layout, and the CFG
edge it produces is compared structurally instead.  Trampoline blocks that
hold nothing but such a branch are looked through when walking the CFG.
"""

from __future__ import annotations

import difflib
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field

from .elf import BinaryImage
from .errors import FunctionNotFound, MendError
from .flow import BasicBlock, Cfg, Reference, build_cfg
from .isa import ARM, THUMB, Instr

log = logging.getLogger(__name__)

SIMILARITY_THRESHOLD = 0.8
MNEMONIC_CLASS = {
    "mov": "move", "movw": "move", "movt": "move",
    "add": "arith", "sub": "arith", "mul": "arith",
    "and": "logic", "orr": "logic", "eor": "logic", "lsl": "logic", "lsr": "logic",
    "cmp": "compare",
    "ldr": "load", "ldrb": "load", "str": "store", "strb": "store",
    "b": "branch", "bl": "call", "blx": "call", "bx": "return",
    "push": "stack", "pop": "stack", "adr": "move",
}
CLASSES = sorted(set(MNEMONIC_CLASS.values())) + ["other"]


@dataclass(frozen=True)
class FunctionPair:
    name: str
    vuln_entry: int
    patch_entry: int
    how_matched: str  # symbol | similarity
    vuln_mode: str = THUMB
    patch_mode: str = THUMB
    score: float = 1.0


@dataclass(frozen=True)
class BlockMatch:
    vuln_block: BasicBlock | None
    patch_block: BasicBlock | None
    perfect: bool


@dataclass(frozen=True)
class RefMatch:
    patch_ref: Reference
    vuln_ref: Reference | None
    vuln_dest: int
    how: str


@dataclass
class MatchSet:
    fpair: FunctionPair
    vuln_cfg: Cfg
    patch_cfg: Cfg
    pairs: list[BlockMatch]
    block_map: dict[int, int]  # patch block start -> vuln block start (perfect pairs)
    patch_region: list[BasicBlock] = field(default_factory=list)
    vuln_region: tuple[int, int] | None = None
    matched_refs: dict[Reference, RefMatch] = field(default_factory=dict)
    memloc_map: dict[int, int] = field(default_factory=dict)  # fixed address -> vuln address
    inner_entries: list[tuple[int, int]] = field(default_factory=list)  # (vuln addr, patch block)
    notes: list[str] = field(default_factory=list)

    @property
    def reverse_map(self) -> dict[int, int]:
        return {v: p for p, v in self.block_map.items()}

    @property
    def is_noop(self) -> bool:
        return not self.patch_region

    def counts(self) -> dict[str, int]:
        perfect = sum(1 for p in self.pairs if p.perfect)
        return {
            "perfect_pairs": perfect,
            "unmatched_patch_blocks": sum(1 for p in self.pairs if not p.perfect and p.patch_block),
            "unmatched_vuln_blocks": sum(1 for p in self.pairs if not p.perfect and p.vuln_block),
        }


# -- perfect match ---------------------------------------------------------------

def _body(block: BasicBlock) -> list[Instr]:
    ins = block.instrs
    if ins and ins[-1].mnemonic == "b" and not ins[-1].is_conditional:
        return ins[:-1]
    return ins


def block_key(block: BasicBlock) -> tuple:
    return tuple(i.match_key() for i in _body(block))


def is_perfect_match(a: BasicBlock, b: BasicBlock) -> bool:
    """Perfect match over block bodies; see the module docstring."""
    ba, bb = _body(a), _body(b)
    if len(ba) != len(bb):
        return False
    return all(x.match_key() == y.match_key() for x, y in zip(ba, bb))


def is_trampoline(block: BasicBlock) -> bool:
    return not _body(block) and block.terminator == "jump"


def _follow(cfg: Cfg, start: int) -> int | None:
    """Resolve chains of trampoline blocks."""
    seen = set()
    while start in cfg.blocks and is_trampoline(cfg.blocks[start]) and start not in seen:
        seen.add(start)
        start = cfg.blocks[start].last.target
    return start if start in cfg.blocks else None


def flow_succs(cfg: Cfg, start: int) -> list[tuple[str, int | None]]:
    """Successors as (role, block) with layout-independent roles.

    A conditional block has ``taken`` and ``not-taken`` successors; any block
    with a single unconditional successor (by fallthrough or by branch) has
    ``next``.
    """
    b = cfg.blocks[start]
    last = b.last
    out: list[tuple[str, int | None]] = []
    if last.mnemonic == "b":
        if last.is_conditional:
            out.append(("taken", _follow(cfg, last.target)))
            out.append(("not-taken", _follow(cfg, last.end)))
        else:
            out.append(("next", _follow(cfg, last.target)))
    elif b.terminator in ("fallthrough", "call-through"):
        out.append(("next", _follow(cfg, b.end)))
    return out


def real_blocks(cfg: Cfg) -> list[BasicBlock]:
    return [b for b in cfg.ordered() if not is_trampoline(b)]


# -- function matching --------------------------------------------------------------

def _features(cfg: Cfg) -> list[float]:
    hist = Counter(MNEMONIC_CLASS.get(i.mnemonic, "other") for i in cfg.instrs())
    calls = sum(1 for i in cfg.instrs() if i.is_call)
    return [float(hist.get(c, 0)) for c in CLASSES] + [float(calls), float(len(cfg.blocks))]


def cosine(a: list[float], b: list[float]) -> float:
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if not na or not nb:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def function_mode(img: BinaryImage, addr: int, default: str = THUMB) -> str:
    for s in img.symbols.values():
        if s.kind == "func" and s.vaddr == addr and s.mode:
            return s.mode
    hint = img.mode_hint(addr)
    return hint or default


def candidate_entries(img: BinaryImage) -> list[tuple[int, str]]:
    """Possible function entries of a (possibly stripped) image."""
    found: dict[int, str] = {}
    for s in img.symbols.values():
        if s.kind == "func":
            found[s.vaddr] = s.mode or THUMB
    plt = set(img.plt_stubs)
    for seg in img.load_segments:
        if not seg.executable:
            continue
        data = img.data[seg.offset:seg.offset + seg.filesz]
        for off in range(0, len(data) - 1, 2):
            hw = data[off] | data[off + 1] << 8
            a = seg.vaddr + off
            # thumb push {..., lr}, also push.w is out of the subset
            if hw & 0xFF00 == 0xB500 and a not in found:
                found[a] = THUMB
            if off % 4 == 0 and off + 4 <= len(data):
                w = struct.unpack_from("<I", data, off)[0]
                if w & 0xFFFF4000 == 0xE92D4000 and a not in found:
                    found[a] = ARM
    # direct call targets of known functions
    for a, mode in list(found.items()):
        try:
            cfg = build_cfg(img, a, mode)
        except MendError:
            continue
        for i in cfg.instrs():
            if i.is_call and i.target not in plt and img.is_executable(i.target):
                found.setdefault(i.target, THUMB if i.mnemonic == "bl" and mode == THUMB else ARM
                                 if i.mnemonic == "bl" else (ARM if mode == THUMB else THUMB))
    return sorted((a, m) for a, m in found.items() if a not in plt)


def match_functions(vuln: BinaryImage, fixed: BinaryImage, names: list[str],
                    threshold: float = SIMILARITY_THRESHOLD) -> list[FunctionPair]:
    if not names:
        raise ValueError("names must be non-empty")
    out = []
    candidates = None
    for name in names:
        sym = fixed.symbols.get(name)
        if sym is None or sym.kind != "func":
            raise FunctionNotFound(f"{name!r} not found in the fixed binary")
        pmode = sym.mode or THUMB
        vsym = vuln.symbols.get(name)
        if vsym is not None and vsym.kind == "func":
            out.append(FunctionPair(name, vsym.vaddr, sym.vaddr, "symbol", vsym.mode or pmode, pmode))
            continue
        try:
            ref = _features(build_cfg(fixed, sym.vaddr, pmode, name))
        except MendError as exc:
            raise FunctionNotFound(f"{name!r}: fixed function does not decode ({exc})") from exc
        if candidates is None:
            candidates = []
            for a, mode in candidate_entries(vuln):
                try:
                    candidates.append((a, mode, _features(build_cfg(vuln, a, mode))))
                except MendError:
                    continue
        scored = sorted(((cosine(ref, f), -a, a, m) for a, m, f in candidates), reverse=True)
        if not scored or scored[0][0] < threshold:
            best = f"{scored[0][0]:.3f}" if scored else "none"
            raise FunctionNotFound(f"{name!r}: no vulnerable-side candidate above {threshold} (best {best})")
        top = scored[0]
        ties = [s for s in scored if abs(s[0] - top[0]) < 1e-12]
        if len(ties) > 1:
            log.warning("%s: %d candidates tie at %.4f; taking lowest address %#x",
                        name, len(ties), top[0], top[2])
        out.append(FunctionPair(name, top[2], sym.vaddr, "similarity", top[3], pmode, top[0]))
    return out


# -- block matching -----------------------------------------------------------------

def match_blocks(fpair: FunctionPair, cfgs: tuple[Cfg, Cfg]) -> list[BlockMatch]:
    """Greedy structural matching from the entries, then an ordered-sequence fill."""
    vcfg, pcfg = cfgs
    vblocks = {b.start: b for b in real_blocks(vcfg)}
    pblocks = {b.start: b for b in real_blocks(pcfg)}
    pmap: dict[int, int] = {}
    used: set[int] = set()

    def accept(v, p) -> bool:
        if v is None or p is None or p in pmap or v in used:
            return False
        if v not in vblocks or p not in pblocks:
            return False
        if not is_perfect_match(vblocks[v], pblocks[p]):
            return False
        pmap[p] = v
        used.add(v)
        return True

    def propagate(seeds):
        work = list(seeds)
        while work:
            v, p = work.pop()
            vs, ps = flow_succs(vcfg, v), flow_succs(pcfg, p)
            if [r for r, _ in vs] != [r for r, _ in ps]:
                continue
            for (_, vn), (_, pn) in zip(vs, ps):
                if accept(vn, pn):
                    work.append((vn, pn))

    ve, pe = _follow(vcfg, vcfg.entry), _follow(pcfg, pcfg.entry)
    if accept(ve, pe):
        propagate([(ve, pe)])
    # ordered fill over the remaining blocks (longest common subsequence of keys)
    vorder = [b for b in vblocks if b not in used]
    porder = [b for b in pblocks if b not in pmap]
    vorder.sort()
    porder.sort()
    sm = difflib.SequenceMatcher(None, [block_key(vblocks[a]) for a in vorder],
                                 [block_key(pblocks[a]) for a in porder], autojunk=False)
    new = []
    for blk in sm.get_matching_blocks():
        for k in range(blk.size):
            v, p = vorder[blk.a + k], porder[blk.b + k]
            if accept(v, p):
                new.append((v, p))
    propagate(new)
    pairs = [BlockMatch(vblocks[pmap[p]], pblocks[p], True) for p in sorted(pmap)]
    pairs += [BlockMatch(None, pblocks[p], False) for p in sorted(pblocks) if p not in pmap]
    pairs += [BlockMatch(vblocks[v], None, False) for v in sorted(vblocks) if v not in used]
    return pairs


# -- regions --------------------------------------------------------------------------

def _pred_counterparts_ok(ms: MatchSet, vstart: int, pstart: int, vlo: int, vhi: int) -> bool:
    """Every outside predecessor of vuln block ``vstart`` corresponds to a fixed
    edge into ``pstart``."""
    vcfg, pcfg = ms.vuln_cfg, ms.patch_cfg
    for vp in _inbound(vcfg, vstart):
        if vlo <= vp < vhi:
            continue
        pp = ms.reverse_map.get(vp)
        if pp is None:
            return False
        vroles = dict((r, t) for r, t in flow_succs(vcfg, vp))
        proles = dict((r, t) for r, t in flow_succs(pcfg, pp))
        for role, t in vroles.items():
            if t == vstart and proles.get(role) != pstart:
                return False
    return True


def _inbound(cfg: Cfg, start: int) -> list[int]:
    """Real (non-trampoline) blocks with a flow edge into ``start``."""
    out = []
    for b in real_blocks(cfg):
        if any(t == start for _, t in flow_succs(cfg, b.start)):
            out.append(b.start)
    return out


def compute_regions(ms: MatchSet, min_size: int) -> MatchSet:
    """Patch region spans the first..last non-perfect patch block; the vulnerable
    region is what lies between the perfect anchors around it."""
    pcfg, vcfg = ms.patch_cfg, ms.vuln_cfg
    pblocks = real_blocks(pcfg)
    vblocks = real_blocks(vcfg)
    bad = [i for i, b in enumerate(pblocks) if b.start not in ms.block_map]
    vbad = [b for b in vblocks if b.start not in ms.reverse_map]
    if not bad and not vbad:
        ms.patch_region, ms.vuln_region = [], None
        return ms
    if bad:
        lo, hi = bad[0], bad[-1]
    else:
        # only the vulnerable side changed (code was removed): anchor on the
        # perfect block that follows the removed code
        after = [i for i, b in enumerate(pblocks) if ms.block_map[b.start] > vbad[0].start]
        lo = hi = after[0] if after else len(pblocks) - 1
        ms.notes.append("vulnerable-only blocks; absorbing the following matched block")
    vlo, vhi = _vuln_span(ms, pblocks, lo, hi, vblocks)
    attempts = 0
    while True:
        attempts += 1
        if vhi - vlo >= min_size and _entries_ok(ms, pblocks, lo, hi, vlo, vhi):
            break
        # absorb one neighbour; of the two that work, take the one that
        # replaces fewer vulnerable bytes (forward on a tie)
        options = []
        for nlo, nhi in ((lo, hi + 1), (lo - 1, hi)):
            if nlo < 0 or nhi >= len(pblocks):
                continue
            clo, chi = _vuln_span(ms, pblocks, nlo, nhi, vblocks)
            if chi - clo >= min_size and _entries_ok(ms, pblocks, nlo, nhi, clo, chi):
                options.append((chi - clo, len(options), nlo, nhi, clo, chi))
        grown = bool(options)
        if grown:
            _, _, lo, hi, vlo, vhi = min(options)
            ms.notes.append(f"region extended to patch blocks {lo}..{hi}")
            break
        # neither single step works; grow symmetrically and retry
        if lo == 0 and hi == len(pblocks) - 1:
            break
        lo, hi = max(0, lo - 1), min(len(pblocks) - 1, hi + 1)
        vlo, vhi = _vuln_span(ms, pblocks, lo, hi, vblocks)
        if attempts > len(pblocks) + 2:
            break
    ms.patch_region = pblocks[lo:hi + 1]
    ms.vuln_region = (vlo, vhi)
    ms.inner_entries = _inner_entries(ms, vlo, vhi)
    return ms


def _vuln_span(ms, pblocks, lo, hi, vblocks) -> tuple[int, int]:
    """Vulnerable interval between the perfect anchors bracketing patch blocks lo..hi."""
    before = next((ms.block_map[b.start] for b in reversed(pblocks[:lo]) if b.start in ms.block_map), None)
    after = next((ms.block_map[b.start] for b in pblocks[hi + 1:] if b.start in ms.block_map), None)
    inside = [ms.block_map[b.start] for b in pblocks[lo:hi + 1] if b.start in ms.block_map]
    vb = {b.start: b for b in vblocks}
    if before is not None:
        start = vb[before].end
    else:
        start = min([vcfg_entry(ms)] + inside)
    if after is not None:
        end = after
    else:
        end = max(b.end for b in vblocks)
    if inside:
        start = min(start, min(inside))
        end = max(end, max(vb[v].end for v in inside))
    if end < start:
        end = start
    # snap to vulnerable block boundaries: only whole blocks are replaced
    starts = [b.start for b in vblocks if start <= b.start < end]
    if starts:
        start = min(starts)
        end = max(b.end for b in vblocks if start <= b.start < end)
    else:
        end = start
    return start, end


def vcfg_entry(ms: MatchSet) -> int:
    return ms.vuln_cfg.entry


def _entries_ok(ms, pblocks, lo, hi, vlo, vhi) -> bool:
    if vhi <= vlo:
        return False
    pstart = pblocks[lo].start
    if not _pred_counterparts_ok(ms, vlo, pstart, vlo, vhi):
        return False
    for v, p in _inner_entries(ms, vlo, vhi):
        if p is None or p not in {b.start for b in pblocks[lo:hi + 1]}:
            return False
        if v < vlo + 4:
            return False
    return True


def _inner_entries(ms, vlo, vhi) -> list[tuple[int, int | None]]:
    """Vulnerable blocks inside the region (other than its start) entered from outside."""
    out = []
    for b in real_blocks(ms.vuln_cfg):
        if not vlo < b.start < vhi:
            continue
        outside = [p for p in _inbound(ms.vuln_cfg, b.start) if not vlo <= p < vhi]
        if b.start == ms.vuln_cfg.entry:
            outside.append(-1)
        if outside:
            out.append((b.start, ms.reverse_map.get(b.start)))
    return out


def build_matchset(fpair: FunctionPair, vuln_cfg: Cfg, patch_cfg: Cfg, min_region: int = 4) -> MatchSet:
    pairs = match_blocks(fpair, (vuln_cfg, patch_cfg))
    block_map = {p.patch_block.start: p.vuln_block.start for p in pairs if p.perfect}
    ms = MatchSet(fpair, vuln_cfg, patch_cfg, pairs, block_map)
    return compute_regions(ms, min_region)


# -- reference matching -----------------------------------------------------------------

def _symbol_offset(img: BinaryImage, addr: int):
    sym = img.symbol_containing(addr)
    if sym is None:
        return None
    return sym.name, addr - sym.vaddr


def _ref_index(cfg: Cfg, ref: Reference) -> tuple[int, int] | None:
    """(block start, instruction index) of a reference's source."""
    b = cfg.block_containing(ref.src.addr)
    if b is None:
        return None
    return b.start, [i.addr for i in b.instrs].index(ref.src.addr)


def _memloc_identity(vuln: BinaryImage, fixed: BinaryImage, addr: int) -> tuple[int, str] | None:
    """Vulnerable-side address of the fixed location ``addr`` by name."""
    if addr in fixed.plt_stubs:
        name = fixed.plt_stubs[addr]
        for a, n in vuln.plt_stubs.items():
            if n == name:
                return a, "plt"
        return None
    if addr in fixed.got_entries:
        name = fixed.got_entries[addr]
        for a, n in vuln.got_entries.items():
            if n == name:
                return a, "got"
        return None
    so = _symbol_offset(fixed, addr)
    if so is None:
        return None
    name, off = so
    vs = vuln.symbols.get(name)
    if vs is None or vs.kind == "other":
        return None
    fs = fixed.symbols[name]
    if off >= max(vs.size, 1) or vs.kind != fs.kind:
        return None
    return vs.vaddr + off, "symbol"


def match_references(ms: MatchSet, refs_vuln: list[Reference], refs_patch: list[Reference],
                     vuln: BinaryImage, fixed: BinaryImage) -> MatchSet:
    """Pair fixed-side references with vuln-side targets; also fills ``memloc_map``."""
    vidx: dict[tuple[int, int, str], list[Reference]] = {}
    for r in refs_vuln:
        k = _ref_index(ms.vuln_cfg, r)
        if k is not None:
            vidx.setdefault((k[0], k[1], r.kind), []).append(r)
    matched: dict[Reference, RefMatch] = {}
    for r in refs_patch:
        if r.dest_in_function:
            if r.kind == "control":
                pb = _follow(ms.patch_cfg, r.dst_addr)
                if pb in ms.block_map:
                    matched[r] = RefMatch(r, None, ms.block_map[pb], "block")
            continue
        # source route: same instruction slot in a perfectly matched block
        by_src = None
        k = _ref_index(ms.patch_cfg, r)
        if k is not None and k[0] in ms.block_map:
            for vr in vidx.get((ms.block_map[k[0]], k[1], r.kind), []):
                if r.kind == "control" or vr.via == r.via:
                    by_src = vr
                    break
        # destination route: identity of the referenced location
        ident = _memloc_identity(vuln, fixed, r.dst_addr if r.kind == "control" else r.memloc.key)
        if r.kind == "control":
            if ident is None and by_src is not None:
                matched[r] = RefMatch(r, by_src, by_src.dst_addr, "source-block")
            elif ident is not None:
                if by_src is not None and by_src.dst_addr != ident[0]:
                    log.warning("reference %s: source-block route says %#x, destination route %#x; "
                                "using destination", r, by_src.dst_addr, ident[0])
                    ms.notes.append(f"ref conflict at {r.src.addr:#x}: chose destination route")
                matched[r] = RefMatch(r, by_src, ident[0], ident[1])
            continue
        vaddr = None
        how = None
        if by_src is not None:
            vaddr, how = by_src.memloc.key, "provenance"
        if ident is not None:
            if vaddr is not None and vaddr != ident[0]:
                log.warning("data reference %s: provenance %#x vs name %#x; using name", r, vaddr, ident[0])
                ms.notes.append(f"ref conflict at {r.src.addr:#x}: chose destination route")
            vaddr, how = ident
        if vaddr is None:
            continue
        fixed_addr = r.memloc.key
        prev = ms.memloc_map.get(fixed_addr)
        if prev is not None and prev != vaddr:
            log.warning("memloc %#x mapped to both %#x and %#x; keeping the first", fixed_addr, prev, vaddr)
            continue
        ms.memloc_map[fixed_addr] = vaddr
        matched[r] = RefMatch(r, by_src, vaddr, how)
    ms.matched_refs = matched
    return ms
