"""Local reassembly of a patch region into the vulnerable binary.

The patch blocks (plus any patch-only callees they pull in) are laid out as
one code chunk in the patch region, each unit followed by its own literal
pool.  Layout is a fixpoint: every instruction starts at its original width,
is re-encoded at its planned address, and any encoding that needs more room
widens and restarts the pass.  Widths only grow, so the loop terminates.
Literal words are solved against the final placement on every pass.

Nothing is written to the image until the whole plan has been encoded and
self-checked; an abort leaves the binary exactly as it was.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

from .elf import BinaryImage, PatchRegion, write_bytes
from .errors import (CapExceeded, CodecError, ModeSwitchUnsafe, NotEncodable, OutOfRange,
                     RegionOverflow, RegionTooSmall, SliceEscapes, UnmappedAddress, UnmappedEntry)
from .flow import Cfg, Dfg, Reference, build_cfg, build_dfg, extract_references
from .isa import AL, ARM, LOAD, PC, SP, THUMB, TARGET, Instr, decode, encode, imm, literal, target
from .matcher import FunctionPair, MatchSet, _follow, function_mode, match_references, real_blocks
from .slicer import Slot, SolveResult, backward_slice, build_equations, dump_slice, evaluate, solve

log = logging.getLogger(__name__)

DATA_CAP = 4096
MAX_ROUNDS = 256
TRAP_THUMB = b"\x00\xde"  # udf #0
TRAP_ARM = struct.pack("<I", 0xE7F000F0)  # udf #0


@dataclass(frozen=True)
class ShiftRecord:
    at: int
    delta: int
    cause: int


@dataclass
class PatchPlan:
    function: FunctionPair
    region: PatchRegion
    placements: dict[int, int] = field(default_factory=dict)
    shift_ledger: list[ShiftRecord] = field(default_factory=list)
    data_slots: dict[int, int] = field(default_factory=dict)
    pending_functions: list[tuple[int, int]] = field(default_factory=list)
    redirect: tuple[int, int] | None = None
    vuln_region: tuple[int, int] | None = None
    return_branches: list[tuple[int, int]] = field(default_factory=list)
    inner_redirects: list[tuple[int, int]] = field(default_factory=list)
    literal_words: dict[int, int] = field(default_factory=dict)
    code_range: tuple[int, int] = (0, 0)
    edits: list[tuple[int, bytes]] = field(default_factory=list)
    emitted: list[Instr] = field(default_factory=list)
    intended: dict[int, int] = field(default_factory=dict)
    slices: list[str] = field(default_factory=list)
    solved: int = 0
    rounds: int = 0

    @property
    def bytes_used(self) -> int:
        code = self.code_range[1] - self.code_range[0]
        data = sum(len(b) for a, b in self.edits if self.region.contains(a) and a >= self.code_range[1])
        return code + data

    @property
    def shift_total(self) -> int:
        return sum(r.delta for r in self.shift_ledger)

    def summary(self) -> dict:
        return {
            "region_vaddr": self.region.vaddr,
            "code": [self.code_range[0], self.code_range[1]],
            "bytes_used": self.bytes_used,
            "shifts": len(self.shift_ledger),
            "shift_bytes": self.shift_total,
            "data_slots": {f"{k:#x}": f"{v:#x}" for k, v in sorted(self.data_slots.items())},
            "pending_functions": [[f"{a:#x}", f"{b:#x}"] for a, b in self.pending_functions],
            "redirect": None if self.redirect is None else [f"{x:#x}" for x in self.redirect],
            "return_branches": [[f"{a:#x}", f"{b:#x}"] for a, b in self.return_branches],
            "layout_rounds": self.rounds,
        }


def load_data_from(fixed: BinaryImage, vaddr: int, cap: int = DATA_CAP) -> bytes:
    """Bytes from ``vaddr`` through the first NUL of a double NUL."""
    if not fixed.is_mapped(vaddr):
        raise UnmappedAddress(f"{vaddr:#x} is not mapped in the fixed binary")
    out = bytearray()
    a = vaddr
    while True:
        if len(out) >= cap:
            raise CapExceeded(f"no double NUL within {cap} bytes of {vaddr:#x}")
        b = fixed.read(a, 1)[0]
        nxt = fixed.read(a + 1, 1)[0] if fixed.is_mapped(a + 1) else 0
        out.append(b)
        if b == 0 and nxt == 0:
            return bytes(out)
        a += 1


# -- layout items -------------------------------------------------------------------

@dataclass
class _Item:
    ins: Instr | None
    kind: str  # copy | branch | ldr | adr | synth
    unit: int
    label: str | None = None
    dest: tuple | None = None  # ("label", name) | ("abs", addr)
    width: int = 2
    orig_width: int = 2
    cond: int = AL
    movw: bool = False  # literal/adr rewritten as movw+movt


@dataclass
class _Unit:
    uid: int
    cfg: Cfg
    dfg: Dfg
    refs: list[Reference]
    ms: MatchSet
    entry_label: str
    items: list[_Item] = field(default_factory=list)
    pool: list[int] = field(default_factory=list)  # item indexes of literal loads


def _label(uid: int, addr: int) -> str:
    return f"u{uid}.{addr:x}"


class Reassembler:
    def __init__(self, ms: MatchSet, vuln: BinaryImage, fixed: BinaryImage, region: PatchRegion,
                 dfg: Dfg | None = None, refs: list[Reference] | None = None,
                 dump_slices: bool = False):
        self.ms = ms
        self.vuln = vuln
        self.fixed = fixed
        self.region = region
        self.mode = ms.patch_cfg.mode
        self.dump_slices = dump_slices
        dfg = dfg or build_dfg(ms.patch_cfg)
        refs = refs if refs is not None else extract_references(ms.patch_cfg, dfg)
        self.units: list[_Unit] = []
        self.pending: dict[int, str] = {}  # fixed entry -> entry label
        self.data_cache: dict[int, int] = {}
        self.data_blobs: list[tuple[int, bytes]] = []
        self.data_cursor = region.data_cursor
        self.plan = PatchPlan(ms.fpair, region)
        self._add_unit(ms.patch_cfg, dfg, refs, ms, ms.patch_region)

    # -- units -----------------------------------------------------------------------

    def _add_unit(self, cfg, dfg, refs, ms, blocks, entry: int | None = None) -> _Unit:
        uid = len(self.units)
        unit = _Unit(uid, cfg, dfg, refs, ms, _label(uid, blocks[0].start if entry is None else entry))
        self.units.append(unit)
        self._build_items(unit, blocks)
        return unit

    def _pending_unit(self, entry: int, mode: str) -> str:
        if mode != self.mode:
            raise ModeSwitchUnsafe(f"patch-only callee at {entry:#x} is {mode}, region is {self.mode}")
        if entry in self.pending:
            return self.pending[entry]
        cfg = build_cfg(self.fixed, entry, mode)
        dfg = build_dfg(cfg)
        refs = extract_references(cfg, dfg)
        ms = MatchSet(self.ms.fpair, None, cfg, [], {})
        ms.patch_region = real_blocks(cfg)
        match_references(ms, [], refs, self.vuln, self.fixed)
        first = _follow(cfg, cfg.entry)
        # registered before building items so recursive calls resolve
        self.pending[entry] = _label(len(self.units), first)
        self._add_unit(cfg, dfg, refs, ms, ms.patch_region, first)
        return self.pending[entry]

    def _resolve_block(self, unit: _Unit, addr: int, labels: set[int]) -> tuple:
        t = _follow(unit.cfg, addr)
        if t is not None and t in labels:
            return ("label", _label(unit.uid, t))
        if t is not None and t in unit.ms.block_map:
            return ("abs", unit.ms.block_map[t])
        raise UnmappedEntry(f"branch to {addr:#x} leaves the patch region for an unmatched block")

    def _control_dest(self, unit: _Unit, ins: Instr) -> tuple:
        ref = next((r for r in unit.ms.matched_refs if r.kind == "control" and r.src.addr == ins.addr), None)
        m = unit.ms.matched_refs.get(ref) if ref is not None else None
        switches = ins.mnemonic == "blx"
        if m is not None:
            if switches and m.vuln_dest not in self.vuln.plt_stubs:
                dmode = function_mode(self.vuln, m.vuln_dest, ARM)
                if dmode == self.mode:
                    raise ModeSwitchUnsafe(f"{ins}: blx to same-mode code at {m.vuln_dest:#x}")
            return ("abs", m.vuln_dest)
        if switches:
            raise ModeSwitchUnsafe(f"{ins}: unmatched mode-switching call cannot be re-proven")
        dest = ins.target
        if dest in self.fixed.plt_stubs:
            raise UnmappedEntry(f"import {self.fixed.plt_stubs[dest]} has no PLT entry in the vulnerable binary")
        return ("label", self._pending_unit(dest, function_mode(self.fixed, dest, self.mode)))

    def _build_items(self, unit: _Unit, blocks) -> None:
        starts = {b.start for b in blocks}
        for bi, b in enumerate(blocks):
            for k, ins in enumerate(b.instrs):
                it = _Item(ins, "copy", unit.uid, _label(unit.uid, b.start) if k == 0 else None,
                           width=ins.width, orig_width=ins.width, cond=ins.cond)
                m = ins.mnemonic
                if m == "b":
                    it.kind = "branch"
                    if ins.target in unit.cfg.blocks or unit.cfg.contains(ins.target):
                        it.dest = self._resolve_block(unit, ins.target, starts)
                    else:
                        it.dest = self._control_dest(unit, ins)
                elif m in ("bl", "blx") and ins.operands[0].kind == TARGET:
                    it.kind = "branch"
                    it.dest = self._control_dest(unit, ins)
                elif m == "blx":
                    raise ModeSwitchUnsafe(f"{ins}: register-indirect call may switch mode")
                elif m == "ldr" and ins.operands[1].kind == LOAD:
                    it.kind = "ldr"
                    unit.pool.append(len(unit.items))
                elif m == "adr":
                    it.kind = "adr"
                unit.items.append(it)
            last = b.last
            falls = b.terminator in ("fallthrough", "call-through") or (
                last.mnemonic == "b" and last.is_conditional)
            if falls:
                nxt = blocks[bi + 1].start if bi + 1 < len(blocks) else None
                t = _follow(unit.cfg, b.end)
                if t is None or t != nxt:
                    dest = self._resolve_block(unit, b.end, starts)
                    unit.items.append(_Item(None, "synth", unit.uid, dest=dest, width=2 if self.mode == THUMB else 4,
                                            orig_width=0))

    # -- layout ----------------------------------------------------------------------

    def _place(self, base: int):
        addrs: list[list[int]] = []
        labels: dict[str, int] = {}
        slots: dict[tuple[int, int], int] = {}
        a = base
        for u in self.units:
            if self.mode == ARM or u.uid > 0:
                a = -(-a // 4) * 4
            ua = []
            for it in u.items:
                if it.label:
                    labels[it.label] = a
                ua.append(a)
                a += it.width
            addrs.append(ua)
            a = -(-a // 4) * 4
            for k in u.pool:
                if not u.items[k].movw:
                    slots[(u.uid, k)] = a
                    a += 4
        return addrs, labels, slots, a

    def _dest_addr(self, dest, labels) -> int:
        kind, v = dest
        return labels[v] if kind == "label" else v

    def _required(self, unit: _Unit, ref: Reference, labels, addrs) -> int:
        d = ref.memloc.key
        if d in unit.ms.memloc_map:
            return unit.ms.memloc_map[d]
        if ref.dest_in_function:
            t = d & ~1 if self.mode == THUMB else d
            if t in unit.cfg.blocks and _label(unit.uid, t) in labels:
                return labels[_label(unit.uid, t)] | (d & 1)
            raise SliceEscapes(f"data reference into the function body at {d:#x} is not relocatable")
        if d not in self.data_cache:
            blob = load_data_from(self.fixed, d)
            start = (self.data_cursor - len(blob)) // 4 * 4
            self.data_cursor = start
            self.data_cache[d] = self.region.vaddr + start
            self.data_blobs.append((self.region.vaddr + start, blob))
            self.plan.data_slots[d] = self.region.vaddr + start
        return self.data_cache[d]

    def _solve_unit(self, unit: _Unit, addrs, labels) -> tuple[dict[int, int], dict[int, int], set[int]]:
        """Solved literal words and adr targets (by item index), plus covered instrs."""
        index = {it.ins.addr: k for k, it in enumerate(unit.items) if it.ins is not None}
        placement = {a: addrs[unit.uid][k] for a, k in index.items()}
        free = {unit.items[k].ins.addr for k in unit.pool}
        words: dict[int, int] = {}
        adrs: dict[int, int] = {}
        covered: set[int] = set()
        seen_defs: set[int] = set()
        for ref in unit.refs:
            if ref.kind != "data" or ref.src.addr not in index or ref.src.addr in seen_defs:
                continue
            seen_defs.add(ref.src.addr)
            required = self._required(unit, ref, labels, addrs)
            stmts, tvar = backward_slice(unit.dfg, ref, placement, free)
            for st in stmts:
                inside = st.instr.addr in index
                if not inside and (st.instr.uses_pc_value or any(
                        isinstance(a, Slot) for op in st.ir for a in op.args)):
                    raise SliceEscapes(f"slice for {ref} reaches {st.instr} outside the patch region")
                covered.add(st.instr.addr)
            sys = build_equations(stmts, tvar, required)
            res: SolveResult = solve(sys)
            env = evaluate(sys, res.as_dict())
            if env[tvar] != required:
                raise SliceEscapes(f"solver self-check failed for {ref}")
            for slot, value in res.assignments:
                k = index[slot.ins_addr]
                prev = (adrs if slot.kind == "adr" else words).get(k)
                if prev is not None and prev != value:
                    raise SliceEscapes(f"conflicting values for {slot}: {prev:#x} vs {value:#x}")
                (adrs if slot.kind == "adr" else words)[k] = value
            if self.dump_slices:
                self.plan.slices.append(f"; {ref}\n{dump_slice(stmts)}\n{sys}")
        # pc-reading instructions that no slice explains cannot be moved safely
        for k, it in enumerate(unit.items):
            ins = it.ins
            if ins is None or it.kind in ("branch", "ldr") or not ins.uses_pc_value:
                continue
            if it.kind == "adr" and k not in adrs:
                t = self._adr_in_function(unit, ins, labels)
                if t is not None:
                    adrs[k] = t
                    continue
            if ins.addr not in covered:
                raise SliceEscapes(f"{ins} reads the PC but no data reference explains it")
        return words, adrs, covered

    def _adr_in_function(self, unit, ins, labels):
        t = ins.target
        if t in unit.cfg.blocks and _label(unit.uid, t) in labels:
            return labels[_label(unit.uid, t)]
        return None

    def _encode(self, it: _Item, at: int, labels, slot_addr, word, adr_target) -> list[Instr]:
        mode = self.mode
        ins = it.ins
        if it.kind in ("branch", "synth"):
            dest = self._dest_addr(it.dest, labels)
            mnem = "b" if it.kind == "synth" else ins.mnemonic
            cond = AL if it.kind == "synth" else ins.cond
            return [encode(mnem, (target(dest),), at, mode, cond, False, it.width)]
        if it.kind == "ldr" and not it.movw:
            return [encode("ldr", (ins.operands[0], literal(slot_addr)), at, mode, ins.cond, False, it.width)]
        if it.kind == "ldr" or it.kind == "adr" and it.movw:
            value = word if it.kind == "ldr" else adr_target
            return self._movw_movt(ins, at, value)
        if it.kind == "adr":
            return [encode("adr", (ins.operands[0], target(adr_target)), at, mode, ins.cond, False, it.width)]
        return [encode(ins.mnemonic, ins.operands, at, mode, ins.cond, ins.setflags, it.width)]

    def _movw_movt(self, ins: Instr, at: int, value: int) -> list[Instr]:
        rd = ins.operands[0]
        if rd.value in (PC, SP):
            raise NotEncodable(f"{ins}: cannot synthesize a constant into {rd}")
        lo = encode("movw", (rd, imm(value & 0xFFFF)), at, self.mode, ins.cond, False, 4)
        hi = encode("movt", (rd, imm(value >> 16 & 0xFFFF)), at + 4, self.mode, ins.cond, False, 4)
        return [lo, hi]

    def layout(self) -> PatchPlan:
        region = self.region
        align = 4
        base = region.vaddr + (-(-region.code_cursor // align) * align)
        for rnd in range(MAX_ROUNDS):
            self.data_cursor = region.data_cursor
            self.data_cache.clear()
            self.data_blobs.clear()
            self.plan.data_slots.clear()
            self.plan.slices.clear()
            addrs, labels, slots, end = self._place(base)
            solved = [self._solve_unit(u, addrs, labels) for u in self.units]
            grew = False
            emitted: list[tuple[int, int, list[Instr]]] = []
            for u, (words, adrs, _) in zip(self.units, solved):
                for k, it in enumerate(u.items):
                    at = addrs[u.uid][k]
                    word = None
                    if it.kind == "ldr":
                        word = words.get(k, self._orig_word(it.ins))
                    try:
                        out = self._encode(it, at, labels, slots.get((u.uid, k)), word, adrs.get(k))
                    except (OutOfRange, NotEncodable) as exc:
                        if it.kind in ("ldr", "adr") and not it.movw and self._can_movw(it):
                            it.movw, it.width = True, 8
                            grew = True
                            log.debug("%s: synthesizing movw/movt (%s)", it.ins, exc)
                            break
                        raise
                    size = sum(i.width for i in out)
                    if size > it.width:
                        it.width = size
                        grew = True
                        break
                    emitted.append((u.uid, k, out))
                if grew:
                    break
            if grew:
                continue
            self.plan.rounds = rnd + 1
            return self._finish(addrs, labels, slots, end, solved, emitted)
        raise OutOfRange("layout did not reach a fixpoint")

    def _can_movw(self, it: _Item) -> bool:
        return it.ins.operands[0].value not in (PC, SP)

    def _orig_word(self, ins: Instr) -> int:
        return self.fixed.read_word(ins.target)

    def _finish(self, addrs, labels, slots, end, solved, emitted) -> PatchPlan:
        plan = self.plan
        region = self.region
        start = addrs[0][0] if addrs and addrs[0] else region.vaddr + region.code_cursor
        code_end = end
        if code_end - region.vaddr > self.data_cursor:
            raise RegionOverflow(f"patch needs {code_end - start} code bytes plus "
                                 f"{region.size - self.data_cursor} data bytes; region has {region.size}")
        chunk = bytearray(code_end - start)
        for uid, k, out in emitted:
            it = self.units[uid].items[k]
            at = addrs[uid][k]
            blob = b"".join(i.raw for i in out)
            if len(blob) < it.width:  # never narrow: pad with nop
                blob += (b"\x00\xbf" if self.mode == THUMB else struct.pack("<I", 0xE320F000)) * (
                    (it.width - len(blob)) // (2 if self.mode == THUMB else 4))
            chunk[at - start:at - start + len(blob)] = blob
            plan.emitted.extend(out)
            if it.ins is not None:
                if self.units[uid] is self.units[0]:
                    plan.placements[it.ins.addr] = at
                if it.width != it.orig_width:
                    plan.shift_ledger.append(ShiftRecord(at, it.width - it.orig_width, it.ins.addr))
            if it.kind in ("branch", "synth"):
                plan.intended[at] = self._dest_addr(it.dest, labels)
                if it.kind == "synth" and it.dest[0] == "abs":
                    plan.return_branches.append((at, it.dest[1]))
            elif it.kind == "adr" and not it.movw:
                plan.intended[at] = out[0].target
        for u, (words, adrs, _) in zip(self.units, solved):
            for k in u.pool:
                it = u.items[k]
                if it.movw:
                    continue
                sa = slots[(u.uid, k)]
                word = words.get(k, self._orig_word(it.ins))
                struct.pack_into("<I", chunk, sa - start, word & 0xFFFFFFFF)
                plan.literal_words[sa] = word & 0xFFFFFFFF
                plan.intended[addrs[u.uid][k]] = sa
        for u in self.units[1:]:
            plan.pending_functions.append((u.cfg.entry, labels[u.entry_label]))
        plan.code_range = (start, code_end)
        plan.edits.append((start, bytes(chunk)))
        for a, blob in self.data_blobs:
            plan.edits.append((a, blob))
        self._redirects(labels)
        return plan

    def _redirects(self, labels) -> None:
        plan, ms = self.plan, self.ms
        vlo, vhi = ms.vuln_region
        entry = labels[self.units[0].entry_label]
        br = self._branch_at(vlo, entry, vhi - vlo)
        trap = TRAP_THUMB if self.mode == THUMB else TRAP_ARM
        fill = bytearray(br)
        inner = []
        for v, p in ms.inner_entries:
            if p is None or _label(0, p) not in labels:
                raise UnmappedEntry(f"vulnerable block {v:#x} is entered from outside but has no patch counterpart")
            inner.append((v, labels[_label(0, p)]))
        for v, dest in sorted(inner):
            limit = min([x for x, _ in inner if x > v] + [vhi]) - v
            blob = self._branch_at(v, dest, limit)
            if v - vlo < len(fill):
                raise UnmappedEntry(f"inner entry {v:#x} overlaps the redirect branch")
            while len(fill) < v - vlo:
                fill += trap
            fill += blob
            plan.inner_redirects.append((v, dest))
            plan.intended[v] = dest
        while len(fill) < vhi - vlo:
            fill += trap
        plan.edits.append((vlo, bytes(fill[:vhi - vlo])))
        plan.redirect = (vlo, entry)
        plan.vuln_region = (vlo, vhi)
        plan.intended[vlo] = entry

    def _branch_at(self, at: int, dest: int, room: int) -> bytes:
        try:
            ins = encode("b", (target(dest),), at, self.mode, AL, False, 0)
        except CodecError as exc:
            raise RegionTooSmall(f"no branch encoding reaches {dest:#x} from {at:#x}: {exc}") from exc
        if ins.width > room:
            raise RegionTooSmall(f"{room}-byte vulnerable region at {at:#x} cannot hold a "
                                 f"{ins.width}-byte branch")
        return ins.raw


def commit(img: BinaryImage, plan: PatchPlan) -> None:
    """Write ``plan`` into ``img`` and check every emitted pc-relative encoding."""
    vlo, vhi = plan.vuln_region
    img.mark_editable(vlo, vhi)
    for a, blob in plan.edits:
        write_bytes(img, a, blob)
    self_check(img, plan)
    start, end = plan.code_range
    plan.region.code_cursor = max(plan.region.code_cursor, end - plan.region.vaddr)
    blobs = [a for a, _ in plan.edits if plan.region.contains(a) and a >= end]
    if blobs:
        plan.region.data_cursor = min(plan.region.data_cursor, min(blobs) - plan.region.vaddr)


def self_check(img: BinaryImage, plan: PatchPlan) -> None:
    """Decode-back check: every placed pc-relative instruction hits its intended target."""
    mode = plan.emitted[0].mode if plan.emitted else THUMB
    for ins in plan.emitted:
        got = decode(img.read(ins.addr, ins.width), ins.addr, mode)
        if got.raw != ins.raw:
            raise SliceEscapes(f"emitted bytes at {ins.addr:#x} did not survive the write")
    for at, dest in plan.intended.items():
        raw = img.read(at, 4) if img.is_mapped(at, 4) else img.read(at, 2)
        got = decode(raw, at, mode)
        if got.target != dest:
            raise OutOfRange(f"{got} resolves to {got.target:#x}, intended {dest:#x}")
    for slot, word in plan.literal_words.items():
        if img.read_word(slot) != word:
            raise SliceEscapes(f"literal at {slot:#x} was not written")


def plan_and_reassemble(ms: MatchSet, vuln: BinaryImage, fixed: BinaryImage, region: PatchRegion,
                        dfg: Dfg | None = None, refs: list[Reference] | None = None,
                        dump_slices: bool = False, apply: bool = True) -> PatchPlan:
    """Plan, encode and (when ``apply``) commit one function patch."""
    if ms.is_noop:
        return PatchPlan(ms.fpair, region)
    if ms.vuln_region is None or ms.vuln_region[1] - ms.vuln_region[0] < 2:
        raise RegionTooSmall("empty vulnerable region")
    plan = Reassembler(ms, vuln, fixed, region, dfg, refs, dump_slices).layout()
    if apply:
        commit(vuln, plan)
    return plan
