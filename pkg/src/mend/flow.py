"""Control- and data-flow recovery for single functions.

``build_cfg`` is a recursive-descent disassembler: it follows direct branches
from the entry, splits blocks at every branch target and after every
conditional branch, and never descends into callees.  ``build_dfg`` runs
reaching definitions over registers, sp-relative stack slots and constant
global addresses, with a small constant propagator riding along so that
pc-derived addresses are known.  ``extract_references`` turns both graphs into
the control and data references that reassembly has to preserve.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

from .elf import BinaryImage
from .errors import DecodeFailure, IndirectUnresolved, MendError, Misaligned, UnknownEncoding
from .isa import IMM, LOAD, LR, PC, REG, REG_NAMES, SHREG, SP, THUMB, Instr, decode

log = logging.getLogger(__name__)

JUMP, CALL, FALLTHROUGH = "jump", "call", "fallthrough"
ENTRY = -1  # pseudo definition site for values live at function entry
MAX_INSTRS = 20000


# -- CFG ---------------------------------------------------------------------------

@dataclass
class BasicBlock:
    id: int
    start: int
    instrs: list[Instr]
    terminator: str  # jump | return | call-through | fallthrough | trap
    function: int

    @property
    def end(self) -> int:
        return self.instrs[-1].end

    @property
    def size(self) -> int:
        return self.end - self.start

    @property
    def last(self) -> Instr:
        return self.instrs[-1]

    def __repr__(self) -> str:
        return f"<block {self.start:#x}..{self.end:#x} {self.terminator}>"


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kind: str


@dataclass
class Cfg:
    entry: int
    mode: str
    blocks: dict[int, BasicBlock]
    edges: set[Edge]
    literal_slots: dict[int, int] = field(default_factory=dict)  # slot -> loading instr addr
    img: BinaryImage | None = field(default=None, repr=False)
    name: str = ""

    def ordered(self) -> list[BasicBlock]:
        return [self.blocks[a] for a in sorted(self.blocks)]

    def instrs(self) -> list[Instr]:
        return [i for b in self.ordered() for i in b.instrs]

    def succs(self, start: int, kinds=(JUMP, FALLTHROUGH)) -> list[Edge]:
        return sorted((e for e in self.edges if e.src == start and e.kind in kinds),
                      key=lambda e: (e.kind != JUMP, e.dst))

    def preds(self, start: int, kinds=(JUMP, FALLTHROUGH)) -> list[Edge]:
        return sorted((e for e in self.edges if e.dst == start and e.kind in kinds and e.src in self.blocks),
                      key=lambda e: (e.src, e.kind))

    def block_containing(self, addr: int) -> BasicBlock | None:
        for b in self.blocks.values():
            if b.start <= addr < b.end:
                return b
        return None

    @property
    def extent(self) -> list[tuple[int, int]]:
        """Merged address intervals covered by blocks and in-function literal slots."""
        spans = sorted([(b.start, b.end) for b in self.blocks.values()] +
                       [(s, s + 4) for s in self.literal_slots])
        merged: list[list[int]] = []
        for lo, hi in spans:
            if merged and lo <= merged[-1][1] + 2:
                merged[-1][1] = max(merged[-1][1], hi)
            else:
                merged.append([lo, hi])
        return [(lo, hi) for lo, hi in merged]

    @property
    def size(self) -> int:
        return sum(hi - lo for lo, hi in self.extent)

    def contains(self, addr: int) -> bool:
        return any(lo <= addr < hi for lo, hi in self.extent)

    def dump(self) -> str:
        lines = [f"cfg {self.name or hex(self.entry)} ({self.mode})"]
        for b in self.ordered():
            succ = ", ".join(f"{e.kind}:{e.dst:#x}" for e in sorted(self.edges, key=lambda e: (e.kind, e.dst))
                             if e.src == b.start)
            lines.append(f"  block {b.start:#x}..{b.end:#x} [{b.terminator}] -> {succ}")
            for ins in b.instrs:
                lines.append(f"    {ins}")
        return "\n".join(lines)


def _is_trampoline_target(img: BinaryImage | None, target: int, entry: int) -> bool:
    """True when a direct jump leaves the function (tail call)."""
    if img is None or target == entry:
        return False
    return target in img.plt_stubs or any(
        s.kind == "func" and s.vaddr == target for s in img.symbols.values())


def _decode_at(img: BinaryImage, addr: int, mode: str) -> Instr:
    try:
        seg = img.segment_for(addr, 2)
        if seg is None or not seg.executable:
            raise UnknownEncoding(f"{addr:#x} is not in an executable segment")
        avail = min(4, seg.vaddr + seg.filesz - addr)
        return decode(img.read(addr, avail), addr, mode)
    except (UnknownEncoding, Misaligned, MendError) as exc:
        raise DecodeFailure(addr, exc) from exc


def build_cfg(img: BinaryImage, entry: int, mode: str = THUMB, name: str = "") -> Cfg:
    """Recover the CFG of the function starting at ``entry``."""
    instrs: dict[int, Instr] = {}
    leaders = {entry}
    targets: dict[int, int] = {}
    literal_slots: dict[int, int] = {}
    work = [entry]
    while work:
        addr = work.pop()
        while addr not in instrs:
            if len(instrs) > MAX_INSTRS:
                raise DecodeFailure(addr, f"function at {entry:#x} exceeds {MAX_INSTRS} instructions")
            ins = _decode_at(img, addr, mode)
            instrs[addr] = ins
            if ins.pc_operand is not None and ins.pc_operand.kind == LOAD:
                literal_slots[ins.target] = addr
            if ins.mnemonic == "b":
                t = ins.target
                if _is_trampoline_target(img, t, entry):
                    if ins.is_conditional:
                        leaders.add(ins.end)
                        addr = ins.end
                        continue
                    break
                targets[addr] = t
                leaders.add(t)
                work.append(t)
                if not ins.is_conditional:
                    break
                leaders.add(ins.end)
                addr = ins.end
                continue
            if ins.is_return or ins.mnemonic == "udf":
                break
            if ins.mnemonic == "bx" or ins.is_indirect and ins.mnemonic != "blx":
                raise IndirectUnresolved(f"indirect branch {ins} in function at {entry:#x}")
            addr = ins.end
    blocks: dict[int, BasicBlock] = {}
    edges: set[Edge] = set()
    order = sorted(instrs)
    cur: list[Instr] = []

    def close():
        if not cur:
            return
        last = cur[-1]
        start = cur[0].addr
        if last.mnemonic == "b":
            kind = "jump"
        elif last.is_return:
            kind = "return"
        elif last.mnemonic == "udf":
            kind = "trap"
        elif last.is_call or last.mnemonic == "blx":
            kind = "call-through"
        else:
            kind = "fallthrough"
        blocks[start] = BasicBlock(len(blocks), start, list(cur), kind, entry)
        for ins in cur:
            if ins.is_call:
                edges.add(Edge(start, ins.target, CALL))
        if last.mnemonic == "b":
            edges.add(Edge(start, last.target, JUMP))
            if last.is_conditional:
                edges.add(Edge(start, last.end, FALLTHROUGH))
        elif kind in ("call-through", "fallthrough") and last.end in instrs:
            edges.add(Edge(start, last.end, FALLTHROUGH))
        cur.clear()

    for a in order:
        ins = instrs[a]
        if cur and (a in leaders or cur[-1].end != a):
            close()
        cur.append(ins)
        if ins.mnemonic == "b" or ins.is_return or ins.mnemonic == "udf":
            close()
    close()
    # in-function literal slots exclude words that are really code
    literal_slots = {s: a for s, a in literal_slots.items() if s not in instrs}
    return Cfg(entry, mode, blocks, edges, literal_slots, img, name)


# -- DFG ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MemLoc:
    kind: str  # register | stack_slot | global | heap_summary
    key: object

    def __str__(self) -> str:
        if self.kind == "register":
            return str(self.key)
        if self.kind == "stack_slot":
            return f"stack[{self.key:+d}]"
        if self.kind == "global":
            return f"[{self.key:#x}]"
        return f"heap({self.key})"


HEAP = MemLoc("heap_summary", "module")


def regloc(r: int) -> MemLoc:
    return MemLoc("register", REG_NAMES[r])


def global_loc(addr: int) -> MemLoc:
    return MemLoc("global", addr & 0xFFFFFFFF)


ARG_REGS = tuple(regloc(r) for r in range(4))
CALL_CLOBBER = ARG_REGS + (regloc(12), regloc(LR))


@dataclass(frozen=True)
class DfgEdge:
    src: int  # defining instruction address
    dst: int  # using instruction address
    memloc: MemLoc


@dataclass
class Dfg:
    cfg: Cfg
    nodes: dict[int, Instr]
    edges: set[DfgEdge]
    values: dict[tuple[int, MemLoc], int | None]
    reaching: dict[tuple[int, MemLoc], frozenset[int]]
    callee_nodes: dict[int, int] = field(default_factory=dict)  # callee instr -> call site
    warnings: list[str] = field(default_factory=list)

    def defs_of(self, use: int, loc: MemLoc) -> frozenset[int]:
        """Definition sites reaching ``use`` for ``loc`` (ENTRY for function inputs)."""
        return self.reaching.get((use, loc), frozenset())

    def value(self, def_addr: int, loc: MemLoc) -> int | None:
        return self.values.get((def_addr, loc))

    def uses_of(self, def_addr: int) -> list[DfgEdge]:
        return sorted((e for e in self.edges if e.src == def_addr), key=lambda e: (e.dst, str(e.memloc)))

    def intra_block_edges(self) -> dict[int, list[DfgEdge]]:
        out: dict[int, list[DfgEdge]] = defaultdict(list)
        for e in self.edges:
            bs = self.cfg.block_containing(e.src)
            bd = self.cfg.block_containing(e.dst)
            if bs is not None and bs is bd:
                out[bs.start].append(e)
        return out


def _reg_ops(ins: Instr) -> list[int]:
    return [op.value for op in ins.operands if op.kind in (REG, SHREG)]


def _rlist(ins: Instr) -> list[int]:
    mask = ins.operands[0].value
    return [r for r in range(16) if mask >> r & 1]


def def_use(ins: Instr, sp_off: int | None, base_value=None) -> tuple[list[MemLoc], list[MemLoc], bool]:
    """Locations defined and used by ``ins``; the flag marks weak (non-killing) defs.

    ``base_value(reg)`` returns the known constant value of a register before
    ``ins`` or None; it decides whether a memory operand is a global.
    """
    m = ins.mnemonic
    ops = ins.operands
    regs = _reg_ops(ins)
    defs: list[MemLoc] = []
    uses: list[MemLoc] = []
    weak = False

    def mem(base: int, offset: int | None) -> MemLoc:
        if base == SP:
            if sp_off is None or offset is None:
                return HEAP
            return MemLoc("stack_slot", sp_off + offset)
        v = base_value(base) if base_value else None
        if v is not None and offset is not None:
            return global_loc(v + offset)
        return HEAP

    if m in ("push",):
        lst = _rlist(ins)
        uses += [regloc(r) for r in lst] + [regloc(SP)]
        defs.append(regloc(SP))
        if sp_off is not None:
            defs += [MemLoc("stack_slot", sp_off - 4 * len(lst) + 4 * k) for k in range(len(lst))]
    elif m == "pop":
        lst = _rlist(ins)
        uses.append(regloc(SP))
        if sp_off is not None:
            uses += [MemLoc("stack_slot", sp_off + 4 * k) for k in range(len(lst))]
        else:
            uses.append(HEAP)
        defs += [regloc(r) for r in lst if r != PC] + [regloc(SP)]
        if PC in lst:
            uses.append(regloc(0))
    elif m in ("ldr", "ldrb"):
        t = ops[0].value
        if ops[1].kind == LOAD:
            uses.append(global_loc(ops[1].value))
        else:
            base = ops[1].value
            off = ops[2].value if ops[2].kind == IMM else None
            uses += [regloc(r) for r in regs[1:]]
            uses.append(mem(base, off))
        defs.append(regloc(t))
    elif m in ("str", "strb"):
        base = ops[1].value
        off = ops[2].value if ops[2].kind == IMM else None
        uses += [regloc(r) for r in regs]
        loc = mem(base, off)
        defs.append(loc)
        weak = loc == HEAP or m == "strb"
    elif m == "cmp":
        uses += [regloc(r) for r in regs if r != PC]
    elif m in ("bl", "blx"):
        uses += list(ARG_REGS)
        if ops[0].kind == REG:
            uses.append(regloc(ops[0].value))
        defs += list(CALL_CLOBBER)
        defs.append(HEAP)
        weak = True
    elif m == "bx":
        uses.append(regloc(ops[0].value))
        if ins.is_return:
            uses.append(regloc(0))
    elif m in ("b", "nop", "udf"):
        pass
    elif m in ("movt",):
        defs.append(regloc(ops[0].value))
        uses.append(regloc(ops[0].value))
    elif m in ("mov", "movw", "adr"):
        defs.append(regloc(ops[0].value))
        uses += [regloc(r) for r in regs[1:] if r != PC]
    else:
        # data processing: first register is the destination; two-operand thumb
        # forms (rdn, rm) also read the destination
        d = ops[0].value
        defs.append(regloc(d))
        srcs = regs[1:]
        if len(ops) == 2 and ops[1].kind in (REG, SHREG):
            srcs = [d] + srcs
        elif len(ops) == 2 and ops[1].kind == IMM:
            srcs = [d]
        uses += [regloc(r) for r in srcs if r != PC]
    return defs, uses, weak


def _const_eval(ins: Instr, get, read_word=None) -> int | None:
    """Constant value of the register defined by ``ins`` given operand values."""
    m = ins.mnemonic
    ops = ins.operands
    M = 0xFFFFFFFF

    def v(op):
        if op.kind == IMM:
            return op.value
        if op.kind == REG:
            return ins.pc if op.value == PC else get(op.value)
        if op.kind == SHREG:
            x = get(op.value)
            if x is None:
                return None
            kind, amt = op.shift
            return (x << amt) & M if kind == "lsl" else x >> amt
        return None

    if m == "ldr" and ops[1].kind == LOAD:
        if read_word is None:
            return None
        try:
            return read_word(ops[1].value)
        except MendError:
            return None
    if m == "adr":
        return ops[1].value
    if m in ("mov", "movw"):
        return v(ops[1])
    if m == "movt":
        lo = get(ops[0].value)
        return None if lo is None else (lo & 0xFFFF) | (ops[1].value << 16)
    if m in ("add", "sub", "and", "orr", "eor", "lsl", "lsr", "mul") and ops[0].kind == REG:
        if ops[0].value == SP:
            return None
        if len(ops) == 2:
            a, b = v(ops[0]), v(ops[1])
        else:
            a, b = v(ops[1]), v(ops[2])
        if a is None or b is None:
            return None
        if m == "add":
            r = a + b
        elif m == "sub":
            r = a - b
        elif m == "and":
            r = a & b
        elif m == "orr":
            r = a | b
        elif m == "eor":
            r = a ^ b
        elif m == "mul":
            r = a * b
        elif m == "lsl":
            r = a << b if b < 32 else 0
        else:
            r = a >> b if b < 32 else 0
        return r & M
    return None


def _sp_delta(ins: Instr) -> int | None:
    """Change of sp by ``ins`` (0 if untouched), or None when not constant."""
    m = ins.mnemonic
    if m == "push":
        return -4 * len(_rlist(ins))
    if m == "pop":
        return 4 * len(_rlist(ins))
    ops = ins.operands
    if m in ("add", "sub") and ops and ops[0].kind == REG and ops[0].value == SP:
        if len(ops) == 2 and ops[1].kind == IMM:
            return ops[1].value if m == "add" else -ops[1].value
        if len(ops) == 3 and ops[1].value == SP and ops[2].kind == IMM:
            return ops[2].value if m == "add" else -ops[2].value
        return None
    if m in ("mov", "ldr", "ldrb") and ops and ops[0].kind == REG and ops[0].value == SP:
        return None
    return 0


def _sp_offsets(cfg: Cfg) -> dict[int, int | None]:
    """sp offset (relative to entry) before each instruction; None if ambiguous."""
    at_block: dict[int, int | None] = {cfg.entry: 0}
    out: dict[int, int | None] = {}
    work = [cfg.entry]
    while work:
        start = work.pop()
        off = at_block[start]
        for ins in cfg.blocks[start].instrs:
            out[ins.addr] = off
            d = _sp_delta(ins)
            off = None if off is None or d is None else off + d
        for e in cfg.succs(start):
            if e.dst not in cfg.blocks:
                continue
            if e.dst not in at_block:
                at_block[e.dst] = off
                work.append(e.dst)
            elif at_block[e.dst] is not None and at_block[e.dst] != off:
                at_block[e.dst] = None
                work.append(e.dst)
    return out


def _callee_entry(img: BinaryImage, target: int, mode: str) -> list[Instr]:
    """Straight-line prefix of a callee up to its first control transfer."""
    out = []
    addr = target
    for _ in range(64):
        try:
            ins = _decode_at(img, addr, mode)
        except DecodeFailure:
            break
        out.append(ins)
        if ins.mnemonic in ("b", "bl", "blx", "bx", "udf") or ins.is_return:
            break
        addr = ins.end
    return out


State = dict  # MemLoc -> frozenset of def sites; a missing key means {ENTRY}
_ONLY_ENTRY = frozenset({ENTRY})


def _known(values, defs: frozenset[int], loc: MemLoc) -> int | None:
    if not defs or ENTRY in defs:
        return None
    vs = {values.get((d, loc)) for d in defs}
    return vs.pop() if len(vs) == 1 else None


def _transfer(ins: Instr, state: State, sp_off, values, reaching, read_word, warn) -> bool:
    """Apply ``ins`` to ``state`` in place, recording uses and values; True if anything changed."""
    changed = False

    def get(r: int) -> int | None:
        loc = regloc(r)
        return _known(values, state.get(loc, _ONLY_ENTRY), loc)

    defs, uses, weak = def_use(ins, sp_off, get)
    for u in uses:
        ds = state.get(u, _ONLY_ENTRY)
        if reaching.get((ins.addr, u)) != ds:
            reaching[(ins.addr, u)] = ds
            changed = True
        if u == HEAP:
            warn(f"{ins}: memory access degraded to heap summary")
    for d in defs:
        if d.kind == "register":
            val = _const_eval(ins, get, read_word)
            if values.get((ins.addr, d), "unset") != val:
                values[(ins.addr, d)] = val
                changed = True
    for d in defs:
        if weak and d.kind != "register":
            state[d] = state.get(d, _ONLY_ENTRY) | {ins.addr}
        else:
            state[d] = frozenset({ins.addr})
    return changed


def build_dfg(cfg: Cfg, call_through: bool = True) -> Dfg:
    """Reaching-definitions data-flow graph of ``cfg``."""
    img = cfg.img
    read_word = img.read_word if img is not None else None
    sp = _sp_offsets(cfg)
    blocks = cfg.ordered()
    nodes = {i.addr: i for b in blocks for i in b.instrs}
    warned: dict[str, None] = {}
    values: dict[tuple[int, MemLoc], int | None] = {}
    reaching: dict[tuple[int, MemLoc], frozenset[int]] = {}
    preds = {b.start: [e.src for e in cfg.preds(b.start)] for b in blocks}
    out_state: dict[int, State] = {}
    limit = 8 * (len(blocks) + 4)
    for _ in range(limit):
        changed = False
        for b in blocks:
            ins_states = [out_state[p] for p in preds[b.start] if p in out_state]
            if b.start == cfg.entry:
                ins_states.append({})
            state: State = {}
            for loc in {k for st in ins_states for k in st}:
                acc = frozenset()
                for st in ins_states:
                    acc |= st.get(loc, _ONLY_ENTRY)
                state[loc] = acc
            for ins in b.instrs:
                changed |= _transfer(ins, state, sp.get(ins.addr), values, reaching, read_word,
                                     lambda msg: warned.setdefault(msg))
            if out_state.get(b.start) != state:
                out_state[b.start] = state
                changed = True
        if not changed:
            break
    else:
        raise DecodeFailure(cfg.entry, "data-flow analysis did not converge")
    for msg in warned:
        log.warning(msg)
    edges: set[DfgEdge] = set()
    for (use, loc), defs in reaching.items():
        for d in defs:
            if d != ENTRY:
                edges.add(DfgEdge(d, use, loc))
    callee_nodes: dict[int, int] = {}
    if call_through and img is not None:
        _add_call_through(cfg, img, nodes, edges, values, reaching, callee_nodes, read_word)
    return Dfg(cfg, nodes, edges, values, reaching, callee_nodes, list(warned))


def _add_call_through(cfg, img, nodes, edges, values, reaching, callee_nodes, read_word) -> None:
    """Carry r0-r3 from internal call sites into the callee's entry block."""
    for site in sorted(nodes):
        ins = nodes[site]
        if not ins.is_call or ins.mnemonic == "blx" or ins.target in img.plt_stubs:
            continue
        if not img.is_executable(ins.target):
            continue
        state: State = {loc: reaching.get((site, loc), _ONLY_ENTRY) for loc in ARG_REGS}
        for c in _callee_entry(img, ins.target, cfg.mode):
            if c.addr in nodes:
                break
            callee_nodes[c.addr] = site
            nodes[c.addr] = c
            _transfer(c, state, None, values, reaching, read_word, lambda msg: None)
            if c.mnemonic in ("bl", "blx"):
                break
        for (use, loc), defs in list(reaching.items()):
            if use in callee_nodes and callee_nodes[use] == site:
                for d in defs:
                    if d != ENTRY:
                        edges.add(DfgEdge(d, use, loc))


# -- references ----------------------------------------------------------------------

@dataclass(frozen=True)
class Reference:
    kind: str  # control | data
    src: Instr
    dst: object  # Instr for data references, target address for control ones
    memloc: MemLoc | None = None
    dest_in_function: bool = False
    via: MemLoc | None = None  # register carrying a data reference's value into dst

    @property
    def dst_addr(self) -> int:
        return self.dst.addr if isinstance(self.dst, Instr) else self.dst

    def __str__(self) -> str:
        where = "in" if self.dest_in_function else "out"
        if self.kind == "control":
            return f"control {self.src.addr:#x} -> {self.dst_addr:#x} ({where})"
        return f"data {self.src.addr:#x} -> {self.dst_addr:#x} via {self.via} {self.memloc} ({where})"


def is_pc_offset_use(ins: Instr, loc: MemLoc) -> bool:
    """``add rX, pc`` consumes rX as an offset, not as an address."""
    if ins.mnemonic != "add" or loc.kind != "register":
        return False
    regs = [op.value for op in ins.operands if op.kind == REG]
    return PC in regs and REG_NAMES[regs[0]] == loc.key


def address_forming(ins: Instr) -> bool:
    """Instructions whose result may be an address we must keep valid."""
    m = ins.mnemonic
    if m == "ldr" and ins.operands[1].kind == LOAD:
        return True
    if m in ("adr", "mov", "movw", "movt", "add", "sub"):
        return True
    return False


def _in_ranges(addr: int, ranges) -> bool:
    return any(lo <= addr < hi for lo, hi in ranges)


def extract_references(cfg: Cfg, dfg: Dfg, function_range=None) -> list[Reference]:
    """Control references for non-fallthrough edges, data references for address-valued DFG edges."""
    if function_range is None:
        ranges = cfg.extent
    elif isinstance(function_range, tuple) and len(function_range) == 2 and isinstance(function_range[0], int):
        ranges = [function_range]
    else:
        ranges = list(function_range)
    img = cfg.img
    refs: list[Reference] = []
    seen = set()
    for b in cfg.ordered():
        for ins in b.instrs:
            if ins.mnemonic in ("b", "bl", "blx") and ins.operands[0].kind != REG:
                t = ins.target
                key = ("c", ins.addr, t)
                if key not in seen:
                    seen.add(key)
                    refs.append(Reference("control", ins, t, None, _in_ranges(t, ranges)))
    for e in sorted(dfg.edges, key=lambda e: (e.src, e.dst, str(e.memloc))):
        if e.memloc.kind != "register":
            continue
        d = dfg.nodes.get(e.src)
        u = dfg.nodes.get(e.dst)
        if d is None or u is None or not address_forming(d):
            continue
        if is_pc_offset_use(u, e.memloc):
            continue
        v = dfg.value(e.src, e.memloc)
        if v is None or img is None or not img.is_mapped(v):
            continue
        if not _derives_from_literal_or_pc(dfg, e.src, e.memloc):
            continue
        refs.append(Reference("data", d, u, global_loc(v), _in_ranges(v, ranges), e.memloc))
    return refs


def _derives_from_literal_or_pc(dfg: Dfg, def_addr: int, loc: MemLoc, depth: int = 0) -> bool:
    """True when the value defined at ``def_addr`` is rooted in a literal, adr or pc read."""
    ins = dfg.nodes.get(def_addr)
    if ins is None or depth > 32:
        return False
    if ins.mnemonic == "ldr" and ins.operands[1].kind == LOAD or ins.mnemonic == "adr":
        return True
    if ins.uses_pc_value:
        return True
    for op in ins.operands:
        if op.kind == REG and op.value != PC:
            rl = regloc(op.value)
            for d in dfg.defs_of(def_addr, rl):
                if d != ENTRY and _derives_from_literal_or_pc(dfg, d, rl, depth + 1):
                    return True
    return False
