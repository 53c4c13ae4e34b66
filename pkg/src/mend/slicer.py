"""Backward slices over the DFG and the affine solver behind data fixups.

A slice runs from the instruction that consumes a reference's value back to
the literal loads (or ``adr``) it is rooted in.  Statements are lowered to a
tiny SSA IR of COPY and INT_ADD over register versions, literal slots and
constants, with PC reads replaced by the instruction's planned address.
Solving is back-substitution: every variable is an affine function
``a*s + c (mod 2**32)`` of the single free slot ``s``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

from .errors import Inconsistent, NonAffine, SliceEscapes, Underdetermined
from .flow import ENTRY, Dfg, MemLoc, Reference, regloc
from .isa import IMM, LOAD, PC, REG, REG_NAMES, SP, THUMB, Instr

log = logging.getLogger(__name__)

MASK = 0xFFFFFFFF
MAX_SLICE = 64


@dataclass(frozen=True)
class Var:
    """SSA register version; temporaries use version 0."""
    name: str
    version: int

    def __str__(self) -> str:
        return f"{self.name}.{self.version}" if self.version else self.name


@dataclass(frozen=True)
class Slot:
    """Literal word loaded by the instruction at ``ins_addr``.

    ``free`` slots live in the function's own literal pool and will be
    re-emitted, so the solver may choose their contents.  ``adr`` slots stand
    for the target of an ``adr`` instruction, which is re-encoded directly.
    """
    ins_addr: int
    orig_addr: int
    value: int
    free: bool = True
    kind: str = "literal"  # literal | adr

    def __str__(self) -> str:
        tag = "data" if self.kind == "literal" else "adr"
        return f"[{self.orig_addr:#x}:{tag}]"


@dataclass(frozen=True)
class Const:
    value: int

    def __str__(self) -> str:
        return f"{self.value & MASK:#x}"


Operand = Var | Slot | Const


@dataclass(frozen=True)
class Op:
    dst: Var
    opcode: str  # COPY | INT_ADD
    args: tuple

    def __str__(self) -> str:
        return f"{self.dst} = {self.opcode} " + ", ".join(str(a) for a in self.args)


@dataclass
class SliceStmt:
    instr: Instr
    ir: list[Op]


@dataclass
class EquationSystem:
    equations: list[Op]
    target: Var
    required: int
    slots: list[Slot] = field(default_factory=list)

    def __str__(self) -> str:
        lines = [str(e) for e in self.equations]
        lines.append(f"{self.target} == {self.required & MASK:#x}")
        return "\n".join(lines)


@dataclass
class SolveResult:
    assignments: list[tuple[Slot, int]]
    system: EquationSystem

    def as_dict(self) -> dict[Slot, int]:
        return dict(self.assignments)


# -- slicing -------------------------------------------------------------------------

class _Versions:
    def __init__(self):
        self.count: dict[str, int] = {}
        self.by_def: dict[tuple[int, str], Var] = {}
        self.temps = itertools.count(1)

    def of(self, def_addr: int, name: str) -> Var:
        key = (def_addr, name)
        if key not in self.by_def:
            n = self.count.get(name, 0) + 1
            self.count[name] = n
            self.by_def[key] = Var(name, n)
        return self.by_def[key]

    def temp(self) -> Var:
        return Var(f"$t{next(self.temps)}", 0)


def _pc_value(ins: Instr, placed: int) -> int:
    return placed + (4 if ins.mode == THUMB else 8)


def _is_copy(ins: Instr, loc: MemLoc) -> bool:
    """``mov rd, rs`` that forwards ``loc``."""
    if ins.mnemonic != "mov" or len(ins.operands) != 2 or ins.operands[1].kind != REG:
        return False
    return REG_NAMES[ins.operands[1].value] == loc.key and ins.operands[0].value not in (PC, SP)


def backward_slice(dfg: Dfg, ref: Reference, placement: dict[int, int],
                   free_loads: set[int] | None = None) -> tuple[list[SliceStmt], Var]:
    """Slice for data reference ``ref``; returns statements in execution order
    plus the variable that must equal the required address.

    ``placement`` maps original instruction addresses to planned ones; missing
    entries keep their address.  ``free_loads`` lists the literal loads whose
    word may be rewritten (default: loads from the function's own pool).
    """
    if ref.kind != "data":
        raise ValueError("backward_slice needs a data reference")
    if free_loads is None:
        free_loads = default_free_loads(dfg)
    versions = _Versions()
    stmts: dict[int, SliceStmt] = {}
    use = ref.dst_addr
    loc = ref.via
    uins = dfg.nodes.get(use)
    target: Var
    start_defs = _single_def(dfg, use, loc)
    root = start_defs
    if uins is not None and _is_copy(uins, loc):
        dname = REG_NAMES[uins.operands[0].value]
        target = versions.of(use, dname)
        stmts[use] = SliceStmt(uins, [Op(target, "COPY", (versions.of(root, loc.key),))])
    else:
        target = versions.of(root, loc.key)
    work = [(root, loc)]
    seen = set()
    while work:
        d, dloc = work.pop()
        if (d, dloc) in seen:
            continue
        seen.add((d, dloc))
        if len(stmts) > MAX_SLICE:
            raise SliceEscapes(f"slice from {use:#x} exceeds {MAX_SLICE} statements")
        ins = dfg.nodes[d]
        ir, inputs = _lower(ins, d, dloc, dfg, versions, placement, free_loads)
        if d in stmts:
            stmts[d].ir = _merge(stmts[d].ir, ir)
        else:
            stmts[d] = SliceStmt(ins, ir)
        for iloc in inputs:
            work.append((_single_def(dfg, d, iloc), iloc))
    order = sorted(stmts, key=lambda a: _exec_order(dfg, a))
    return _renumber([stmts[a] for a in order], target)


def _renumber(stmts: list[SliceStmt], target: Var) -> tuple[list[SliceStmt], Var]:
    """Number register versions in execution order (r1.1 before r1.2)."""
    names: dict[Var, Var] = {}
    count: dict[str, int] = {}
    for st in stmts:
        for op in st.ir:
            if op.dst.version and op.dst not in names:
                count[op.dst.name] = count.get(op.dst.name, 0) + 1
                names[op.dst] = Var(op.dst.name, count[op.dst.name])

    def sub(a):
        return names.get(a, a) if isinstance(a, Var) else a

    out = [SliceStmt(st.instr, [Op(sub(op.dst), op.opcode, tuple(sub(a) for a in op.args)) for op in st.ir])
           for st in stmts]
    return out, sub(target)


def default_free_loads(dfg: Dfg) -> set[int]:
    pool = dfg.cfg.literal_slots
    return {i.addr for i in dfg.cfg.instrs()
            if i.mnemonic == "ldr" and i.operands[1].kind == LOAD and i.target in pool}


def _merge(a: list[Op], b: list[Op]) -> list[Op]:
    return a + [op for op in b if op not in a]


def _exec_order(dfg: Dfg, addr: int) -> tuple:
    # callee entry nodes run after their call site
    site = dfg.callee_nodes.get(addr)
    return (site, 1, addr) if site is not None else (addr, 0, addr)


def _single_def(dfg: Dfg, use: int, loc: MemLoc) -> int:
    if loc.kind == "heap_summary":
        raise SliceEscapes(f"value at {use:#x} flows through the heap summary")
    defs = dfg.defs_of(use, loc)
    if not defs or ENTRY in defs:
        raise SliceEscapes(f"{loc} at {use:#x} is live on function entry")
    if len(defs) > 1:
        raise SliceEscapes(f"{loc} at {use:#x} has {len(defs)} reaching definitions")
    (d,) = defs
    if d not in dfg.nodes:
        raise SliceEscapes(f"definition of {loc} at {d:#x} is outside the modeled code")
    return d


def _lower(ins: Instr, addr: int, loc: MemLoc, dfg: Dfg, versions: _Versions,
           placement: dict[int, int], free_loads: set[int]) -> tuple[list[Op], list[MemLoc]]:
    """IR for the definition of ``loc`` at ``ins`` and the locations it reads."""
    m, ops = ins.mnemonic, ins.operands
    placed = placement.get(addr, addr)
    if loc.kind == "stack_slot":
        if m != "str":
            raise SliceEscapes(f"stack slot {loc} defined by {ins}")
        src = regloc(ops[0].value)
        dst = versions.of(addr, str(loc))
        return [Op(dst, "COPY", (_use_var(dfg, versions, addr, src),))], [src]
    if loc.kind != "register":
        raise SliceEscapes(f"{loc} is not a tracked location")
    dst = versions.of(addr, loc.key)
    if m == "ldr" and ops[1].kind == LOAD:
        word = _read_word(dfg, ops[1].value)
        slot = Slot(addr, ops[1].value, word, addr in free_loads)
        if not slot.free:
            return [Op(dst, "COPY", (Const(word),))], []
        return [Op(dst, "COPY", (slot,))], []
    if m == "adr":
        return [Op(dst, "COPY", (Slot(addr, ins.target, ins.target, True, "adr"),))], []
    if m == "ldr" and len(ops) == 3 and ops[1].kind == REG and ops[1].value == SP and ops[2].kind == IMM:
        sloc = _stack_loc(dfg, addr)
        if sloc is None:
            raise SliceEscapes(f"untracked stack access {ins}")
        return [Op(dst, "COPY", (_use_var(dfg, versions, addr, sloc),))], [sloc]
    if m in ("ldr", "ldrb"):
        raise NonAffine(f"memory load {ins} in slice")
    if m == "mov" and len(ops) == 2:
        if ops[1].kind == IMM:
            return [Op(dst, "COPY", (Const(ops[1].value),))], []
        if ops[1].kind == REG and ops[1].value not in (PC,):
            src = regloc(ops[1].value)
            return [Op(dst, "COPY", (_use_var(dfg, versions, addr, src),))], [src]
    if m == "movw":
        return [Op(dst, "COPY", (Const(ops[1].value & 0xFFFF),))], []
    if m == "movt":
        # movt over a movw constant folds to a constant; anything else is not affine
        prev = dfg.defs_of(addr, loc)
        if len(prev) == 1:
            (p,) = prev
            pins = dfg.nodes.get(p)
            if pins is not None and pins.mnemonic == "movw":
                return [Op(dst, "COPY", (Const((pins.operands[1].value & 0xFFFF) | ops[1].value << 16),))], []
        raise NonAffine(f"{ins} is not affine in its input")
    if m in ("add", "sub"):
        srcs = ops[1:] if len(ops) == 3 else ops
        terms: list = []
        reads: list[MemLoc] = []
        pre: list[Op] = []
        for k, op in enumerate(srcs):
            neg = m == "sub" and k == 1
            if op.kind == IMM:
                terms.append(Const(-op.value if neg else op.value))
                continue
            if op.kind != REG or neg:
                raise NonAffine(f"{ins}: unsupported operand {op}")
            if op.value == PC:
                t = versions.temp()
                pre.append(Op(t, "INT_ADD", (Const(placed), Const(_pc_value(ins, placed) - placed))))
                terms.append(t)
            else:
                src = regloc(op.value)
                terms.append(_use_var(dfg, versions, addr, src))
                reads.append(src)
        if len(terms) != 2:
            raise NonAffine(f"{ins}: unexpected operand count")
        return pre + [Op(dst, "INT_ADD", tuple(terms))], reads
    raise NonAffine(f"{ins} is outside the COPY/INT_ADD fragment")


def _stack_loc(dfg: Dfg, addr: int) -> MemLoc | None:
    for (use, loc) in dfg.reaching:
        if use == addr and loc.kind == "stack_slot":
            return loc
    return None


def _use_var(dfg: Dfg, versions: _Versions, use: int, loc: MemLoc) -> Var:
    d = _single_def(dfg, use, loc)
    name = loc.key if loc.kind == "register" else str(loc)
    return versions.of(d, name)


def _read_word(dfg: Dfg, addr: int) -> int:
    img = dfg.cfg.img
    if img is None:
        raise SliceEscapes(f"no image to read literal {addr:#x}")
    return img.read_word(addr)


# -- equations -------------------------------------------------------------------------

def build_equations(slice_: list[SliceStmt], target: Var, required: int) -> EquationSystem:
    """Flatten a slice into a single-assignment system plus the target constraint."""
    if not slice_:
        raise ValueError("empty slice")
    eqs: list[Op] = []
    defined: set[Var] = set()
    slots: list[Slot] = []
    for st in slice_:
        for op in st.ir:
            if op.opcode not in ("COPY", "INT_ADD"):
                raise NonAffine(f"opcode {op.opcode}")
            if op.dst in defined:
                continue
            defined.add(op.dst)
            eqs.append(op)
            for a in op.args:
                if isinstance(a, Slot) and a not in slots:
                    slots.append(a)
    for op in eqs:
        for a in op.args:
            if isinstance(a, Var) and a not in defined:
                raise SliceEscapes(f"{a} is used but not defined in the slice")
    # address order is not always execution order (loops); sort topologically
    ordered: list[Op] = []
    done: set[Var] = set()
    pending = list(eqs)
    while pending:
        ready = [op for op in pending if all(not isinstance(a, Var) or a in done for a in op.args)]
        if not ready:
            raise NonAffine("cyclic dependence in slice")
        for op in ready:
            ordered.append(op)
            done.add(op.dst)
        pending = [op for op in pending if op not in ready]
    eqs = ordered
    if target not in defined:
        raise SliceEscapes(f"target {target} is not defined by the slice")
    return EquationSystem(eqs, target, required & MASK, slots)


def _inverse_odd(a: int) -> int:
    return pow(a, -1, 1 << 32)


def solve(sys: EquationSystem) -> SolveResult:
    """Back-substitution over affine forms; see the module docstring."""
    free = [s for s in sys.slots if s.free]
    if len(free) > 1:
        raise Underdetermined(f"{len(free)} free slots in one chain: " + ", ".join(map(str, free)))
    forms: dict[Var, tuple[int, int]] = {}

    def form(a) -> tuple[int, int]:
        if isinstance(a, Const):
            return 0, a.value & MASK
        if isinstance(a, Slot):
            return (1, 0) if a.free else (0, a.value & MASK)
        return forms[a]

    for op in sys.equations:
        if op.opcode == "COPY":
            forms[op.dst] = form(op.args[0])
        else:
            (a1, c1), (a2, c2) = form(op.args[0]), form(op.args[1])
            forms[op.dst] = ((a1 + a2) & MASK, (c1 + c2) & MASK)
    a, c = forms[sys.target]
    rhs = (sys.required - c) & MASK
    if a == 0:
        if rhs:
            raise Inconsistent(f"{sys.target} is fixed at {c:#x}, required {sys.required:#x}")
        return SolveResult([], sys)
    if not free:
        raise Inconsistent("coefficient without a free slot")
    if a & 1:
        value = rhs * _inverse_odd(a) & MASK
    else:
        tz = (a & -a).bit_length() - 1
        if rhs & ((1 << tz) - 1):
            raise Inconsistent(f"{a:#x}*s == {rhs:#x} has no solution mod 2^32")
        mod = 1 << (32 - tz)
        value = (rhs >> tz) * pow(a >> tz, -1, mod) % mod
    return SolveResult([(free[0], value)], sys)


def evaluate(sys: EquationSystem, assignment: dict[Slot, int]) -> dict[Var, int]:
    """Direct evaluation of the system (used by the slicer's own self-check)."""
    env: dict[Var, int] = {}

    def val(a) -> int:
        if isinstance(a, Const):
            return a.value & MASK
        if isinstance(a, Slot):
            return assignment.get(a, a.value) & MASK
        return env[a]

    for op in sys.equations:
        env[op.dst] = val(op.args[0]) if op.opcode == "COPY" else (val(op.args[0]) + val(op.args[1])) & MASK
    return env


def solve_reference(dfg: Dfg, ref: Reference, placement: dict[int, int], required: int,
                    free_loads: set[int] | None = None) -> SolveResult:
    stmts, target = backward_slice(dfg, ref, placement, free_loads)
    sys = build_equations(stmts, target, required)
    res = solve(sys)
    got = evaluate(sys, res.as_dict())[target]
    if got != required & MASK:
        raise Inconsistent(f"self-check failed: {got:#x} != {required:#x}")
    return res


def dump_slice(stmts: list[SliceStmt]) -> str:
    lines = []
    for st in stmts:
        lines.append(f"{st.instr}")
        lines.extend(f"    {op}" for op in st.ir)
    return "\n".join(lines)
