"""Small label-relaxing assembler used to build fixtures.

Programs are lists of items appended through ``Asm`` helpers.  Layout is a
fixpoint: every instruction starts at its narrowest width, and any encoding
that outgrows its slot bumps the width and restarts the pass.  Widths only
grow, so the loop terminates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..isa import (AL, ARM, COND_NAMES, LOAD, TARGET, THUMB, Instr, Operand, encode, imm, reg,
                   rlist)

COND = {name: i for i, name in enumerate(COND_NAMES) if name}
COND.update({"al": AL, "": AL, "hs": 2, "lo": 3})


@dataclass(frozen=True)
class Sym:
    """Address of a label or external symbol, plus an addend."""
    name: str
    addend: int = 0


@dataclass(frozen=True)
class PcRel:
    """Literal value ``sym + addend - PC(anchor)`` for position-independent loads."""
    sym: str
    anchor: str
    addend: int = 0


@dataclass
class _Ins:
    mnemonic: str
    ops: tuple
    cond: int
    s: bool
    min_width: int


@dataclass
class _Label:
    name: str


@dataclass
class _Word:
    value: object


@dataclass
class _Bytes:
    data: bytes


@dataclass
class _Align:
    n: int


@dataclass
class Asm:
    mode: str = THUMB
    items: list = field(default_factory=list)
    _pending: list = field(default_factory=list)
    _n: int = 0

    def label(self, name: str) -> "Asm":
        self.items.append(_Label(name))
        return self

    def i(self, mnemonic: str, *ops, cond: str | int = AL, s: bool = False, wide: bool = False) -> "Asm":
        c = COND[cond] if isinstance(cond, str) else cond
        ops = tuple(reg(o) if isinstance(o, int) and not isinstance(o, bool) else o for o in ops)
        self.items.append(_Ins(mnemonic, ops, c, s, 4 if wide else 0))
        return self

    def movs(self, rd: int, value: int) -> "Asm":
        return self.i("mov", rd, imm(value), s=self.mode == THUMB)

    def b(self, target: str, cond: str | int = AL, wide: bool = False) -> "Asm":
        return self.i("b", Sym(target), cond=cond, wide=wide)

    def bl(self, target: str) -> "Asm":
        return self.i("bl", Sym(target))

    def blx(self, target: str) -> "Asm":
        return self.i("blx", Sym(target))

    def push(self, *regs: int) -> "Asm":
        return self.i("push", rlist(*regs))

    def pop(self, *regs: int) -> "Asm":
        return self.i("pop", rlist(*regs))

    def ldr_lit(self, rd: int, value, wide: bool = False) -> "Asm":
        """``ldr rd, =value``; the word lands in the next ``pool()``."""
        self._n += 1
        name = f".lit{id(self):x}.{self._n}"
        self._pending.append((name, value))
        self.items.append(_Ins("ldr", (reg(rd), _LitRef(name)), AL, False, 4 if wide else 0))
        return self

    def pool(self) -> "Asm":
        if self._pending:
            self.items.append(_Align(4))
            for name, value in self._pending:
                self.items.append(_Label(name))
                self.items.append(_Word(value))
            self._pending = []
        return self

    def word(self, value) -> "Asm":
        self.items.append(_Word(value))
        return self

    def data(self, data: bytes) -> "Asm":
        self.items.append(_Bytes(data))
        return self

    def align(self, n: int = 4) -> "Asm":
        self.items.append(_Align(n))
        return self

    def extend(self, other: "Asm") -> "Asm":
        other.pool()
        self.items.extend(other.items)
        return self


@dataclass(frozen=True)
class _LitRef:
    name: str


@dataclass
class Assembled:
    base: int
    code: bytes
    labels: dict[str, int]
    instrs: list[Instr]
    item_addrs: list[int]

    @property
    def end(self) -> int:
        return self.base + len(self.code)


class AsmError(Exception):
    pass


def _value(expr, labels: dict[str, int], mode: str) -> int:
    if isinstance(expr, int):
        return expr & 0xFFFFFFFF
    if isinstance(expr, Sym):
        if expr.name not in labels:
            raise AsmError(f"undefined symbol {expr.name!r}")
        return (labels[expr.name] + expr.addend) & 0xFFFFFFFF
    if isinstance(expr, PcRel):
        for n in (expr.sym, expr.anchor):
            if n not in labels:
                raise AsmError(f"undefined symbol {n!r}")
        bias = 4 if mode == THUMB else 8
        return (labels[expr.sym] + expr.addend - (labels[expr.anchor] + bias)) & 0xFFFFFFFF
    raise AsmError(f"bad literal expression {expr!r}")


def _resolve_ops(ops, labels, mnemonic):
    out = []
    for op in ops:
        if isinstance(op, Sym):
            out.append(Operand(TARGET, _value(op, labels, THUMB)))
        elif isinstance(op, _LitRef):
            out.append(Operand(LOAD, labels[op.name]))
        else:
            out.append(op)
    return tuple(out)


def layout(items: list, base: int, mode: str, externs: dict[str, int] | None = None,
           max_rounds: int = 64) -> Assembled:
    """Assemble ``items`` at ``base``; ``externs`` supplies outside symbols."""
    externs = dict(externs or {})
    widths: dict[int, int] = {}
    for k, it in enumerate(items):
        if isinstance(it, _Ins):
            widths[k] = 4 if mode == ARM else max(2, it.min_width)
    for _ in range(max_rounds):
        labels = dict(externs)
        addrs = []
        a = base
        for k, it in enumerate(items):
            if isinstance(it, _Align):
                a = -(-a // it.n) * it.n
            addrs.append(a)
            if isinstance(it, _Label):
                labels[it.name] = a
            elif isinstance(it, _Ins):
                a += widths[k]
            elif isinstance(it, _Word):
                a += 4
            elif isinstance(it, _Bytes):
                a += len(it.data)
        grew = False
        out = bytearray()
        instrs = []
        for k, it in enumerate(items):
            pos = addrs[k] - base
            if len(out) < pos:
                out.extend(b"\0" * (pos - len(out)))
            if isinstance(it, _Ins):
                ops = _resolve_ops(it.ops, labels, it.mnemonic)
                try:
                    ins = encode(it.mnemonic, ops, addrs[k], mode, it.cond, it.s, widths[k])
                except Exception as exc:
                    raise AsmError(f"{it.mnemonic} at {addrs[k]:#x}: {exc}") from exc
                if ins.width > widths[k]:
                    widths[k] = ins.width
                    grew = True
                    break
                out.extend(ins.raw)
                instrs.append(ins)
            elif isinstance(it, _Word):
                out.extend(struct.pack("<I", _value(it.value, labels, mode)))
            elif isinstance(it, _Bytes):
                out.extend(it.data)
        if not grew:
            local = {k: v for k, v in labels.items() if k not in externs}
            return Assembled(base, bytes(out), local, instrs, addrs)
    raise AsmError("layout did not converge")


def assemble(asm: Asm, base: int, externs: dict[str, int] | None = None) -> Assembled:
    asm.pool()
    return layout(asm.items, base, asm.mode, externs)


def item_size_upper_bound(items: list) -> int:
    return sum(4 if isinstance(it, (_Ins, _Word)) else len(it.data) if isinstance(it, _Bytes)
               else it.n if isinstance(it, _Align) else 0 for it in items)
