"""Reference interpreter for the supported ARM/Thumb subset.

Used as the execution oracle: patched and fixed builds are run on the same
inputs and their observable effects compared.  The codec supplies register
and immediate fields, but every pc-relative displacement is re-derived here
from the raw bits and cross-checked, so a codec displacement bug shows up as
a disagreement rather than as a silently consistent wrong answer.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable

from ..elf import PF_W, BinaryImage
from ..errors import FuelExhausted, UndefinedInstruction, UnmappedAccess, UnknownEncoding
from ..isa import AL, ARM, IMM, LOAD, LR, PC, REG, SHREG, SP, TARGET, THUMB, Instr, decode

log = logging.getLogger(__name__)

SENTINEL = 0xFFFFFFF0
STACK_TOP = 0x7FF00000
STACK_SIZE = 0x10000
MASK = 0xFFFFFFFF


class DisplacementMismatch(AssertionError):
    pass


def _sx(v: int, bits: int) -> int:
    return v - (1 << bits) if v >> (bits - 1) & 1 else v


def independent_target(ins: Instr) -> int | None:
    """Destination of a pc-relative operand computed straight from the bits."""
    raw = ins.raw
    a = ins.addr
    if ins.mode == THUMB:
        if ins.width == 2:
            h = struct.unpack("<H", raw)[0]
            if h >> 12 == 0xD:  # b<c> T1
                return a + 4 + _sx(h & 0xFF, 8) * 2
            if h >> 11 == 0x1C:  # b T2
                return a + 4 + _sx(h & 0x7FF, 11) * 2
            if h >> 11 == 0x9:  # ldr literal T1
                return ((a + 4) & ~3) + (h & 0xFF) * 4
            if h >> 11 == 0x14:  # adr T1
                return ((a + 4) & ~3) + (h & 0xFF) * 4
            return None
        h1, h2 = struct.unpack("<HH", raw)
        if h1 >> 11 == 0x1E and h2 >> 15:
            s = h1 >> 10 & 1
            j1, j2 = h2 >> 13 & 1, h2 >> 11 & 1
            link, t4 = h2 >> 14 & 1, h2 >> 12 & 1
            if not link and not t4:  # b<c>.w T3
                off = s << 20 | j2 << 19 | j1 << 18 | (h1 & 0x3F) << 12 | (h2 & 0x7FF) << 1
                return a + 4 + _sx(off, 21)
            i1, i2 = 1 - (j1 ^ s), 1 - (j2 ^ s)
            off = _sx(s << 24 | i1 << 23 | i2 << 22 | (h1 & 0x3FF) << 12 | (h2 & 0x7FF) << 1, 25)
            if link and not t4:  # blx T2 lands word aligned
                return ((a + 4) & ~3) + off
            return a + 4 + off
        if h1 & 0xFF7F == 0xF85F:  # ldr.w literal
            u = h1 >> 7 & 1
            off = h2 & 0xFFF
            return ((a + 4) & ~3) + (off if u else -off)
        if h1 & 0xFBFF == 0xF20F and h2 >> 15 == 0:  # adr.w add form
            off = (h1 >> 10 & 1) << 11 | (h2 >> 12 & 7) << 8 | h2 & 0xFF
            return ((a + 4) & ~3) + off
        if h1 & 0xFBFF == 0xF2AF and h2 >> 15 == 0:  # adr.w sub form
            off = (h1 >> 10 & 1) << 11 | (h2 >> 12 & 7) << 8 | h2 & 0xFF
            return ((a + 4) & ~3) - off
        return None
    w = struct.unpack("<I", raw)[0]
    if w >> 25 & 7 == 0b101:  # b / bl / blx imm
        off = _sx(w & 0xFFFFFF, 24) * 4
        if w >> 28 == 0xF:
            off |= (w >> 24 & 1) << 1
        return a + 8 + off
    if w & 0x0E5F0000 == 0x041F0000:  # ldr/ldrb literal
        off = w & 0xFFF
        return a + 8 + (off if w >> 23 & 1 else -off)
    if w & 0x0FFF0000 in (0x028F0000, 0x024F0000):  # adr
        rot = (w >> 8 & 0xF) * 2
        v = w & 0xFF
        v = (v >> rot | v << (32 - rot)) & MASK if rot else v
        return a + 8 + (v if w >> 23 & 1 else -v)
    return None


@dataclass
class Call:
    name: str
    args: tuple


@dataclass
class Result:
    r0: int
    calls: list[Call]
    steps: int
    memory: "Memory"

    def read_global(self, addr: int, size: int) -> bytes:
        return self.memory.read(addr, size)


class Memory:
    """Flat memory built from PT_LOAD segments plus a stack."""

    def __init__(self, img: BinaryImage):
        self.regions: list[tuple[int, bytearray, bool]] = []
        for seg in img.load_segments:
            buf = bytearray(seg.memsz)
            buf[:seg.filesz] = img.data[seg.offset:seg.offset + seg.filesz]
            self.regions.append((seg.vaddr, buf, bool(seg.p_flags & PF_W)))
        self.regions.append((STACK_TOP - STACK_SIZE, bytearray(STACK_SIZE), True))

    def _find(self, addr: int, size: int, write: bool):
        for base, buf, w in self.regions:
            if base <= addr and addr + size <= base + len(buf):
                if write and not w:
                    raise UnmappedAccess(f"write to read-only {addr:#x}")
                return buf, addr - base
        raise UnmappedAccess(f"access to unmapped [{addr:#x}, +{size})")

    def read(self, addr: int, size: int) -> bytes:
        buf, off = self._find(addr, size, False)
        return bytes(buf[off:off + size])

    def write(self, addr: int, data: bytes) -> None:
        buf, off = self._find(addr, len(data), True)
        buf[off:off + len(data)] = data

    def u32(self, addr: int) -> int:
        return struct.unpack("<I", self.read(addr, 4))[0]

    def mapped(self, addr: int) -> bool:
        try:
            self._find(addr, 1, False)
            return True
        except UnmappedAccess:
            return False

    def cstring(self, addr: int, limit: int = 256) -> bytes:
        out = bytearray()
        while len(out) < limit:
            c = self.read(addr + len(out), 1)[0]
            if c == 0:
                break
            out.append(c)
        return bytes(out)


@dataclass
class Machine:
    img: BinaryImage
    stubs: dict[str, Callable[[tuple], int]] = field(default_factory=dict)
    normalize_base: int | None = None
    check_displacements: bool = True

    def __post_init__(self):
        self.mem = Memory(self.img)
        self.r = [0] * 16
        self.n = self.z = self.c = self.v = False
        self.calls: list[Call] = []
        self._cache: dict[tuple[int, str], Instr] = {}
        if self.normalize_base is None:
            self.normalize_base = min(s.vaddr for s in self.img.load_segments)

    # -- helpers -----------------------------------------------------------------

    def _cond(self, c: int) -> bool:
        n, z, cf, v = self.n, self.z, self.c, self.v
        base = c >> 1
        res = (z, cf, n, v, cf and not z, n == v, n == v and not z, True)[base]
        return res if c & 1 == 0 or c == 15 else not res

    def _decode(self, addr: int, mode: str) -> Instr:
        key = (addr, mode)
        ins = self._cache.get(key)
        if ins is None:
            width = 4 if mode == ARM else 2
            try:
                head = self.mem.read(addr, width)
                if mode == THUMB and head[1] >> 3 in (0x1D, 0x1E, 0x1F):
                    head = self.mem.read(addr, 4)
                ins = decode(head, addr, mode)
            except UnknownEncoding as exc:
                raise UndefinedInstruction(str(exc)) from exc
            if self.check_displacements and ins.is_pc_relative:
                other = independent_target(ins)
                if other is not None and other & MASK != ins.target:
                    raise DisplacementMismatch(f"{ins}: codec {ins.target:#x} vs bits {other:#x}")
            self._cache[key] = ins
        return ins

    def _val(self, ins: Instr, op) -> int:
        if op.kind == REG:
            return ins.pc & MASK if op.value == PC else self.r[op.value]
        if op.kind == IMM:
            return op.value & MASK
        if op.kind == SHREG:
            v = self.r[op.value] if op.value != PC else ins.pc
            kind, amt = op.shift
            if kind == "lsl":
                return v << amt & MASK
            if kind == "lsr":
                return 0 if amt >= 32 else v >> amt
            if kind == "asr":
                return (_sx(v, 32) >> (amt or 32)) & MASK
            return (v >> amt | v << (32 - amt)) & MASK if amt else v
        if op.kind in (TARGET, LOAD):
            return op.value
        raise ValueError(op)

    def _nz(self, res: int) -> None:
        self.n = bool(res >> 31 & 1)
        self.z = res & MASK == 0

    def _addc(self, a: int, b: int, carry: int, set_flags: bool) -> int:
        full = a + b + carry
        res = full & MASK
        if set_flags:
            self._nz(res)
            self.c = full > MASK
            self.v = ((a ^ res) & (b ^ res)) >> 31 & 1 == 1
        return res

    def _host_call(self, addr: int) -> None:
        name = self.img.plt_stubs[addr]
        args = tuple(self._norm(self.r[k]) for k in range(4))
        self.calls.append(Call(name, args))
        fn = self.stubs.get(name)
        self.r[0] = (fn(tuple(self.r[:4]), self) if fn else 0) & MASK
        for k in (1, 2, 3, 12):
            self.r[k] = 0
        self._branch_exchange(self.r[LR])

    def _norm(self, v: int):
        """Pointers compare by the bytes they point at, small values as ints."""
        if v >= self.normalize_base and self.mem.mapped(v):
            try:
                return self.mem.cstring(v)
            except UnmappedAccess:
                return v
        return v

    def _branch_exchange(self, dest: int) -> None:
        if dest == SENTINEL or dest == SENTINEL | 1:
            self.pc, self.mode = SENTINEL, self.mode
            return
        self.mode = THUMB if dest & 1 else ARM
        self.pc = dest & ~1 if dest & 1 else dest & ~3

    # -- execution ----------------------------------------------------------------

    def call(self, entry: int, mode: str, args: tuple[int, ...] = (), fuel: int = 200000) -> Result:
        self.r = [0] * 16
        for k, a in enumerate(args[:4]):
            self.r[k] = a & MASK
        self.r[SP] = STACK_TOP - 64
        self.r[LR] = SENTINEL | 1
        self.pc, self.mode = entry, mode
        steps = 0
        while self.pc != SENTINEL:
            if steps >= fuel:
                raise FuelExhausted(f"no return after {fuel} steps (pc {self.pc:#x})")
            steps += 1
            if self.pc in self.img.plt_stubs:
                self._host_call(self.pc)
                continue
            self.step()
        return Result(self.r[0], self.calls, steps, self.mem)

    def step(self) -> None:
        ins = self._decode(self.pc, self.mode)
        nxt = ins.end
        if ins.cond != AL and not self._cond(ins.cond):
            self.pc = nxt
            return
        self.pc = nxt
        self.execute(ins)

    def execute(self, ins: Instr) -> None:
        m, ops, r = ins.mnemonic, ins.operands, self.r
        sf = ins.setflags
        if m == "nop":
            return
        if m == "udf":
            raise UndefinedInstruction(f"udf at {ins.addr:#x}")
        if m == "b":
            self.pc = ins.target
            return
        if m in ("bl", "blx"):
            ret = ins.end | (1 if ins.mode == THUMB else 0)
            if ops[0].kind == REG:
                dest = r[ops[0].value]
                r[LR] = ret
                self._branch_exchange(dest)
                return
            r[LR] = ret
            self.pc = ins.target
            if m == "blx":
                self.mode = ARM if ins.mode == THUMB else THUMB
            return
        if m == "bx":
            self._branch_exchange(r[ops[0].value] if ops[0].value != PC else ins.pc)
            return
        if m == "push":
            regs = [k for k in range(16) if ops[0].value >> k & 1]
            sp = r[SP] - 4 * len(regs)
            for k, rr in enumerate(regs):
                self.mem.write(sp + 4 * k, struct.pack("<I", r[rr]))
            r[SP] = sp & MASK
            return
        if m == "pop":
            regs = [k for k in range(16) if ops[0].value >> k & 1]
            sp = r[SP]
            vals = [self.mem.u32(sp + 4 * k) for k in range(len(regs))]
            r[SP] = (sp + 4 * len(regs)) & MASK
            for rr, v in zip(regs, vals):
                if rr == PC:
                    self._branch_exchange(v)
                else:
                    r[rr] = v
            return
        if m in ("ldr", "ldrb", "str", "strb"):
            self._mem_op(ins)
            return
        if m == "adr":
            r[ops[0].value] = ins.target & MASK
            return
        if m == "movw":
            r[ops[0].value] = ops[1].value & 0xFFFF
            return
        if m == "movt":
            d = ops[0].value
            r[d] = (r[d] & 0xFFFF) | (ops[1].value & 0xFFFF) << 16
            return
        if m == "cmp":
            a, b = self._val(ins, ops[0]), self._val(ins, ops[1])
            self._addc(a, ~b & MASK, 1, True)
            return
        d = ops[0].value
        srcs = ops[1:] if len(ops) > 2 or m in ("mov",) else ops
        if m == "mov":
            v = self._val(ins, ops[1])
            self._write(ins, d, v, sf)
            return
        if m in ("lsl", "lsr"):
            v = self._val(ins, ops[1])
            amt = ops[2].value
            if m == "lsl":
                res = v << amt & MASK
                carry = bool(v >> (32 - amt) & 1) if amt else self.c
            else:
                amt = amt or 32
                res = v >> amt if amt < 32 else 0
                carry = bool(v >> (amt - 1) & 1)
            if sf:
                self._nz(res)
                self.c = carry
            r[d] = res
            return
        a, b = self._val(ins, srcs[0]), self._val(ins, srcs[1])
        if m == "add":
            res = self._addc(a, b, 0, sf)
        elif m == "sub":
            res = self._addc(a, ~b & MASK, 1, sf)
        elif m == "mul":
            res = a * b & MASK
            if sf:
                self._nz(res)
        elif m in ("and", "orr", "eor"):
            res = a & b if m == "and" else a | b if m == "orr" else a ^ b
            if sf:
                self._nz(res)
        else:
            raise UndefinedInstruction(f"no semantics for {ins}")
        self._write(ins, d, res, False)

    def _write(self, ins: Instr, d: int, v: int, sf: bool) -> None:
        if sf:
            self._nz(v)
        if d == PC:
            if ins.mode == ARM:
                self._branch_exchange(v)
            else:
                self.pc = v & ~1
            return
        self.r[d] = v & MASK

    def _mem_op(self, ins: Instr) -> None:
        ops = ins.operands
        rt = ops[0].value
        if ops[1].kind == LOAD:
            addr = ops[1].value
        else:
            base = ins.pc if ops[1].value == PC else self.r[ops[1].value]
            if ops[1].value == PC:
                base &= ~3
            addr = (base + self._val(ins, ops[2])) & MASK if len(ops) > 2 else base
            if len(ops) > 2 and ops[2].kind == IMM and ops[2].value < 0:
                addr = (base + ops[2].value) & MASK
        m = ins.mnemonic
        if m == "ldr":
            v = self.mem.u32(addr)
            if rt == PC:
                self._branch_exchange(v)
            else:
                self.r[rt] = v
        elif m == "ldrb":
            self.r[rt] = self.mem.read(addr, 1)[0]
        elif m == "str":
            self.mem.write(addr, struct.pack("<I", self.r[rt]))
        else:
            self.mem.write(addr, bytes([self.r[rt] & 0xFF]))


def run(img: BinaryImage, entry: int, mode: str, args: tuple[int, ...] = (),
        stubs: dict | None = None, fuel: int = 200000) -> Result:
    return Machine(img, dict(stubs or {})).call(entry, mode, args, fuel)
