"""Decoder and encoder for the supported ARM (A32) and Thumb/Thumb-2 subset.

Instructions are described by a static table of templates.  Each template
owns a bit pattern (``mask``/``value``), a decoder that turns a matching word
into operands, and an encoder that turns operands back into a word or
declines.  Encoding tries the templates of a mnemonic from narrowest to
widest, so the first template whose displacement range covers the request
wins.

A 32-bit Thumb word is stored as ``(first_halfword << 16) | second_halfword``
and serialized as two little-endian halfwords.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence

from .errors import Misaligned, NotEncodable, OutOfRange, UnknownEncoding

ARM = "arm"
THUMB = "thumb"

REG = "register"
IMM = "immediate"
TARGET = "pc_relative_target"
LOAD = "pc_relative_load"
RLIST = "register_list"
SHREG = "shifted_register"

AL = 14
COND_NAMES = ("eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc",
              "hi", "ls", "ge", "lt", "gt", "le", "")
SHIFT_NAMES = ("lsl", "lsr", "asr", "ror")
REG_NAMES = ("r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8", "r9",
             "r10", "r11", "r12", "sp", "lr", "pc")
SP, LR, PC = 13, 14, 15

MNEMONICS = frozenset({
    "push", "pop", "mov", "movw", "movt", "add", "sub", "cmp", "and", "orr",
    "eor", "lsl", "lsr", "mul", "ldr", "ldrb", "str", "strb", "adr", "b",
    "bl", "blx", "bx", "nop", "udf",
})
BRANCHES = frozenset({"b", "bl", "blx"})


@dataclass(frozen=True)
class Operand:
    kind: str
    value: int
    # Encoded displacement of pc-relative operands (derived, so not compared).
    disp: int | None = field(default=None, compare=False)
    # (shift type, amount) for shifted_register operands.
    shift: tuple[str, int] | None = None

    @property
    def is_address_use(self) -> bool:
        return self.kind in (TARGET, LOAD)

    def __str__(self) -> str:
        if self.kind == REG:
            return REG_NAMES[self.value]
        if self.kind == IMM:
            return f"#{self.value:#x}" if abs(self.value) > 9 else f"#{self.value}"
        if self.kind == LOAD:
            if self.disp is None:
                return f"[{self.value:#x}]"
            return f"[pc, #{self.disp:#x}] ; {self.value:#x}"
        if self.kind == TARGET:
            return f"{self.value:#x}"
        if self.kind == RLIST:
            return "{" + ", ".join(REG_NAMES[r] for r in range(16) if self.value >> r & 1) + "}"
        return f"{REG_NAMES[self.value]}, {self.shift[0]} #{self.shift[1]}"


def reg(r: int) -> Operand:
    return Operand(REG, r)


def imm(v: int) -> Operand:
    return Operand(IMM, v)


def target(addr: int) -> Operand:
    return Operand(TARGET, addr)


def literal(addr: int) -> Operand:
    return Operand(LOAD, addr)


def rlist(*regs: int) -> Operand:
    mask = 0
    for r in regs:
        mask |= 1 << r
    return Operand(RLIST, mask)


def shifted(r: int, kind: str, amount: int) -> Operand:
    return Operand(SHREG, r, shift=(kind, amount))


@dataclass(frozen=True)
class Instr:
    addr: int
    mode: str
    width: int
    mnemonic: str
    operands: tuple[Operand, ...]
    raw: bytes
    cond: int = AL
    setflags: bool = False
    encoding: str = ""

    @property
    def pc(self) -> int:
        """Value read from the PC register while executing this instruction."""
        return self.addr + (4 if self.mode == THUMB else 8)

    @property
    def end(self) -> int:
        return self.addr + self.width

    @property
    def pc_operand(self) -> Operand | None:
        for op in self.operands:
            if op.is_address_use:
                return op
        return None

    @property
    def target(self) -> int | None:
        op = self.pc_operand
        return None if op is None else op.value

    @property
    def is_pc_relative(self) -> bool:
        return self.pc_operand is not None

    @property
    def is_branch(self) -> bool:
        return self.mnemonic == "b"

    @property
    def is_call(self) -> bool:
        return self.mnemonic in ("bl", "blx") and self.operands[0].kind == TARGET

    @property
    def is_conditional(self) -> bool:
        return self.cond != AL

    @property
    def is_return(self) -> bool:
        if self.mnemonic == "bx" and self.operands[0].value == LR:
            return True
        return self.mnemonic == "pop" and bool(self.operands[0].value >> PC & 1)

    @property
    def is_indirect(self) -> bool:
        """Register-indirect control transfer other than a return."""
        if self.mnemonic == "bx":
            return self.operands[0].value != LR
        return self.mnemonic == "blx" and self.operands[0].kind == REG

    @property
    def uses_pc_value(self) -> bool:
        """True when the result depends on the instruction's own address."""
        if self.is_pc_relative:
            return True
        return any(op.kind == REG and op.value == PC for op in self.operands)

    def match_key(self) -> tuple:
        """Comparison key ignoring address-valued operands and exact width."""
        ops = tuple(op for op in self.operands if not op.is_address_use)
        return (self.mode, self.mnemonic, self.cond, self.setflags, ops)

    def __str__(self) -> str:
        name = self.mnemonic + ("s" if self.setflags else "") + COND_NAMES[self.cond]
        if self.width == 4 and self.mode == THUMB and self.mnemonic not in ("bl", "blx", "movw", "movt"):
            name += ".w"
        ops = ", ".join(str(op) for op in self.operands)
        return f"{self.addr:#x}: {name} {ops}".rstrip()


# -- bit helpers -------------------------------------------------------------

def sign_extend(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def align4(addr: int) -> int:
    return addr & ~3


def _ror(value: int, amount: int) -> int:
    amount %= 32
    return ((value >> amount) | (value << (32 - amount))) & 0xFFFFFFFF


def arm_expand_imm(field12: int) -> int:
    return _ror(field12 & 0xFF, 2 * (field12 >> 8))


def arm_encode_imm(value: int) -> int | None:
    """Return the 12-bit rotated-immediate field for ``value`` or None."""
    value &= 0xFFFFFFFF
    for rot in range(16):
        v = ((value << (2 * rot)) | (value >> (32 - 2 * rot))) & 0xFFFFFFFF if rot else value
        if v < 256:
            return rot << 8 | v
    return None


def _disp(dest: int, base: int) -> int:
    """Signed 32-bit distance from ``base`` to ``dest``."""
    return sign_extend((dest - base) & 0xFFFFFFFF, 32)


class _Range(Exception):
    """Operand shape fits the template but a value exceeds its range."""


# -- template table -------------------------------------------------------------

# decoders return (operands, cond, setflags[, mnemonic override]) or None
DecodeFn = Callable[[int, int], "tuple | None"]
EncodeFn = Callable[[tuple, int, int, bool], "int | None"]


@dataclass(frozen=True)
class Template:
    name: str
    mode: str
    width: int
    mnemonic: str
    mask: int
    value: int
    decode: DecodeFn
    encode: EncodeFn

    @property
    def free_bits(self) -> int:
        full = (1 << (8 * self.width)) - 1
        return bin(full & ~self.mask).count("1")

    def field_words(self, limit: int | None = None) -> Iterator[int]:
        """Yield words matching the fixed bits; all of them, or ``limit`` spread
        deterministically over the free-bit space plus its extremes."""
        positions = [b for b in range(8 * self.width) if not self.mask >> b & 1]
        n = len(positions)
        total = 1 << n
        if limit is None or total <= limit:
            indices: Iterator[int] = iter(range(total))
        else:
            stride = (total // limit) | 1
            # an odd stride visits distinct residues; add both extremes
            indices = iter([0, total - 1] + [(k * stride) % total for k in range(1, limit - 1)])
        for k in indices:
            w = self.value
            for i, b in enumerate(positions):
                if k >> i & 1:
                    w |= 1 << b
            yield w


TEMPLATES: list[Template] = []


def _t(name, mode, width, mnemonic, mask, value, dec, enc):
    TEMPLATES.append(Template(name, mode, width, mnemonic, mask, value, dec, enc))


def _is(ops: Sequence[Operand], *kinds: str) -> bool:
    return len(ops) == len(kinds) and all(o.kind == k for o, k in zip(ops, kinds))


def _lo(*regs: int) -> bool:
    return all(0 <= r < 8 for r in regs)


# Thumb 16-bit ------------------------------------------------------------------

def _thumb_shift_imm(name, opbits, mnemonic, zero_is_32):
    def dec(w, addr):
        i5 = (w >> 6) & 31
        if i5 == 0 and not zero_is_32:
            return None
        amount = 32 if i5 == 0 else i5
        return (reg(w & 7), reg((w >> 3) & 7), imm(amount)), AL, True

    def enc(ops, cond, addr, sf):
        if cond != AL or not sf or not _is(ops, REG, REG, IMM):
            return None
        d, m, a = ops[0].value, ops[1].value, ops[2].value
        hi = 32 if zero_is_32 else 31
        if not _lo(d, m) or not 1 <= a <= hi:
            return None
        return opbits << 11 | (a & 31) << 6 | m << 3 | d

    _t(name, THUMB, 2, mnemonic, 0xF800, opbits << 11, dec, enc)


def _mov_lo_reg_dec(w, addr):
    return (reg(w & 7), reg((w >> 3) & 7)), AL, True


def _mov_lo_reg_enc(ops, cond, addr, sf):
    if cond != AL or not sf or not _is(ops, REG, REG) or not _lo(ops[0].value, ops[1].value):
        return None
    return ops[1].value << 3 | ops[0].value


_t("movs.T2", THUMB, 2, "mov", 0xFFC0, 0x0000, _mov_lo_reg_dec, _mov_lo_reg_enc)
_thumb_shift_imm("lsl.T1", 0b00000, "lsl", False)
_thumb_shift_imm("lsr.T1", 0b00001, "lsr", True)


def _thumb_three_reg(name, value, mnemonic):
    def dec(w, addr):
        return (reg(w & 7), reg((w >> 3) & 7), reg((w >> 6) & 7)), AL, True

    def enc(ops, cond, addr, sf):
        if cond != AL or not sf or not _is(ops, REG, REG, REG):
            return None
        d, n, m = (o.value for o in ops)
        if not _lo(d, n, m):
            return None
        return value | m << 6 | n << 3 | d

    _t(name, THUMB, 2, mnemonic, 0xFE00, value, dec, enc)


def _thumb_imm3(name, value, mnemonic):
    def dec(w, addr):
        return (reg(w & 7), reg((w >> 3) & 7), imm((w >> 6) & 7)), AL, True

    def enc(ops, cond, addr, sf):
        if cond != AL or not sf or not _is(ops, REG, REG, IMM):
            return None
        d, n, i = (o.value for o in ops)
        if not _lo(d, n) or not 0 <= i <= 7:
            return None
        return value | i << 6 | n << 3 | d

    _t(name, THUMB, 2, mnemonic, 0xFE00, value, dec, enc)


_thumb_three_reg("add_reg.T1", 0x1800, "add")
_thumb_three_reg("sub_reg.T1", 0x1A00, "sub")
_thumb_imm3("add_imm.T1", 0x1C00, "add")
_thumb_imm3("sub_imm.T1", 0x1E00, "sub")


def _thumb_imm8(name, value, mnemonic, sf_flag):
    def dec(w, addr):
        return (reg((w >> 8) & 7), imm(w & 0xFF)), AL, sf_flag

    def enc(ops, cond, addr, sf):
        if cond != AL or sf != sf_flag or not _is(ops, REG, IMM):
            return None
        d, i = ops[0].value, ops[1].value
        if not _lo(d) or not 0 <= i <= 255:
            return None
        return value | d << 8 | i

    _t(name, THUMB, 2, mnemonic, 0xF800, value, dec, enc)


_thumb_imm8("mov_imm.T1", 0x2000, "mov", True)
_thumb_imm8("cmp_imm.T1", 0x2800, "cmp", False)
_thumb_imm8("add_imm.T2", 0x3000, "add", True)
_thumb_imm8("sub_imm.T2", 0x3800, "sub", True)


def _thumb_dp(name, op, mnemonic):
    value = 0x4000 | op << 6

    def dec(w, addr):
        return (reg(w & 7), reg((w >> 3) & 7)), AL, True

    def enc(ops, cond, addr, sf):
        if cond != AL or not sf or not _is(ops, REG, REG) or not _lo(ops[0].value, ops[1].value):
            return None
        return value | ops[1].value << 3 | ops[0].value

    _t(name, THUMB, 2, mnemonic, 0xFFC0, value, dec, enc)


_thumb_dp("and.T1", 0b0000, "and")
_thumb_dp("eor.T1", 0b0001, "eor")
_thumb_dp("orr.T1", 0b1100, "orr")
_thumb_dp("mul.T1", 0b1101, "mul")


def _add_hi_dec(w, addr):
    dn = ((w >> 7) & 1) << 3 | (w & 7)
    m = (w >> 3) & 15
    if dn == PC:
        return None
    return (reg(dn), reg(m)), AL, False


def _add_hi_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, REG, REG):
        return None
    dn, m = ops[0].value, ops[1].value
    if dn == PC:
        return None
    return 0x4400 | (dn >> 3) << 7 | m << 3 | (dn & 7)


_t("add_reg.T2", THUMB, 2, "add", 0xFF00, 0x4400, _add_hi_dec, _add_hi_enc)


def _cmp_lo_dec(w, addr):
    return (reg(w & 7), reg((w >> 3) & 7)), AL, False


def _cmp_lo_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, REG, REG) or not _lo(ops[0].value, ops[1].value):
        return None
    return 0x4280 | ops[1].value << 3 | ops[0].value


def _cmp_hi_dec(w, addr):
    n = ((w >> 7) & 1) << 3 | (w & 7)
    m = (w >> 3) & 15
    if (n < 8 and m < 8) or n == PC or m == PC:
        return None
    return (reg(n), reg(m)), AL, False


def _cmp_hi_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, REG, REG):
        return None
    n, m = ops[0].value, ops[1].value
    if (n < 8 and m < 8) or n == PC or m == PC:
        return None
    return 0x4500 | (n >> 3) << 7 | m << 3 | (n & 7)


_t("cmp_reg.T1", THUMB, 2, "cmp", 0xFFC0, 0x4280, _cmp_lo_dec, _cmp_lo_enc)
_t("cmp_reg.T2", THUMB, 2, "cmp", 0xFF00, 0x4500, _cmp_hi_dec, _cmp_hi_enc)


def _mov_hi_dec(w, addr):
    d = ((w >> 7) & 1) << 3 | (w & 7)
    if d == PC:
        return None
    return (reg(d), reg((w >> 3) & 15)), AL, False


def _mov_hi_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, REG, REG) or ops[0].value == PC:
        return None
    d, m = ops[0].value, ops[1].value
    return 0x4600 | (d >> 3) << 7 | m << 3 | (d & 7)


_t("mov_reg.T1", THUMB, 2, "mov", 0xFF00, 0x4600, _mov_hi_dec, _mov_hi_enc)


def _bx_like(name, value, mnemonic, allow_pc):
    def dec(w, addr):
        m = (w >> 3) & 15
        if m == PC and not allow_pc:
            return None
        return (reg(m),), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, REG) or (ops[0].value == PC and not allow_pc):
            return None
        return value | ops[0].value << 3

    _t(name, THUMB, 2, mnemonic, 0xFF87, value, dec, enc)


_bx_like("bx.T1", 0x4700, "bx", True)
_bx_like("blx_reg.T1", 0x4780, "blx", False)


def _ldr_lit_t1_dec(w, addr):
    off = (w & 0xFF) * 4
    return (reg((w >> 8) & 7), Operand(LOAD, align4(addr + 4) + off, off)), AL, False


def _ldr_lit_t1_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, REG, LOAD) or not _lo(ops[0].value):
        return None
    off = _disp(ops[1].value, align4(addr + 4))
    if off % 4 or not 0 <= off <= 1020:
        raise _Range(off)
    return 0x4800 | ops[0].value << 8 | off // 4


_t("ldr_lit.T1", THUMB, 2, "ldr", 0xF800, 0x4800, _ldr_lit_t1_dec, _ldr_lit_t1_enc)


def _thumb_mem_reg(name, value, mnemonic):
    def dec(w, addr):
        return (reg(w & 7), reg((w >> 3) & 7), reg((w >> 6) & 7)), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, REG, REG, REG):
            return None
        t, n, m = (o.value for o in ops)
        if not _lo(t, n, m):
            return None
        return value | m << 6 | n << 3 | t

    _t(name, THUMB, 2, mnemonic, 0xFE00, value, dec, enc)


_thumb_mem_reg("str_reg.T1", 0x5000, "str")
_thumb_mem_reg("strb_reg.T1", 0x5400, "strb")
_thumb_mem_reg("ldr_reg.T1", 0x5800, "ldr")
_thumb_mem_reg("ldrb_reg.T1", 0x5C00, "ldrb")


def _thumb_mem_imm5(name, value, mnemonic, scale):
    def dec(w, addr):
        return (reg(w & 7), reg((w >> 3) & 7), imm(((w >> 6) & 31) * scale)), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, REG, REG, IMM):
            return None
        t, n, off = (o.value for o in ops)
        if not _lo(t, n) or off % scale or not 0 <= off <= 31 * scale:
            return None
        return value | (off // scale) << 6 | n << 3 | t

    _t(name, THUMB, 2, mnemonic, 0xF800, value, dec, enc)


_thumb_mem_imm5("str_imm.T1", 0x6000, "str", 4)
_thumb_mem_imm5("ldr_imm.T1", 0x6800, "ldr", 4)
_thumb_mem_imm5("strb_imm.T1", 0x7000, "strb", 1)
_thumb_mem_imm5("ldrb_imm.T1", 0x7800, "ldrb", 1)


def _thumb_sp_imm8(name, value, mnemonic):
    def dec(w, addr):
        return (reg((w >> 8) & 7), reg(SP), imm((w & 0xFF) * 4)), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, REG, REG, IMM):
            return None
        t, n, off = (o.value for o in ops)
        if n != SP or not _lo(t) or off % 4 or not 0 <= off <= 1020:
            return None
        return value | t << 8 | off // 4

    _t(name, THUMB, 2, mnemonic, 0xF800, value, dec, enc)


_thumb_sp_imm8("str_sp.T2", 0x9000, "str")
_thumb_sp_imm8("ldr_sp.T2", 0x9800, "ldr")
_thumb_sp_imm8("add_sp.T1", 0xA800, "add")


def _adr_t1_dec(w, addr):
    off = (w & 0xFF) * 4
    return (reg((w >> 8) & 7), Operand(TARGET, align4(addr + 4) + off, off)), AL, False


def _adr_t1_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, REG, TARGET) or not _lo(ops[0].value):
        return None
    off = _disp(ops[1].value, align4(addr + 4))
    if off % 4 or not 0 <= off <= 1020:
        raise _Range(off)
    return 0xA000 | ops[0].value << 8 | off // 4


_t("adr.T1", THUMB, 2, "adr", 0xF800, 0xA000, _adr_t1_dec, _adr_t1_enc)


def _sp_adjust(name, value, mnemonic):
    def dec(w, addr):
        return (reg(SP), imm((w & 0x7F) * 4)), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, REG, IMM) or ops[0].value != SP:
            return None
        off = ops[1].value
        if off % 4 or not 0 <= off <= 508:
            return None
        return value | off // 4

    _t(name, THUMB, 2, mnemonic, 0xFF80, value, dec, enc)


_sp_adjust("add_sp_imm.T2", 0xB000, "add")
_sp_adjust("sub_sp_imm.T1", 0xB080, "sub")


def _push_pop_t1(name, value, mnemonic, extra):
    def dec(w, addr):
        mask = (w & 0xFF) | (((w >> 8) & 1) << extra)
        if not mask:
            return None
        return (Operand(RLIST, mask),), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, RLIST):
            return None
        mask = ops[0].value
        low, top = mask & 0xFF, mask & ~0xFF
        if not mask or top not in (0, 1 << extra):
            return None
        return value | (1 << 8 if top else 0) | low

    _t(name, THUMB, 2, mnemonic, 0xFE00, value, dec, enc)


_push_pop_t1("push.T1", 0xB400, "push", LR)
_push_pop_t1("pop.T1", 0xBC00, "pop", PC)


def _nop_dec(w, addr):
    return (), AL, False


def _nop_enc(ops, cond, addr, sf):
    return None if ops or cond != AL or sf else 0xBF00


_t("nop.T1", THUMB, 2, "nop", 0xFFFF, 0xBF00, _nop_dec, _nop_enc)


def _udf_t1_dec(w, addr):
    return (imm(w & 0xFF),), AL, False


def _udf_t1_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, IMM) or not 0 <= ops[0].value <= 255:
        return None
    return 0xDE00 | ops[0].value


_t("udf.T1", THUMB, 2, "udf", 0xFF00, 0xDE00, _udf_t1_dec, _udf_t1_enc)


def _bcond_t1_dec(w, addr):
    cond = (w >> 8) & 15
    if cond >= 14:
        return None
    disp = sign_extend(w & 0xFF, 8) * 2
    return (Operand(TARGET, (addr + 4 + disp) & 0xFFFFFFFF, disp),), cond, False


def _bcond_t1_enc(ops, cond, addr, sf):
    if cond == AL or sf or not _is(ops, TARGET):
        return None
    disp = _disp(ops[0].value, (addr + 4))
    if disp % 2 or not -256 <= disp <= 254:
        raise _Range(disp)
    return 0xD000 | cond << 8 | (disp // 2) & 0xFF


def _b_t2_dec(w, addr):
    disp = sign_extend(w & 0x7FF, 11) * 2
    return (Operand(TARGET, (addr + 4 + disp) & 0xFFFFFFFF, disp),), AL, False


def _b_t2_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, TARGET):
        return None
    disp = _disp(ops[0].value, (addr + 4))
    if disp % 2 or not -2048 <= disp <= 2046:
        raise _Range(disp)
    return 0xE000 | (disp // 2) & 0x7FF


_t("b.T1", THUMB, 2, "b", 0xF000, 0xD000, _bcond_t1_dec, _bcond_t1_enc)
_t("b.T2", THUMB, 2, "b", 0xF800, 0xE000, _b_t2_dec, _b_t2_enc)


# Thumb 32-bit ------------------------------------------------------------------

def _bcond_t3_dec(w, addr):
    hw1, hw2 = w >> 16, w & 0xFFFF
    cond = (hw1 >> 6) & 15
    if cond >= 14:
        return None
    s = (hw1 >> 10) & 1
    j1, j2 = (hw2 >> 13) & 1, (hw2 >> 11) & 1
    raw = s << 20 | j2 << 19 | j1 << 18 | (hw1 & 0x3F) << 12 | (hw2 & 0x7FF) << 1
    disp = sign_extend(raw, 21)
    return (Operand(TARGET, (addr + 4 + disp) & 0xFFFFFFFF, disp),), cond, False


def _bcond_t3_enc(ops, cond, addr, sf):
    if cond == AL or sf or not _is(ops, TARGET):
        return None
    disp = _disp(ops[0].value, (addr + 4))
    if disp % 2 or not -(1 << 20) <= disp < (1 << 20):
        raise _Range(disp)
    v = disp & 0x1FFFFF
    s, j2, j1 = v >> 20 & 1, v >> 19 & 1, v >> 18 & 1
    hw1 = 0xF000 | s << 10 | cond << 6 | (v >> 12) & 0x3F
    hw2 = 0x8000 | j1 << 13 | j2 << 11 | (v >> 1) & 0x7FF
    return hw1 << 16 | hw2


def _t4_disp(w):
    hw1, hw2 = w >> 16, w & 0xFFFF
    s = (hw1 >> 10) & 1
    j1, j2 = (hw2 >> 13) & 1, (hw2 >> 11) & 1
    i1, i2 = (~(j1 ^ s)) & 1, (~(j2 ^ s)) & 1
    raw = s << 24 | i1 << 23 | i2 << 22 | (hw1 & 0x3FF) << 12 | (hw2 & 0x7FF) << 1
    return sign_extend(raw, 25)


def _t4_fields(disp):
    v = disp & 0x1FFFFFF
    s, i1, i2 = v >> 24 & 1, v >> 23 & 1, v >> 22 & 1
    j1, j2 = (~(i1 ^ s)) & 1, (~(i2 ^ s)) & 1
    return s, j1, j2, (v >> 12) & 0x3FF, (v >> 1) & 0x7FF


def _long_branch(name, mnemonic, hw2_fixed):
    def dec(w, addr):
        disp = _t4_disp(w)
        return (Operand(TARGET, (addr + 4 + disp) & 0xFFFFFFFF, disp),), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, TARGET):
            return None
        disp = _disp(ops[0].value, (addr + 4))
        if disp % 2 or not -(1 << 24) <= disp < (1 << 24):
            raise _Range(disp)
        s, j1, j2, hi, lo = _t4_fields(disp)
        return (0xF000 | s << 10 | hi) << 16 | hw2_fixed | j1 << 13 | j2 << 11 | lo

    _t(name, THUMB, 4, mnemonic, 0xF800D000, 0xF0000000 | hw2_fixed, dec, enc)


_t("b.T3", THUMB, 4, "b", 0xF800D000, 0xF0008000, _bcond_t3_dec, _bcond_t3_enc)
_long_branch("b.T4", "b", 0x9000)
_long_branch("bl.T1", "bl", 0xD000)


def _blx_t2_dec(w, addr):
    if w & 1:
        return None
    disp = _t4_disp(w)
    return (Operand(TARGET, (align4(addr + 4) + disp) & 0xFFFFFFFF, disp),), AL, False


def _blx_t2_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, TARGET):
        return None
    disp = _disp(ops[0].value, align4(addr + 4))
    if disp % 4 or not -(1 << 24) <= disp < (1 << 24):
        raise _Range(disp)
    s, j1, j2, hi, lo = _t4_fields(disp)
    return (0xF000 | s << 10 | hi) << 16 | 0xC000 | j1 << 13 | j2 << 11 | lo


_t("blx.T2", THUMB, 4, "blx", 0xF800D000, 0xF000C000, _blx_t2_dec, _blx_t2_enc)


def _ldr_lit_t2_dec(w, addr):
    t = (w >> 12) & 15
    if t == PC:
        return None
    off = w & 0xFFF
    if not (w >> 23) & 1:
        off = -off
    return (reg(t), Operand(LOAD, align4(addr + 4) + off, off)), AL, False


def _ldr_lit_t2_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, REG, LOAD) or ops[0].value == PC:
        return None
    off = _disp(ops[1].value, align4(addr + 4))
    if not -4095 <= off <= 4095:
        raise _Range(off)
    u = 1 if off >= 0 else 0
    return 0xF85F0000 | u << 23 | ops[0].value << 12 | abs(off)


_t("ldr_lit.T2", THUMB, 4, "ldr", 0xFF7F0000, 0xF85F0000, _ldr_lit_t2_dec, _ldr_lit_t2_enc)


def _thumb_mem_imm12(name, value, mnemonic):
    def dec(w, addr):
        n, t = (w >> 16) & 15, (w >> 12) & 15
        if n == PC or t == PC:
            return None
        return (reg(t), reg(n), imm(w & 0xFFF)), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, REG, REG, IMM):
            return None
        t, n, off = (o.value for o in ops)
        if n == PC or t == PC or not 0 <= off <= 4095:
            return None
        return value | n << 16 | t << 12 | off

    _t(name, THUMB, 4, mnemonic, 0xFFF00000, value, dec, enc)


_thumb_mem_imm12("str_imm.T3", 0xF8C00000, "str")
_thumb_mem_imm12("ldr_imm.T3", 0xF8D00000, "ldr")
_thumb_mem_imm12("strb_imm.T2", 0xF8800000, "strb")
_thumb_mem_imm12("ldrb_imm.T2", 0xF8900000, "ldrb")


def _i_imm3_imm8(w):
    return ((w >> 26) & 1) << 11 | ((w >> 12) & 7) << 8 | (w & 0xFF)


def _put_i_imm3_imm8(v):
    return ((v >> 11) & 1) << 26 | ((v >> 8) & 7) << 12 | (v & 0xFF)


def _thumb_mov16(name, value, mnemonic):
    def dec(w, addr):
        d = (w >> 8) & 15
        if d in (SP, PC):
            return None
        return (reg(d), imm(((w >> 16) & 15) << 12 | _i_imm3_imm8(w))), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, REG, IMM):
            return None
        d, v = ops[0].value, ops[1].value
        if d in (SP, PC) or not 0 <= v <= 0xFFFF:
            return None
        return value | (v >> 12) << 16 | d << 8 | _put_i_imm3_imm8(v & 0xFFF)

    _t(name, THUMB, 4, mnemonic, 0xFBF08000, value, dec, enc)


_thumb_mov16("movw.T3", 0xF2400000, "movw")
_thumb_mov16("movt.T1", 0xF2C00000, "movt")


def _adr_w(name, value, negative):
    def dec(w, addr):
        d = (w >> 8) & 15
        if d in (SP, PC):
            return None
        off = _i_imm3_imm8(w)
        if negative:
            off = -off
        return (reg(d), Operand(TARGET, align4(addr + 4) + off, off)), AL, False

    def enc(ops, cond, addr, sf):
        if cond != AL or sf or not _is(ops, REG, TARGET) or ops[0].value in (SP, PC):
            return None
        off = _disp(ops[1].value, align4(addr + 4))
        if (off < 0) != negative:
            return None
        if abs(off) > 4095:
            raise _Range(off)
        return value | ops[0].value << 8 | _put_i_imm3_imm8(abs(off))

    _t(name, THUMB, 4, "adr", 0xFBFF8000, value, dec, enc)


_adr_w("adr.T3", 0xF20F0000, False)
_adr_w("adr.T2", 0xF2AF0000, True)


# A32 -----------------------------------------------------------------------------

def _arm_branch(name, mnemonic, link):
    value = 0x0B000000 if link else 0x0A000000

    def dec(w, addr):
        cond = w >> 28
        if cond == 15:
            return None
        disp = sign_extend(w & 0xFFFFFF, 24) * 4
        return (Operand(TARGET, (addr + 8 + disp) & 0xFFFFFFFF, disp),), cond, False

    def enc(ops, cond, addr, sf):
        if sf or not _is(ops, TARGET):
            return None
        disp = _disp(ops[0].value, (addr + 8))
        if disp % 4 or not -(1 << 25) <= disp < (1 << 25):
            raise _Range(disp)
        return cond << 28 | value | (disp >> 2) & 0xFFFFFF

    _t(name, ARM, 4, mnemonic, 0x0F000000, value, dec, enc)


_arm_branch("b.A1", "b", False)
_arm_branch("bl.A1", "bl", True)


def _blx_a2_dec(w, addr):
    h = (w >> 24) & 1
    disp = sign_extend((w & 0xFFFFFF) << 2 | h << 1, 26)
    return (Operand(TARGET, (addr + 8 + disp) & 0xFFFFFFFF, disp),), AL, False


def _blx_a2_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, TARGET):
        return None
    disp = _disp(ops[0].value, (addr + 8))
    if disp % 2 or not -(1 << 25) <= disp < (1 << 25):
        raise _Range(disp)
    v = disp & 0x3FFFFFF
    return 0xFA000000 | ((v >> 1) & 1) << 24 | (v >> 2) & 0xFFFFFF


_t("blx.A2", ARM, 4, "blx", 0xFE000000, 0xFA000000, _blx_a2_dec, _blx_a2_enc)


def _arm_bx(name, value, mnemonic, allow_pc):
    def dec(w, addr):
        m = w & 15
        if w >> 28 == 15 or (m == PC and not allow_pc):
            return None
        return (reg(m),), w >> 28, False

    def enc(ops, cond, addr, sf):
        if sf or not _is(ops, REG) or (ops[0].value == PC and not allow_pc):
            return None
        return cond << 28 | value | ops[0].value

    _t(name, ARM, 4, mnemonic, 0x0FFFFFF0, value, dec, enc)


_arm_bx("bx.A1", 0x012FFF10, "bx", True)
_arm_bx("blx_reg.A1", 0x012FFF30, "blx", False)


def _arm_mov16(name, value, mnemonic):
    def dec(w, addr):
        d = (w >> 12) & 15
        if w >> 28 == 15 or d == PC:
            return None
        return (reg(d), imm(((w >> 16) & 15) << 12 | (w & 0xFFF))), w >> 28, False

    def enc(ops, cond, addr, sf):
        if sf or not _is(ops, REG, IMM) or ops[0].value == PC or not 0 <= ops[1].value <= 0xFFFF:
            return None
        v = ops[1].value
        return cond << 28 | value | (v >> 12) << 16 | ops[0].value << 12 | (v & 0xFFF)

    _t(name, ARM, 4, mnemonic, 0x0FF00000, value, dec, enc)


_arm_mov16("movw.A2", 0x03000000, "movw")
_arm_mov16("movt.A1", 0x03400000, "movt")


def _arm_nop_dec(w, addr):
    return ((), w >> 28, False) if w >> 28 != 15 else None


def _arm_nop_enc(ops, cond, addr, sf):
    return None if ops or sf else cond << 28 | 0x0320F000


_t("nop.A1", ARM, 4, "nop", 0x0FFFFFFF, 0x0320F000, _arm_nop_dec, _arm_nop_enc)


def _arm_udf_dec(w, addr):
    return (imm(((w >> 8) & 0xFFF) << 4 | (w & 15)),), AL, False


def _arm_udf_enc(ops, cond, addr, sf):
    if cond != AL or sf or not _is(ops, IMM) or not 0 <= ops[0].value <= 0xFFFF:
        return None
    v = ops[0].value
    return 0xE7F000F0 | (v >> 4) << 8 | (v & 15)


_t("udf.A1", ARM, 4, "udf", 0xFFF000F0, 0xE7F000F0, _arm_udf_dec, _arm_udf_enc)


def _arm_mul_dec(w, addr):
    if w >> 28 == 15:
        return None
    d, m, n = (w >> 16) & 15, (w >> 8) & 15, w & 15
    if PC in (d, m, n):
        return None
    return (reg(d), reg(n), reg(m)), w >> 28, bool(w >> 20 & 1)


def _arm_mul_enc(ops, cond, addr, sf):
    if not _is(ops, REG, REG, REG) or PC in (o.value for o in ops):
        return None
    d, n, m = (o.value for o in ops)
    return cond << 28 | (1 << 20 if sf else 0) | d << 16 | m << 8 | 0x90 | n


_t("mul.A1", ARM, 4, "mul", 0x0FE0F0F0, 0x00000090, _arm_mul_dec, _arm_mul_enc)

_ARM_DP = {"and": 0, "eor": 1, "sub": 2, "add": 4, "cmp": 10, "orr": 12, "mov": 13}


def _arm_dp_imm(mnemonic):
    opc = _ARM_DP[mnemonic]
    value = 0x02000000 | opc << 21

    def dec(w, addr):
        cond = w >> 28
        if cond == 15:
            return None
        s, n, d = (w >> 20) & 1, (w >> 16) & 15, (w >> 12) & 15
        v = arm_expand_imm(w & 0xFFF)
        if mnemonic == "cmp":
            if not s or d != 0 or n == PC:
                return None
            return (reg(n), imm(v)), cond, False
        if d == PC:
            return None
        if mnemonic == "mov":
            if n != 0:
                return None
            return (reg(d), imm(v)), cond, bool(s)
        if n == PC:
            return None
        return (reg(d), reg(n), imm(v)), cond, bool(s)

    def enc(ops, cond, addr, sf):
        if mnemonic == "cmp":
            if sf or not _is(ops, REG, IMM) or ops[0].value == PC:
                return None
            n, d, v, s = ops[0].value, 0, ops[1].value, 1
        elif mnemonic == "mov":
            if not _is(ops, REG, IMM) or ops[0].value == PC:
                return None
            n, d, v, s = 0, ops[0].value, ops[1].value, int(sf)
        else:
            if not _is(ops, REG, REG, IMM) or PC in (ops[0].value, ops[1].value):
                return None
            d, n, v, s = ops[0].value, ops[1].value, ops[2].value, int(sf)
        f = arm_encode_imm(v)
        if f is None:
            return None
        return cond << 28 | value | s << 20 | n << 16 | d << 12 | f

    _t(f"{mnemonic}_imm.A1", ARM, 4, mnemonic, 0x0FE00000, value, dec, enc)


def _arm_adr(name, opc, negative):
    value = 0x020F0000 | opc << 21

    def dec(w, addr):
        cond = w >> 28
        d = (w >> 12) & 15
        if cond == 15 or d == PC:
            return None
        off = arm_expand_imm(w & 0xFFF)
        if negative:
            off = -off
        return (reg(d), Operand(TARGET, (align4(addr + 8) + off) & 0xFFFFFFFF, off)), cond, False

    def enc(ops, cond, addr, sf):
        if sf or not _is(ops, REG, TARGET) or ops[0].value == PC:
            return None
        off = _disp(ops[1].value, align4(addr + 8))
        # prefer add for non-negative offsets; either form may wrap mod 2^32
        f_add = arm_encode_imm(off & 0xFFFFFFFF)
        f_sub = arm_encode_imm(-off & 0xFFFFFFFF)
        use_add = f_add is not None and (off >= 0 or f_sub is None)
        if f_add is None and f_sub is None:
            raise _Range(off)
        if use_add == negative:
            return None
        f = f_sub if negative else f_add
        return cond << 28 | value | ops[0].value << 12 | f

    _t(name, ARM, 4, "adr", 0x0FFF0000, value, dec, enc)


# adr must precede add/sub so that Rn == pc decodes as adr
_arm_adr("adr.A1", _ARM_DP["add"], False)
_arm_adr("adr.A2", _ARM_DP["sub"], True)
for _m in _ARM_DP:
    _arm_dp_imm(_m)


def _shift_decode(imm5: int, typ: int) -> tuple[str, int] | None:
    kind = SHIFT_NAMES[typ]
    if imm5 == 0:
        if typ == 0:
            return None
        if typ == 3:
            return "rrx", 0
        return kind, 32
    return kind, imm5


def _arm_dp_reg(mnemonic):
    opc = _ARM_DP[mnemonic]
    value = opc << 21

    def dec(w, addr):
        cond = w >> 28
        if cond == 15:
            return None
        s, n, d, m = (w >> 20) & 1, (w >> 16) & 15, (w >> 12) & 15, w & 15
        imm5, typ = (w >> 7) & 31, (w >> 5) & 3
        if m == PC or d == PC or n == PC:
            return None
        sh = _shift_decode(imm5, typ)
        if sh is not None and sh[0] == "rrx":
            return None
        if mnemonic == "mov":
            if n != 0:
                return None
            if sh is None:
                return (reg(d), reg(m)), cond, bool(s)
            if sh[0] in ("lsl", "lsr"):
                return (reg(d), reg(m), imm(sh[1])), cond, bool(s), sh[0]
            return None
        op2 = reg(m) if sh is None else shifted(m, *sh)
        if mnemonic == "cmp":
            if not s or d != 0:
                return None
            return (reg(n), op2), cond, False
        return (reg(d), reg(n), op2), cond, bool(s)

    def enc(ops, cond, addr, sf):
        if mnemonic == "cmp":
            if sf or len(ops) != 2 or ops[0].kind != REG:
                return None
            d, n, op2, s = 0, ops[0].value, ops[1], 1
        elif mnemonic == "mov":
            if not _is(ops, REG, REG):
                return None
            d, n, op2, s = ops[0].value, 0, ops[1], int(sf)
        else:
            if len(ops) != 3 or ops[0].kind != REG or ops[1].kind != REG:
                return None
            d, n, op2, s = ops[0].value, ops[1].value, ops[2], int(sf)
        if PC in (d, n) or op2.value == PC:
            return None
        if op2.kind == REG:
            imm5 = typ = 0
        elif op2.kind == SHREG:
            kind, amount = op2.shift
            if kind not in SHIFT_NAMES:
                return None
            typ = SHIFT_NAMES.index(kind)
            if typ == 0 and not 1 <= amount <= 31:
                return None
            if typ in (1, 2) and not 1 <= amount <= 32:
                return None
            if typ == 3 and not 1 <= amount <= 31:
                return None
            imm5 = amount & 31
        else:
            return None
        return cond << 28 | value | s << 20 | n << 16 | d << 12 | imm5 << 7 | typ << 5 | op2.value

    _t(f"{mnemonic}_reg.A1", ARM, 4, mnemonic, 0x0FE00010, value, dec, enc)


for _m in _ARM_DP:
    _arm_dp_reg(_m)


def _arm_shift_imm(mnemonic, typ):
    def dec(w, addr):
        return None  # decoded by mov_reg.A1

    def enc(ops, cond, addr, sf):
        if not _is(ops, REG, REG, IMM) or PC in (ops[0].value, ops[1].value):
            return None
        a = ops[2].value
        if not (1 <= a <= 31 if typ == 0 else 1 <= a <= 32):
            return None
        return (cond << 28 | _ARM_DP["mov"] << 21 | int(sf) << 20 | ops[0].value << 12
                | (a & 31) << 7 | typ << 5 | ops[1].value)

    _t(f"{mnemonic}_imm.A1", ARM, 4, mnemonic, 0x0FEF0070, _ARM_DP["mov"] << 21 | typ << 5, dec, enc)


_arm_shift_imm("lsl", 0)
_arm_shift_imm("lsr", 1)


def _arm_mem_imm(mnemonic, byte, load):
    value = 0x05000000 | byte << 22 | load << 20

    def dec(w, addr):
        cond = w >> 28
        if cond == 15:
            return None
        n, t = (w >> 16) & 15, (w >> 12) & 15
        off = w & 0xFFF
        if not (w >> 23) & 1:
            off = -off
        if t == PC:
            return None
        if n == PC:
            if not load:
                return None
            return (reg(t), Operand(LOAD, (align4(addr + 8) + off) & 0xFFFFFFFF, off)), cond, False
        return (reg(t), reg(n), imm(off)), cond, False

    def enc(ops, cond, addr, sf):
        if sf:
            return None
        if _is(ops, REG, LOAD) and load and ops[0].value != PC:
            off = _disp(ops[1].value, align4(addr + 8))
            if not -4095 <= off <= 4095:
                raise _Range(off)
            n = PC
        elif _is(ops, REG, REG, IMM) and PC not in (ops[0].value, ops[1].value):
            off, n = ops[2].value, ops[1].value
            if not -4095 <= off <= 4095:
                return None
        else:
            return None
        u = 1 if off >= 0 else 0
        return cond << 28 | value | u << 23 | n << 16 | ops[0].value << 12 | abs(off)

    # P=1, W=0 offset addressing; U (bit 23) is a free field
    _t(f"{mnemonic}_imm.A1", ARM, 4, mnemonic, 0x0F700000, value, dec, enc)


def _arm_mem_reg(mnemonic, byte, load):
    value = 0x07800000 | byte << 22 | load << 20

    def dec(w, addr):
        cond = w >> 28
        n, t, m = (w >> 16) & 15, (w >> 12) & 15, w & 15
        if cond == 15 or PC in (n, t, m):
            return None
        return (reg(t), reg(n), reg(m)), cond, False

    def enc(ops, cond, addr, sf):
        if sf or not _is(ops, REG, REG, REG):
            return None
        t, n, m = (o.value for o in ops)
        if PC in (t, n, m):
            return None
        return cond << 28 | value | n << 16 | t << 12 | m

    _t(f"{mnemonic}_reg.A1", ARM, 4, mnemonic, 0x0FF00FF0, value, dec, enc)


for _m, _b, _l in (("str", 0, 0), ("ldr", 0, 1), ("strb", 1, 0), ("ldrb", 1, 1)):
    _arm_mem_imm(_m, _b, _l)
    _arm_mem_reg(_m, _b, _l)


def _arm_push_pop(name, mnemonic, value):
    def dec(w, addr):
        if w >> 28 == 15 or not w & 0xFFFF:
            return None
        return (Operand(RLIST, w & 0xFFFF),), w >> 28, False

    def enc(ops, cond, addr, sf):
        if sf or not _is(ops, RLIST) or not ops[0].value or ops[0].value >> 16:
            return None
        return cond << 28 | value | ops[0].value

    _t(name, ARM, 4, mnemonic, 0x0FFF0000, value, dec, enc)


_arm_push_pop("push.A1", "push", 0x092D0000)
_arm_push_pop("pop.A1", "pop", 0x08BD0000)


_BY_MNEMONIC: dict[tuple[str, str], list[Template]] = {}
for _tpl in TEMPLATES:
    _BY_MNEMONIC.setdefault((_tpl.mode, _tpl.mnemonic), []).append(_tpl)
for _lst in _BY_MNEMONIC.values():
    _lst.sort(key=lambda t: t.width)  # stable: table order within a width

_DECODE_TABLE: dict[tuple[str, int], list[Template]] = {}
for _tpl in TEMPLATES:
    _DECODE_TABLE.setdefault((_tpl.mode, _tpl.width), []).append(_tpl)


# -- public API ------------------------------------------------------------------

def thumb_width(first_halfword: int) -> int:
    return 4 if (first_halfword >> 11) in (0b11101, 0b11110, 0b11111) else 2


def word_to_bytes(word: int, width: int, mode: str) -> bytes:
    if width == 2:
        return struct.pack("<H", word)
    if mode == THUMB:
        return struct.pack("<HH", word >> 16, word & 0xFFFF)
    return struct.pack("<I", word)


def _instr(tpl: Template, word: int, addr: int, mode: str, decoded) -> Instr:
    ops, cond, sf = decoded[:3]
    mnemonic = decoded[3] if len(decoded) > 3 else tpl.mnemonic
    return Instr(addr, mode, tpl.width, mnemonic, tuple(ops),
                 word_to_bytes(word, tpl.width, mode), cond, sf, tpl.name)


def decode(data: bytes, addr: int, mode: str = THUMB) -> Instr:
    """Decode one instruction from the start of ``data`` located at ``addr``."""
    if mode == THUMB:
        if addr % 2:
            raise Misaligned(f"thumb instruction at odd address {addr:#x}")
        if len(data) < 2:
            raise UnknownEncoding(f"truncated instruction at {addr:#x}")
        hw1 = data[0] | data[1] << 8
        width = thumb_width(hw1)
        if width == 4:
            if len(data) < 4:
                raise UnknownEncoding(f"truncated 32-bit thumb instruction at {addr:#x}")
            word = hw1 << 16 | data[2] | data[3] << 8
        else:
            word = hw1
    elif mode == ARM:
        if addr % 4:
            raise Misaligned(f"arm instruction at unaligned address {addr:#x}")
        if len(data) < 4:
            raise UnknownEncoding(f"truncated instruction at {addr:#x}")
        width = 4
        word = struct.unpack_from("<I", data)[0]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    for tpl in _DECODE_TABLE[(mode, width)]:
        if word & tpl.mask == tpl.value:
            decoded = tpl.decode(word, addr)
            if decoded is not None:
                return _instr(tpl, word, addr, mode, decoded)
    raise UnknownEncoding(f"{mode} word {word:#0{2 + 2 * width}x} at {addr:#x} outside supported subset")


def encode(mnemonic: str, operands: Sequence[Operand], addr: int, mode: str = THUMB,
           cond: int = AL, setflags: bool = False, min_width: int = 0) -> Instr:
    """Encode with the narrowest template (at least ``min_width`` bytes) that fits."""
    if mnemonic not in MNEMONICS:
        raise NotEncodable(f"mnemonic {mnemonic!r} outside supported subset")
    if mode == THUMB and addr % 2 or mode == ARM and addr % 4:
        raise Misaligned(f"cannot place {mode} instruction at {addr:#x}")
    ops = tuple(operands)
    range_error = None
    for tpl in _BY_MNEMONIC.get((mode, mnemonic), ()):
        if tpl.width < min_width:
            continue
        try:
            word = tpl.encode(ops, cond, addr, setflags)
        except _Range as exc:
            range_error = exc
            continue
        if word is None:
            continue
        # canonical decoding may come from another template (A32 lsl is a mov)
        for cand in _DECODE_TABLE[(mode, tpl.width)]:
            if word & cand.mask == cand.value:
                d = cand.decode(word, addr)
                if d is not None:
                    return _instr(cand, word, addr, mode, d)
    desc = f"{mnemonic} {', '.join(map(str, ops))}"
    if range_error is not None:
        raise OutOfRange(f"{desc} at {addr:#x}: displacement {range_error.args[0]} out of range")
    raise NotEncodable(f"{desc} has no {mode} encoding")


def reencode(ins: Instr, addr: int, new_target: int | None = None, min_width: int | None = None) -> Instr:
    """Re-encode ``ins`` at ``addr`` (optionally retargeted); never narrower than before."""
    ops = ins.operands
    if new_target is not None:
        ops = tuple(replace(op, value=new_target & 0xFFFFFFFF, disp=None) if op.is_address_use else op
                    for op in ops)
    return encode(ins.mnemonic, ops, addr, ins.mode, ins.cond, ins.setflags,
                  ins.width if min_width is None else min_width)


def widen_delta(old: Instr, new_addr: int, new_target: int) -> int:
    """Bytes added by placing ``old`` at ``new_addr`` pointing at ``new_target``."""
    if not old.is_pc_relative:
        raise NotEncodable(f"{old} is not pc-relative")
    return reencode(old, new_addr, new_target).width - old.width


def disassemble(data: bytes, addr: int, mode: str = THUMB) -> list[Instr]:
    """Linear sweep; stops at the first undecodable word."""
    out = []
    off = 0
    while off < len(data):
        try:
            ins = decode(data[off:off + 4], addr + off, mode)
        except (UnknownEncoding, Misaligned):
            break
        out.append(ins)
        off += ins.width
    return out
