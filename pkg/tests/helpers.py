"""Hand-built fixtures shared by several test modules."""

from __future__ import annotations

import struct

from mend.elf import load_elf_bytes
from mend.isa import LR, PC, THUMB, encode, imm, literal, reg, rlist, target
from mend.oracle.asm import Asm, assemble
from mend.oracle.elfgen import DataObject, Function, Program, build, flat

# literal-pool PIC load whose result is passed to a callee that dereferences
# it; the small hand-laid function every slicer test starts from
WALK_CODE = [
    (0x1000, "push", (rlist(4, 5, 6, LR),)),
    (0x1002, "mov", (reg(6), reg(0))),
    (0x1004, "ldr", (reg(1), literal(0x1020))),
    (0x1006, "mov", (reg(0), reg(6))),
    (0x1008, "movw", (reg(5), imm(0))),
    (0x100C, "add", (reg(1), reg(PC))),
    (0x100E, "bl", (target(0x1288),)),
    (0x1012, "pop", (rlist(4, 5, 6, PC),)),
    (0x1288, "push", (rlist(4, LR),)),
    (0x128A, "mov", (reg(2), reg(1))),
    (0x128C, "pop", (rlist(4, PC),)),
]
WALK_LITERAL = 0x1020
WALK_ADD = 0x100C
WALK_PLACED_ADD = 0x130C
WALK_GLOBAL = 0x2500
WALK_STRING = b"zero_length_keyword\0"


def walkthrough_image():
    blobs = {}
    for addr, m, ops in WALK_CODE:
        ins = encode(m, ops, addr, THUMB)
        assert ins.addr == addr
        blobs[addr] = ins.raw
    # the literal holds the original offset to the string at 0x2400
    blobs[WALK_LITERAL] = struct.pack("<I", 0x2400 - (WALK_ADD + 4))
    blobs[0x2400] = WALK_STRING
    elf = flat(0x1000, 0x2000, blobs, {"f": (0x1000, THUMB), "warn": (0x1288, THUMB)},
               {"keyword": (0x2400, len(WALK_STRING))})
    return load_elf_bytes(elf, "walk")


def single_function(asm: Asm, name: str = "f", objects=(), imports=(), strip=False):
    """Wrap one Thumb function in a tiny ELF; returns (image, Built)."""
    asm.pool()
    prog = Program(functions=[Function(name, asm)], objects=list(objects), imports=list(imports),
                   strip=strip)
    b = build(prog)
    return load_elf_bytes(b.elf, name), b


__all__ = ["walkthrough_image", "single_function", "Asm", "assemble", "DataObject", "Function", "Program",
           "build"]
