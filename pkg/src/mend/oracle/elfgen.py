"""Writer for small ARM ELF shared objects used as fixtures.

Layout (one RX and one RW load segment, no PT_PHDR)::

    RX: ehdr | phdrs | .hash | .dynsym | .dynstr | .rel.plt | .plt | .text | .rodata
    RW: .dynamic | .got | .data

Imports get standard three-word ARM PLT entries whose GOT slots carry
R_ARM_JUMP_SLOT relocations, so the loader side can recover names exactly as
it would for a toolchain-built library.  ``slack`` leaves a file gap after
the RX segment, which lets the patcher extend it in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..elf import (DT_HASH, DT_JMPREL, DT_NULL, DT_PLTGOT, DT_PLTRELSZ, DT_STRSZ, DT_STRTAB,
                   DT_SYMENT, DT_SYMTAB, EHDR, EM_ARM, PF_R, PF_W, PF_X, PHDR, PT_DYNAMIC, PT_LOAD,
                   R_ARM_JUMP_SLOT, SHDR, SHF_ALLOC, SHF_EXECINSTR, SHF_WRITE, SHT_DYNSYM,
                   SHT_PROGBITS, SHT_STRTAB, SHT_SYMTAB, STT_FUNC, STT_OBJECT, SYM)
from ..isa import THUMB
from .asm import Asm, _Align, _Label, layout

DT_PLTREL, DT_REL = 20, 17
SHT_HASH, SHT_DYNAMIC, SHT_REL = 5, 6, 9
STB_LOCAL, STB_GLOBAL = 0, 1
PLT0 = (0xE52DE004, 0xE59FE004, 0xE08FE00E, 0xE5BEF008)
BASE = 0x10000
RW_GAP = 0x10000


@dataclass
class Function:
    name: str
    asm: Asm
    exported: bool = True


@dataclass
class DataObject:
    name: str
    data: bytes
    writable: bool = True
    exported: bool = True


@dataclass
class Program:
    functions: list[Function] = field(default_factory=list)
    objects: list[DataObject] = field(default_factory=list)
    imports: list[str] = field(default_factory=list)
    strip: bool = False
    slack: int = 0
    base: int = BASE


@dataclass
class Built:
    elf: bytes
    symbols: dict[str, int]
    sizes: dict[str, int]
    text_range: tuple[int, int]
    instrs: dict[str, list]
    labels: dict[str, int]


class _Strtab:
    def __init__(self):
        self.data = bytearray(b"\0")
        self.index: dict[str, int] = {}

    def add(self, s: str) -> int:
        if s not in self.index:
            self.index[s] = len(self.data)
            self.data += s.encode() + b"\0"
        return self.index[s]


def _align(x: int, n: int) -> int:
    return -(-x // n) * n


def _plt_entry(entry: int, slot: int) -> bytes:
    off = slot - (entry + 8)
    assert 0 <= off < 1 << 28
    return struct.pack("<III", 0xE28FC600 | (off >> 20) & 0xFF, 0xE28CCA00 | (off >> 12) & 0xFF,
                       0xE5BCF000 | off & 0xFFF)


def build(prog: Program) -> Built:
    """Lay out and serialize ``prog``; returns the file plus its symbol map."""
    base = prog.base
    dynstr = _Strtab()
    # dynsym order: null, imports, exported functions, exported objects
    dyn_funcs = [f for f in prog.functions if f.exported]
    dyn_objs = [o for o in prog.objects if o.exported]
    ndyn = 1 + len(prog.imports) + len(dyn_funcs) + len(dyn_objs)
    for n in prog.imports + [f.name for f in dyn_funcs] + [o.name for o in dyn_objs]:
        dynstr.add(n)

    off = EHDR.size + 3 * PHDR.size
    hash_off = _align(off, 4)
    hash_size = 4 * (2 + 1 + ndyn)
    dynsym_off = hash_off + hash_size
    dynstr_off = dynsym_off + ndyn * SYM.size
    relplt_off = _align(dynstr_off + len(dynstr.data), 4)
    relplt_size = 8 * len(prog.imports)
    plt_off = _align(relplt_off + relplt_size, 4)
    plt_size = (20 + 12 * len(prog.imports)) if prog.imports else 0
    text_off = _align(plt_off + plt_size, 4)

    plt_addr = {name: base + plt_off + 20 + 12 * k for k, name in enumerate(prog.imports)}
    externs = {f"{n}@plt": a for n, a in plt_addr.items()}

    # text + rodata + RW layout depends on text size; iterate until stable
    ro = [o for o in prog.objects if not o.writable]
    rw = [o for o in prog.objects if o.writable]
    guess_text = 0
    for _ in range(32):
        ro_off = _align(text_off + guess_text, 4)
        syms = dict(externs)
        a = ro_off
        for o in ro:
            a = _align(a, 4)
            syms[o.name] = base + a
            a += len(o.data)
        rx_end = a
        rw_off = _align(rx_end + prog.slack, 16)
        rw_vaddr = base + RW_GAP + rw_off
        dynamic_size = 8 * 10
        got_off = rw_off + dynamic_size
        got_size = 4 * (3 + len(prog.imports))
        a = got_off + got_size
        for o in rw:
            a = _align(a, 4)
            syms[o.name] = rw_vaddr + (a - rw_off)
            a += len(o.data)
        rw_end = a
        items = []
        for f in prog.functions:
            f.asm.pool()
            items.append(("label", f.name))
            items.extend(f.asm.items)
        flat = []
        for it in items:
            if isinstance(it, tuple):
                flat.append(_Align(4))
                flat.append(_Label(it[1]))
            else:
                flat.append(it)
        asm = layout(flat, base + text_off, THUMB, syms)
        if len(asm.code) == guess_text:
            break
        guess_text = len(asm.code)
    else:
        raise RuntimeError("program layout did not converge")

    labels = dict(asm.labels)
    symbols = dict(syms)
    symbols.update({f.name: labels[f.name] for f in prog.functions})
    got_vaddr = rw_vaddr + (got_off - rw_off)
    slot_of = {n: got_vaddr + 4 * (3 + k) for k, n in enumerate(prog.imports)}

    # function sizes: distance to next function start or end of text
    starts = sorted((labels[f.name], f.name) for f in prog.functions)
    sizes = {}
    text_end = base + text_off + len(asm.code)
    for k, (a, n) in enumerate(starts):
        sizes[n] = (starts[k + 1][0] if k + 1 < len(starts) else text_end) - a
    for o in prog.objects:
        sizes[o.name] = len(o.data)

    data = bytearray(rw_end)
    # dynsym
    symidx = {}
    ent = [SYM.pack(0, 0, 0, 0, 0, 0)]
    for n in prog.imports:
        symidx[n] = len(ent)
        ent.append(SYM.pack(dynstr.add(n), 0, 0, STB_GLOBAL << 4 | STT_FUNC, 0, 0))
    shndx_text, shndx_ro, shndx_data = 6, 7, 10
    for f in dyn_funcs:
        ent.append(SYM.pack(dynstr.add(f.name), symbols[f.name] | 1, sizes[f.name],
                            STB_GLOBAL << 4 | STT_FUNC, 0, shndx_text))
    for o in dyn_objs:
        ent.append(SYM.pack(dynstr.add(o.name), symbols[o.name], len(o.data),
                            STB_GLOBAL << 4 | STT_OBJECT, 0, shndx_data if o.writable else shndx_ro))
    data[dynsym_off:dynsym_off + len(b"".join(ent))] = b"".join(ent)
    data[dynstr_off:dynstr_off + len(dynstr.data)] = dynstr.data
    chain = [0] + [k + 1 for k in range(1, ndyn - 1)] + ([0] if ndyn > 1 else [])
    hashtab = struct.pack("<II", 1, ndyn) + struct.pack("<I", 1 if ndyn > 1 else 0)
    hashtab += struct.pack(f"<{ndyn}I", *chain[:ndyn])
    data[hash_off:hash_off + len(hashtab)] = hashtab
    for k, n in enumerate(prog.imports):
        struct.pack_into("<II", data, relplt_off + 8 * k, slot_of[n], symidx[n] << 8 | R_ARM_JUMP_SLOT)
    if prog.imports:
        plt0 = base + plt_off
        struct.pack_into("<IIIII", data, plt_off, *PLT0, got_vaddr - (plt0 + 16))
        for n in prog.imports:
            entry = plt_addr[n]
            data[entry - base:entry - base + 12] = _plt_entry(entry, slot_of[n])
    data[text_off:text_off + len(asm.code)] = asm.code
    for o in ro:
        a = symbols[o.name] - base
        data[a:a + len(o.data)] = o.data
    dyn = [(DT_HASH, base + hash_off), (DT_STRTAB, base + dynstr_off), (DT_SYMTAB, base + dynsym_off),
           (DT_STRSZ, len(dynstr.data)), (DT_SYMENT, SYM.size), (DT_PLTGOT, got_vaddr),
           (DT_PLTRELSZ, relplt_size), (DT_PLTREL, DT_REL), (DT_JMPREL, base + relplt_off), (DT_NULL, 0)]
    for k, (tag, val) in enumerate(dyn):
        struct.pack_into("<iI", data, rw_off + 8 * k, tag, val)
    struct.pack_into("<I", data, got_off, rw_vaddr)
    for k in range(len(prog.imports)):
        struct.pack_into("<I", data, got_off + 4 * (3 + k), base + plt_off)
    for o in rw:
        a = symbols[o.name] - rw_vaddr + rw_off
        data[a:a + len(o.data)] = o.data

    rx_size = rx_end
    rw_size = rw_end - rw_off
    phdrs = [
        (PT_LOAD, 0, base, base, rx_size, rx_size, PF_R | PF_X, 0x1000),
        (PT_LOAD, rw_off, rw_vaddr, rw_vaddr, rw_size, rw_size, PF_R | PF_W, 0x1000),
        (PT_DYNAMIC, rw_off, rw_vaddr, rw_vaddr, dynamic_size, dynamic_size, PF_R | PF_W, 4),
    ]
    for k, ph in enumerate(phdrs):
        PHDR.pack_into(data, EHDR.size + k * PHDR.size, *ph)

    shoff = shnum = shstrndx = 0
    if not prog.strip:
        shoff, shnum, shstrndx = _emit_sections(
            data, prog, symbols, sizes, labels, base, dict(
                hash=(hash_off, hash_size), dynsym=(dynsym_off, ndyn * SYM.size),
                dynstr=(dynstr_off, len(dynstr.data)), relplt=(relplt_off, relplt_size),
                plt=(plt_off, plt_size), text=(text_off, len(asm.code)), rodata=(ro_off, rx_end - ro_off),
                dynamic=(rw_off, dynamic_size), got=(got_off, got_size), data=(got_off + got_size, rw_end - got_off - got_size),
            ), rw_off, rw_vaddr)
    ident = b"\x7fELF\x01\x01\x01" + b"\0" * 9
    EHDR.pack_into(data, 0, ident, 3, EM_ARM, 1, 0, EHDR.size, shoff, 0x05000000 | 0x400,
                   EHDR.size, PHDR.size, len(phdrs), SHDR.size, shnum, shstrndx)

    instrs: dict[str, list] = {}
    for ins in asm.instrs:
        for a, n in reversed(starts):
            if ins.addr >= a:
                instrs.setdefault(n, []).append(ins)
                break
    return Built(bytes(data), symbols, sizes, (base + text_off, text_end), instrs, labels)


def _emit_sections(data, prog, symbols, sizes, labels, base, spans, rw_off, rw_vaddr):
    shstr = _Strtab()
    strtab = _Strtab()
    syms = [SYM.pack(0, 0, 0, 0, 0, 0)]
    local, glob = [], []
    text_idx = 6
    for f in prog.functions:
        a = symbols[f.name]
        local.append(SYM.pack(strtab.add("$t"), a, 0, STB_LOCAL << 4, 0, text_idx))
        entry = SYM.pack(strtab.add(f.name), a | 1, sizes[f.name],
                         (STB_GLOBAL if f.exported else STB_LOCAL) << 4 | STT_FUNC, 0, text_idx)
        (glob if f.exported else local).append(entry)
    if prog.imports:
        local.append(SYM.pack(strtab.add("$a"), base + spans["plt"][0], 0, STB_LOCAL << 4, 0, 5))
    for o in prog.objects:
        local_or = glob if o.exported else local
        local_or.append(SYM.pack(strtab.add(o.name), symbols[o.name], len(o.data),
                                 (STB_GLOBAL if o.exported else STB_LOCAL) << 4 | STT_OBJECT, 0,
                                 10 if o.writable else 7))
    syms += local + glob
    symtab = b"".join(syms)
    names = [".hash", ".dynsym", ".dynstr", ".rel.plt", ".plt", ".text", ".rodata", ".dynamic",
             ".got", ".data", ".symtab", ".strtab", ".shstrtab"]
    for n in names:
        shstr.add(n)

    def append(blob: bytes, align: int = 4) -> int:
        data.extend(b"\0" * (-len(data) % align))
        at = len(data)
        data.extend(blob)
        return at

    symtab_off = append(symtab)
    strtab_off = append(bytes(strtab.data), 1)
    shstr_off = append(bytes(shstr.data), 1)

    def vaddr(off):
        return base + off if off < rw_off else rw_vaddr + off - rw_off

    hdrs = [SHDR.pack(0, 0, 0, 0, 0, 0, 0, 0, 0, 0)]
    table = [
        (".hash", SHT_HASH, SHF_ALLOC, "hash", 2, 0, 4, 4),
        (".dynsym", SHT_DYNSYM, SHF_ALLOC, "dynsym", 3, 1, 4, SYM.size),
        (".dynstr", SHT_STRTAB, SHF_ALLOC, "dynstr", 0, 0, 1, 0),
        (".rel.plt", SHT_REL, SHF_ALLOC, "relplt", 2, 5, 4, 8),
        (".plt", SHT_PROGBITS, SHF_ALLOC | SHF_EXECINSTR, "plt", 0, 0, 4, 0),
        (".text", SHT_PROGBITS, SHF_ALLOC | SHF_EXECINSTR, "text", 0, 0, 4, 0),
        (".rodata", SHT_PROGBITS, SHF_ALLOC, "rodata", 0, 0, 4, 0),
        (".dynamic", SHT_DYNAMIC, SHF_ALLOC | SHF_WRITE, "dynamic", 3, 0, 4, 8),
        (".got", SHT_PROGBITS, SHF_ALLOC | SHF_WRITE, "got", 0, 0, 4, 4),
        (".data", SHT_PROGBITS, SHF_ALLOC | SHF_WRITE, "data", 0, 0, 4, 0),
    ]
    for name, typ, flags, key, link, info, align, ent in table:
        off, size = spans[key]
        hdrs.append(SHDR.pack(shstr.index[name], typ, flags, vaddr(off), off, size, link, info, align, ent))
    hdrs.append(SHDR.pack(shstr.index[".symtab"], SHT_SYMTAB, 0, 0, symtab_off, len(symtab), 12,
                          1 + len(local), 4, SYM.size))
    hdrs.append(SHDR.pack(shstr.index[".strtab"], SHT_STRTAB, 0, 0, strtab_off, len(strtab.data), 0, 0, 1, 0))
    hdrs.append(SHDR.pack(shstr.index[".shstrtab"], SHT_STRTAB, 0, 0, shstr_off, len(shstr.data), 0, 0, 1, 0))
    shoff = append(b"".join(hdrs))
    return shoff, len(hdrs), len(hdrs) - 1


def flat(base: int, size: int, blobs: dict[int, bytes], funcs: dict[str, tuple[int, str]] | None = None,
         objects: dict[str, tuple[int, int]] | None = None) -> bytes:
    """ELF with a single RWX segment ``[base, base+size)`` filled from ``blobs``.

    For fixtures that need instructions at exact addresses.  ``funcs`` maps
    names to (address, mode); ``objects`` maps names to (address, size).
    """
    funcs = funcs or {}
    objects = objects or {}
    off = 0x1000 + base % 0x1000
    body = bytearray(size)
    for a, blob in blobs.items():
        body[a - base:a - base + len(blob)] = blob
    data = bytearray(off)
    data += body
    shstr, strtab = _Strtab(), _Strtab()
    local, glob = [], []
    for name, (a, mode) in sorted(funcs.items(), key=lambda kv: kv[1][0]):
        local.append(SYM.pack(strtab.add("$t" if mode == THUMB else "$a"), a, 0, STB_LOCAL << 4, 0, 1))
        glob.append(SYM.pack(strtab.add(name), a | (1 if mode == THUMB else 0), 0,
                             STB_GLOBAL << 4 | STT_FUNC, 0, 1))
    for name, (a, n) in sorted(objects.items(), key=lambda kv: kv[1][0]):
        glob.append(SYM.pack(strtab.add(name), a, n, STB_GLOBAL << 4 | STT_OBJECT, 0, 1))
    symtab = SYM.pack(0, 0, 0, 0, 0, 0) + b"".join(local + glob)
    for n in (".text", ".symtab", ".strtab", ".shstrtab"):
        shstr.add(n)

    def append(blob: bytes, align: int = 4) -> int:
        data.extend(b"\0" * (-len(data) % align))
        at = len(data)
        data.extend(blob)
        return at

    symtab_off = append(symtab)
    strtab_off = append(bytes(strtab.data), 1)
    shstr_off = append(bytes(shstr.data), 1)
    hdrs = [
        SHDR.pack(0, 0, 0, 0, 0, 0, 0, 0, 0, 0),
        SHDR.pack(shstr.index[".text"], SHT_PROGBITS, SHF_ALLOC | SHF_EXECINSTR | SHF_WRITE, base, off,
                  size, 0, 0, 4, 0),
        SHDR.pack(shstr.index[".symtab"], SHT_SYMTAB, 0, 0, symtab_off, len(symtab), 3, 1 + len(local),
                  4, SYM.size),
        SHDR.pack(shstr.index[".strtab"], SHT_STRTAB, 0, 0, strtab_off, len(strtab.data), 0, 0, 1, 0),
        SHDR.pack(shstr.index[".shstrtab"], SHT_STRTAB, 0, 0, shstr_off, len(shstr.data), 0, 0, 1, 0),
    ]
    shoff = append(b"".join(hdrs))
    PHDR.pack_into(data, EHDR.size, PT_LOAD, off, base, base, size, size, PF_R | PF_W | PF_X, 0x1000)
    ident = b"\x7fELF\x01\x01\x01" + b"\0" * 9
    EHDR.pack_into(data, 0, ident, 2, EM_ARM, 1, base, EHDR.size, shoff, 0x05000000 | 0x400,
                   EHDR.size, PHDR.size, 1, SHDR.size, len(hdrs), len(hdrs) - 1)
    return bytes(data)
