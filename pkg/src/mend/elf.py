"""Loading, editing and re-emitting 32-bit little-endian ARM ELF files.

The model is deliberately thin: ``BinaryImage`` keeps the file bytes as the
single source of truth and re-derives segments, sections and symbol tables
from them after every structural edit.  Only three kinds of edits exist:
byte writes into editable ranges, in-place extension of the first executable
``PT_LOAD``, and appending a new ``PT_LOAD`` (plus a ``.patch`` section entry
when the file has a section table).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

from .errors import (IoError, LayoutConflict, NotElf, OutsideEditableRange, TruncatedFile,
                     UnmappedAddress, UnsupportedArch)
from .isa import ARM, THUMB, arm_expand_imm

log = logging.getLogger(__name__)

EM_ARM = 40
PT_LOAD, PT_DYNAMIC, PT_PHDR = 1, 2, 6
PF_X, PF_W, PF_R = 1, 2, 4
SHT_NULL, SHT_PROGBITS, SHT_SYMTAB, SHT_STRTAB, SHT_NOBITS, SHT_DYNSYM = 0, 1, 2, 3, 8, 11
SHF_WRITE, SHF_ALLOC, SHF_EXECINSTR = 1, 2, 4
STT_OBJECT, STT_FUNC = 1, 2
DT_NULL, DT_PLTRELSZ, DT_PLTGOT, DT_HASH, DT_STRTAB, DT_SYMTAB = 0, 2, 3, 4, 5, 6
DT_STRSZ, DT_SYMENT, DT_REL, DT_RELSZ, DT_JMPREL = 10, 11, 17, 18, 23
R_ARM_GLOB_DAT, R_ARM_JUMP_SLOT = 21, 22

EHDR = struct.Struct("<16sHHIIIIIHHHHHH")
PHDR = struct.Struct("<IIIIIIII")
SHDR = struct.Struct("<IIIIIIIIII")
SYM = struct.Struct("<IIIBBH")
PAGE = 0x1000
DEFAULT_REGION_SIZE = 8 * 1024


@dataclass
class Segment:
    index: int
    p_type: int
    offset: int
    vaddr: int
    paddr: int
    filesz: int
    memsz: int
    p_flags: int
    align: int

    @property
    def kind(self) -> str:
        return {PT_LOAD: "load", PT_DYNAMIC: "dynamic"}.get(self.p_type, "other")

    @property
    def flags(self) -> str:
        return "".join(c if self.p_flags & b else "-" for c, b in (("r", PF_R), ("w", PF_W), ("x", PF_X)))

    @property
    def executable(self) -> bool:
        return bool(self.p_flags & PF_X)

    @property
    def end(self) -> int:
        return self.vaddr + self.memsz

    def contains(self, vaddr: int, size: int = 1) -> bool:
        return self.vaddr <= vaddr and vaddr + size <= self.vaddr + self.memsz


@dataclass
class Section:
    index: int
    name: str
    sh_type: int
    sh_flags: int
    addr: int
    offset: int
    size: int
    link: int
    info: int
    addralign: int
    entsize: int


@dataclass(frozen=True)
class Symbol:
    name: str
    vaddr: int
    size: int
    kind: str  # func | object | other
    mode: str | None = None
    exported: bool = False


@dataclass
class PatchRegion:
    vaddr: int
    size: int
    code_cursor: int = 0
    data_cursor: int = -1
    in_place: bool = False

    def __post_init__(self):
        if self.data_cursor < 0:
            self.data_cursor = self.size

    @property
    def end(self) -> int:
        return self.vaddr + self.size

    @property
    def free(self) -> int:
        return self.data_cursor - self.code_cursor

    def alloc_code(self, size: int, align: int = 2) -> int:
        start = -(-self.code_cursor // align) * align
        if start + size > self.data_cursor:
            from .errors import RegionOverflow
            raise RegionOverflow(f"code allocation of {size} bytes exceeds region at {self.vaddr:#x}")
        self.code_cursor = start + size
        return self.vaddr + start

    def alloc_data(self, size: int, align: int = 4) -> int:
        start = (self.data_cursor - size) // align * align
        if start < self.code_cursor:
            from .errors import RegionOverflow
            raise RegionOverflow(f"data allocation of {size} bytes exceeds region at {self.vaddr:#x}")
        self.data_cursor = start
        return self.vaddr + start

    def contains(self, vaddr: int, size: int = 1) -> bool:
        return self.vaddr <= vaddr and vaddr + size <= self.end


@dataclass
class BinaryImage:
    path: str
    data: bytearray
    segments: list[Segment] = field(default_factory=list)
    sections: list[Section] = field(default_factory=list)
    symbols: dict[str, Symbol] = field(default_factory=dict)
    got_entries: dict[int, str] = field(default_factory=dict)
    plt_stubs: dict[int, str] = field(default_factory=dict)
    entry_mode_hints: dict[int, str] = field(default_factory=dict)
    data_markers: set[int] = field(default_factory=set)
    editable: list[tuple[int, int]] = field(default_factory=list)
    regions: list[PatchRegion] = field(default_factory=list)
    e_type: int = 0
    e_entry: int = 0
    e_phoff: int = 0
    e_shoff: int = 0
    e_phnum: int = 0
    e_shnum: int = 0
    e_shstrndx: int = 0

    @property
    def bytes(self) -> bytes:
        return bytes(self.data)

    def copy(self) -> "BinaryImage":
        img = load_elf_bytes(bytes(self.data), self.path)
        img.editable = list(self.editable)
        img.regions = [PatchRegion(r.vaddr, r.size, r.code_cursor, r.data_cursor, r.in_place)
                       for r in self.regions]
        return img

    # -- address translation -----------------------------------------------------

    @property
    def load_segments(self) -> list[Segment]:
        return [s for s in self.segments if s.p_type == PT_LOAD]

    def segment_for(self, vaddr: int, size: int = 1) -> Segment | None:
        for seg in self.load_segments:
            if seg.contains(vaddr, size):
                return seg
        return None

    def is_mapped(self, vaddr: int, size: int = 1) -> bool:
        return self.segment_for(vaddr, size) is not None

    def is_executable(self, vaddr: int) -> bool:
        seg = self.segment_for(vaddr)
        return seg is not None and seg.executable

    def vaddr_to_offset(self, vaddr: int) -> int:
        seg = self.segment_for(vaddr)
        if seg is None or vaddr - seg.vaddr >= seg.filesz:
            raise UnmappedAddress(f"{vaddr:#x} is not backed by file bytes")
        return seg.offset + vaddr - seg.vaddr

    def offset_to_vaddr(self, offset: int) -> int:
        for seg in self.load_segments:
            if seg.offset <= offset < seg.offset + seg.filesz:
                return seg.vaddr + offset - seg.offset
        raise UnmappedAddress(f"file offset {offset:#x} is not mapped")

    def read(self, vaddr: int, size: int) -> bytes:
        seg = self.segment_for(vaddr, size)
        if seg is None:
            raise UnmappedAddress(f"[{vaddr:#x}, {vaddr + size:#x}) is not mapped")
        out = bytearray()
        for a in range(vaddr, vaddr + size):
            rel = a - seg.vaddr
            out.append(self.data[seg.offset + rel] if rel < seg.filesz else 0)
        return bytes(out)

    def read_word(self, vaddr: int) -> int:
        return struct.unpack("<I", self.read(vaddr, 4))[0]

    # -- symbols ---------------------------------------------------------------------

    def functions(self) -> list[Symbol]:
        return sorted((s for s in self.symbols.values() if s.kind == "func"), key=lambda s: s.vaddr)

    def symbol_containing(self, vaddr: int) -> Symbol | None:
        best = None
        for sym in self.symbols.values():
            if sym.kind == "other":
                continue
            if sym.vaddr <= vaddr < sym.vaddr + max(sym.size, 1):
                if best is None or sym.size < best.size:
                    best = sym
        return best

    def name_at(self, vaddr: int) -> str | None:
        """Name of the function, PLT stub or object starting at ``vaddr``."""
        if vaddr in self.plt_stubs:
            return self.plt_stubs[vaddr]
        for sym in self.symbols.values():
            if sym.vaddr == vaddr and sym.kind != "other":
                return sym.name
        return None

    def mode_hint(self, vaddr: int) -> str | None:
        """Mode from the nearest preceding mapping symbol, if any."""
        if vaddr in self.entry_mode_hints:
            return self.entry_mode_hints[vaddr]
        best, mode = -1, None
        for a, m in self.entry_mode_hints.items():
            if best < a <= vaddr and vaddr not in self.data_markers:
                best, mode = a, m
        return mode

    # -- editing ---------------------------------------------------------------------

    def mark_editable(self, start: int, end: int) -> None:
        self.editable.append((start, end))

    def is_editable(self, vaddr: int, size: int) -> bool:
        return any(s <= vaddr and vaddr + size <= e for s, e in self.editable)


# -- parsing -------------------------------------------------------------------------

def _cstr(data: bytes | bytearray, off: int) -> str:
    end = data.find(b"\0", off)
    if end < 0:
        end = len(data)
    return bytes(data[off:end]).decode("latin-1")


def load_elf(path: str) -> BinaryImage:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return load_elf_bytes(data, str(path))


def load_elf_bytes(data: bytes, path: str = "<memory>") -> BinaryImage:
    if len(data) < 16 or data[:4] != b"\x7fELF":
        raise NotElf(f"{path}: missing ELF magic")
    if data[4] != 1:
        raise UnsupportedArch(f"{path}: only ELF32 is supported (EI_CLASS={data[4]})")
    if data[5] != 1:
        raise UnsupportedArch(f"{path}: only little-endian is supported (EI_DATA={data[5]})")
    if len(data) < EHDR.size:
        raise TruncatedFile(f"{path}: truncated ELF header")
    (_, e_type, e_machine, _, e_entry, e_phoff, e_shoff, _, _, e_phentsize, e_phnum,
     e_shentsize, e_shnum, e_shstrndx) = EHDR.unpack_from(data)
    if e_machine != EM_ARM:
        raise UnsupportedArch(f"{path}: e_machine={e_machine}, expected ARM")
    img = BinaryImage(path, bytearray(data), e_type=e_type, e_entry=e_entry, e_phoff=e_phoff,
                      e_shoff=e_shoff, e_phnum=e_phnum, e_shnum=e_shnum, e_shstrndx=e_shstrndx)
    _parse_segments(img, e_phentsize)
    _parse_sections(img, e_shentsize)
    _parse_symbols(img)
    _parse_dynamic(img)
    _find_plt_stubs(img)
    return img


def _parse_segments(img: BinaryImage, entsize: int) -> None:
    data = img.data
    if img.e_phnum and entsize != PHDR.size:
        raise UnsupportedArch(f"unexpected program header size {entsize}")
    if img.e_phoff + img.e_phnum * PHDR.size > len(data):
        raise TruncatedFile("program header table beyond end of file")
    for i in range(img.e_phnum):
        fields = PHDR.unpack_from(data, img.e_phoff + i * PHDR.size)
        seg = Segment(i, *fields)
        if seg.filesz and seg.offset + seg.filesz > len(data):
            raise TruncatedFile(f"segment {i} [{seg.offset:#x}+{seg.filesz:#x}] beyond end of file")
        if seg.memsz < seg.filesz:
            raise TruncatedFile(f"segment {i} has memsz < filesz")
        img.segments.append(seg)
    loads = sorted(img.load_segments, key=lambda s: s.vaddr)
    for a, b in zip(loads, loads[1:]):
        if a.end > b.vaddr:
            raise LayoutConflict(f"overlapping load segments at {b.vaddr:#x}")


def _parse_sections(img: BinaryImage, entsize: int) -> None:
    data = img.data
    if not img.e_shnum or not img.e_shoff:
        return
    if img.e_shoff + img.e_shnum * SHDR.size > len(data):
        log.warning("%s: section header table truncated; ignoring sections", img.path)
        return
    raw = [SHDR.unpack_from(data, img.e_shoff + i * SHDR.size) for i in range(img.e_shnum)]
    names_off = raw[img.e_shstrndx][4] if img.e_shstrndx < len(raw) else None
    for i, (name, typ, flags, addr, off, size, link, info, align, ent) in enumerate(raw):
        label = _cstr(data, names_off + name) if names_off is not None else ""
        img.sections.append(Section(i, label, typ, flags, addr, off, size, link, info, align, ent))


def _add_symbol(img: BinaryImage, name: str, value: int, size: int, info: int, shndx: int,
                exported: bool) -> None:
    typ = info & 15
    if name.startswith("$"):
        tag = name[1:2]
        if tag == "t":
            img.entry_mode_hints[value & ~1] = THUMB
        elif tag == "a":
            img.entry_mode_hints[value] = ARM
        elif tag == "d":
            img.data_markers.add(value)
        return
    if not name or shndx == 0:
        return
    if typ == STT_FUNC:
        mode = THUMB if value & 1 else ARM
        sym = Symbol(name, value & ~1, size, "func", mode, exported)
    elif typ == STT_OBJECT:
        sym = Symbol(name, value, size, "object", None, exported)
    else:
        sym = Symbol(name, value, size, "other", None, exported)
    old = img.symbols.get(name)
    if old is None or (old.kind == "other" and sym.kind != "other"):
        img.symbols[name] = sym
    elif exported and not old.exported:
        img.symbols[name] = Symbol(old.name, old.vaddr, old.size, old.kind, old.mode, True)


def _read_symtab(img: BinaryImage, off: int, count: int, stroff: int, exported: bool) -> list[str]:
    names = []
    for i in range(count):
        if off + (i + 1) * SYM.size > len(img.data):
            break
        name, value, size, info, _, shndx = SYM.unpack_from(img.data, off + i * SYM.size)
        label = _cstr(img.data, stroff + name)
        names.append(label)
        if i:
            _add_symbol(img, label, value, size, info, shndx, exported and (info >> 4) != 0)
    return names


def _parse_symbols(img: BinaryImage) -> None:
    for sec in img.sections:
        if sec.sh_type in (SHT_SYMTAB, SHT_DYNSYM) and sec.link < len(img.sections):
            strtab = img.sections[sec.link]
            _read_symtab(img, sec.offset, sec.size // SYM.size, strtab.offset, sec.sh_type == SHT_DYNSYM)


def _dynamic_entries(img: BinaryImage) -> dict[int, int]:
    out: dict[int, int] = {}
    for seg in img.segments:
        if seg.p_type != PT_DYNAMIC:
            continue
        for off in range(seg.offset, seg.offset + seg.filesz - 7, 8):
            tag, val = struct.unpack_from("<iI", img.data, off)
            if tag == DT_NULL:
                break
            out.setdefault(tag, val)
    return out


def _parse_dynamic(img: BinaryImage) -> None:
    dyn = _dynamic_entries(img)
    if not dyn:
        return
    try:
        symtab = img.vaddr_to_offset(dyn[DT_SYMTAB]) if DT_SYMTAB in dyn else None
        strtab = img.vaddr_to_offset(dyn[DT_STRTAB]) if DT_STRTAB in dyn else None
    except UnmappedAddress:
        log.warning("%s: dynamic symbol table not mapped", img.path)
        return
    count = 0
    if DT_HASH in dyn:
        try:
            count = img.read_word(dyn[DT_HASH] + 4)
        except UnmappedAddress:
            count = 0
    names: list[str] = []
    if symtab is not None and strtab is not None and count:
        names = _read_symtab(img, symtab, count, strtab, True)
    rels = []
    for start_tag, size_tag in ((DT_JMPREL, DT_PLTRELSZ), (DT_REL, DT_RELSZ)):
        if start_tag in dyn and size_tag in dyn:
            try:
                base = img.vaddr_to_offset(dyn[start_tag])
            except UnmappedAddress:
                continue
            for off in range(base, base + dyn[size_tag], 8):
                rels.append(struct.unpack_from("<II", img.data, off))
    for r_offset, r_info in rels:
        typ, idx = r_info & 0xFF, r_info >> 8
        if typ in (R_ARM_JUMP_SLOT, R_ARM_GLOB_DAT) and idx < len(names) and names[idx]:
            img.got_entries[r_offset] = names[idx]


def _plt_entry_slot(words: tuple[int, int, int], addr: int) -> int | None:
    w0, w1, w2 = words
    if w0 & 0x0FFFF000 != 0x028FC000 or w1 & 0x0FFFF000 != 0x028CC000:
        return None
    if w2 & 0x0FFFF000 != 0x05BCF000:
        return None
    return (addr + 8 + arm_expand_imm(w0 & 0xFFF) + arm_expand_imm(w1 & 0xFFF) + (w2 & 0xFFF)) & 0xFFFFFFFF


def _find_plt_stubs(img: BinaryImage) -> None:
    """Recognize standard ARM PLT entries and name them after their GOT slot."""
    if not img.got_entries:
        return
    ranges = [(s.addr, s.addr + s.size) for s in img.sections if s.name == ".plt"]
    if not ranges:
        ranges = [(s.vaddr, s.vaddr + s.filesz) for s in img.load_segments if s.executable]
    for start, end in ranges:
        a = (start + 3) & ~3
        while a + 12 <= end:
            try:
                words = struct.unpack("<III", img.read(a, 12))
            except UnmappedAddress:
                break
            slot = _plt_entry_slot(words, a)
            if slot is not None and slot in img.got_entries:
                img.plt_stubs[a] = img.got_entries[slot]
                img.entry_mode_hints.setdefault(a, ARM)
                a += 12
            else:
                a += 4


# -- editing -------------------------------------------------------------------------

def _reload(img: BinaryImage) -> None:
    fresh = load_elf_bytes(bytes(img.data), img.path)
    editable, regions = img.editable, img.regions
    img.__dict__.update(fresh.__dict__)
    img.editable, img.regions = editable, regions


def write_bytes(img: BinaryImage, vaddr: int, data: bytes) -> BinaryImage:
    """Overwrite mapped, editable bytes in place."""
    if not data:
        return img
    if img.segment_for(vaddr) is None:
        raise UnmappedAddress(f"{vaddr:#x} is not mapped")
    if not img.is_editable(vaddr, len(data)):
        raise OutsideEditableRange(f"[{vaddr:#x}, {vaddr + len(data):#x}) is outside every editable range")
    seg = img.segment_for(vaddr, len(data))
    if seg is None or vaddr + len(data) - seg.vaddr > seg.filesz:
        raise UnmappedAddress(f"[{vaddr:#x}, {vaddr + len(data):#x}) is not file-backed")
    off = seg.offset + vaddr - seg.vaddr
    img.data[off:off + len(data)] = data
    return img


def _occupied_file_ranges(img: BinaryImage, skip: Segment) -> list[tuple[int, int]]:
    out = [(0, EHDR.size), (img.e_phoff, img.e_phoff + img.e_phnum * PHDR.size)]
    if img.e_shnum:
        out.append((img.e_shoff, img.e_shoff + img.e_shnum * SHDR.size))
    for seg in img.segments:
        if seg is not skip and seg.filesz:
            out.append((seg.offset, seg.offset + seg.filesz))
    for sec in img.sections:
        if sec.sh_type not in (SHT_NULL, SHT_NOBITS) and sec.size:
            out.append((sec.offset, sec.offset + sec.size))
    return out


def _try_extend_in_place(img: BinaryImage, min_size: int) -> PatchRegion | None:
    execs = [s for s in img.load_segments if s.executable]
    if not execs:
        return None
    seg = min(execs, key=lambda s: s.index)
    if seg.filesz != seg.memsz:
        return None
    start = (seg.vaddr + seg.memsz + 3) & ~3
    new_end = start + min_size
    file_lo, file_hi = seg.offset + seg.filesz, seg.offset + (new_end - seg.vaddr)
    for lo, hi in _occupied_file_ranges(img, seg):
        if lo < file_hi and file_lo < hi and not (seg.offset <= lo and hi <= seg.offset + seg.filesz):
            return None
    for other in img.load_segments:
        if other is seg:
            continue
        # the loader maps whole pages, so stop short of the next segment's first page
        if other.vaddr >= seg.vaddr and new_end > (other.vaddr & ~(PAGE - 1)):
            return None
    if file_hi > len(img.data):
        img.data.extend(b"\0" * (file_hi - len(img.data)))
    img.data[file_lo:file_hi] = b"\0" * (file_hi - file_lo)
    size = new_end - seg.vaddr
    PHDR.pack_into(img.data, img.e_phoff + seg.index * PHDR.size, seg.p_type, seg.offset, seg.vaddr,
                   seg.paddr, size, size, seg.p_flags, seg.align)
    return PatchRegion(start, min_size, in_place=True)


def _append_segment(img: BinaryImage, min_size: int) -> PatchRegion:
    if any(s.p_type == PT_PHDR for s in img.segments):
        raise LayoutConflict("PT_PHDR present: relocating the program header table would move it")
    data = img.data
    phnum = img.e_phnum + 1
    new_off = (len(data) + 15) & ~15
    top = max(s.end for s in img.load_segments)
    new_vaddr = ((top + PAGE - 1) & ~(PAGE - 1)) + (new_off % PAGE)
    table = bytearray(data[img.e_phoff:img.e_phoff + img.e_phnum * PHDR.size])
    region_rel = (phnum * PHDR.size + 15) & ~15
    seg_size = region_rel + min_size
    table += PHDR.pack(PT_LOAD, new_off, new_vaddr, new_vaddr, seg_size, seg_size, PF_R | PF_X, PAGE)
    data.extend(b"\0" * (new_off - len(data)))
    data.extend(table)
    data.extend(b"\0" * (seg_size - len(table)))
    e_shoff, e_shnum = img.e_shoff, img.e_shnum
    if img.sections:
        # copy shstrtab with ".patch" appended, then a copy of the section table
        shstr = img.sections[img.e_shstrndx]
        names = bytes(data[shstr.offset:shstr.offset + shstr.size]) + b".patch\0"
        names_off = len(data)
        data.extend(names)
        data.extend(b"\0" * (-len(data) % 4))
        e_shoff = len(data)
        for sec in img.sections:
            off, size = sec.offset, sec.size
            if sec.index == img.e_shstrndx:
                off, size = names_off, len(names)
            name_off = struct.unpack_from("<I", data, img.e_shoff + sec.index * SHDR.size)[0]
            data.extend(SHDR.pack(name_off, sec.sh_type, sec.sh_flags, sec.addr, off, size,
                                  sec.link, sec.info, sec.addralign, sec.entsize))
        data.extend(SHDR.pack(shstr.size, SHT_PROGBITS, SHF_ALLOC | SHF_EXECINSTR,
                              new_vaddr + region_rel, new_off + region_rel, min_size, 0, 0, 4, 0))
        e_shnum += 1
    hdr = list(EHDR.unpack_from(data))
    hdr[5], hdr[6], hdr[10], hdr[12] = new_off, e_shoff, phnum, e_shnum
    EHDR.pack_into(data, 0, *hdr)
    return PatchRegion(new_vaddr + region_rel, min_size, in_place=False)


def alloc_patch_region(img: BinaryImage, min_size: int = DEFAULT_REGION_SIZE,
                       allow_in_place: bool = True) -> PatchRegion:
    """Reserve executable space without moving any existing mapping."""
    if min_size <= 0:
        raise ValueError("min_size must be positive")
    min_size = (min_size + 3) & ~3
    region = _try_extend_in_place(img, min_size) if allow_in_place else None
    if region is None:
        region = _append_segment(img, min_size)
    _reload(img)
    img.regions.append(region)
    img.mark_editable(region.vaddr, region.end)
    log.info("patch region %#x..%#x (%s)", region.vaddr, region.end,
             "extended first load segment" if region.in_place else "new .patch segment")
    return region


def emit_elf(img: BinaryImage, path: str) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(img.data)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def program_headers(data: bytes) -> list[tuple[int, ...]]:
    """Raw program header tuples of an ELF32 file."""
    hdr = EHDR.unpack_from(data)
    phoff, phnum = hdr[5], hdr[10]
    return [PHDR.unpack_from(data, phoff + i * PHDR.size) for i in range(phnum)]
