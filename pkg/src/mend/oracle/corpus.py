"""Seeded generator of (vuln, fixed) fixture pairs with known answers.

Every case is one Thumb function ``F(index, value)`` that stores ``value``
into a global table after some bookkeeping, wrapped in a handful of
neighbours that stay byte-identical between the two builds.  A template
decides how the guard in front of the store differs.  Besides the two ELF
files a case carries test vectors (expected outputs come from running the
fixed build in the interpreter), a proof-of-vulnerability input on which vuln
and fixed disagree, and the block/edge ground truth recorded while the
function was written.
"""

from __future__ import annotations

import json
import logging
import random
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..elf import BinaryImage, load_elf, load_elf_bytes
from ..errors import MendError
from ..isa import LR, PC, THUMB, imm
from .asm import Asm, PcRel
from .elfgen import Built, DataObject, Function, Program, build
from .interp import Result, run

log = logging.getLogger(__name__)

FUNC = "F"
CANARY = 0xCAFEBABE
TEMPLATES = ("bounds", "fallback", "diag", "widen", "helper", "global")
SMALL_PATCH = ("bounds", "fallback", "diag", "global")


@dataclass
class TestVector:
    name: str
    func: str
    args: list[int]
    expected: dict | None = None
    fuel: int = 200000


@dataclass
class CorpusCase:
    name: str
    template: str
    vuln: bytes
    fixed: bytes
    functions: list[str]
    symbols: dict[str, dict[str, int]]
    vectors: list[TestVector]
    pov: TestVector
    ground_truth: dict
    params: dict = field(default_factory=dict)

    def images(self) -> tuple[BinaryImage, BinaryImage]:
        return (load_elf_bytes(self.vuln, f"{self.name}/vuln"),
                load_elf_bytes(self.fixed, f"{self.name}/fixed"))

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "template": self.template,
            "functions": self.functions,
            "symbols": self.symbols,
            "vectors": [asdict(v) for v in self.vectors],
            "pov": asdict(self.pov),
            "ground_truth": self.ground_truth,
            "params": self.params,
        }


# -- block-structured function writer ----------------------------------------------


class _Writer:
    """Thin wrapper over ``Asm`` that records blocks and edges symbolically.

    Blocks are opened at labels and after conditional branches; the recorded
    structure is later collapsed so that only real leaders (entry, branch
    targets, instructions after a branch) start blocks.
    """

    def __init__(self, fname: str):
        self.f = fname
        self.asm = Asm()
        self.order: list[str] = []
        self.jumps: list[tuple[str, str]] = []  # (from block, to label)
        self.calls: list[tuple[str, str]] = []
        self.ends: dict[str, str] = {}  # block -> "jump" | "ret" | "cond"
        self.changed: set[str] = set()
        self.cur: str | None = None
        self._n = 0
        self.mark = False
        self.block("entry")

    def lbl(self, tag: str) -> str:
        return f"{self.f}.{tag}"

    def block(self, tag: str | None = None) -> str:
        if tag is None:
            self._n += 1
            tag = f"_b{self._n}"
        name = self.lbl(tag)
        self.asm.label(name)
        self.order.append(name)
        self.cur = name
        return name

    def _touch(self):
        # a block is changed when it holds an instruction emitted under mark
        if self.mark:
            self.changed.add(self.cur)

    def i(self, *a, **kw):
        if self.cur is None:
            raise AssertionError("instruction outside a block")
        self._touch()
        self.asm.i(*a, **kw)

    def bcond(self, tag: str, cond: str):
        self._touch()
        self.asm.b(self.lbl(tag), cond)
        self.jumps.append((self.cur, self.lbl(tag)))
        self.ends[self.cur] = "cond"
        self.block()

    def b(self, tag: str):
        self._touch()
        self.asm.b(self.lbl(tag))
        self.jumps.append((self.cur, self.lbl(tag)))
        self.ends[self.cur] = "jump"
        self.cur = None

    def ret(self, *regs):
        self.asm.pop(*regs)
        self.ends[self.cur] = "ret"
        self.cur = None

    def call(self, target: str, exchange: bool = False):
        self._touch()
        (self.asm.blx if exchange else self.asm.bl)(target)
        self.calls.append((self.cur, target))

    def truth(self, labels: dict[str, int], symbols: dict[str, int]) -> dict:
        """Collapse recorded blocks to leaders and resolve to addresses."""
        # a recorded block that holds no instruction shares its address with
        # the next one; fold it away first
        order = [n for k, n in enumerate(self.order)
                 if k + 1 == len(self.order) or labels[n] != labels[self.order[k + 1]]]
        targets = {labels[t] for _, t in self.jumps}
        leaders, owner = [], {}
        prev_end = None
        for name in order:
            a = labels[name]
            if not leaders or a in targets or prev_end in ("cond", "jump", "ret"):
                leaders.append(a)
            owner[a] = leaders[-1]
            prev_end = self.ends.get(name)

        def own(label):
            return owner[labels[label]]

        edges = set()
        for k, name in enumerate(order[:-1]):
            if self.ends.get(name) in ("cond", None):
                a, b = own(name), own(order[k + 1])
                if a != b:
                    edges.add((a, b, "fallthrough"))
        for src, dst in self.jumps:
            edges.add((own(src), labels[dst], "jump"))
        for src, dst in self.calls:
            if dst in symbols:
                edges.add((own(src), symbols[dst], "call"))
        # keep what is reachable from the entry; a template may orphan a block
        seen, todo = set(), [leaders[0]]
        while todo:
            a = todo.pop()
            if a not in seen:
                seen.add(a)
                todo += [d for s, d, k in edges if s == a and k != "call"]
        edges = {e for e in edges if e[0] in seen}
        changed = sorted({own(n) for n in self.changed} & seen)
        named = {n: labels[n] for n in order if labels[n] in seen and owner[labels[n]] == labels[n]
                 and not n.split(".", 1)[1].startswith("_b")}
        return {"blocks": sorted(seen), "edges": sorted(edges), "changed": changed, "named": named}


# -- program pieces ----------------------------------------------------------------


def _filler_ops(rng: random.Random, n: int) -> list[tuple]:
    ops = [("movs", 0, rng.randrange(1, 200)), ("movs", 1, rng.randrange(1, 200))]
    for _ in range(n):
        k = rng.randrange(8)
        r = rng.randrange(2)
        if k == 0:
            ops.append(("add3", r))
        elif k == 1:
            ops.append(("eor", r))
        elif k == 2:
            ops.append(("lsl", rng.randrange(1, 4)))
        elif k == 3:
            ops.append(("lsr", r, rng.randrange(1, 8)))
        elif k == 4:
            ops.append(("orr", r))
        elif k == 5:
            ops.append(("sub8", rng.randrange(1, 200)))
        elif k == 6:
            ops.append(("mul", r))
        else:
            ops.append(("and", r))
    return ops


def _emit_ops(w: _Writer, ops: list[tuple]) -> None:
    for op in ops:
        k = op[0]
        if k == "movs":
            w.i("mov", op[1], imm(op[2]), s=True)
        elif k == "add3":
            w.i("add", 6, 6, op[1], s=True)
        elif k == "eor":
            w.i("eor", 6, op[1], s=True)
        elif k == "lsl":
            w.i("lsl", 6, 6, imm(op[1]), s=True)
        elif k == "lsr":
            w.i("lsr", op[1], 6, imm(op[2]), s=True)
        elif k == "orr":
            w.i("orr", 6, op[1], s=True)
        elif k == "sub8":
            w.i("sub", 6, imm(op[1]), s=True)
        elif k == "mul":
            w.i("mul", 6, op[1], s=True)
        elif k == "and":
            w.i("and", op[1], 6, s=True)
        else:
            raise AssertionError(k)


def _pic(w: _Writer, rd: int, sym: str) -> None:
    w._n += 1
    anchor = w.lbl(f"pic{w._n}")
    w._touch()
    w.asm.ldr_lit(rd, PcRel(sym, anchor))
    w.asm.label(anchor)
    w.i("add", rd, PC)


@dataclass
class _Params:
    length: int
    vmax: int
    lim: int
    seed6: int
    iters: int
    loop: list
    fillers: list  # [(ops, cmp imm)]
    wide_fill: list  # widen template: [(ops, cmp imm)]


def _params(rng: random.Random, template: str) -> _Params:
    length = rng.randrange(4, 9)
    fillers = [(_filler_ops(rng, rng.randrange(2, 6)), rng.randrange(0, 256))
               for _ in range(rng.randrange(28, 36))]
    wide = []
    if template == "widen":
        # fill the span under ``bhi`` until it sits just below the T1 range,
        # with enough inner ``beq`` branches that widening pushes it over
        size = 0
        while True:
            ops = _filler_ops(rng, rng.randrange(3, 6))
            cost = 2 * (len(ops) + 2)
            if size + cost > 244:
                break
            wide.append((ops, rng.randrange(0, 256)))
            size += cost
    return _Params(length=length, vmax=rng.randrange(100, 200), lim=rng.randrange(20, 90),
                   seed6=rng.randrange(1, 256), iters=rng.randrange(2, 6),
                   loop=_filler_ops(rng, rng.randrange(1, 4))[2:], fillers=fillers, wide_fill=wide)


def _core(w: _Writer, tpl: str, fixed: bool, p: _Params) -> None:
    """Guard in front of the store; falls through into ``store``."""
    w.mark = True
    if tpl == "bounds":
        if fixed:
            w.i("cmp", 4, imm(p.length))
            w.bcond("err", "cs")
            w.i("cmp", 5, imm(p.vmax))
            w.bcond("err", "ge")
        else:
            w.i("cmp", 4, imm(0))
            w.bcond("err", "lt")
            w.i("cmp", 5, imm(p.vmax))
            w.bcond("err", "gt")
    elif tpl == "fallback":
        w.mark = False
        w.i("cmp", 4, imm(p.length))
        w.bcond("err", "cs")
        w.mark = True
        if fixed:
            w.i("cmp", 5, imm(p.lim))
            w.bcond("store", "ls")
            w.i("mov", 5, imm(p.lim), s=True)
        w.mark = False
    elif tpl == "diag":
        w.mark = False
        w.i("cmp", 4, imm(p.length))
        w.bcond("err", "cs")
        w.mark = True
        if fixed:
            w.i("cmp", 5, imm(0))
            w.bcond("store", "ne")
            _pic(w, 0, "diag_str")
            w.call("log_msg@plt", exchange=True)
            w.b("err")
        w.mark = False
    elif tpl == "widen":
        w.i("cmp", 4, imm(p.length if fixed else 0))
        w.bcond("err", "cs" if fixed else "lt")
        w.mark = False
        w.i("cmp", 5, imm(200))
        w.bcond("big", "hi")
        # inner exits go to whichever error block is closer, so every one of
        # them is narrow at its source and has to widen once moved away
        half = len(p.wide_fill) // 2
        for j, (ops, c) in enumerate(p.wide_fill):
            _emit_ops(w, ops)
            w.i("cmp", 6, imm(c))
            w.bcond("err0" if j < half else "err", "eq")
        w.block("big")
        w.i("add", 6, imm(1), s=True)
        w.mark = True
        w.i("cmp", 4, imm(p.length + (0 if fixed else 2)))
        w.bcond("err", "ge" if fixed else "gt")
        w.mark = False
    elif tpl == "helper":
        if fixed:
            w.i("mov", 0, 4)
            w.call("clamp_index")
            w.i("mov", 4, 0)
        else:
            w.i("cmp", 4, imm(0))
            w.bcond("err", "lt")
        w.mark = False
    elif tpl == "global":
        if fixed:
            _pic(w, 0, "limit")
            w.i("ldr", 0, 0, imm(0))
            w.i("cmp", 4, 0)
            w.bcond("err", "cs")
        else:
            w.i("cmp", 4, imm(0))
            w.bcond("err", "lt")
        w.mark = False
    else:
        raise ValueError(f"unknown template {tpl!r}")
    w.mark = False


def _function_f(tpl: str, fixed: bool, p: _Params) -> _Writer:
    w = _Writer(FUNC)
    w.asm.push(4, 5, 6, 7, LR)
    w.i("mov", 4, 0)
    w.i("mov", 5, 1)
    w.i("mov", 6, imm(p.seed6), s=True)
    w.i("mov", 7, imm(p.iters), s=True)
    w.block("loop")
    w.i("add", 6, 6, 7, s=True)
    _emit_ops(w, [("movs", 0, 3), ("movs", 1, 5)] + p.loop)
    w.i("sub", 7, imm(1), s=True)
    w.bcond("loop", "ne")
    for k, (ops, c) in enumerate(p.fillers):
        _emit_ops(w, ops)
        w.i("cmp", 6, imm(c))
        w.asm.b(w.lbl(f"skip{k}"), "hi")
        w.jumps.append((w.cur, w.lbl(f"skip{k}")))
        w.ends[w.cur] = "cond"
        w.block()
        _emit_ops(w, ops[:2])
        w.block(f"skip{k}")
    if tpl == "widen":
        w.b("core")
        w.block("err0")
        w.i("mov", 0, imm(1), s=True)
        w.ret(4, 5, 6, 7, PC)
        w.block("core")
    _core(w, tpl, fixed, p)
    w.block("store")
    _pic(w, 0, "table")
    w.i("lsl", 1, 4, imm(2), s=True)
    w.i("str", 5, 0, 1)
    _pic(w, 0, "acc")
    w.i("str", 6, 0, imm(0))
    w.i("mov", 0, imm(0), s=True)
    w.ret(4, 5, 6, 7, PC)
    w.block("err")
    w.i("mov", 0, imm(1), s=True)
    w.ret(4, 5, 6, 7, PC)
    w.asm.pool()
    return w


def _simple(name: str, body) -> Asm:
    a = Asm()
    body(a, name)
    a.pool()
    return a


def _init(a: Asm, n: str):
    a.push(4, LR)
    a.ldr_lit(0, PcRel("banner", f"{n}.p"))
    a.label(f"{n}.p")
    a.i("add", 0, PC)
    a.blx("log_msg@plt")
    a.movs(0, 0)
    a.pop(4, PC)


def _get_limit(a: Asm, n: str):
    a.ldr_lit(0, PcRel("limit", f"{n}.p"))
    a.label(f"{n}.p")
    a.i("add", 0, PC)
    a.i("ldr", 0, 0, imm(0))
    a.i("bx", LR)


def _caller(a: Asm, n: str):
    a.push(4, LR)
    a.bl(FUNC)
    a.pop(4, PC)


def _clamp(length: int):
    def body(a: Asm, n: str):
        a.i("cmp", 0, imm(length))
        a.b(f"{n}.ok", "cc")
        a.movs(0, length - 1)
        a.label(f"{n}.ok")
        a.i("bx", LR)
    return body


def _program(tpl: str, fixed: bool, p: _Params, strip: bool, slack: int) -> tuple[Program, _Writer]:
    w = _function_f(tpl, fixed, p)
    funcs = [Function("init", _simple("init", _init)),
             Function("get_limit", _simple("get_limit", _get_limit)),
             Function(FUNC, w.asm, exported=not (strip and not fixed)),
             Function("caller", _simple("caller", _caller))]
    if fixed and tpl == "helper":
        funcs.append(Function("clamp_index", _simple("clamp_index", _clamp(p.length)), exported=False))
    objs = [DataObject("table", bytes(4 * p.length)),
            DataObject("canary", struct.pack("<I", CANARY)),
            DataObject("acc", bytes(4)),
            DataObject("limit", struct.pack("<I", p.length)),
            DataObject("banner", b"mend fixture ready\0", writable=False)]
    if fixed and tpl == "diag":
        objs.append(DataObject("diag_str", b"rejected zero value\0", writable=False))
    prog = Program(functions=funcs, objects=objs, imports=["log_msg"],
                   strip=strip and not fixed, slack=slack)
    return prog, w


# -- running vectors ---------------------------------------------------------------


def interpret(img: BinaryImage, vec: TestVector, symbols: dict[str, int]) -> Result:
    """Run one vector; faults propagate as typed errors."""
    return run(img, symbols[vec.func], THUMB, tuple(vec.args), fuel=vec.fuel)


def observe(img: BinaryImage, symbols: dict[str, int], func: str, args, table_len: int,
            fuel: int = 200000) -> dict:
    """Observable effect of one call: return value, host calls, global bytes."""
    try:
        res = run(img, symbols[func], THUMB, tuple(args), fuel=fuel)
    except MendError as e:
        return {"fault": e.reason}
    calls = [[c.name, [a.hex() if isinstance(a, bytes) else a for a in c.args[:1]]] for c in res.calls]
    glob = {name: res.read_global(symbols[name], size).hex()
            for name, size in (("table", 4 * table_len), ("canary", 4), ("acc", 4))}
    return {"r0": res.r0, "calls": calls, "globals": glob}


def differential_check(patched: BinaryImage, fixed: BinaryImage, vectors: list[TestVector],
                       patched_syms: dict[str, int], fixed_syms: dict[str, int],
                       table_len: int) -> list[tuple[str, bool, str]]:
    """Run every vector on both builds; returns (vector, agreed, detail)."""
    out = []
    for v in vectors:
        want = v.expected if v.expected is not None else observe(fixed, fixed_syms, v.func, v.args, table_len, v.fuel)
        got = observe(patched, patched_syms, v.func, v.args, table_len, v.fuel)
        ok = got == want
        out.append((v.name, ok, "" if ok else f"expected {want}, got {got}"))
    return out


# -- generation --------------------------------------------------------------------


def _vectors(tpl: str, p: _Params) -> tuple[list[TestVector], TestVector]:
    vs = [TestVector(f"in{k}", FUNC, [k, 3 + 7 * k]) for k in range(p.length)]
    vs += [TestVector("neg", FUNC, [-1 & 0xFFFFFFFF, 3]),
           TestVector("vmax", FUNC, [1, p.vmax]),
           TestVector("big", FUNC, [2, 250]),
           TestVector("zero", FUNC, [p.length - 1, 0])]
    pov = {
        "bounds": [p.length, 5],
        "fallback": [1, 250],
        "diag": [2, 0],
        "widen": [p.length, 5],
        "helper": [p.length, 9],
        "global": [p.length, 11],
    }[tpl]
    return vs, TestVector("pov", FUNC, pov)


def make_case(seed: int, index: int, template: str | None = None, strip: bool | None = None,
              slack: int | None = None) -> CorpusCase:
    rng = random.Random(seed * 1_000_003 + index)
    tpl = template or TEMPLATES[index % len(TEMPLATES)]
    if strip is None:
        strip = index % 5 == 4
    if slack is None:
        slack = 0x400 if (index // len(TEMPLATES)) % 2 else 0
    p = _params(rng, tpl)
    pv, wv = _program(tpl, False, p, strip, slack)
    pf, wf = _program(tpl, True, p, False, slack)
    bv, bf = build(pv), build(pf)
    truth = {"vuln": wv.truth(bv.labels, bv.symbols), "fixed": wf.truth(bf.labels, bf.symbols)}
    # unchanged named blocks pair up across the builds
    tv, tf = truth["vuln"], truth["fixed"]
    truth["pairs"] = sorted((tv["named"][n], tf["named"][n]) for n in tv["named"]
                            if n in tf["named"] and tv["named"][n] not in tv["changed"]
                            and tf["named"][n] not in tf["changed"])
    symbols = {"vuln": _public_syms(bv), "fixed": _public_syms(bf)}
    vuln_img = load_elf_bytes(bv.elf)
    fixed_img = load_elf_bytes(bf.elf)
    vectors, pov = _vectors(tpl, p)
    for v in vectors + [pov]:
        v.expected = observe(fixed_img, symbols["fixed"], v.func, v.args, p.length)
    diverges = observe(vuln_img, symbols["vuln"], pov.func, pov.args, p.length) != pov.expected
    if not diverges:
        raise AssertionError(f"case {index} ({tpl}): pov does not separate vuln from fixed")
    name = f"s{seed}-{index:03d}-{tpl}{'-stripped' if strip else ''}{'-slack' if slack else ''}"
    return CorpusCase(name=name, template=tpl, vuln=bv.elf, fixed=bf.elf, functions=[FUNC],
                      symbols=symbols, vectors=vectors, pov=pov, ground_truth=truth,
                      params={"table_len": p.length, "strip": strip, "slack": slack,
                              "seed": seed, "index": index})


def _public_syms(b: Built) -> dict[str, int]:
    return {k: v for k, v in b.symbols.items() if "@" not in k and "." not in k}


def generate_corpus(seed: int, n: int) -> list[CorpusCase]:
    """``n`` cases cycling through the templates; same seed, same bytes."""
    return [make_case(seed, k) for k in range(n)]


def write_case(case: CorpusCase, root: str | Path) -> Path:
    d = Path(root) / case.name
    d.mkdir(parents=True, exist_ok=True)
    (d / "vuln.elf").write_bytes(case.vuln)
    (d / "fixed.elf").write_bytes(case.fixed)
    (d / "manifest.json").write_text(json.dumps(case.manifest(), indent=1))
    return d


def load_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def vectors_from_manifest(m: dict) -> list[TestVector]:
    vs = [TestVector(**v) for v in m.get("vectors", [])]
    if m.get("pov"):
        vs.append(TestVector(**m["pov"]))
    return vs


def verify_patched(case: CorpusCase, patched: BinaryImage) -> tuple[bool, list]:
    """Differential pass on all vectors plus pov divergence on the original."""
    vuln, fixed = case.images()
    table_len = case.params["table_len"]
    results = differential_check(patched, fixed, case.vectors + [case.pov],
                                 case.symbols["vuln"], case.symbols["fixed"], table_len)
    vuln_pov = observe(vuln, case.symbols["vuln"], FUNC, case.pov.args, table_len)
    results.append(("pov-diverges-on-vuln", vuln_pov != case.pov.expected, ""))
    return all(ok for _, ok, _ in results), results


__all__ = ["CorpusCase", "TestVector", "generate_corpus", "make_case", "write_case",
           "differential_check", "verify_patched", "observe", "load_elf"]
