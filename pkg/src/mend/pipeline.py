"""End-to-end patch, diff and verify drivers shared by the CLI and the tests."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field

from .elf import DEFAULT_REGION_SIZE, BinaryImage, PatchRegion, alloc_patch_region
from .errors import MendError, RegionOverflow
from .flow import build_cfg, build_dfg, extract_references
from .matcher import FunctionPair, MatchSet, build_matchset, match_functions, match_references
from .reassembler import PatchPlan, commit, plan_and_reassemble

log = logging.getLogger(__name__)

REPORT_VERSION = 1
OPT_HINTS = ("O1", "O2", "Os", "O3")
MAX_REGION_SIZE = 1 << 20


@dataclass
class FunctionResult:
    name: str
    status: str = "pending"  # patched | noop | aborted:<Reason>
    fpair: FunctionPair | None = None
    ms: MatchSet | None = None
    plan: PatchPlan | None = None
    error: str | None = None
    graphs: dict | None = None

    @property
    def ok(self) -> bool:
        return not self.status.startswith("aborted")

    def to_json(self) -> dict:
        d: dict = {"name": self.name, "status": self.status}
        if self.error:
            d["error"] = self.error
        if self.fpair:
            d["match"] = {"how": self.fpair.how_matched, "score": round(self.fpair.score, 4),
                          "vuln_entry": self.fpair.vuln_entry, "patch_entry": self.fpair.patch_entry,
                          "vuln_mode": self.fpair.vuln_mode, "patch_mode": self.fpair.patch_mode}
        if self.ms:
            d["counts"] = self.ms.counts()
            d["patch_region_blocks"] = sorted(b.start for b in self.ms.patch_region)
            if self.ms.vuln_region:
                d["vuln_region"] = list(self.ms.vuln_region)
            if self.ms.notes:
                d["notes"] = list(self.ms.notes)
        if self.plan and self.status == "patched":
            d["patch"] = self.plan.summary()
        if self.graphs is not None:
            d["graphs"] = self.graphs
        return d


@dataclass
class PatchOutcome:
    image: BinaryImage
    results: list[FunctionResult]
    region: PatchRegion | None
    wall_time: float
    changed: bool = False
    report: dict = field(default_factory=dict)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _abort(res: FunctionResult, e: MendError) -> None:
    res.status = f"aborted:{e.reason}"
    res.error = str(e)
    log.warning("%s: %s", res.name, res.status)


def _graphs(ms: MatchSet) -> dict:
    def cfg_json(cfg):
        if cfg is None:
            return None
        return {"entry": cfg.entry,
                "blocks": [[b.start, b.end] for b in sorted(cfg.blocks.values(), key=lambda b: b.start)],
                "edges": sorted([e.src, e.dst, e.kind] for e in cfg.edges)}
    return {"vuln": cfg_json(ms.vuln_cfg), "fixed": cfg_json(ms.patch_cfg),
            "pairs": [[_start(p.vuln_block), _start(p.patch_block), p.perfect] for p in ms.pairs]}


def _start(block):
    return None if block is None else block.start


def analyze(vuln: BinaryImage, fixed: BinaryImage, fpair: FunctionPair,
            min_region: int = 4) -> tuple[MatchSet, object, list]:
    """Graphs, block matching and reference matching for one function pair."""
    vcfg = build_cfg(vuln, fpair.vuln_entry, fpair.vuln_mode, fpair.name)
    pcfg = build_cfg(fixed, fpair.patch_entry, fpair.patch_mode, fpair.name)
    ms = build_matchset(fpair, vcfg, pcfg, min_region)
    if ms.is_noop:
        return ms, None, []
    vdfg, pdfg = build_dfg(vcfg), build_dfg(pcfg)
    vrefs = extract_references(vcfg, vdfg)
    prefs = extract_references(pcfg, pdfg)
    match_references(ms, vrefs, prefs, vuln, fixed)
    return ms, pdfg, prefs


def diff(vuln: BinaryImage, fixed: BinaryImage, names: list[str], dump_graphs: bool = False) -> list[FunctionResult]:
    """Matching only; nothing is rewritten."""
    out = []
    for name in names:
        res = FunctionResult(name)
        try:
            res.fpair = match_functions(vuln, fixed, [name])[0]
            res.ms, _, _ = analyze(vuln, fixed, res.fpair)
            res.status = "noop" if res.ms.is_noop else "differs"
            if dump_graphs:
                res.graphs = _graphs(res.ms)
        except MendError as e:
            _abort(res, e)
        out.append(res)
    return out


def patch(vuln: BinaryImage, fixed: BinaryImage, names: list[str],
          region_size: int = DEFAULT_REGION_SIZE, dump_graphs: bool = False,
          dump_slices: bool = False) -> PatchOutcome:
    """Patch every named function that can be patched safely.

    Each function is committed atomically: a failure after encoding rolls the
    working image back to the state before that function.  When nothing gets
    patched the output is the input, byte for byte.
    """
    t0 = time.perf_counter()
    work = vuln.copy()
    region: PatchRegion | None = None
    committed = False
    results = []
    for name in names:
        res = FunctionResult(name)
        results.append(res)
        try:
            res.fpair = match_functions(work, fixed, [name])[0]
            res.ms, pdfg, prefs = analyze(work, fixed, res.fpair)
            if dump_graphs:
                res.graphs = _graphs(res.ms)
            if res.ms.is_noop:
                res.status = "noop"
                continue
            size = region_size
            while True:
                if region is None:
                    region = alloc_patch_region(work, size)
                try:
                    res.plan = plan_and_reassemble(res.ms, work, fixed, region, pdfg, prefs,
                                                   dump_slices=dump_slices, apply=False)
                    break
                except RegionOverflow:
                    # a fresh region can still be resized: start over at twice the size
                    if committed or size >= MAX_REGION_SIZE:
                        raise
                    size *= 2
                    log.info("%s: region overflow, retrying with %d bytes", name, size)
                    work, region = vuln.copy(), None
            saved = (bytes(work.data), region.code_cursor, region.data_cursor)
            try:
                commit(work, res.plan)
            except MendError:
                work.data[:] = saved[0]
                region.code_cursor, region.data_cursor = saved[1], saved[2]
                raise
            res.status = "patched"
            committed = True
        except MendError as e:
            _abort(res, e)
    changed = any(r.status == "patched" for r in results)
    return PatchOutcome(work if changed else vuln, results, region if changed else None,
                        time.perf_counter() - t0, changed)


def build_report(outcome: PatchOutcome, vuln_path: str, fixed_path: str, out_path: str | None,
                 vuln_bytes: bytes, fixed_bytes: bytes, opt_hint: str | None = None) -> dict:
    out_bytes = outcome.image.bytes
    return {
        "report_version": REPORT_VERSION,
        "tool": "mend",
        "opt_hint": opt_hint,
        "inputs": {"vuln": {"path": vuln_path, "sha256": sha256(vuln_bytes)},
                   "fixed": {"path": fixed_path, "sha256": sha256(fixed_bytes)}},
        "output": {"path": out_path, "sha256": sha256(out_bytes), "changed": outcome.changed},
        "patch_region": ({"vaddr": outcome.region.vaddr, "size": outcome.region.size}
                         if outcome.region else None),
        "functions": [r.to_json() for r in outcome.results],
        "wall_time_s": round(outcome.wall_time, 4),
    }
