"""``mend patch|diff|verify`` command line.

Exit codes: 0 success, 1 a function aborted or a vector failed, 2 usage or
I/O errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .elf import DEFAULT_REGION_SIZE, emit_elf, load_elf
from .errors import MendError
from .pipeline import OPT_HINTS, build_report, diff, patch

log = logging.getLogger("mend")


def _load(path: str):
    try:
        return load_elf(path), Path(path).read_bytes()
    except OSError as e:
        raise SystemExit(_fail(f"cannot read {path}: {e.strerror or e}"))
    except MendError as e:
        raise SystemExit(_fail(f"{path}: {e}"))


def _fail(msg: str) -> int:
    print(f"mend: error: {msg}", file=sys.stderr)
    return 2


def _int(text: str) -> int:
    return int(text, 0)


def cmd_patch(args) -> int:
    vuln, vbytes = _load(args.vuln)
    fixed, fbytes = _load(args.fixed)
    outcome = patch(vuln, fixed, args.function, region_size=args.region_size,
                    dump_graphs=args.dump_graphs, dump_slices=args.dump_slices)
    try:
        emit_elf(outcome.image, args.output)
    except OSError as e:
        return _fail(f"cannot write {args.output}: {e.strerror or e}")
    report = build_report(outcome, args.vuln, args.fixed, args.output, vbytes, fbytes, args.opt_hint)
    if args.dump_slices:
        for r in outcome.results:
            if r.plan and r.plan.slices:
                print(f"-- slices for {r.name}")
                print("\n".join(r.plan.slices))
    text = json.dumps(report, indent=2, default=str)
    report_path = args.report or f"{args.output}.report.json"
    Path(report_path).write_text(text + "\n")
    for r in outcome.results:
        extra = f" ({r.plan.bytes_used} bytes)" if r.status == "patched" else ""
        print(f"{r.name}: {r.status}{extra}")
    return 0 if all(r.ok for r in outcome.results) else 1


def cmd_diff(args) -> int:
    vuln, _ = _load(args.vuln)
    fixed, _ = _load(args.fixed)
    results = diff(vuln, fixed, args.function, dump_graphs=args.dump_graphs)
    if args.json:
        print(json.dumps({"report_version": 1, "functions": [r.to_json() for r in results]},
                         indent=2, default=str))
    else:
        for r in results:
            if not r.ms:
                print(f"{r.name}: {r.status}")
                continue
            c = r.ms.counts()
            how = r.fpair.how_matched
            flag = f" [similarity {r.fpair.score:.3f}]" if how == "similarity" else ""
            region = ", ".join(f"{b.start:#x}" for b in sorted(r.ms.patch_region, key=lambda b: b.start))
            print(f"{r.name}: {r.status}{flag} perfect={c['perfect_pairs']} "
                  f"unmatched_fixed={c['unmatched_patch_blocks']} unmatched_vuln={c['unmatched_vuln_blocks']} "
                  f"patch_region=[{region}]")
    return 0 if all(r.ok for r in results) else 1


def cmd_verify(args) -> int:
    from .oracle.corpus import differential_check, load_manifest, vectors_from_manifest
    patched, _ = _load(args.patched)
    fixed, _ = _load(args.fixed)
    try:
        m = load_manifest(args.manifest)
    except (OSError, ValueError) as e:
        return _fail(f"cannot read manifest {args.manifest}: {e}")
    vectors = vectors_from_manifest(m)
    if not vectors:
        log.warning("manifest has no test vectors; nothing to verify")
        print("no vectors")
        return 0
    syms = m["symbols"]
    verdicts = differential_check(patched, fixed, vectors, syms["vuln"], syms["fixed"],
                                  m["params"]["table_len"])
    for name, ok, detail in verdicts:
        print(f"{'pass' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
    return 0 if all(ok for _, ok, _ in verdicts) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mend", description="Patch ARM32/Thumb ELF binaries by local reassembly.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("patch", help="transplant fixed functions into the vulnerable binary")
    pp.add_argument("vuln")
    pp.add_argument("fixed")
    pp.add_argument("-f", "--function", action="append", required=True, help="function name (repeatable)")
    pp.add_argument("-o", "--output", required=True)
    pp.add_argument("--report", help="report path (default: <output>.report.json)")
    pp.add_argument("--region-size", type=_int, default=DEFAULT_REGION_SIZE)
    pp.add_argument("--opt-hint", choices=OPT_HINTS, help="optimization level of the fixed build (recorded only)")
    pp.add_argument("--dump-graphs", action="store_true")
    pp.add_argument("--dump-slices", action="store_true")
    pp.set_defaults(func=cmd_patch)

    pd = sub.add_parser("diff", help="match only, print the patch region")
    pd.add_argument("vuln")
    pd.add_argument("fixed")
    pd.add_argument("-f", "--function", action="append", required=True)
    pd.add_argument("--json", action="store_true")
    pd.add_argument("--dump-graphs", action="store_true")
    pd.set_defaults(func=cmd_diff)

    pv = sub.add_parser("verify", help="differential check against a corpus manifest")
    pv.add_argument("patched")
    pv.add_argument("fixed")
    pv.add_argument("--manifest", required=True)
    pv.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2


if __name__ == "__main__":
    sys.exit(main())
