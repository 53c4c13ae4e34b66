import json
import logging
import subprocess
import sys

import pytest

from mend.cli import main
from mend.elf import load_elf_bytes
from mend.oracle.corpus import make_case, write_case


@pytest.fixture(scope="module")
def case_dir(tmp_path_factory):
    return write_case(make_case(1, 0, "bounds"), tmp_path_factory.mktemp("corpus"))


def _patch(case_dir, out, *extra):
    return main(["patch", str(case_dir / "vuln.elf"), str(case_dir / "fixed.elf"), "-f", "F",
                 "-o", str(out), *extra])


def test_patch_then_verify(case_dir, tmp_path, capsys):
    out = tmp_path / "p.elf"
    assert _patch(case_dir, out, "--opt-hint", "O2") == 0
    assert "F: patched" in capsys.readouterr().out
    report = json.loads((tmp_path / "p.elf.report.json").read_text())
    assert report["report_version"] == 1
    assert report["opt_hint"] == "O2"
    [fn] = report["functions"]
    assert fn["status"] == "patched"
    assert main(["verify", str(out), str(case_dir / "fixed.elf"),
                 "--manifest", str(case_dir / "manifest.json")]) == 0
    # once patched, the function no longer differs from the fix
    assert main(["diff", str(out), str(case_dir / "fixed.elf"), "-f", "F"]) == 0
    assert "noop" in capsys.readouterr().out


def test_verify_fails_on_mutation(case_dir, tmp_path):
    out = tmp_path / "p.elf"
    _patch(case_dir, out)
    fn = json.loads((tmp_path / "p.elf.report.json").read_text())["functions"][0]
    redirect = int(fn["patch"]["redirect"][0], 16)
    data = bytearray(out.read_bytes())
    off = load_elf_bytes(bytes(data)).vaddr_to_offset(redirect)
    data[off:off + 2] = b"\x00\xde"  # turn the redirect branch into a trap
    bad = tmp_path / "bad.elf"
    bad.write_bytes(bytes(data))
    assert main(["verify", str(bad), str(case_dir / "fixed.elf"),
                 "--manifest", str(case_dir / "manifest.json")]) == 1
    # the unpatched build fails the pov as well
    assert main(["verify", str(case_dir / "vuln.elf"), str(case_dir / "fixed.elf"),
                 "--manifest", str(case_dir / "manifest.json")]) == 1


def test_verify_empty_manifest_warns(case_dir, tmp_path, caplog):
    caplog.set_level(logging.WARNING, logger="mend")
    m = json.loads((case_dir / "manifest.json").read_text())
    m["vectors"], m["pov"] = [], None
    path = tmp_path / "empty.json"
    path.write_text(json.dumps(m))
    rc = main(["verify", str(case_dir / "fixed.elf"), str(case_dir / "fixed.elf"), "--manifest", str(path)])
    assert rc == 0
    assert any("no test vectors" in r.message for r in caplog.records)


def test_unknown_function_exit_one(case_dir, tmp_path, capsys):
    rc = main(["patch", str(case_dir / "vuln.elf"), str(case_dir / "fixed.elf"), "-f", "nope",
               "-o", str(tmp_path / "x.elf")])
    assert rc == 1
    assert "aborted:FunctionNotFound" in capsys.readouterr().out
    # nothing patched: output equals input
    assert (tmp_path / "x.elf").read_bytes() == (case_dir / "vuln.elf").read_bytes()


def test_missing_input_exit_two(tmp_path, capsys):
    assert main(["patch", str(tmp_path / "none.elf"), str(tmp_path / "none.elf"), "-f", "F",
                 "-o", str(tmp_path / "o.elf")]) == 2
    assert "none.elf" in capsys.readouterr().err


def test_not_elf_exit_two(tmp_path):
    junk = tmp_path / "junk"
    junk.write_bytes(b"hello world" * 10)
    assert main(["diff", str(junk), str(junk), "-f", "F"]) == 2


def test_usage_error_exit_two():
    with pytest.raises(SystemExit) as e:
        main(["patch"])
    assert e.value.code == 2


def test_report_deterministic(case_dir, tmp_path):
    reports = []
    for k in range(2):
        out = tmp_path / f"o{k}.elf"
        _patch(case_dir, out, "--report", str(tmp_path / f"r{k}.json"))
        r = json.loads((tmp_path / f"r{k}.json").read_text())
        r.pop("wall_time_s")
        r["output"].pop("path", None)
        reports.append(r)
    assert reports[0] == reports[1]
    assert (tmp_path / "o0.elf").read_bytes() == (tmp_path / "o1.elf").read_bytes()


def test_diff_json_and_dumps(case_dir, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mend.cli", "diff", str(case_dir / "vuln.elf"),
                           str(case_dir / "fixed.elf"), "-f", "F", "--json", "--dump-graphs"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    doc = json.loads(proc.stdout)
    [fn] = doc["functions"]
    assert fn["status"] == "differs" and fn["graphs"]
    rc = _patch(case_dir, tmp_path / "s.elf", "--dump-slices")
    assert rc == 0
