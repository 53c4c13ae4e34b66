import logging
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: list[str] = []


def record(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    from mend.oracle.corpus import generate_corpus
    logging.getLogger("mend").setLevel(logging.ERROR)
    return generate_corpus(1, 6)


@pytest.fixture(scope="session")
def patched_small(small_corpus):
    from mend.pipeline import patch
    out = []
    for case in small_corpus:
        vuln, fixed = case.images()
        out.append((case, patch(vuln, fixed, case.functions)))
    return out
