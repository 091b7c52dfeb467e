import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(Path(__file__).resolve().parent))


def load_vectors(name: str) -> dict[str, tuple[bytes, str, bytes]]:
    out = {}
    for line in (ROOT / "tests" / "vectors" / name).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        vname, key, inp, outp = line.split("\t")
        out[vname] = (bytes.fromhex(key), inp, bytes.fromhex(outp))
    return out


@pytest.fixture(scope="session")
def repo_root() -> Path:
    return ROOT


@pytest.fixture(scope="session")
def crypto_vectors():
    return load_vectors("crypto.txt")


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------------------

ACCEPTANCE = pytest.StashKey[dict]()
CRITERIA = {
    1: "provisioning and rolling latency",
    2: "digest-length sweep",
    3: "speculative MAC",
    4: "attack suite",
    5: "deprecation isolation",
    6: "crypto conformance",
    7: "determinism",
    8: "fleet arithmetic",
}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records the outcome of criterion n and asserts it."""
    store = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(n: int, ok: bool, detail: str) -> None:
        store[n] = (ok, detail)
        print(f"criterion {n} ({CRITERIA[n]}): {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        ok, detail = store.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
