import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
DATA = REPO / "data"

sys.path.insert(0, str(Path(__file__).resolve().parent))

# one PASS/FAIL line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: dict[str, str] = {}


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def trec6_train_path() -> Path:
    return DATA / "trec6.train.tsv"


@pytest.fixture(scope="session")
def trec6_test_path() -> Path:
    return DATA / "trec6.test.tsv"


@pytest.fixture(scope="session")
def atis_train_path() -> Path:
    return DATA / "atis.train.tsv"


@pytest.fixture(scope="session")
def atis_test_path() -> Path:
    return DATA / "atis.test.tsv"


@pytest.fixture
def tiny_tsv(tmp_path):
    def write(rows, name="tiny.tsv"):
        path = tmp_path / name
        path.write_text("".join(f"{lab}\t{txt}\n" for lab, txt in rows), encoding="utf-8")
        return path
    return write


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_RESULTS[name] = f"{status}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, line in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{name}: {line}")
