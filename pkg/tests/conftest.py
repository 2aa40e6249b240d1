import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
ML100K = Path(os.environ.get("SYMGNN_DATA", ROOT / "data")) / "ml-100k"

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES = []


def have_ml100k() -> bool:
    return (ML100K / "u.data").exists() and (ML100K / "u.user").exists() and (ML100K / "u.item").exists()


needs_ml100k = pytest.mark.skipif(not have_ml100k(), reason="ML-100K files not found; run scripts/fetch_ml100k.py")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
