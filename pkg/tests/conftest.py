import os
import tempfile
import time
from pathlib import Path

import pytest

# keep the oracle cache out of the user's home directory and start cold
os.environ["ESCHIL_CACHE"] = tempfile.mkdtemp(prefix="eschil-cache-")

from eschil import cli  # noqa: E402

_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def report():
    """Record one acceptance line: report("1", passed, detail)."""

    def _report(criterion: str, passed: bool, detail: str = ""):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        print(line)
        _RESULTS[criterion] = (passed, line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: (int(k.rstrip("abcd")), k)):
        terminalreporter.write_line(_RESULTS[key][1])


class CliRun:
    def __init__(self, out: Path, seconds: float):
        import json

        self.out = out
        self.seconds = seconds
        self.summary = json.loads((out / "summary.json").read_text())


def _cli_run(tmp_path_factory, name: str) -> CliRun:
    out = tmp_path_factory.mktemp(f"run_{name}")
    start = time.perf_counter()
    code = cli.main(["run", name, "--out", str(out)])
    seconds = time.perf_counter() - start
    assert code == 0
    return CliRun(out, seconds)


@pytest.fixture(scope="session")
def fig2a_run(tmp_path_factory):
    return _cli_run(tmp_path_factory, "fig2a")


@pytest.fixture(scope="session")
def wpt_run(tmp_path_factory):
    return _cli_run(tmp_path_factory, "wpt_submodule")


@pytest.fixture(scope="session")
def rc_run(tmp_path_factory):
    return _cli_run(tmp_path_factory, "rc_smoke")
