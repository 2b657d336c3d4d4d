import json
from pathlib import Path

import pytest

from ebgqd import config as cfgmod
from ebgqd import pipeline

_VERDICTS = {}


def record(criterion: int, passed: bool, detail: str):
    """Store one acceptance verdict; printed at the end of the session."""
    _VERDICTS[criterion] = (passed, detail)


class PresetRuns:
    """Runs each preset at most once per session and caches the report."""

    def __init__(self, root: Path):
        self.root = root
        self.reports = {}

    def dir(self, name: str, tag: str = "a") -> Path:
        return self.root / tag / name

    def report(self, name: str, tag: str = "a") -> dict:
        key = (name, tag)
        if key not in self.reports:
            out = self.dir(name, tag)
            pipeline.run_pipeline(cfgmod.resolve(preset=name), out)
            self.reports[key] = json.loads((out / "report.json").read_text())
        return self.reports[key]


@pytest.fixture(scope="session")
def preset_runs(tmp_path_factory):
    return PresetRuns(tmp_path_factory.mktemp("presets"))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_VERDICTS):
        passed, detail = _VERDICTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
