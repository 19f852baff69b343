import copy
import json
from pathlib import Path

import pytest

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

_criteria: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marks = list(item.iter_markers("acceptance"))
    if not marks or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    notes = [v for k, v in item.user_properties if k == "note"]
    for mark in marks:
        _criteria.setdefault(mark.args[0], []).append((item.name, rep.outcome, notes))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        runs = _criteria[n]
        ok = all(o == "passed" for _, o, _ in runs)
        detail = "; ".join(s for _, _, notes in runs for s in notes)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line."""
    def add(text: str) -> None:
        request.node.user_properties.append(("note", text))
    return add


def load_config(name: str, **blocks) -> dict:
    """A config from configs/, with selected blocks updated."""
    cfg = json.loads((CONFIGS / f"{name}.json").read_text())
    cfg = copy.deepcopy(cfg)
    for block, vals in blocks.items():
        cfg.setdefault(block, {}).update(vals)
    return cfg
