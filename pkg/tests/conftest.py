from __future__ import annotations

from pathlib import Path

import pytest

from gotflow.bundle import write_bundle
from gotflow.dsl import parse_workflow
from gotflow.engine import RunConfig

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def ads_root(tmp_path) -> Path:
    root = tmp_path / "gf"
    write_bundle(root)
    return root


@pytest.fixture
def ads_dir(ads_root) -> Path:
    return ads_root / "data" / "workflows" / "Ads"


@pytest.fixture
def ads_spec(ads_dir):
    return parse_workflow((ads_dir / "workflow.json").read_bytes())


@pytest.fixture
def ads_config(ads_root):
    return RunConfig(env={"GF_ROOT": str(ads_root)})


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"AC{number} {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
