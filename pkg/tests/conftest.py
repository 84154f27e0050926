import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import toy_config  # noqa: E402
from nestedvit.config import FusionSettings  # noqa: E402
from nestedvit.model import NestedViT  # noqa: E402
from nestedvit.recycling import make_transitions  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    """Two-stage toy model (d = 8 -> 16) with its transitions."""
    cfg = toy_config()
    model = NestedViT(cfg, seed=3)
    transitions = make_transitions(cfg, FusionSettings(), seed=3)
    return cfg, model, transitions


@pytest.fixture
def images(rng):
    return rng.normal(size=(4, 3, 8, 8)).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
