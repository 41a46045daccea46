import os
from pathlib import Path

import numpy as np
import pytest
import torch

from sparsecolor.config import ModelConfig
from sparsecolor.model import ColorizationNet

SMOKE_DIR = Path(__file__).resolve().parents[1] / "src" / "sparsecolor" / "data" / "smoke"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def smoke_dir():
    return SMOKE_DIR


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(scale_factor=0.125, class_count=5)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    model = ColorizationNet(tiny_config)
    model.weights_loaded = True
    return model


@pytest.fixture(scope="session")
def smoke_image(smoke_dir):
    from sparsecolor.color_space import read_image

    return read_image(smoke_dir / "chelsea.png")


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Desk-scale overfit training shared by the slow checks (runs once per session)."""
    from overfit import run_overfit

    out = Path(os.environ.get("SPARSECOLOR_OVERFIT_DIR") or tmp_path_factory.mktemp("overfit"))
    return run_overfit(out)


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
