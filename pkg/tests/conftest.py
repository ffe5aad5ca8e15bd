import numpy as np
import pytest

from viflab.model import ModelConfig, init_model
from viflab.relay import RelayBlock, RelayBlockConfig
from viflab.scene import build_prompt, make_scene


@pytest.fixture(scope="session")
def model():
    return init_model(ModelConfig())


@pytest.fixture(scope="session")
def block():
    return RelayBlock.init(RelayBlockConfig())


@pytest.fixture(scope="session")
def scene():
    return make_scene()


@pytest.fixture(scope="session")
def prompt(model, scene):
    return build_prompt(model, scene, scene.question_ids)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance verdict; returns ``ok`` so callers can assert on it."""

    def _report(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"AC{number:02d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
