import numpy as np
import pytest
import torch

from nfsubspace.array_signal import ArrayGeometry

torch.set_num_threads(1)

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def geometry15():
    """15-element half-wavelength ULA at 300 MHz (1 m wavelength)."""
    return ArrayGeometry.half_wavelength(15, 300e6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; also printed at the end."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
