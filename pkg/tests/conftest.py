import numpy as np
import pytest

from echomark.dsp import Waveform, make_rng
from echomark.rir import EarlyRir, ParametricRir, from_t60s
from echomark.synthetic import speech_like, synthetic_room

_ACCEPTANCE_LINES = []


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> str:
    """Print and remember one acceptance outcome line."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
    print(line)
    _ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


def random_parametric(rng: np.random.Generator, lo: float = 0.2, hi: float = 1.9,
                      amp=(0.005, 0.02)) -> ParametricRir:
    """Diagonal six-band model with random band T60s, amplitudes and noise seed.

    The default ranges give a unit direct path that dominates the peak, DRR
    between roughly -8 and +10 dB, and T60s that fit inside the 2 s tail.
    """
    late = from_t60s(rng.uniform(lo, hi, 6), rng.uniform(*amp, 6),
                     noise_seed=int(rng.integers(2**62)))
    return ParametricRir(EarlyRir.impulse(), late)


@pytest.fixture
def acceptance():
    return record_acceptance


@pytest.fixture
def make_parametric():
    return random_parametric


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture(scope="session")
def room():
    return synthetic_room(0.6, seed=11)


@pytest.fixture(scope="session")
def speech():
    return speech_like(2.0, seed=21)


@pytest.fixture
def noise_rir():
    samples = make_rng(5, "noise-rir").standard_normal(2048) * np.exp(-np.arange(2048) / 400.0)
    return Waveform(samples)
