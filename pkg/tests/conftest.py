import numpy as np
import pytest

from coughscope.signal_prep import AudioSignal, write_wav

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq, sr=16000, dur=1.0, amp=0.5):
    t = np.arange(int(sr * dur)) / sr
    return AudioSignal(amp * np.sin(2 * np.pi * freq * t), sr)


def burst_wav(path, sr=16000, seed=0):
    """A 300 ms noise burst between two 300 ms silences."""
    r = np.random.default_rng(seed)
    quiet = np.zeros(int(0.3 * sr))
    x = np.concatenate([quiet, 0.3 * r.standard_normal(int(0.3 * sr)), quiet])
    write_wav(path, AudioSignal(np.clip(x, -1, 1), sr))
    return path
