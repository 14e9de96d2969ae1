import numpy as np
import pytest

from songconv.audio_io import AudioClip

SR = 16000


def sine(freq, seconds=1.0, sr=SR, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t + phase), sr)


def pulse_vowel(f0=150.0, seconds=1.0, formants=((700, 80), (1200, 90), (2600, 120)), sr=SR):
    """Impulse train through a cascade of two-pole resonators."""
    from scipy.signal import lfilter

    n = int(seconds * sr)
    x = np.zeros(n)
    x[(np.arange(0, seconds, 1.0 / f0) * sr).astype(int)] = 1.0
    for f, bw in formants:
        r = np.exp(-np.pi * bw / sr)
        a = [1.0, -2 * r * np.cos(2 * np.pi * f / sr), r * r]
        x = lfilter([1.0 - r], a, x)
    return AudioClip(0.3 * x / np.max(np.abs(x)), sr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, collected by test_acceptance and echoed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
