"""
Synthetic sources and rooms for tests, calibration and the evaluation CLI.

Rooms here are deliberately *not* drawn from the parametric model: the
late tail uses its own noise, smooth per-band decay, a direct path with a
random delay and a handful of sparse early reflections, so fits cannot
cheat by matching carriers.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.signal as ssig

from .dsp import SAMPLE_RATE, Waveform, generate_noise, make_rng
from .rir import EARLY_LEN, OCTAVE_CENTERS_HZ, octave_edges

# Relative band T60s (125 Hz .. 4 kHz) around the 1 kHz value.
BAND_T60_PROFILE = (1.1, 1.05, 1.0, 1.0, 0.9, 0.75)


def speech_like(duration_s: float, seed: int, sample_rate_hz: int = SAMPLE_RATE) -> Waveform:
    """Speech-shaped test signal: syllable-rate bursts of voiced and unvoiced sound.

    Voiced bursts are harmonic stacks with a drifting f0 (90-220 Hz) and a
    -6 dB/octave roll-off plus breath noise; unvoiced bursts are pink noise. Bursts of 80-300
    ms alternate with short pauses at a low noise level so the signal stays
    broadband and deconvolvable. Peak-normalized to 0.5.
    """
    n = int(round(duration_s * sample_rate_hz))
    if n <= 0:
        raise ValueError("duration must be positive")
    rng = make_rng(seed, "speech-like")
    out = np.zeros(n)
    t = np.arange(n) / sample_rate_hz
    pink = generate_noise("pink", n, seed, stream="speech-like/pink").samples
    pos = 0
    while pos < n:
        length = int(rng.uniform(0.08, 0.3) * sample_rate_hz)
        seg = slice(pos, min(n, pos + length))
        m = seg.stop - seg.start
        env = np.sin(np.pi * np.arange(m) / m) ** 2
        if rng.random() < 0.7:
            f0 = rng.uniform(90.0, 220.0) * (1.0 + 0.1 * np.sin(2 * np.pi * rng.uniform(1, 4) * t[seg]))
            phase = 2 * np.pi * np.cumsum(f0) / sample_rate_hz
            k = np.arange(1, int(0.45 * sample_rate_hz / f0.max()) + 1)
            burst = np.sum(np.sin(np.outer(k, phase)) / k[:, None], axis=0)
            burst += 0.2 * pink[seg] * np.std(burst)
        else:
            burst = pink[seg]
        out[seg] = env * burst / max(np.std(burst), 1e-12)
        pos = seg.stop + int(rng.uniform(0.02, 0.12) * sample_rate_hz)
    out += 0.03 * pink
    out *= 0.5 / np.max(np.abs(out))
    return Waveform(out, sample_rate_hz)


def synthetic_room(t60_s: float, seed: int, length_s: float = 2.0, drr_db: float = 3.0,
                   sample_rate_hz: int = SAMPLE_RATE) -> Waveform:
    """Non-parametric RIR: delayed direct path, sparse reflections, banded noise tail.

    `t60_s` sets the 1 kHz band decay; other bands follow
    `BAND_T60_PROFILE`. The measured broadband T60 differs slightly from
    `t60_s`; ground truth should be measured with `acoustics.analyze`.
    `drr_db` is approximate (the direct window is also counted by DRR).
    """
    if not t60_s > 0.0:
        raise ValueError("t60_s must be positive")
    rng = make_rng(seed, "synthetic-room")
    n = EARLY_LEN + int(round(length_s * sample_rate_hz))
    delay = int(rng.integers(16, 160))
    t = np.maximum(np.arange(n) - delay, 0) / sample_rate_hz
    tail = np.zeros(n)
    white = rng.standard_normal(n)
    for center, ratio in zip(OCTAVE_CENTERS_HZ, BAND_T60_PROFILE):
        lo, hi = octave_edges(center, sample_rate_hz)
        sos = ssig.butter(4, [lo, min(hi, 0.49 * sample_rate_hz)], btype="bandpass",
                          fs=sample_rate_hz, output="sos")
        band = ssig.sosfilt(sos, white)
        band /= np.std(band)
        rate = 3.0 * math.log(10.0) / (t60_s * ratio)
        tail += band * np.exp(-rate * t) * rng.uniform(0.6, 1.0)
    # smooth onset of the diffuse field after the direct path
    onset = np.clip((np.arange(n) - delay) / (0.01 * sample_rate_hz), 0.0, 1.0)
    tail *= onset
    h = np.zeros(n)
    for _ in range(int(rng.integers(4, 10))):
        pos = delay + int(rng.integers(20, EARLY_LEN - delay))
        h[pos] += rng.uniform(-0.4, 0.4)
    tail_energy = float(np.sum(tail ** 2))
    direct = math.sqrt(tail_energy * 10.0 ** (drr_db / 10.0))
    h[delay] += direct
    h += tail
    return Waveform(h / np.max(np.abs(h)), sample_rate_hz)


def room_t60s(count: int, seed: int, lo: float = 0.2, hi: float = 2.5) -> np.ndarray:
    """Evenly spread, shuffled T60 targets for a room batch."""
    values = np.linspace(lo, hi, count)
    make_rng(seed, "room-t60s").shuffle(values)
    return values
