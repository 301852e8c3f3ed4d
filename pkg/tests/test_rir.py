import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echomark.acoustics import analyze, edc_array
from echomark.errors import FormatError, InputError
from echomark.rir import (EARLY_LEN, OCTAVE_CENTERS_HZ, EarlyRir, LateParams, ParametricRir, from_t60s,
                          init_params, octave_edges, render, subband_noise, synth_late)
from echomark.watermark import WatermarkMessage, embed

FS = 16000


def _single_band(t60_s: float, band: int = 3, amplitude: float = 1.0, seed: int = 7) -> LateParams:
    amps = np.zeros((6, 1))
    amps[band, 0] = amplitude
    return from_t60s([t60_s], amps, noise_seed=seed)


def _mean_energy(t60_s: float, band: int, seeds: int = 24) -> np.ndarray:
    """Late-field energy averaged over carrier realizations; its expectation is exp(-2 lam t)."""
    return np.mean([synth_late(_single_band(t60_s, band, seed=s)).samples ** 2 for s in range(seeds)], axis=0)


def test_subband_noise_is_deterministic():
    a = subband_noise(2, 5000, 9).samples
    np.testing.assert_array_equal(a, subband_noise(2, 5000, 9).samples)
    assert not np.array_equal(a, subband_noise(2, 5000, 10).samples)
    assert np.var(a) == pytest.approx(1.0)


@pytest.mark.parametrize("band", range(6))
def test_subband_noise_energy_inside_octave(band):
    x = subband_noise(band, 1 << 15, 3).samples
    f = np.fft.rfftfreq(x.size, 1 / FS)
    p = np.abs(np.fft.rfft(x)) ** 2
    lo, hi = octave_edges(OCTAVE_CENTERS_HZ[band])
    assert p[(f >= lo) & (f <= hi)].sum() / p.sum() >= 0.9


def test_distinct_bands_are_uncorrelated():
    rows = [subband_noise(m, 100_000, 4).samples for m in range(6)]
    for i in range(6):
        for j in range(i + 1, 6):
            assert abs(np.dot(rows[i], rows[j])) / 100_000 < 0.05


def test_subband_noise_rejects_bad_band():
    with pytest.raises(InputError):
        subband_noise(6, 100, 1)


def test_synth_late_zero_amplitudes():
    late = LateParams(np.zeros((6, 6)), np.zeros(6))
    assert not np.any(synth_late(late).samples)


@pytest.mark.parametrize("band", [3, 5])
@pytest.mark.parametrize("t60_s", [0.3, 0.8, 1.5])
def test_single_decay_edc_follows_exponential(band, t60_s):
    energy = _mean_energy(t60_s, band)
    lam = 3.0 * math.log(10.0) / t60_s
    t = np.arange(energy.size) / FS
    ideal = np.exp(-2 * lam * t)
    ideal = (ideal - ideal[-1]) / (1 - ideal[-1])  # the same finite clip
    span = t < t60_s
    diff = 10 * np.log10(edc_array(np.sqrt(energy))[span] / ideal[span])
    assert np.max(np.abs(diff)) < 0.5


@pytest.mark.parametrize("band", [3, 5])
@pytest.mark.parametrize("t60_s", [0.3, 0.7, 1.2])
def test_single_decay_t60_matches_rate(band, t60_s):
    measured = analyze(np.sqrt(_mean_energy(t60_s, band))).t60_s
    assert measured == pytest.approx(t60_s, rel=0.02)


def test_t60_monotone_in_logit():
    values = [analyze(synth_late(_single_band(t)).samples).t60_s for t in (0.3, 0.5, 0.8, 1.1, 1.4)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_amplitude_linearity_by_subtraction():
    base = init_params(3)
    amps = base.late.amplitudes.copy()
    amps[2, 2] *= 2.0
    doubled = base.with_late(amplitudes=amps)
    only = base.with_late(amplitudes=np.where(np.arange(36).reshape(6, 6) == 14, amps[2, 2] / 2, 0.0))
    delta = render(doubled).samples - render(base).samples
    np.testing.assert_allclose(delta[EARLY_LEN:], render(only).samples[EARLY_LEN:], atol=1e-12)


def test_render_layout():
    r = init_params(1)
    zero_late = r.with_late(amplitudes=np.zeros((6, 6)))
    h = render(zero_late).samples
    assert h.size == EARLY_LEN + 2 * FS
    np.testing.assert_array_equal(h[:EARLY_LEN], r.early.taps)
    assert not np.any(h[EARLY_LEN:])
    silent_early = ParametricRir(EarlyRir(np.zeros(EARLY_LEN)), r.late)
    h = render(silent_early).samples
    assert not np.any(h[:EARLY_LEN])
    np.testing.assert_allclose(h[EARLY_LEN:], synth_late(r.late).samples)


def test_init_params_contract():
    r = init_params(5, tau_s=3.0)
    assert np.all((r.late.t60s > 0) & (r.late.t60s < 3.0))
    assert r.early.taps[0] == 1.0 and not np.any(r.early.taps[1:])
    np.testing.assert_array_equal(r.late.decay_logits, init_params(5).late.decay_logits)
    zero = r.with_late(decay_logits=np.zeros(6))
    np.testing.assert_allclose(zero.late.t60s, 1.5)
    with pytest.raises(InputError):
        init_params(1, tau_s=0.0)


def test_early_rir_length_enforced():
    with pytest.raises(InputError):
        EarlyRir(np.zeros(10))


def test_json_round_trip(tmp_path):
    r = embed(init_params(8), WatermarkMessage("10110", 0xABC))
    r.save(tmp_path / "r.json")
    back = ParametricRir.load(tmp_path / "r.json")
    np.testing.assert_array_equal(render(back).samples, render(r).samples)
    assert back.payload == r.payload


def test_json_rejects_foreign_documents(tmp_path):
    (tmp_path / "a.json").write_text('{"format": "other"}')
    with pytest.raises(FormatError):
        ParametricRir.load(tmp_path / "a.json")
    (tmp_path / "b.json").write_text("{not json")
    with pytest.raises(FormatError):
        ParametricRir.load(tmp_path / "b.json")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.1, 10.0))
def test_render_is_linear_in_amplitudes(seed, c):
    r = init_params(seed)
    silent = ParametricRir(EarlyRir(np.zeros(EARLY_LEN)), r.late)
    scaled = silent.with_late(amplitudes=c * r.late.amplitudes)
    np.testing.assert_allclose(render(scaled).samples, c * render(silent).samples, rtol=1e-9, atol=1e-12)
