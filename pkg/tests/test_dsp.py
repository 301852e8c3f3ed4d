import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echomark.dsp import (Spectrogram, StftConfig, Waveform, convolve, derive_seed, generate_noise,
                          istft, make_rng, mix_at_snr, read_wav, stft, write_wav)
from echomark.errors import ConfigurationError, FormatError, InputError

FS = 16000


# --------------------------------------------------------------------------
# Waveform

def test_waveform_rejects_empty_and_nonfinite():
    with pytest.raises(InputError):
        Waveform([])
    with pytest.raises(InputError):
        Waveform([0.0, math.nan])
    with pytest.raises(InputError):
        Waveform([1.0], sample_rate_hz=0)


def test_waveform_is_immutable():
    w = Waveform([1.0, 2.0])
    with pytest.raises(ValueError):
        w.samples[0] = 3.0


# --------------------------------------------------------------------------
# STFT

def test_stft_of_zeros_is_zero():
    spec = stft(Waveform(np.zeros(1000)), StftConfig())
    assert not np.any(spec.frames)


def test_stft_bin_centred_sinusoid_has_low_leakage():
    cfg = StftConfig(window_len=512, hop_len=128, fft_len=512)
    k = 40
    n = np.arange(8192)
    spec = stft(Waveform(np.cos(2 * np.pi * k * n / 512)), cfg)
    mag = np.abs(spec.frames[10:-10])  # frames fully inside the signal
    peak = mag[:, k].max()
    far = np.delete(mag, [k - 1, k, k + 1], axis=1)  # Hann main lobe spans +/- 1 bin
    assert 20 * np.log10(far.max() / peak) < -60.0


def test_istft_round_trip(rng):
    x = rng.standard_normal(20000)
    cfg = StftConfig(window_len=512, hop_len=128, fft_len=512)
    y = istft(stft(Waveform(x), cfg)).samples
    assert y.size == x.size
    assert np.linalg.norm(y - x) / np.linalg.norm(x) < 1e-6


def test_istft_of_zeros_is_zero():
    cfg = StftConfig()
    spec = Spectrogram(np.zeros((10, cfg.num_bins), dtype=complex), cfg, 500)
    assert not np.any(istft(spec).samples)


def test_istft_single_frame_is_windowed_frame_over_window_energy(rng):
    cfg = StftConfig(window_len=64, hop_len=16, fft_len=64)
    seg = rng.standard_normal(64)
    source_len = 16  # one frame covers pad + 16 samples
    out = istft(Spectrogram(np.fft.rfft(seg)[None, :], cfg, source_len)).samples
    w = cfg.window[cfg.pad:cfg.pad + source_len]
    expected = seg[cfg.pad:cfg.pad + source_len] * w / w ** 2
    np.testing.assert_allclose(out, expected, rtol=1e-9)


def test_stft_parseval(rng):
    x = rng.standard_normal(10000)
    cfg = StftConfig(window_len=512, hop_len=128, fft_len=512)
    spec = stft(Waveform(x), cfg)
    frame_energy = np.sum(np.abs(np.fft.irfft(spec.frames, n=cfg.fft_len)) ** 2)
    # each sample sees the squared window summed over overlapping frames
    wsum = np.sum(cfg.window ** 2) / cfg.hop_len
    assert frame_energy / wsum == pytest.approx(np.dot(x, x), rel=1e-6)


def test_stft_config_validation():
    with pytest.raises(ConfigurationError):
        StftConfig(window_len=512, hop_len=600, fft_len=512)
    with pytest.raises(ConfigurationError):
        StftConfig(window_len=1024, hop_len=128, fft_len=512)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5, allow_nan=False), st.integers(1, 3000))
def test_stft_is_linear(a, n):
    x = make_rng(n, "lin").standard_normal(n)
    cfg = StftConfig()
    np.testing.assert_allclose(stft(Waveform(a * x), cfg).frames, a * stft(Waveform(x), cfg).frames,
                               atol=1e-9)


# --------------------------------------------------------------------------
# convolution

def test_convolve_identity_and_hand_example(rng):
    h = rng.standard_normal(50)
    delta = np.zeros(1)
    delta[0] = 1.0
    np.testing.assert_allclose(convolve(Waveform(delta), Waveform(h)).samples, h, atol=1e-12)
    out = convolve(Waveform([1.0, 1.0]), Waveform([1.0, -1.0])).samples
    np.testing.assert_allclose(out, [1.0, 0.0, -1.0], atol=1e-12)


def test_convolve_rejects_rate_mismatch():
    with pytest.raises(InputError):
        convolve(Waveform([1.0], 16000), Waveform([1.0], 8000))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 500), st.integers(1, 500), st.floats(-3, 3), st.floats(-3, 3))
def test_convolve_linear_and_commutative(nx, nh, a, b):
    rng = make_rng(nx * 1000 + nh, "conv")
    x, z, h = rng.standard_normal(nx), rng.standard_normal(nx), rng.standard_normal(nh)
    lhs = convolve(Waveform(a * x + b * z), Waveform(h)).samples
    rhs = a * convolve(Waveform(x), Waveform(h)).samples + b * convolve(Waveform(z), Waveform(h)).samples
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
    np.testing.assert_allclose(convolve(Waveform(x), Waveform(h)).samples,
                               convolve(Waveform(h), Waveform(x)).samples, atol=1e-9)
    assert lhs.size == nx + nh - 1


# --------------------------------------------------------------------------
# noise and mixing

def test_noise_is_deterministic_and_seed_dependent():
    a = generate_noise("white", 100_000, 1).samples
    b = generate_noise("white", 100_000, 1).samples
    c = generate_noise("white", 100_000, 2).samples
    np.testing.assert_array_equal(a, b)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.05
    assert np.var(a) == pytest.approx(1.0, rel=0.02)


def test_pink_noise_slope():
    x = generate_noise("pink", 2**18, 3).samples
    f = np.fft.rfftfreq(x.size, 1 / FS)
    psd = np.abs(np.fft.rfft(x)) ** 2
    band = (f >= 100) & (f <= 4000)
    slope = np.polyfit(np.log2(f[band]), 10 * np.log10(psd[band]), 1)[0]
    assert slope == pytest.approx(-3.0, abs=0.5)


def test_noise_rejects_bad_arguments():
    with pytest.raises(InputError):
        generate_noise("white", 0, 1)
    with pytest.raises(InputError):
        generate_noise("brown", 10, 1)


def test_derive_seed_and_streams_are_independent():
    assert derive_seed(5, "a") == derive_seed(5, "a")
    assert derive_seed(5, "a") != derive_seed(5, "b")
    assert make_rng(5, "x").random() != make_rng(5, "y").random()


def test_mix_at_snr_exact():
    s = generate_noise("white", 50_000, 1)
    n = generate_noise("white", 50_000, 2)
    for snr in (0.0, 7.5, 20.0):
        mixed = mix_at_snr(s, n, snr)
        added = mixed.samples - s.samples
        measured = 10 * np.log10(s.power() / np.mean(added ** 2))
        assert measured == pytest.approx(snr, abs=1e-6)
    unit_s, unit_n = s.with_samples(s.samples / np.sqrt(s.power())), n.with_samples(n.samples / np.sqrt(n.power()))
    gain = (mix_at_snr(unit_s, unit_n, 20.0).samples - unit_s.samples) / unit_n.samples
    np.testing.assert_allclose(gain, 0.1, rtol=1e-9)
    near = mix_at_snr(s, n, 100.0)
    assert np.sqrt(np.mean((near.samples - s.samples) ** 2)) < 1e-4


def test_mix_at_snr_rejects_silence():
    with pytest.raises(InputError):
        mix_at_snr(Waveform(np.zeros(10)), Waveform(np.ones(10)), 10.0)


# --------------------------------------------------------------------------
# WAV

def test_wav_float_round_trip_is_exact(tmp_path, rng):
    w = Waveform(rng.uniform(-1, 1, 1000).astype(np.float32))
    write_wav(tmp_path / "a.wav", w)
    np.testing.assert_array_equal(read_wav(tmp_path / "a.wav").samples, w.samples)


def test_wav_pcm16_round_trip_within_one_lsb(tmp_path, rng):
    w = Waveform(rng.uniform(-0.9, 0.9, 1000))
    write_wav(tmp_path / "a.wav", w, encoding="pcm16")
    back = read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(back.samples - w.samples)) <= 2.0 ** -15


def test_truncated_header_is_format_error(tmp_path):
    write_wav(tmp_path / "a.wav", Waveform(np.zeros(100)))
    data = (tmp_path / "a.wav").read_bytes()
    (tmp_path / "b.wav").write_bytes(data[:20])
    with pytest.raises(FormatError):
        read_wav(tmp_path / "b.wav")


def test_stereo_and_garbage_are_format_errors(tmp_path):
    from scipy.io import wavfile

    wavfile.write(tmp_path / "s.wav", FS, np.zeros((10, 2), dtype=np.int16))
    with pytest.raises(FormatError):
        read_wav(tmp_path / "s.wav")
    (tmp_path / "g.wav").write_bytes(b"RIFF" + struct.pack("<I", 4) + b"junk")
    with pytest.raises(FormatError):
        read_wav(tmp_path / "g.wav")


def test_missing_wav_is_input_error(tmp_path):
    with pytest.raises(InputError):
        read_wav(tmp_path / "none.wav")
