"""
Signal primitives: waveforms, STFT/ISTFT, convolution, noise and SNR mixing,
and mono WAV I/O.

Everything here is a pure function of its inputs. Waveform samples are stored
as read-only float64 arrays so values can be shared freely between threads.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import ConfigurationError, FormatError, InputError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    """A mono real-valued signal at a fixed sample rate."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if x.size == 0:
            raise InputError("waveform must be non-empty")
        if not np.all(np.isfinite(x)):
            raise InputError("waveform contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate_hz}")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))

    def power(self) -> float:
        return self.energy() / self.samples.size

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate_hz)


def as_array(x) -> np.ndarray:
    """Return the sample array of a Waveform, or `x` itself as float64."""
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def _check_rates(*waves: Waveform) -> int:
    rates = {w.sample_rate_hz for w in waves}
    if len(rates) != 1:
        raise InputError(f"sample-rate mismatch: {sorted(rates)}")
    return rates.pop()


# --------------------------------------------------------------------------
# random streams

def _stream_id(stream) -> int:
    if isinstance(stream, str):
        digest = hashlib.blake2b(stream.encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(stream) & 0xFFFFFFFFFFFFFFFF


def make_rng(seed: int, stream=0) -> np.random.Generator:
    """Counter-based generator keyed by a 64-bit seed and a stream id.

    Two calls with the same ``(seed, stream)`` produce identical draws; any
    other stream id gives an independent sequence. String stream ids are
    hashed, so ``make_rng(seed, "noise/band3")`` is valid.
    """
    key = (_stream_id(stream) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, purpose: str) -> int:
    """Expand one user seed into a per-purpose 64-bit sub-seed."""
    return int(make_rng(seed, purpose).integers(0, 2**63))


def generate_noise(kind: str, length: int, seed: int, stream=0,
                   sample_rate_hz: int = SAMPLE_RATE) -> Waveform:
    """White or pink Gaussian noise with unit variance.

    Pink noise is white noise shaped by ``1/sqrt(f)`` in the frequency
    domain (PSD slope of -3.01 dB per octave), then rescaled to unit sample
    variance.
    """
    length = int(length)
    if length <= 0:
        raise InputError("noise length must be positive")
    white = make_rng(seed, stream).standard_normal(length)
    if kind == "white":
        return Waveform(white, sample_rate_hz)
    if kind != "pink":
        raise InputError(f"unknown noise kind {kind!r}")
    spec = np.fft.rfft(white)
    f = np.arange(spec.size, dtype=np.float64)
    shape = np.zeros_like(f)
    shape[1:] = 1.0 / np.sqrt(f[1:])
    pink = np.fft.irfft(spec * shape, n=length)
    pink -= pink.mean()
    pink /= pink.std()
    return Waveform(pink, sample_rate_hz)


def mix_at_snr(signal: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Return ``signal + g * noise`` with ``g`` set so the SNR is exactly `snr_db`.

    ``snr_db = inf`` returns the signal unchanged.
    """
    _check_rates(signal, noise)
    if len(signal) != len(noise):
        raise InputError(f"length mismatch: {len(signal)} vs {len(noise)}")
    ps, pn = signal.power(), noise.power()
    if ps <= 0.0 or pn <= 0.0:
        raise InputError("signal and noise must both have nonzero power")
    if math.isinf(snr_db) and snr_db > 0:
        return signal
    gain = math.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))
    return signal.with_samples(signal.samples + gain * noise.samples)


# --------------------------------------------------------------------------
# convolution

def convolve(x: Waveform, h: Waveform) -> Waveform:
    """Full linear convolution, length ``len(x) + len(h) - 1``, via FFT."""
    rate = _check_rates(x, h)
    return Waveform(sps.fftconvolve(x.samples, h.samples, mode="full"), rate)


# --------------------------------------------------------------------------
# STFT

@dataclass(frozen=True)
class StftConfig:
    """Frame layout of the STFT.

    The analysis window has `window_len` samples and is zero-padded to
    `fft_len`. Frames advance by `hop_len`. Any scipy window name is accepted
    as `window_kind`; the periodic (DFT-even) variant is used.
    """

    window_len: int = 512
    hop_len: int = 128
    fft_len: int = 512
    window_kind: str = "hann"

    def __post_init__(self):
        w, h, n = int(self.window_len), int(self.hop_len), int(self.fft_len)
        if not (0 < h <= w <= n):
            raise ConfigurationError(
                f"need 0 < hop_len <= window_len <= fft_len, got hop={h} win={w} fft={n}")
        try:
            win = sps.get_window(self.window_kind, w, fftbins=True)
        except ValueError as exc:
            raise ConfigurationError(f"unknown window {self.window_kind!r}") from exc
        if not sps.check_NOLA(win, w, w - h):
            raise ConfigurationError(
                f"{self.window_kind} window of {w} samples is not invertible at hop {h}")

    @cached_property
    def window(self) -> np.ndarray:
        win = sps.get_window(self.window_kind, self.window_len, fftbins=True)
        win.flags.writeable = False
        return win

    @property
    def pad(self) -> int:
        # Left/right zero padding so every source sample sees a full set of frames.
        return self.window_len - self.hop_len

    @property
    def num_bins(self) -> int:
        return self.fft_len // 2 + 1

    def num_frames(self, source_len: int) -> int:
        span = source_len + 2 * self.pad - self.window_len
        return 1 + max(0, -(-span // self.hop_len))

    def padded_len(self, source_len: int) -> int:
        return (self.num_frames(source_len) - 1) * self.hop_len + self.window_len


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT frames, shape ``(T, fft_len // 2 + 1)``."""

    frames: np.ndarray
    config: StftConfig
    source_len: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.ndim != 2 or frames.shape[1] != self.config.num_bins:
            raise InputError(
                f"frames must have shape (T, {self.config.num_bins}), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InputError("spectrogram contains non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


def stft_frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Array-level STFT used by the loss functions (no validation)."""
    n = x.shape[-1]
    padded = np.zeros(cfg.padded_len(n))
    padded[cfg.pad:cfg.pad + n] = x
    segs = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_len)[::cfg.hop_len]
    return np.fft.rfft(segs * cfg.window, n=cfg.fft_len, axis=-1)


def stft_adjoint(grad: np.ndarray, cfg: StftConfig, source_len: int) -> np.ndarray:
    """Backpropagate a gradient on the STFT frames to the time signal.

    `grad` holds ``dL/dRe(S) + 1j * dL/dIm(S)`` for every frame and bin of
    ``stft_frames(x, cfg)``; the return value is ``dL/dx`` for a real loss L.
    """
    z = grad.copy()
    nyq = cfg.fft_len % 2 == 0
    stop = -1 if nyq else None
    z[:, 1:stop] *= 0.5
    segs = np.fft.irfft(z, n=cfg.fft_len, axis=-1)[:, :cfg.window_len] * cfg.fft_len
    segs *= cfg.window
    out = _overlap_add(segs, cfg.hop_len, cfg.padded_len(source_len))
    return out[cfg.pad:cfg.pad + source_len]


def _overlap_add(segs: np.ndarray, hop: int, total: int) -> np.ndarray:
    out = np.zeros(total)
    win_len = segs.shape[1]
    # Grouping frames by (index mod k) keeps each group non-overlapping.
    k = -(-win_len // hop)
    for r in range(k):
        block = segs[r::k]
        if block.size == 0:
            continue
        start = r * hop
        stride = k * hop
        flat = np.zeros(block.shape[0] * stride)
        flat.reshape(block.shape[0], stride)[:, :win_len] = block
        end = min(total, start + flat.size)
        out[start:end] += flat[:end - start]
    return out


def stft(x: Waveform, cfg: StftConfig) -> Spectrogram:
    """Short-time Fourier transform.

    The signal is zero-padded by ``window_len - hop_len`` on the left and at
    least as much on the right, so each source sample is covered by the same
    number of frames. This keeps `istft` exact and makes window-compensated
    Parseval hold for windows whose square overlap-adds to a constant.
    """
    return Spectrogram(stft_frames(x.samples, cfg), cfg, len(x))


def istft(spec: Spectrogram, sample_rate_hz: int = SAMPLE_RATE) -> Waveform:
    """Weighted overlap-add inverse of `stft`, normalized by the summed squared window."""
    cfg = spec.config
    frames = spec.frames
    segs = np.fft.irfft(frames, n=cfg.fft_len, axis=-1)[:, :cfg.window_len] * cfg.window
    total = max((frames.shape[0] - 1) * cfg.hop_len + cfg.window_len,
                cfg.pad + spec.source_len)
    y = _overlap_add(segs, cfg.hop_len, total)
    wsum = _overlap_add(np.broadcast_to(cfg.window ** 2, segs.shape), cfg.hop_len, total)
    nz = wsum > 1e-12 * wsum.max()
    y[nz] /= wsum[nz]
    y[~nz] = 0.0
    return Waveform(y[cfg.pad:cfg.pad + spec.source_len], sample_rate_hz)


# --------------------------------------------------------------------------
# WAV I/O

def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM or 32-bit float WAV file."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    try:
        with warnings.catch_warnings():
            warnings.filterwarnings("error", message=".*EOF.*")
            warnings.filterwarnings("error", message=".*[Tt]runcat.*")
            rate, data = wavfile.read(path)
    except Exception as exc:  # scipy raises ValueError/EOFError/struct.error
        raise FormatError(f"{path}: malformed WAV ({exc})") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    if samples.size == 0:
        raise FormatError(f"{path}: no audio samples")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, encoding: str = "float") -> None:
    """Write `w` as mono WAV; `encoding` is ``"float"`` (32-bit) or ``"pcm16"``."""
    if encoding == "float":
        data = w.samples.astype(np.float32)
    elif encoding == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise InputError(f"unsupported WAV encoding {encoding!r}")
    wavfile.write(Path(path), w.sample_rate_hz, data)
