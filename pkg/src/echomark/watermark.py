"""
Keyed spread-spectrum watermarks in the late field of a parametric RIR.

A message of M <= 5 bits is carried by M + 1 binary codes over the late-field
support. Code 0 marks presence; code i carries bit i with sign +1 for a set
bit and -1 otherwise. The codes are one keyed +/-1 scramble sequence
multiplied by distinct rows of an 8x8 Hadamard matrix, so any two codes are
exactly orthogonal over a multiple of 8 samples.

The watermark is added under the late field's expected RMS envelope, which
keeps it a fixed number of dB below the reverberation at every lag. Every
message on the same base RIR therefore shares its decay and DRR.

Decoding divides the tail by a local RMS envelope, weights it by the local
signal fraction, whitens it spectrally, and least-squares fits the code
amplitudes. A score of 1 means a code is present at the nominal gain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.fft as sfft
import scipy.linalg as slin
from scipy.ndimage import uniform_filter1d

from .dsp import Waveform, as_array, convolve, make_rng
from .errors import AlreadyWatermarkedError, EmbedError, InputError
from .rir import EARLY_LEN, LateParams, ParametricRir, render_array

MAX_BITS = 5
DEFAULT_GAIN_DB = -20.0
DEFAULT_THRESHOLD = 0.5
ENVELOPE_MS = 20.0
# bins of spectral smoothing for the whitening filter
WHITEN_BINS = 65
KEY_MASK = 0xFFFFFFFFFFFFFFFF


def parse_key(text) -> int:
    """Key from an int or a string of at most 16 hex digits."""
    if isinstance(text, (int, np.integer)):
        return int(text) & KEY_MASK
    s = str(text).strip().lower()
    if s.startswith("0x"):
        s = s[2:]
    if not 0 < len(s) <= 16:
        raise InputError(f"key must be 1-16 hex digits, got {text!r}")
    try:
        return int(s, 16)
    except ValueError:
        raise InputError(f"key must be hexadecimal, got {text!r}") from None


def parse_bits(text: str) -> tuple:
    """Bits from a string such as ``"10110"``."""
    s = str(text).strip()
    if not s or any(c not in "01" for c in s):
        raise InputError(f"bit string must be non-empty and contain only 0/1, got {text!r}")
    return tuple(c == "1" for c in s)


def format_bits(bits) -> str:
    return "".join("1" if b else "0" for b in bits)


@dataclass(frozen=True)
class WatermarkMessage:
    """An M-bit payload and the 64-bit key that spreads it."""

    bits: tuple
    key: int = 0

    def __post_init__(self):
        bits = parse_bits(self.bits) if isinstance(self.bits, str) else tuple(bool(b) for b in self.bits)
        if not 1 <= len(bits) <= MAX_BITS:
            raise InputError(f"message must have 1..{MAX_BITS} bits, got {len(bits)}")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "key", parse_key(self.key))

    @property
    def num_bits(self) -> int:
        return len(self.bits)

    def signs(self) -> np.ndarray:
        return np.where(np.asarray(self.bits), 1.0, -1.0)

    def to_dict(self) -> dict:
        return {"bits": format_bits(self.bits), "key": f"{self.key:016x}"}

    @classmethod
    def from_dict(cls, doc: dict) -> "WatermarkMessage":
        return cls(parse_bits(doc["bits"]), parse_key(doc["key"]))

    @classmethod
    def random(cls, rng: np.random.Generator, key: int, num_bits: int = MAX_BITS):
        return cls(tuple(bool(b) for b in rng.integers(0, 2, num_bits)), key)


@dataclass(frozen=True)
class PnCodebook:
    """Codes ``p_0 .. p_M``, one row each; row 0 marks presence."""

    codes: np.ndarray
    key: int

    @property
    def num_bits(self) -> int:
        return self.codes.shape[0] - 1

    @property
    def length(self) -> int:
        return self.codes.shape[1]


@lru_cache(maxsize=32)
def _codebook(key: int, num_bits: int, length: int) -> PnCodebook:
    rng = make_rng(key, "watermark/codes")
    scramble = np.where(rng.integers(0, 2, length) == 1, 1.0, -1.0)
    rows = rng.permutation(8)[:num_bits + 1]
    walsh = slin.hadamard(8).astype(np.float64)[rows]
    codes = scramble * walsh[:, np.arange(length) % 8]
    codes.flags.writeable = False
    return PnCodebook(codes, key)


def derive_codebook(key, num_bits: int, length: int) -> PnCodebook:
    """Deterministic codebook for `key`; cached, so treat the codes as read-only."""
    if not 1 <= num_bits <= MAX_BITS:
        raise InputError(f"num_bits must be in 1..{MAX_BITS}")
    if length < 8:
        raise InputError("codes need at least 8 samples")
    return _codebook(parse_key(key), int(num_bits), int(length))


@dataclass(frozen=True)
class EmbedOptions:
    """Watermark level and presence threshold.

    `gain_db` is the level of the whole watermark (all M + 1 codes together)
    relative to the late field's RMS envelope. `threshold` applies to the
    presence score, whose nominal value for a watermarked RIR is 1.
    """

    gain_db: float = DEFAULT_GAIN_DB
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not self.gain_db < 0.0:
            raise InputError("gain_db must be negative")
        if not math.isfinite(self.threshold):
            raise InputError("threshold must be finite")


@dataclass(frozen=True)
class DetectionResult:
    """Presence decision, raw scores and the decoded bits.

    `message` is meaningful only when `present` is true.
    """

    present: bool
    presence_score: float
    bit_scores: tuple
    message: tuple
    threshold: float = DEFAULT_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "present": self.present,
            "presence_score": self.presence_score,
            "bit_scores": list(self.bit_scores),
            "message": format_bits(self.message) if self.present else None,
            "raw_message": format_bits(self.message),
            "threshold": self.threshold,
        }


def code_gain(gain_db: float, num_bits: int) -> float:
    """Amplitude of each code relative to the envelope."""
    return 10.0 ** (gain_db / 20.0) / math.sqrt(num_bits + 1)


def watermark_component(late: LateParams, msg: WatermarkMessage,
                        gain_db: float = DEFAULT_GAIN_DB) -> np.ndarray:
    """Watermark samples added to the late field (same time axis)."""
    book = derive_codebook(msg.key, msg.num_bits, late.num_samples)
    mix = book.codes[0] + msg.signs() @ book.codes[1:]
    return code_gain(gain_db, msg.num_bits) * late.rms_envelope() * mix


def embed(r: ParametricRir, msg: WatermarkMessage, opts: EmbedOptions = EmbedOptions()) -> ParametricRir:
    """Attach `msg` to the late field of `r`; rendering adds the watermark.

    Raises
    ------
    AlreadyWatermarkedError
        If `r` already carries a payload.
    EmbedError
        If the late field is silent.
    """
    if r.payload is not None:
        raise AlreadyWatermarkedError("RIR is already watermarked")
    if not np.any(r.late.amplitudes > 0.0):
        raise EmbedError("late field has zero energy; nothing to hide the watermark in")
    return replace(r, payload=msg, payload_gain_db=float(opts.gain_db))


def strip(r: ParametricRir) -> ParametricRir:
    return replace(r, payload=None)


# --------------------------------------------------------------------------
# decoding


@dataclass
class _Tail:
    """Late-field segment of an RIR estimate prepared for correlation."""

    samples: np.ndarray
    envelope: np.ndarray
    signal_env: np.ndarray
    fs: int
    filt: Optional[np.ndarray] = None  # effective deconvolution response, rfft domain
    nfft: int = 0
    extras: dict = field(default_factory=dict)


def _local_envelope(seg: np.ndarray, fs: int) -> np.ndarray:
    size = max(3, int(ENVELOPE_MS * 1e-3 * fs) | 1)
    power = uniform_filter1d(np.square(seg), size, mode="nearest")
    floor = 1e-30 * max(float(power.max()), 1e-300)
    return np.sqrt(np.maximum(power, floor))


def _prepare(h: np.ndarray, fs: int, length: int, noise: Optional[np.ndarray] = None,
             filt: Optional[np.ndarray] = None, nfft: int = 0) -> _Tail:
    stop = EARLY_LEN + length
    if h.size < stop:
        raise InputError(f"tail too short for the codes: need {stop} samples, got {h.size}")
    seg = h[EARLY_LEN:stop]
    env = _local_envelope(seg, fs)
    if noise is None:
        signal_env = env
    else:
        local_noise = uniform_filter1d(noise[EARLY_LEN:stop], max(3, int(ENVELOPE_MS * 1e-3 * fs) | 1),
                                       mode="nearest")
        signal_env = np.sqrt(np.maximum(env * env - local_noise, 0.0))
    return _Tail(seg, env, signal_env, fs, filt, nfft)


def _whitener(x: np.ndarray) -> np.ndarray:
    psd = uniform_filter1d(np.abs(sfft.rfft(x)) ** 2, WHITEN_BINS, mode="nearest")
    psd = np.maximum(psd, 1e-9 * max(float(psd.max()), 1e-300))
    return 1.0 / np.sqrt(psd)


def _scores(tail: _Tail, book: PnCodebook, gain_db: float) -> np.ndarray:
    """Least-squares code amplitudes in units of the nominal per-code gain."""
    n = book.length
    alpha = tail.signal_env / tail.envelope
    x = alpha * tail.samples / tail.envelope
    if not np.any(x):
        return np.zeros(book.codes.shape[0])
    regs = book.codes * tail.signal_env
    if tail.filt is not None:
        # the codes as they appear after the deconvolution filter
        spec = sfft.rfft(regs, tail.nfft, axis=1) * tail.filt
        regs = sfft.irfft(spec, tail.nfft, axis=1)[:, :n]
    regs = regs * (alpha / tail.envelope)
    w = _whitener(x)
    xw = sfft.irfft(sfft.rfft(x) * w, n)
    qw = sfft.irfft(sfft.rfft(regs, axis=1) * w, n, axis=1)
    gram = qw @ qw.T
    gram += 1e-12 * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0])
    amps = np.linalg.solve(gram, qw @ xw)
    return amps / code_gain(gain_db, book.num_bits)


def _result(scores: np.ndarray, opts: EmbedOptions) -> DetectionResult:
    presence = float(scores[0])
    bits = tuple(bool(s > 0.0) for s in scores[1:])
    return DetectionResult(presence >= opts.threshold, presence,
                           tuple(float(s) for s in scores[1:]), bits, opts.threshold)


def _detect(tail: _Tail, key, num_bits: int, opts: EmbedOptions) -> DetectionResult:
    book = derive_codebook(key, num_bits, tail.samples.size)
    return _result(_scores(tail, book, opts.gain_db), opts)


def decode_from_rir(h, key, num_bits: int = MAX_BITS, opts: EmbedOptions = EmbedOptions(),
                    length: Optional[int] = None, sample_rate_hz: Optional[int] = None) -> DetectionResult:
    """Detect and decode a watermark in an impulse response.

    `length` is the late-field length in samples (default: everything
    after the early part of `h`).

    Raises
    ------
    InputError
        If `h` is shorter than the early part plus the code length.
    """
    fs = h.sample_rate_hz if isinstance(h, Waveform) else (sample_rate_hz or 16000)
    arr = as_array(h)
    if length is None:
        length = arr.size - EARLY_LEN
    if length < 8:
        raise InputError("impulse response has no late field to decode")
    return _detect(_prepare(arr, fs, int(length)), key, num_bits, opts)


def _audio_tail(y: np.ndarray, x: np.ndarray, fs: int, length: int, reg: float) -> _Tail:
    from .estimator import Deconvolver, outside_slice

    if not np.any(x):
        raise InputError("source signal has zero energy")
    deconv = Deconvolver(x, y.size, reg, local=True)
    h_full = deconv.estimate(y)
    profile = deconv.noise_profile()
    support = max(y.size - x.size + 1, EARLY_LEN + length)
    out = outside_slice(h_full.size, support, EARLY_LEN)
    var = float(np.mean(np.square(h_full[out]))) / max(float(np.mean(profile[out])), 1e-300)
    noise = var * profile
    if h_full.size < EARLY_LEN + length:
        h_full = np.pad(h_full, (0, EARLY_LEN + length - h_full.size))
    tail = _prepare(h_full, fs, length, noise, deconv.G, deconv.nfft)
    tail.extras["noise_var"] = var
    return tail


def decode_from_audio(y: Waveform, x: Waveform, key, num_bits: int = MAX_BITS,
                      opts: EmbedOptions = EmbedOptions(), length: Optional[int] = None,
                      reg: float = 1e-3) -> DetectionResult:
    """Informed detection: deconvolve y by the clean source x, then decode.

    The deconvolution uses a regularizer relative to the locally smoothed
    source spectrum, and the decoder accounts for its effective response
    and its noise level. `length` is the late-field length (default 2 s).
    """
    if y.sample_rate_hz != x.sample_rate_hz:
        raise InputError("sample-rate mismatch")
    if len(y) < len(x):
        raise InputError("recording is shorter than the source")
    fs = y.sample_rate_hz
    length = 2 * fs if length is None else int(length)
    return _detect(_audio_tail(y.samples, x.samples, fs, length, reg), key, num_bits, opts)


# --------------------------------------------------------------------------
# sequential mode


def _chunks(bits: Sequence[bool], num_bits: int) -> list:
    if len(bits) == 0:
        raise InputError("message is empty")
    if len(bits) % num_bits:
        raise InputError(f"message length {len(bits)} is not a multiple of {num_bits}")
    return [tuple(bits[i:i + num_bits]) for i in range(0, len(bits), num_bits)]


def sequential_embed(x: Waveform, base: ParametricRir, message, key, chunk_s: float = 2.0,
                     num_bits: int = MAX_BITS, opts: EmbedOptions = EmbedOptions()) -> Waveform:
    """Convolve successive chunks of x with differently watermarked versions of `base`.

    Chunk i carries bits ``[i*M, (i+1)*M)``. Convolution tails overlap-add
    into the following chunks. Samples of x after the last chunk are
    convolved with the unwatermarked base.
    """
    bits = parse_bits(message) if isinstance(message, str) else tuple(bool(b) for b in message)
    groups = _chunks(bits, num_bits)
    if x.sample_rate_hz != base.sample_rate_hz:
        raise InputError("sample-rate mismatch")
    step = int(round(chunk_s * x.sample_rate_hz))
    if step <= 0:
        raise InputError("chunk_s must be positive")
    if len(x) < step * len(groups):
        raise InputError(f"source covers {len(x) / x.sample_rate_hz:.2f} s, "
                         f"need {len(groups) * chunk_s:.2f} s for {len(groups)} chunks")
    clean = strip(base)
    out = np.zeros(len(x) + base.num_samples - 1)
    pieces = [(i * step, (i + 1) * step, embed(clean, WatermarkMessage(g, key), opts))
              for i, g in enumerate(groups)]
    if len(x) > step * len(groups):
        pieces.append((step * len(groups), len(x), clean))
    for lo, hi, rir in pieces:
        part = convolve(Waveform(x.samples[lo:hi], x.sample_rate_hz),
                        Waveform(render_array(rir), x.sample_rate_hz)).samples
        out[lo:lo + part.size] += part
    return Waveform(out, x.sample_rate_hz)


def sequential_decode(y: Waveform, x: Waveform, key, chunk_s: float = 2.0,
                      num_bits: int = MAX_BITS, opts: EmbedOptions = EmbedOptions(),
                      num_chunks: Optional[int] = None, offset: int = 0,
                      length: Optional[int] = None, reg: float = 1e-3, cancel: bool = True):
    """Decode each chunk independently, assuming perfect synchronization.

    Chunk i is decoded from the recording window that starts with the chunk
    and spans it plus one RIR length, deconvolved by chunk i of x. `offset`
    shifts every window (for studying misalignment).

    With `cancel`, the reverberant tails of the other chunks are predicted
    from an RIR estimated on the whole recording and subtracted from each
    window first. All chunks share the base RIR up to the watermark, so this
    removes most of the cross-chunk interference.

    Returns
    -------
    bits : tuple of bool
        Concatenated decoded bits.
    results : list of DetectionResult
        One per chunk.
    """
    if y.sample_rate_hz != x.sample_rate_hz:
        raise InputError("sample-rate mismatch")
    fs = x.sample_rate_hz
    step = int(round(chunk_s * fs))
    if step <= 0:
        raise InputError("chunk_s must be positive")
    length = 2 * fs if length is None else int(length)
    count = len(x) // step if num_chunks is None else int(num_chunks)
    if count <= 0:
        raise InputError("source is shorter than one chunk")
    nh = EARLY_LEN + length
    if cancel:
        from .estimator import Deconvolver

        used = x.samples[:min(len(x), len(y))]
        h_avg = Deconvolver(used, len(y), reg, local=True).estimate(y.samples)[:nh]
        predicted = sfft.irfft(sfft.rfft(x.samples, len(x) + nh - 1) * sfft.rfft(h_avg, len(x) + nh - 1),
                               len(x) + nh - 1)
    bits, results = [], []
    for i in range(count):
        lo = i * step + offset
        if lo < 0 or lo + step > len(y):
            raise InputError(f"chunk {i} window lies outside the recording")
        hi = min(len(y), lo + step + nh - 1)
        window = y.samples[lo:hi]
        src = x.samples[i * step:(i + 1) * step]
        if cancel:
            own = convolve(Waveform(src, fs), Waveform(h_avg, fs)).samples
            others = np.zeros(hi - lo)
            k = min(hi, predicted.size) - lo
            others[:max(k, 0)] = predicted[lo:lo + max(k, 0)]
            start = i * step - lo
            a, b = max(start, 0), min(start + own.size, hi - lo)
            if b > a:
                others[a:b] -= own[a - start:b - start]
            window = window - others
        res = _detect(_audio_tail(window, src, fs, length, reg), key, num_bits, opts)
        results.append(res)
        bits.extend(res.message)
    return tuple(bits), results
