"""
Parametric room impulse responses.

An RIR is a free 50 ms vector of early taps followed by a late field built
from octave-band noise carriers under exponential envelopes::

    late(t) = sum_{m,n} A[m, n] * exp(-rate[n] * t) * w_m(t)

Decay rates are not stored directly. Each decay n has an unconstrained
logit, and its reverberation time is ``tau_s * sigmoid(logit)``, which
keeps every T60 inside ``(0, tau_s)``. The late-field time axis starts at
zero at the 50 ms boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .dsp import SAMPLE_RATE, Waveform, derive_seed, make_rng
from .errors import FormatError, InputError

EARLY_MS = 50.0
EARLY_LEN = int(EARLY_MS * SAMPLE_RATE / 1000)  # 800 taps
OCTAVE_CENTERS_HZ = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0)
LN1000 = 3.0 * math.log(10.0)

FORMAT_NAME = "echomark/parametric-rir"
FORMAT_VERSION = 1


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def octave_edges(center_hz: float, sample_rate_hz: int = SAMPLE_RATE):
    lo = center_hz / math.sqrt(2.0)
    hi = min(center_hz * math.sqrt(2.0), sample_rate_hz / 2.0)
    return lo, hi


def band_mask(center_hz: float, length: int, sample_rate_hz: int = SAMPLE_RATE) -> np.ndarray:
    """Boolean rfft-bin mask of one octave band for a signal of `length` samples."""
    lo, hi = octave_edges(center_hz, sample_rate_hz)
    f = np.fft.rfftfreq(length, 1.0 / sample_rate_hz)
    return (f >= lo) & (f < hi)


@lru_cache(maxsize=32)
def _subband_noise(seed: int, band: int, length: int, sample_rate_hz: int,
                   center_hz: float) -> np.ndarray:
    white = make_rng(seed, f"subband/{band}").standard_normal(length)
    spec = np.fft.rfft(white)
    spec[~band_mask(center_hz, length, sample_rate_hz)] = 0.0
    out = np.fft.irfft(spec, n=length)
    out /= out.std()
    out.flags.writeable = False
    return out


def subband_noise(band: int, length: int, seed: int, sample_rate_hz: int = SAMPLE_RATE,
                  centers_hz=OCTAVE_CENTERS_HZ) -> Waveform:
    """Unit-variance noise restricted to octave band `band`.

    White noise drawn from stream ``(seed, band)`` is filtered by the band's
    zero-phase octave filter (a brick-wall response applied over the full
    signal length, i.e. a circular FIR with the signal's length). Distinct
    bands occupy disjoint frequency bins, so their carriers are orthogonal.
    """
    if not 0 <= band < len(centers_hz):
        raise InputError(f"band index {band} outside 0..{len(centers_hz) - 1}")
    return Waveform(_subband_noise(int(seed), int(band), int(length), int(sample_rate_hz),
                                   float(centers_hz[band])), sample_rate_hz)


def noise_matrix(p: "LateParams") -> np.ndarray:
    """Stack of the late-field carriers, shape ``(num_bands, num_samples)``."""
    n = p.num_samples
    return np.stack([_subband_noise(int(p.noise_seed), m, n, p.sample_rate_hz,
                                    float(p.band_centers_hz[m]))
                     for m in range(p.num_bands)])


@dataclass(frozen=True)
class EarlyRir:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64).reshape(-1)
        if taps.size != EARLY_LEN:
            raise InputError(f"early RIR must have {EARLY_LEN} taps, got {taps.size}")
        if not np.all(np.isfinite(taps)):
            raise InputError("early taps must be finite")
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)

    @classmethod
    def impulse(cls) -> "EarlyRir":
        taps = np.zeros(EARLY_LEN)
        taps[0] = 1.0
        return cls(taps)


@dataclass(frozen=True)
class LateParams:
    """Subband decay model of the late field.

    ``amplitudes[m, n]`` scales band m under decay n. ``decay_logits[n]``
    maps to ``T60_n = tau_s * sigmoid(logit)``.
    """

    amplitudes: np.ndarray
    decay_logits: np.ndarray
    tau_s: float = 3.0
    noise_seed: int = 0
    length_s: float = 2.0
    band_centers_hz: tuple = OCTAVE_CENTERS_HZ
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=np.float64)
        logits = np.array(self.decay_logits, dtype=np.float64).reshape(-1)
        if amps.ndim != 2 or amps.shape != (len(self.band_centers_hz), logits.size):
            raise InputError(
                f"amplitudes must have shape ({len(self.band_centers_hz)}, {logits.size}),"
                f" got {amps.shape}")
        if not (np.all(np.isfinite(amps)) and np.all(np.isfinite(logits))):
            raise InputError("late parameters must be finite")
        if np.any(amps < 0.0):
            raise InputError("amplitudes must be non-negative")
        if not self.tau_s > 0.0:
            raise InputError("tau_s must be positive")
        if not self.length_s > 0.0:
            raise InputError("length_s must be positive")
        amps.flags.writeable = False
        logits.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "decay_logits", logits)
        object.__setattr__(self, "band_centers_hz", tuple(float(c) for c in self.band_centers_hz))
        object.__setattr__(self, "noise_seed", int(self.noise_seed) & 0xFFFFFFFFFFFFFFFF)

    @property
    def num_bands(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def num_decays(self) -> int:
        return self.decay_logits.size

    @property
    def num_samples(self) -> int:
        return int(round(self.length_s * self.sample_rate_hz))

    @property
    def t60s(self) -> np.ndarray:
        return self.tau_s * sigmoid(self.decay_logits)

    @property
    def decay_rates(self) -> np.ndarray:
        return LN1000 / self.t60s

    def envelopes(self) -> np.ndarray:
        """Per-band amplitude envelopes, shape ``(num_bands, num_samples)``."""
        t = np.arange(self.num_samples) / self.sample_rate_hz
        return self.amplitudes @ np.exp(-np.outer(self.decay_rates, t))

    def rms_envelope(self) -> np.ndarray:
        """Expected per-sample RMS of the late field (carriers have unit variance)."""
        return np.sqrt(np.sum(np.square(self.envelopes()), axis=0))


@dataclass(frozen=True)
class ParametricRir:
    early: EarlyRir
    late: LateParams
    payload: Optional[object] = None  # watermark.WatermarkMessage once embedded
    payload_gain_db: float = -20.0

    @property
    def sample_rate_hz(self) -> int:
        return self.late.sample_rate_hz

    @property
    def num_samples(self) -> int:
        return EARLY_LEN + self.late.num_samples

    def with_late(self, **changes) -> "ParametricRir":
        return replace(self, late=replace(self.late, **changes))

    def to_dict(self) -> dict:
        late = self.late
        out = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "sample_rate_hz": late.sample_rate_hz,
            "early": {"taps": self.early.taps.tolist()},
            "late": {
                "band_centers_hz": list(late.band_centers_hz),
                "amplitudes": late.amplitudes.tolist(),
                "decay_logits": late.decay_logits.tolist(),
                "t60s": late.t60s.tolist(),
                "tau_s": late.tau_s,
                "noise_seed": f"{late.noise_seed:016x}",
                "length_s": late.length_s,
            },
            "payload": None,
        }
        if self.payload is not None:
            out["payload"] = {**self.payload.to_dict(), "gain_db": self.payload_gain_db}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ParametricRir":
        from .watermark import WatermarkMessage

        try:
            if doc.get("format") != FORMAT_NAME:
                raise FormatError(f"not a parametric RIR document: {doc.get('format')!r}")
            if int(doc.get("version", 0)) > FORMAT_VERSION:
                raise FormatError(f"unsupported version {doc['version']}")
            late = doc["late"]
            params = LateParams(
                amplitudes=np.asarray(late["amplitudes"], dtype=np.float64),
                decay_logits=np.asarray(late["decay_logits"], dtype=np.float64),
                tau_s=float(late["tau_s"]),
                noise_seed=int(late["noise_seed"], 16),
                length_s=float(late["length_s"]),
                band_centers_hz=tuple(late["band_centers_hz"]),
                sample_rate_hz=int(doc["sample_rate_hz"]),
            )
            early = EarlyRir(np.asarray(doc["early"]["taps"], dtype=np.float64))
            payload, gain = None, -20.0
            if doc.get("payload"):
                payload = WatermarkMessage.from_dict(doc["payload"])
                gain = float(doc["payload"].get("gain_db", -20.0))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InputError):
                raise FormatError(str(exc)) from exc
            raise FormatError(f"malformed parametric RIR document: {exc}") from exc
        return cls(early, params, payload, gain)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ParametricRir":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)


def synth_late_array(p: LateParams) -> np.ndarray:
    return np.sum(p.envelopes() * noise_matrix(p), axis=0)


def synth_late(p: LateParams) -> Waveform:
    """Render the late field alone, starting at its own t = 0."""
    return Waveform(synth_late_array(p), p.sample_rate_hz)


def render_array(r: ParametricRir) -> np.ndarray:
    out = np.zeros(r.num_samples)
    out[:EARLY_LEN] = r.early.taps
    late = synth_late_array(r.late)
    if r.payload is not None:
        from .watermark import watermark_component

        late = late + watermark_component(r.late, r.payload, r.payload_gain_db)
    out[EARLY_LEN:] = late
    return out


def render(r: ParametricRir) -> Waveform:
    """Full RIR: early taps on [0, 50 ms), late field from 50 ms on."""
    return Waveform(render_array(r), r.sample_rate_hz)


def init_params(seed: int, tau_s: float = 3.0, num_bands: int = 6,
                num_decays: Optional[int] = None, length_s: float = 2.0,
                noise_seed: Optional[int] = None) -> ParametricRir:
    """Starting point for a fit.

    Decay logits are standard normal draws from `seed`; amplitudes are 0.01
    on the band/decay diagonal and 0.001 elsewhere; early taps are a unit
    impulse at tap 0.
    """
    if not tau_s > 0.0:
        raise InputError("tau_s must be positive")
    if not 1 <= num_bands <= len(OCTAVE_CENTERS_HZ):
        raise InputError(f"num_bands must be in 1..{len(OCTAVE_CENTERS_HZ)}")
    num_decays = num_bands if num_decays is None else int(num_decays)
    logits = make_rng(seed, "init/decay-logits").standard_normal(num_decays)
    amps = np.full((num_bands, num_decays), 0.001)
    k = min(num_bands, num_decays)
    amps[np.arange(k), np.arange(k)] = 0.01
    if noise_seed is None:
        noise_seed = derive_seed(seed, "late-noise")
    late = LateParams(amps, logits, tau_s=tau_s, noise_seed=noise_seed, length_s=length_s,
                      band_centers_hz=OCTAVE_CENTERS_HZ[:num_bands])
    return ParametricRir(EarlyRir.impulse(), late)


def from_t60s(t60s, amplitudes, tau_s: float = 3.0, **kwargs) -> LateParams:
    """LateParams with per-decay T60 values given directly (diagonal helper for fixtures)."""
    t60s = np.asarray(t60s, dtype=np.float64)
    if np.any(t60s <= 0.0) or np.any(t60s >= tau_s):
        raise InputError("every T60 must lie in (0, tau_s)")
    amps = np.asarray(amplitudes, dtype=np.float64)
    if amps.ndim == 1:
        amps = np.diag(amps)
    return LateParams(amps, logit(t60s / tau_s), tau_s=tau_s, **kwargs)
