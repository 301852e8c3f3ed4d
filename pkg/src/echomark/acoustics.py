"""
Room-acoustic analysis of impulse responses.

Energy decay curves use Schroeder backward integration. T60 is a least
squares line fit to the decay curve between -5 and -25 dB, extrapolated to
-60 dB. DRR compares the energy in a short window around the strongest tap
with everything after it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .dsp import SAMPLE_RATE, Waveform, as_array
from .errors import InputError, InsufficientDecayError

DRR_CLAMP_DB = 60.0


class DrrClampedWarning(UserWarning):
    """The reverberant (or direct) window held no energy; DRR was clamped."""


@dataclass(frozen=True)
class EnergyDecayCurve:
    """Normalized backward-integrated energy, ``values[0] == 1``."""

    values: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise InputError("decay curve must be non-empty and finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def db(self, floor: float = 1e-30) -> np.ndarray:
        return 10.0 * np.log10(np.maximum(self.values, floor))

    @property
    def times_s(self) -> np.ndarray:
        return np.arange(self.values.size) / self.sample_rate_hz


@dataclass(frozen=True)
class AcousticReport:
    t60_s: float
    drr_db: float
    edc: EnergyDecayCurve
    drr_clamped: bool = False

    def to_dict(self) -> dict:
        return {"t60_s": self.t60_s, "drr_db": self.drr_db, "drr_clamped": self.drr_clamped}


@dataclass(frozen=True)
class ComparisonStats:
    bias: float
    rmse: float
    pearson_rho: float  # NaN when the truths are constant
    count: int

    def to_dict(self) -> dict:
        rho = None if math.isnan(self.pearson_rho) else self.pearson_rho
        return {"bias": self.bias, "rmse": self.rmse, "pearson_rho": rho, "count": self.count}


def edc_array(h: np.ndarray) -> np.ndarray:
    energy = np.cumsum(np.square(h)[::-1])[::-1]
    total = energy[0]
    if not total > 0.0:
        raise InputError("impulse response has zero energy")
    return energy / total


def edc(h: Waveform) -> EnergyDecayCurve:
    """Schroeder energy decay curve ``sum_{n>=t} h^2(n) / sum_n h^2(n)``."""
    return EnergyDecayCurve(edc_array(h.samples), h.sample_rate_hz)


def t60(curve: EnergyDecayCurve, fit_db=(-5.0, -25.0)) -> float:
    """Reverberation time from a decay curve.

    Fits a line to ``10*log10(EDC)`` over the span from the first sample at
    or below ``fit_db[0]`` to the first sample at or below ``fit_db[1]`` and
    returns the time where that line reaches -60 dB.

    Raises
    ------
    InsufficientDecayError
        If the curve never decays through the fit span.
    """
    hi, lo = fit_db
    level = curve.db()
    below_hi = np.flatnonzero(level <= hi)
    if below_hi.size == 0:
        raise InsufficientDecayError(f"decay curve never reaches {hi} dB")
    start = below_hi[0]
    below_lo = np.flatnonzero(level[start:] <= lo)
    if below_lo.size == 0:
        raise InsufficientDecayError(f"decay curve never reaches {lo} dB")
    stop = start + below_lo[0] + 1
    if stop - start < 2:
        raise InsufficientDecayError("decay span too short for a line fit")
    t = np.arange(start, stop) / curve.sample_rate_hz
    slope, intercept = np.polyfit(t, level[start:stop], 1)
    if not slope < 0.0:
        raise InsufficientDecayError("decay curve is not decreasing over the fit span")
    return float((-60.0 - intercept) / slope)


def _drr(h: np.ndarray, sample_rate_hz: int, direct_half_window_ms: float):
    if not np.any(h):
        raise InputError("impulse response has zero energy")
    peak = int(np.argmax(np.abs(h)))
    half = int(round(direct_half_window_ms * 1e-3 * sample_rate_hz))
    lo, hi = max(0, peak - half), min(h.size, peak + half + 1)
    direct = float(np.sum(np.square(h[lo:hi])))
    reverb = float(np.sum(np.square(h[hi:])))
    if reverb <= 0.0:
        return DRR_CLAMP_DB, True
    value = 10.0 * math.log10(direct / reverb)
    if abs(value) > DRR_CLAMP_DB:
        return math.copysign(DRR_CLAMP_DB, value), True
    return value, False


def drr(h: Waveform, direct_half_window_ms: float = 2.5) -> float:
    """Direct-to-reverberant ratio in dB.

    The direct window spans ``argmax|h| +/- direct_half_window_ms``; the
    reverberant region is everything after it. Results are clamped to
    +/-60 dB, with a `DrrClampedWarning` when that happens.
    """
    value, clamped = _drr(h.samples, h.sample_rate_hz, direct_half_window_ms)
    if clamped:
        warnings.warn(f"DRR clamped to {value:+.0f} dB", DrrClampedWarning, stacklevel=2)
    return value


def analyze(h, sample_rate_hz: int = SAMPLE_RATE,
            direct_half_window_ms: float = 2.5) -> AcousticReport:
    """T60, DRR and EDC of one impulse response.

    T60 is NaN if the response does not decay far enough to be fitted.
    """
    if isinstance(h, Waveform):
        sample_rate_hz = h.sample_rate_hz
    x = as_array(h)
    curve = EnergyDecayCurve(edc_array(x), sample_rate_hz)
    try:
        rt = t60(curve)
    except InsufficientDecayError:
        rt = math.nan
    value, clamped = _drr(x, sample_rate_hz, direct_half_window_ms)
    return AcousticReport(rt, value, curve, clamped)


def compare(estimates, truths) -> ComparisonStats:
    """Bias, RMSE and Pearson correlation of estimates against ground truth."""
    est = np.asarray(estimates, dtype=np.float64).reshape(-1)
    ref = np.asarray(truths, dtype=np.float64).reshape(-1)
    if est.size == 0 or est.size != ref.size:
        raise InputError("estimates and truths must be equal-length and non-empty")
    err = est - ref
    bias = float(np.mean(err))
    rmse = float(math.sqrt(np.mean(np.square(err))))
    de, dr = est - est.mean(), ref - ref.mean()
    denom = math.sqrt(float(np.dot(de, de)) * float(np.dot(dr, dr)))
    rho = float(np.clip(np.dot(de, dr) / denom, -1.0, 1.0)) if denom > 0.0 else math.nan
    return ComparisonStats(bias, rmse, rho, int(est.size))
