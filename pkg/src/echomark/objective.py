"""
Loss functions for RIR matching and watermark decoding.

The spectral and decay losses come in two flavors: plain functions taking two
signals, and `RirLoss`, which caches the reference analysis and returns the
gradient with respect to the estimate alongside the value. The gradient is
derived by hand (chain rule through magnitudes, the rfft and the overlap-add
framing) and is what the estimator feeds to Adam.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .acoustics import edc_array
from .dsp import StftConfig, as_array, stft_adjoint, stft_frames
from .errors import InputError

DEFAULT_RESOLUTIONS = ((512, 240, 50), (1024, 600, 120), (2048, 1200, 240))
MAG_FLOOR = 1e-7
EDC_FLOOR = 1e-10
# squared median of a Rayleigh magnitude over its mean power; the log-ratio
# term is an L1 loss, so noise-only bins settle at the median
RAYLEIGH_MEDIAN_SQ = math.log(2.0)


@dataclass(frozen=True)
class ResolutionSet:
    """(fft_len, window_len, hop_len) triples of the multi-resolution STFT loss."""

    triples: tuple = DEFAULT_RESOLUTIONS

    def __post_init__(self):
        triples = tuple(tuple(int(v) for v in t) for t in self.triples)
        if not triples:
            raise InputError("at least one resolution is required")
        object.__setattr__(self, "triples", triples)
        # validates every triple
        object.__setattr__(self, "_configs",
                           tuple(StftConfig(w, h, n) for n, w, h in triples))

    @property
    def configs(self) -> tuple:
        return self._configs


@dataclass(frozen=True)
class LossReport:
    sc: float = 0.0
    sm: float = 0.0
    edc: float = 0.0
    wm: float = 0.0
    alpha: float = 1.0

    @property
    def stft_total(self) -> float:
        return self.sc + self.sm

    @property
    def rir(self) -> float:
        return self.stft_total + self.edc

    @property
    def total(self) -> float:
        return loss_total(self, self.alpha)

    def to_dict(self) -> dict:
        return {**asdict(self), "stft_total": self.stft_total, "rir": self.rir,
                "total": self.total}


def _pair(h_hat, h):
    a, b = as_array(h_hat), as_array(h)
    n = max(a.size, b.size)
    if a.size < n:
        a = np.pad(a, (0, n - a.size))
    if b.size < n:
        b = np.pad(b, (0, n - b.size))
    return a, b


def _mags(h_hat, h, cfg):
    a, b = _pair(h_hat, h)
    mag_ref = np.abs(stft_frames(b, cfg))
    norm = np.linalg.norm(mag_ref)
    if not norm > 0.0:
        raise InputError("reference has an all-zero spectrum")
    return np.abs(stft_frames(a, cfg)), mag_ref, norm


def loss_sc(h_hat, h, cfg: StftConfig) -> float:
    """Spectral convergence ``|| |S(h)| - |S(h_hat)| ||_F / ||S(h)||_F``."""
    mag, mag_ref, norm = _mags(h_hat, h, cfg)
    return float(np.linalg.norm(mag_ref - mag) / norm)


def loss_sm(h_hat, h, cfg: StftConfig) -> float:
    """Mean absolute log-magnitude ratio over the bins of one resolution."""
    mag, mag_ref, _ = _mags(h_hat, h, cfg)
    ratio = np.log(np.maximum(mag_ref, MAG_FLOOR)) - np.log(np.maximum(mag, MAG_FLOOR))
    return float(np.mean(np.abs(ratio)))


def loss_mrstft(h_hat, h, resolutions: ResolutionSet = ResolutionSet()) -> float:
    return float(sum(loss_sc(h_hat, h, c) + loss_sm(h_hat, h, c) for c in resolutions.configs))


def _log_edc(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(edc_array(x), EDC_FLOOR))


def loss_edc(h_hat, h) -> float:
    """Mean absolute difference of the natural-log decay curves."""
    a, b = _pair(h_hat, h)
    return float(np.mean(np.abs(_log_edc(b) - _log_edc(a))))


def loss_hinge(labels, scores) -> float:
    """Mean of ``max(0, 1 - y * score)`` over presence plus message entries."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.size != s.size or y.size == 0:
        raise InputError("labels and scores must be non-empty and equal length")
    if not np.all(np.abs(y) == 1.0):
        raise InputError("labels must be +1 or -1")
    return float(np.mean(np.maximum(0.0, 1.0 - y * s)))


def loss_total(parts: LossReport, alpha: float = 1.0) -> float:
    """RIR perceptual loss plus `alpha` times the watermark loss."""
    return parts.stft_total + parts.edc + alpha * parts.wm


class RirLoss:
    """Value and gradient of the RIR perceptual loss against a fixed reference.

    Parameters
    ----------
    target : array or Waveform
        Reference signal. Estimates passed to `__call__` must have the same
        length.
    resolutions : ResolutionSet
        STFT resolutions of the spectral term.
    edc_target : array or Waveform, optional
        Reference for the decay term when it differs from the spectral
        reference (informed estimation compares spectra of reverberant
        speech but decay curves of impulse responses). ``False`` disables
        the decay term.
    edc_weights : array, optional
        Per-sample weights of the decay term; the term stays a weighted mean.
    noise_power : float
        Variance of white noise known to be present in `target`. The
        estimate's STFT magnitudes become ``sqrt(|S|^2 + ln2 * noise_power *
        sum(window^2))``, roughly the median magnitude once that noise is
        added, so noise-dominated bins do not pull the estimate upward.
    edc_noise_power : float or array
        Noise variance per lag (scalar or one value per EDC sample) added to
        the estimate's backward integral before normalization, so an
        estimate can be compared with a noisy reference without the
        reference's noise floor biasing the decay.
    """

    def __init__(self, target, resolutions: ResolutionSet = ResolutionSet(),
                 edc_target=None, edc_weights=None, noise_power: float = 0.0,
                 edc_noise_power: float = 0.0):
        self.target = as_array(target)
        self.n = self.target.size
        self.resolutions = resolutions
        self._spec = []
        for cfg in resolutions.configs:
            mag = np.abs(stft_frames(self.target, cfg))
            norm = np.linalg.norm(mag)
            if not norm > 0.0:
                raise InputError("reference has an all-zero spectrum")
            self._spec.append((cfg, mag, np.log(np.maximum(mag, MAG_FLOOR)), norm))
        if edc_target is False:
            self._log_edc_ref = None
        else:
            ref = self.target if edc_target is None else as_array(edc_target)
            self._log_edc_ref = _log_edc(ref)
        if edc_weights is None:
            self._edc_w = None
        else:
            w = np.asarray(edc_weights, dtype=np.float64)
            self._edc_w = w / w.sum()
        edc_noise = np.asarray(edc_noise_power, dtype=np.float64)
        if noise_power < 0.0 or np.any(edc_noise < 0.0):
            raise InputError("noise powers must be non-negative")
        self.noise_power = float(noise_power)
        m = self.edc_len
        if not np.any(edc_noise):
            self._edc_noise = None
        else:
            per_lag = np.broadcast_to(edc_noise, (m,)) if edc_noise.ndim == 0 else edc_noise[:m]
            if per_lag.size != m:
                raise InputError("edc_noise_power must be a scalar or cover the EDC support")
            self._edc_noise = np.cumsum(per_lag[::-1])[::-1]

    @property
    def edc_len(self) -> int:
        return 0 if self._log_edc_ref is None else self._log_edc_ref.size

    def spectral(self, x: np.ndarray, grad: bool = True):
        """Summed SC and SM terms and their gradient with respect to `x`."""
        sc = sm = 0.0
        g = np.zeros(self.n) if grad else None
        for cfg, mag_ref, log_ref, norm_ref in self._spec:
            frames = stft_frames(x, cfg)
            mag = np.abs(frames)
            if self.noise_power > 0.0:
                floor = RAYLEIGH_MEDIAN_SQ * self.noise_power * float(np.sum(cfg.window ** 2))
                mag = np.sqrt(mag * mag + floor)
            diff = mag - mag_ref
            norm_diff = np.linalg.norm(diff)
            sc += norm_diff / norm_ref
            floored = np.maximum(mag, MAG_FLOOR)
            log_ratio = log_ref - np.log(floored)
            sm += np.mean(np.abs(log_ratio))
            if not grad:
                continue
            # dL/dm for m = |S| (or its noise-inflated version, whose
            # derivative S/m has the same form); the log term is flat below the floor
            g_mag = np.sign(log_ratio)
            g_mag *= mag > MAG_FLOOR
            g_mag /= -mag.size * floored
            if norm_diff > 0.0:
                diff *= 1.0 / (norm_diff * norm_ref)
                g_mag += diff
            g_mag /= np.maximum(mag, 1e-300)
            g += stft_adjoint(frames * g_mag, cfg, self.n)
        return float(sc), float(sm), g

    def decay(self, x: np.ndarray, grad: bool = True):
        """EDC term of `x` (first `edc_len` samples) and its gradient."""
        if self._log_edc_ref is None:
            return 0.0, (np.zeros(x.size) if grad else None)
        m = self.edc_len
        seg = x[:m] if x.size >= m else np.pad(x, (0, m - x.size))
        energy = np.cumsum(np.square(seg)[::-1])[::-1]
        if self._edc_noise is not None:
            energy += self._edc_noise
        total = energy[0]
        if not total > 0.0:
            raise InputError("estimate has zero energy")
        curve = energy / total
        kept = curve > EDC_FLOOR
        log_est = np.log(np.maximum(curve, EDC_FLOOR))
        diff = self._log_edc_ref - log_est
        w = self._edc_w if self._edc_w is not None else np.full(m, 1.0 / m)
        value = float(np.sum(w * np.abs(diff)))
        if not grad:
            return value, None
        s = np.where(kept, -np.sign(diff) * w, 0.0)
        safe = np.where(kept, energy, 1.0)
        acc = np.cumsum(np.where(kept, s / safe, 0.0))
        g_seg = 2.0 * seg * (acc - s.sum() / total)
        g = np.zeros(x.size)
        k = min(m, x.size)
        g[:k] = g_seg[:k]
        return value, g

    def __call__(self, x, grad: bool = True):
        """Return ``(LossReport, dL/dx)``; the gradient is None if `grad` is false."""
        x = as_array(x)
        if x.size != self.n:
            raise InputError(f"estimate length {x.size} != reference length {self.n}")
        sc, sm, g_spec = self.spectral(x, grad)
        e, g_edc = self.decay(x, grad)
        return LossReport(sc=sc, sm=sm, edc=e), (g_spec + g_edc if grad else None)
