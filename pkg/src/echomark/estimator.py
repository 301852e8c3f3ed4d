"""
Analysis-by-synthesis RIR estimation.

`fit_to_rir` adjusts a `ParametricRir` so its rendering matches a target
impulse response under the multi-resolution STFT + EDC loss.
`fit_from_reverberant` does the same from reverberant speech when the clean
source is known: the spectral loss compares ``x * h_hat`` with the
recording and the decay loss compares ``h_hat`` with a regularized
deconvolution of the recording.

Both fits run Adam on a packed parameter vector ``[early taps, A, logits]``.
Early taps and amplitudes enter the rendering linearly and get exact
gradients; the decay logits get either the chain-rule gradient
(``grad_mode="analytic"``) or central differences of the loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.fft as sfft
import scipy.optimize as sopt
import scipy.signal as ssig
from scipy.ndimage import uniform_filter1d

from .dsp import Waveform, as_array
from .errors import InputError, NonFiniteLossError
from .objective import LossReport, ResolutionSet, RirLoss
from .rir import (EARLY_LEN, LN1000, EarlyRir, ParametricRir, band_mask, logit,
                  noise_matrix, octave_edges, sigmoid)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Adam

@dataclass(frozen=True)
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def create(cls, params) -> "AdamState":
        p = np.array(params, dtype=np.float64)
        return cls(p, np.zeros_like(p), np.zeros_like(p), 0)


def adam_step(state: AdamState, grads, lr=1e-2, betas=(0.9, 0.999), eps=1e-8,
              weight_decay=0.0) -> AdamState:
    """One bias-corrected Adam update with optional decoupled weight decay.

    `lr` may be a scalar or an array broadcastable to the parameters.
    """
    g = np.asarray(grads, dtype=np.float64)
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    p = state.params - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * state.params)
    return AdamState(p, m, v, t)


# --------------------------------------------------------------------------
# options / results

@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings.

    The step size applies to decay logits directly and, scaled by
    `amp_step_scale`, to early taps and amplitudes measured in units of the
    target's peak. The learning rate follows a cosine schedule down to
    ``step_size * final_step_frac``.
    """

    max_iters: int = 2000
    step_size: float = 1e-2
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_mode: str = "analytic"
    fd_step: float = 1e-4
    alpha: float = 1.0
    amp_step_scale: float = 0.1
    final_step_frac: float = 1e-3
    patience: int = 200
    tol: float = 1e-5
    warm_start: bool = True
    fit_early: bool = True
    resolutions: ResolutionSet = field(default_factory=ResolutionSet)
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iters <= 0:
            raise InputError("max_iters must be positive")
        if not self.step_size > 0.0:
            raise InputError("step_size must be positive")
        if self.grad_mode not in ("analytic", "finite-difference"):
            raise InputError(f"unknown grad_mode {self.grad_mode!r}")

    def to_dict(self) -> dict:
        return {
            "max_iters": self.max_iters, "step_size": self.step_size,
            "adam_betas": list(self.adam_betas), "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay, "grad_mode": self.grad_mode,
            "fd_step": self.fd_step, "alpha": self.alpha,
            "amp_step_scale": self.amp_step_scale, "final_step_frac": self.final_step_frac,
            "patience": self.patience, "tol": self.tol, "warm_start": self.warm_start,
            "fit_early": self.fit_early, "resolutions": [list(t) for t in self.resolutions.triples],
            "rng_seed": self.rng_seed,
        }


@dataclass(frozen=True)
class FitResult:
    params: ParametricRir
    loss_trace: tuple
    converged: bool
    iters_used: int
    final: LossReport

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "loss_trace": list(self.loss_trace),
            "converged": self.converged,
            "iters_used": self.iters_used,
            "final_loss": self.final.to_dict(),
        }


# --------------------------------------------------------------------------
# packed model

class PackedRir:
    """Render a ParametricRir from a flat vector and backpropagate through it.

    The vector is ``[early / scale, A.ravel() / amp_scale, logits]``. Late
    amplitudes sit far below the early peak, so they get their own scale;
    `set_amp_scale` picks it from a starting point.
    """

    def __init__(self, template: ParametricRir, scale: float = 1.0):
        late = template.late
        self.template = template
        self.scale = float(scale)
        self.amp_scale = float(scale)
        self.M, self.N = late.num_bands, late.num_decays
        self.L = late.num_samples
        self.fs = late.sample_rate_hz
        self.tau = late.tau_s
        self.W = noise_matrix(late)
        self.t = np.arange(self.L) / self.fs
        self.n_early = EARLY_LEN
        self.n_amp = self.M * self.N
        self.size = self.n_early + self.n_amp + self.N

    @property
    def num_samples(self) -> int:
        return EARLY_LEN + self.L

    def pack(self, r: ParametricRir) -> np.ndarray:
        return np.concatenate([r.early.taps / self.scale,
                               r.late.amplitudes.ravel() / self.amp_scale,
                               r.late.decay_logits])

    def split(self, z):
        e = z[:self.n_early]
        a = z[self.n_early:self.n_early + self.n_amp].reshape(self.M, self.N)
        th = z[self.n_early + self.n_amp:]
        return e, a, th

    def unpack(self, z) -> ParametricRir:
        e, a, th = self.split(z)
        late = replace(self.template.late, amplitudes=np.maximum(a, 0.0) * self.amp_scale,
                       decay_logits=th.copy())
        return ParametricRir(EarlyRir(e * self.scale), late)

    def _decays(self, th):
        sig = sigmoid(th)
        rates = LN1000 / (self.tau * sig)
        return sig, rates, np.exp(-np.outer(rates, self.t))

    def render(self, z) -> np.ndarray:
        e, a, th = self.split(z)
        _, _, E = self._decays(th)
        out = np.empty(self.num_samples)
        out[:EARLY_LEN] = e * self.scale
        out[EARLY_LEN:] = np.einsum("ml,ml->l", self.W, (a * self.amp_scale) @ E)
        return out

    def backward(self, z, g_h) -> np.ndarray:
        """Gradient with respect to `z` given ``dL/dh`` of the rendering."""
        e, a, th = self.split(z)
        sig, rates, E = self._decays(th)
        g_late = g_h[EARLY_LEN:]
        gw = self.W * g_late                     # (M, L)
        g_a = (gw @ E.T) * self.amp_scale        # (M, N)
        mixed = (a * self.amp_scale).T @ gw      # (N, L)
        g_th = rates * (1.0 - sig) * np.einsum("nl,nl->n", mixed, E * self.t)
        return np.concatenate([g_h[:EARLY_LEN] * self.scale, g_a.ravel(), g_th])

    def set_amp_scale(self, r: ParametricRir) -> None:
        peak = float(np.max(r.late.amplitudes))
        if peak > 0.0:
            self.amp_scale = peak

    def step_sizes(self, opts: FitOptions) -> np.ndarray:
        lr = np.full(self.size, opts.step_size)
        lr[:self.n_early + self.n_amp] *= opts.amp_step_scale
        if not opts.fit_early:
            lr[:self.n_early] = 0.0
        return lr

    def project(self, z) -> np.ndarray:
        a = z[self.n_early:self.n_early + self.n_amp]
        np.maximum(a, 0.0, out=a)
        return z


# --------------------------------------------------------------------------
# warm start

def _band_decay(band: np.ndarray, fs: int, tau: float):
    """T60 of one band-limited tail from its Schroeder curve, clipped into (0, tau)."""
    energy = np.cumsum(np.square(band)[::-1])[::-1]
    if not energy[0] > 0.0:
        return 0.5 * tau
    level = 10.0 * np.log10(np.maximum(energy / energy[0], 1e-30))
    lo = -25.0 if level.min() <= -25.0 else max(level.min() * 0.8, -10.0)
    idx = np.flatnonzero((level <= -1.0) & (level >= lo))
    if idx.size < 8:
        return 0.5 * tau
    t = idx / fs
    slope = np.polyfit(t, level[idx], 1)[0]
    if not slope < 0.0:
        return 0.98 * tau
    return float(np.clip(-60.0 / slope, 0.02 * tau, 0.98 * tau))


def _butter_band(x: np.ndarray, center_hz: float, fs: int) -> np.ndarray:
    lo, hi = octave_edges(center_hz, fs)
    hi = min(hi, 0.499 * fs)
    sos = ssig.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return ssig.sosfiltfilt(sos, x)


def analysis_init(h_ref: np.ndarray, template: ParametricRir) -> ParametricRir:
    """Data-driven starting point: early taps copied, one decay per band.

    Band T60s come from Schroeder fits on zero-phase Butterworth octave
    bands of the reference tail (the brick-wall carrier masks leak too much
    energy from the tail's onset to measure decay). Band energies, taken with
    the carrier masks and matched against the actual carrier realization,
    give the diagonal amplitudes.
    """
    late = template.late
    n = late.num_samples
    ref = np.zeros(EARLY_LEN + n)
    k = min(ref.size, h_ref.size)
    ref[:k] = h_ref[:k]
    tail = ref[EARLY_LEN:]
    W = noise_matrix(late)
    t = np.arange(n) / late.sample_rate_hz
    spec = np.fft.rfft(tail)
    t60s = np.full(late.num_decays, 0.5 * late.tau_s)
    amps = np.zeros((late.num_bands, late.num_decays))
    for m in range(late.num_bands):
        mask = band_mask(late.band_centers_hz[m], n, late.sample_rate_hz)
        band = np.fft.irfft(np.where(mask, spec, 0.0), n=n)
        col = m % late.num_decays
        rt = _band_decay(_butter_band(tail, late.band_centers_hz[m], late.sample_rate_hz),
                         late.sample_rate_hz, late.tau_s)
        if m < late.num_decays:
            t60s[col] = rt
        env2 = np.exp(-2.0 * LN1000 / t60s[col] * t)
        model_energy = float(np.sum(env2 * W[m] ** 2))
        amps[m, col] = math.sqrt(float(np.sum(band ** 2)) / model_energy) if model_energy > 0 else 0.0
    logits = logit(t60s / late.tau_s)
    new_late = replace(late, amplitudes=amps, decay_logits=logits)
    return ParametricRir(EarlyRir(ref[:EARLY_LEN]), new_late)


def projection_init(h_ref: np.ndarray, start: ParametricRir, max_evals: int = 300) -> ParametricRir:
    """Waveform-domain variable projection from `start`.

    For fixed decay logits the late field is linear in the amplitudes, so
    they are solved by non-negative least squares against the reference
    tail; the logits are refined by L-BFGS on the remaining residual. Only
    useful when the reference shares the model's carriers (self-synthesis,
    re-fits); callers keep it only if it lowers the perceptual loss.
    """
    late = start.late
    n = late.num_samples
    tail = np.zeros(n)
    seg = h_ref[EARLY_LEN:EARLY_LEN + n]
    tail[:seg.size] = seg
    W = noise_matrix(late)
    t = np.arange(n) / late.sample_rate_hz
    M, N = late.num_bands, late.num_decays
    norm = float(np.dot(tail, tail))
    if not norm > 0.0:
        return start

    def solve(th):
        sig = sigmoid(th)
        rates = LN1000 / (late.tau_s * sig)
        E = np.exp(-np.outer(rates, t))
        B = (W[:, None, :] * E[None, :, :]).reshape(M * N, n)
        gram = B @ B.T
        gram[np.diag_indices_from(gram)] += 1e-12 * np.trace(gram)
        # NNLS on the Cholesky factor: same minimizer, MN x MN instead of MN x n
        chol = np.linalg.cholesky(gram)
        a, _ = sopt.nnls(chol.T, np.linalg.solve(chol, B @ tail))
        amps = a.reshape(M, N)
        resid = tail - a @ B
        # envelope theorem: amplitudes are optimal, so only dB/dtheta counts
        mixed = amps.T @ W
        grad = -2.0 * rates * (1.0 - sig) * np.einsum("nl,nl->n", mixed, E * t * resid) / norm
        return amps, float(resid @ resid) / norm, grad

    def cost(th):
        _, value, grad = solve(th)
        return value, grad

    th0 = np.asarray(late.decay_logits, dtype=np.float64)
    opt = sopt.minimize(cost, th0, jac=True, method="L-BFGS-B", bounds=[(-12.0, 12.0)] * N,
                        options={"maxiter": max_evals, "ftol": 1e-16, "gtol": 1e-14})
    th = opt.x if opt.fun < cost(th0)[0] else th0
    amps = solve(th)[0]
    early = np.zeros(EARLY_LEN)
    k = min(EARLY_LEN, h_ref.size)
    early[:k] = h_ref[:k]
    return ParametricRir(EarlyRir(early), replace(late, amplitudes=amps, decay_logits=th))


# --------------------------------------------------------------------------
# optimization loop

def _cosine_lr(base: np.ndarray, it: int, total: int, floor_frac: float) -> np.ndarray:
    c = 0.5 * (1.0 + math.cos(math.pi * min(it, total) / total))
    return base * (floor_frac + (1.0 - floor_frac) * c)


def _optimize(objective, model: PackedRir, z0: np.ndarray, opts: FitOptions) -> FitResult:
    """Adam loop shared by both fits.

    `objective(z, grad)` returns ``(LossReport, dL/dz or None)``.
    """
    base_lr = model.step_sizes(opts)
    state = AdamState.create(z0)
    best_z, best_loss, best_report, best_it = z0.copy(), math.inf, None, 0
    trace = []
    converged = True
    it = 0
    for it in range(opts.max_iters):
        report, grad = objective(state.params, True)
        loss = report.total
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NonFiniteLossError(f"non-finite loss at iteration {it}: {loss}")
        trace.append(loss)
        if loss < best_loss:
            best_z, best_loss, best_report, best_it = state.params.copy(), loss, report, it
        if loss <= opts.tol:
            break
        if it - best_it >= opts.patience:
            converged = False
            break
        lr = _cosine_lr(base_lr, it, opts.max_iters, opts.final_step_frac)
        state = adam_step(state, grad, lr, opts.adam_betas, opts.adam_eps, opts.weight_decay)
        model.project(state.params)
    return FitResult(model.unpack(best_z), tuple(trace), converged, it + 1, best_report)


def _theta_fd(loss_of_z, z: np.ndarray, model: PackedRir, step: float) -> np.ndarray:
    g = np.empty(model.N)
    off = model.n_early + model.n_amp
    for n in range(model.N):
        zp, zm = z.copy(), z.copy()
        zp[off + n] += step
        zm[off + n] -= step
        g[n] = (loss_of_z(zp) - loss_of_z(zm)) / (2.0 * step)
    return g


def _peak(x: np.ndarray) -> float:
    p = float(np.max(np.abs(x)))
    if not p > 0.0:
        raise InputError("target has zero energy")
    return p


def _choose_start(init: ParametricRir, candidates, score) -> ParametricRir:
    best, best_loss = init, score(init)
    for cand in candidates:
        value = score(cand)
        if value < best_loss:
            best, best_loss = cand, value
    return best


def rir_objective(target, init: ParametricRir, opts: FitOptions = FitOptions()):
    """Build ``(objective, model)`` for fitting `init`'s family to `target`.

    Exposed for gradient checks; `fit_to_rir` is the normal entry point.
    """
    h = as_array(target)
    model = PackedRir(init, _peak(h))
    n = model.num_samples
    ref = np.zeros(n)
    ref[:min(n, h.size)] = h[:n]
    loss = RirLoss(ref, opts.resolutions)

    def loss_of_z(z):
        return loss(model.render(z), grad=False)[0].total

    def objective(z, grad=True):
        x = model.render(z)
        report, g_h = loss(x, grad)
        if not grad:
            return report, None
        g = model.backward(z, g_h)
        if opts.grad_mode == "finite-difference":
            g[model.n_early + model.n_amp:] = _theta_fd(loss_of_z, z, model, opts.fd_step)
        return report, g

    return objective, model


def fit_to_rir(target_h: Waveform, init: ParametricRir,
               opts: FitOptions = FitOptions()) -> FitResult:
    """Fit a parametric RIR to a measured or synthetic impulse response.

    The target is compared over the model's support (50 ms plus the late
    field length), zero-padded or truncated as needed. With
    ``opts.warm_start`` an analysis-based starting point replaces `init`
    when it has a lower loss; the noise seed and tau of `init` are kept.
    """
    if target_h.sample_rate_hz != init.sample_rate_hz:
        raise InputError("target and model sample rates differ")
    objective, model = rir_objective(target_h, init, opts)
    start = init
    if opts.warm_start:
        def score(r):
            return objective(model.pack(r), False)[0].total
        ref = as_array(target_h)
        coarse = analysis_init(ref, init)
        start = _choose_start(init, [coarse, projection_init(ref, coarse)], score)
    model.set_amp_scale(start)
    return _optimize(objective, model, model.pack(start), opts)


# --------------------------------------------------------------------------
# informed estimation

def _octave_smooth(p: np.ndarray, fraction: int = 6) -> np.ndarray:
    """Moving average of a spectrum over a 1/`fraction`-octave window per bin."""
    k = np.arange(p.size)
    acc = np.concatenate([[0.0], np.cumsum(p)])
    half = 2.0 ** (0.5 / fraction)
    lo = np.clip(np.floor(k / half).astype(int), 0, p.size - 1)
    hi = np.clip(np.ceil(k * half).astype(int) + 1, 1, p.size)
    return (acc[hi] - acc[lo]) / (hi - lo)


class Deconvolver:
    """Regularized spectral division by a fixed source.

    With ``local=False`` the regularizer is ``reg * max|X|^2``; with
    ``local=True`` it is `reg` times the 1/6-octave smoothed source power,
    which keeps the relative regularization the same in loud and quiet
    regions of a coloured (speech-like) source. The effective filter of the estimate is
    ``G = |X|^2 / denom``, exposed through `matched`.
    """

    def __init__(self, x: np.ndarray, ny: int, reg: float, local: bool = False):
        if not np.any(x):
            raise InputError("source signal has zero energy")
        if not reg > 0.0:
            raise InputError("reg must be positive")
        self.ny = ny
        self.nfft = sfft.next_fast_len(ny + x.size - 1, real=True)
        self.X = sfft.rfft(x, self.nfft)
        self.power = np.abs(self.X) ** 2
        p = self.power
        floor = reg * (_octave_smooth(p) + 1e-9 * p.max() if local else p.max())
        self.denom = p + floor
        self.G = p / self.denom

    def estimate(self, y: np.ndarray) -> np.ndarray:
        return sfft.irfft(sfft.rfft(y, self.nfft) * np.conj(self.X) / self.denom, self.nfft)

    def matched(self, h: np.ndarray) -> np.ndarray:
        return sfft.irfft(sfft.rfft(h, self.nfft) * self.G, self.nfft)

    def noise_profile(self) -> np.ndarray:
        """Per-lag variance of the estimate for unit-variance white noise in y."""
        k = sfft.irfft(np.conj(self.X) / self.denom, self.nfft)
        ind = np.zeros(self.nfft)
        ind[:self.ny] = 1.0
        v = sfft.irfft(sfft.rfft(k * k) * sfft.rfft(ind), self.nfft)
        return np.maximum(v, 0.0)


def _deconvolve_full(y: np.ndarray, x: np.ndarray, reg: float) -> np.ndarray:
    return Deconvolver(x, y.size, reg).estimate(y)


def informed_deconvolve(y: Waveform, x: Waveform, reg: float = 1e-3,
                        length: Optional[int] = None) -> Waveform:
    """Regularized frequency-domain estimate of h from ``y = x * h (+ noise)``.

    ``H = Y conj(X) / (|X|^2 + reg * max|X|^2)``, inverse-transformed and
    truncated to `length` samples (default ``len(y) - len(x) + 1`` when y is a
    full convolution, otherwise the canonical RIR support of 50 ms + 2 s).
    """
    if y.sample_rate_hz != x.sample_rate_hz:
        raise InputError("sample-rate mismatch")
    if len(y) < len(x):
        raise InputError("recording is shorter than the source")
    if length is None:
        length = len(y) - len(x) + 1
        if length <= 1:
            length = EARLY_LEN + 2 * y.sample_rate_hz
    h = _deconvolve_full(y.samples, x.samples, reg)
    out = np.zeros(length)
    k = min(length, h.size)
    out[:k] = h[:k]
    return Waveform(out, y.sample_rate_hz)


class _ConvolvedRir:
    """Forward ``(x * h)[:ny]`` and its adjoint for a fixed source x."""

    def __init__(self, x: np.ndarray, nh: int, ny: int):
        self.nh, self.ny = nh, ny
        self.nfft = sfft.next_fast_len(x.size + nh - 1, real=True)
        self.X = sfft.rfft(x, self.nfft)

    def forward(self, h):
        return sfft.irfft(self.X * sfft.rfft(h, self.nfft), self.nfft)[:self.ny]

    def adjoint(self, g_y):
        return sfft.irfft(np.conj(self.X) * sfft.rfft(g_y, self.nfft), self.nfft)[:self.nh]


class _MatchedEdc:
    """Model RIR seen through the deconvolution filter, truncated to `nh`.

    Regularized division returns ``h * g`` plus noise. Comparing decay
    curves of ``model * g`` and the estimate keeps the estimate's spectral
    smearing from biasing the fit. ``G`` is real, so the operator is
    self-adjoint.
    """

    def __init__(self, deconv: Deconvolver, nh: int):
        self.deconv, self.nh = deconv, nh

    def forward(self, h):
        return self.deconv.matched(h)[:self.nh]

    adjoint = forward


def outside_slice(size: int, support: int, guard: int) -> slice:
    """Lags of a full-length deconvolution that carry noise but no RIR."""
    lo, hi = support + guard, size - guard
    return slice(lo, hi) if hi > lo else slice(max(0, size - size // 10), size)


def _compensated_t60(band: np.ndarray, nh: int, noise: np.ndarray, fs: int):
    """T60 from a noise-subtracted Schroeder curve, or None if too noisy.

    `noise` is the per-lag noise variance over the first `nh` lags. The
    backward integration stops where the band meets its noise floor. The fit
    span runs from -5 dB down to 7 dB above the noise-limited dynamic range,
    at most -25 dB, and must reach at least -15 dB.
    """
    end = decay_truncation(band[:nh], noise[:nh], fs)
    noise_tail = np.cumsum(noise[:end][::-1])[::-1]
    energy = np.cumsum(np.square(band[:end])[::-1])[::-1] - noise_tail
    if not energy[0] > 0.0:
        return None
    snr_db = 10.0 * math.log10(energy[0] / max(float(noise_tail[0]), 1e-300))
    lo_db = -min(25.0, snr_db - 7.0)
    if lo_db > -15.0:
        return None
    level = 10.0 * np.log10(np.maximum(energy, 1e-300) / energy[0])
    start = int(np.argmax(level <= -5.0))
    below = np.flatnonzero(level <= lo_db)
    if below.size == 0 or below[0] - start < 8:
        return None
    stop = below[0] + 1
    slope = np.polyfit(np.arange(start, stop) / fs, level[start:stop], 1)[0]
    return -60.0 / slope if slope < 0.0 else None


def informed_init(h_full: np.ndarray, support: int, template: ParametricRir,
                  noise_shape: Optional[np.ndarray] = None) -> ParametricRir:
    """Starting point from a (noisy) deconvolution estimate.

    Each octave band of the estimate gets a noise-compensated Schroeder
    fit. The band's noise level is measured on lags beyond the RIR support
    and spread over the support with `noise_shape`, the relative per-lag
    noise variance (flat when omitted). Bands too noisy for a fit borrow the
    decay of the nearest band that had one; amplitudes come from
    noise-compensated band energies.
    """
    late = template.late
    fs = late.sample_rate_hz
    n = late.num_samples
    nh = EARLY_LEN + n
    out = outside_slice(h_full.size, max(support, nh), EARLY_LEN)
    shape = np.ones(h_full.size) if noise_shape is None else noise_shape
    shape = shape / max(float(np.mean(shape[out])), 1e-300)
    t = np.arange(n) / fs
    W = noise_matrix(late)
    spec = np.fft.rfft(h_full)
    fitted, energies = [], []
    for m in range(late.num_bands):
        center = late.band_centers_hz[m]
        band = _butter_band(h_full, center, fs)
        noise = float(np.mean(np.square(band[out]))) * shape
        rt = _compensated_t60(band, nh, noise, fs)
        fitted.append(None if rt is None else float(np.clip(rt, 0.02 * late.tau_s, 0.98 * late.tau_s)))
        # energies with the carriers' own brick-wall masks, which the
        # Butterworth bands under-count at their skirts
        wall = np.fft.irfft(np.where(band_mask(center, h_full.size, fs), spec, 0.0), h_full.size)
        wall_noise = float(np.mean(np.square(wall[out]))) * float(np.sum(shape[EARLY_LEN:nh]))
        energies.append(max(float(np.sum(np.square(wall[EARLY_LEN:nh]))) - wall_noise, 0.0))
    noise = float(np.mean(np.square(h_full[out]))) * shape
    rt = _compensated_t60(h_full, nh, noise, fs)
    if rt is None:
        reliable = [v for v in fitted if v is not None]
        rt = float(np.median(reliable)) if reliable else 0.5 * late.tau_s
    broadband = float(np.clip(rt, 0.02 * late.tau_s, 0.98 * late.tau_s))
    fitted = [broadband if v is None else v for v in fitted]
    t60s = np.full(late.num_decays, 0.5 * late.tau_s)
    amps = np.zeros((late.num_bands, late.num_decays))
    for m in range(late.num_bands):
        col = m % late.num_decays
        if m < late.num_decays:
            t60s[col] = fitted[m]
        model_energy = float(np.sum(np.exp(-2.0 * LN1000 / t60s[col] * t) * W[m] ** 2))
        amps[m, col] = math.sqrt(energies[m] / model_energy) if model_energy > 0.0 else 0.0
    new_late = replace(late, amplitudes=amps, decay_logits=logit(t60s / late.tau_s))
    # soft-threshold the early taps against the local noise level
    sigma = np.sqrt(float(np.mean(np.square(h_full[out]))) * shape[:EARLY_LEN])
    early = h_full[:EARLY_LEN]
    early = np.sign(early) * np.maximum(np.abs(early) - EARLY_NOISE_THRESHOLD * sigma, 0.0)
    return ParametricRir(EarlyRir(early), new_late)


# weight of the decay term against the spectral terms in informed
# estimation; the spectral terms on independent stochastic tails are biased
# toward short decays, the matched decay curve is not
INFORMED_EDC_WEIGHT = 20.0
# the decay term stops where the smoothed local power of the estimate falls
# below this multiple of the predicted noise power; integrating the noise
# beyond that point swamps the reference curve
DECAY_TRUNCATION_RATIO = 1.0
DECAY_TRUNCATION_WINDOW_S = 0.02
# early taps of the informed warm start are shrunk by this many local noise
# standard deviations
EARLY_NOISE_THRESHOLD = 3.0


@dataclass
class _InformedSetup:
    deconv: Deconvolver
    h_full: np.ndarray
    support: int
    noise_var: float
    profile: np.ndarray


def _informed_setup(ya: np.ndarray, xa: np.ndarray, nh: int, reg: float,
                    noise_var: Optional[float]) -> _InformedSetup:
    """Deconvolution estimate plus the variance of white noise in y.

    The variance comes from out-of-support lags of the estimate, divided by
    the exact per-lag noise gain of the deconvolution filter. It is zero
    when the recording is too short to leave such lags.
    """
    support = max(ya.size - xa.size + 1, nh)
    deconv = Deconvolver(xa, ya.size, reg, local=True)
    h_full = deconv.estimate(ya)
    profile = deconv.noise_profile()
    if noise_var is None:
        out = outside_slice(h_full.size, support, EARLY_LEN)
        if out.start < support:
            # no lag is free of the RIR, so there is nothing to measure
            noise_var = 0.0
        else:
            noise_var = float(np.mean(np.square(h_full[out]))) / max(float(np.mean(profile[out])), 1e-300)
    return _InformedSetup(deconv, h_full, support, float(noise_var), profile)


def decay_truncation(h: np.ndarray, noise: np.ndarray, fs: int) -> int:
    """First lag after the early part where `h` meets its noise floor.

    `noise` is the per-lag noise variance of `h`. Returns ``len(h)`` if the
    local power never drops below ``DECAY_TRUNCATION_RATIO`` times it.
    """
    width = max(1, int(DECAY_TRUNCATION_WINDOW_S * fs))
    local = uniform_filter1d(np.square(h), width)
    floor = DECAY_TRUNCATION_RATIO * uniform_filter1d(noise, width)
    low = np.flatnonzero(local[EARLY_LEN:] < floor[EARLY_LEN:])
    return h.size if low.size == 0 else EARLY_LEN + int(low[0])


def reverberant_objective(y, x, init: ParametricRir, opts: FitOptions = FitOptions(),
                          reg: float = 1e-3, noise_var: Optional[float] = None):
    """Build ``(objective, model, setup)`` for informed estimation.

    The spectral term compares ``(x * h)[:len(y)]`` with y, with the
    estimated noise floor added to the model's magnitudes. The decay term
    compares the EDC of the deconvolution estimate with that of the model
    seen through the same deconvolution filter plus the predicted per-lag
    noise variance, up to where the estimate meets its noise floor.
    """
    ya, xa = as_array(y), as_array(x)
    if ya.size < xa.size:
        raise InputError("recording is shorter than the source")
    nh = EARLY_LEN + init.late.num_samples
    setup = _informed_setup(ya, xa, nh, reg, noise_var)
    h_ref = setup.h_full[:nh]
    model = PackedRir(init, _peak(h_ref))
    conv = _ConvolvedRir(xa, nh, ya.size)
    matched = _MatchedEdc(setup.deconv, nh)
    start = informed_init(setup.h_full, setup.support, init, setup.profile)
    # the decay term only looks at the decaying part of the estimate above
    # its noise floor; past 1.5 T60 both curves sit on the ringing floor
    noise = setup.noise_var * setup.profile[:nh]
    span = EARLY_LEN + int(1.5 * float(np.max(start.late.t60s)) * init.sample_rate_hz)
    span = max(min(span, decay_truncation(h_ref, noise, init.sample_rate_hz)), 2 * EARLY_LEN)
    loss = RirLoss(ya, opts.resolutions, edc_target=h_ref[:span], noise_power=setup.noise_var,
                   edc_noise_power=noise[:span])

    def evaluate(z, grad):
        h = model.render(z)
        sc, sm, g_y = loss.spectral(conv.forward(h), grad)
        e, g_m = loss.decay(matched.forward(h), grad)
        report = LossReport(sc=sc, sm=sm, edc=INFORMED_EDC_WEIGHT * e)
        if not grad:
            return report, None
        return report, conv.adjoint(g_y) + INFORMED_EDC_WEIGHT * matched.adjoint(g_m)

    def loss_of_z(z):
        return evaluate(z, False)[0].total

    def objective(z, grad=True):
        report, g_h = evaluate(z, grad)
        if not grad:
            return report, None
        g = model.backward(z, g_h)
        if opts.grad_mode == "finite-difference":
            g[model.n_early + model.n_amp:] = _theta_fd(loss_of_z, z, model, opts.fd_step)
        return report, g

    objective.start = start
    return objective, model, setup


def fit_from_reverberant(y: Waveform, x: Waveform, init: ParametricRir,
                         opts: FitOptions = FitOptions(), reg: float = 1e-3,
                         noise_var: Optional[float] = None) -> FitResult:
    """Estimate a parametric RIR from a reverberant recording and its clean source.

    `reg` is relative to the 1/6-octave smoothed source power (unlike
    `informed_deconvolve`, whose regularizer is relative to the peak).
    `noise_var` is the variance of additive white noise in y; it is
    estimated from the deconvolution when not given.
    """
    if y.sample_rate_hz != x.sample_rate_hz or x.sample_rate_hz != init.sample_rate_hz:
        raise InputError("sample-rate mismatch")
    objective, model, _ = reverberant_objective(y, x, init, opts, reg, noise_var)
    start = init
    if opts.warm_start:
        def score(r):
            return objective(model.pack(r), False)[0].total
        start = _choose_start(init, [objective.start], score)
    model.set_amp_scale(start)
    return _optimize(objective, model, model.pack(start), opts)
