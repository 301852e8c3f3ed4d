import numpy as np
import pytest

from echomark.acoustics import analyze
from echomark.dsp import Waveform, convolve, generate_noise
from echomark.errors import InputError
from echomark.estimator import (AdamState, FitOptions, adam_step, fit_from_reverberant, fit_to_rir,
                                informed_deconvolve, reverberant_objective, rir_objective)
from echomark.rir import EarlyRir, ParametricRir, from_t60s, init_params, render

FS = 16000


def _two_slope(seed: int = 5) -> ParametricRir:
    amps = np.zeros((6, 2))
    amps[:, 0] = 0.02
    amps[:, 1] = 0.004
    return ParametricRir(EarlyRir.impulse(), from_t60s([0.35, 1.4], amps, noise_seed=seed))


def test_adam_zero_gradient_is_a_no_op():
    state = AdamState.create([1.0, -2.0, 3.0])
    for _ in range(5):
        state = adam_step(state, np.zeros(3), lr=0.1)
    np.testing.assert_array_equal(state.params, [1.0, -2.0, 3.0])
    assert state.t == 5


def test_adam_constant_gradient_steps_at_learning_rate():
    state = AdamState.create(np.zeros(4))
    g = np.array([1e-3, -2.0, 50.0, 7.0])
    prev = state.params
    for _ in range(20):
        state = adam_step(state, g, lr=0.05)
        np.testing.assert_allclose(prev - state.params, 0.05 * np.sign(g), rtol=1e-4)
        prev = state.params


def test_adam_weight_decay_is_decoupled():
    state = adam_step(AdamState.create([2.0]), [0.0], lr=0.1, weight_decay=0.5)
    assert state.params[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_fit_options_validation():
    for bad in ({"max_iters": 0}, {"step_size": 0.0}, {"grad_mode": "magic"}):
        with pytest.raises(InputError):
            FitOptions(**bad)
    assert FitOptions().to_dict()["grad_mode"] == "analytic"


def test_fixed_point_is_kept():
    init = init_params(31, noise_seed=4)
    result = fit_to_rir(render(init), init, FitOptions(max_iters=50, warm_start=False))
    assert result.final.total < 1e-4
    np.testing.assert_allclose(result.params.late.t60s, init.late.t60s, rtol=1e-3)


def test_two_slope_decay_is_recovered():
    truth = _two_slope()
    target = render(truth)
    result = fit_to_rir(target, init_params(8, noise_seed=5), FitOptions(max_iters=300))
    want = analyze(target.samples).t60_s
    assert analyze(render(result.params).samples).t60_s == pytest.approx(want, rel=0.1)


def test_loss_trace_improves_window_by_window():
    target = render(_two_slope())
    opts = FitOptions(max_iters=300, patience=400, warm_start=False)
    trace = fit_to_rir(target, init_params(9, noise_seed=5), opts).loss_trace
    best = [min(trace[: k + 50]) for k in range(0, len(trace) - 49, 50)]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert best[-1] < trace[0]


def test_fit_is_scale_homogeneous():
    target = render(_two_slope())
    init = init_params(10, noise_seed=5)
    opts = FitOptions(max_iters=150)
    a = fit_to_rir(target, init, opts).params
    b = fit_to_rir(Waveform(40.0 * target.samples, FS), init, opts).params
    np.testing.assert_allclose(b.late.t60s, a.late.t60s, rtol=0.02)
    assert np.sum(b.late.amplitudes) == pytest.approx(40.0 * np.sum(a.late.amplitudes), rel=0.02)


def test_finite_difference_gradient_matches_analytic():
    init = init_params(12, noise_seed=3)
    target = render(_two_slope())
    analytic, model = rir_objective(target, init)
    numeric, _ = rir_objective(target, init, FitOptions(grad_mode="finite-difference", fd_step=1e-4))
    z = model.pack(init)
    ga = analytic(z)[1][-6:]
    gn = numeric(z)[1][-6:]
    np.testing.assert_allclose(gn, ga, rtol=1e-2, atol=1e-2 * np.max(np.abs(ga)))


def test_finite_difference_steps_agree():
    init = init_params(13, noise_seed=3)
    target = render(_two_slope())
    coarse, model = rir_objective(target, init, FitOptions(grad_mode="finite-difference", fd_step=1e-4))
    fine, _ = rir_objective(target, init, FitOptions(grad_mode="finite-difference", fd_step=5e-5))
    z = model.pack(init)
    gc, gf = coarse(z)[1][-6:], fine(z)[1][-6:]
    np.testing.assert_allclose(gc, gf, rtol=1e-2, atol=1e-2 * np.max(np.abs(gf)))


def test_informed_deconvolve_white_source():
    h = render(_two_slope()).samples[:4000]
    x = generate_noise("white", 3 * FS, 17)
    y = convolve(x, Waveform(h, FS))
    est = informed_deconvolve(y, x, reg=1e-4).samples
    assert est.size == h.size
    assert np.linalg.norm(est - h) / np.linalg.norm(h) < 0.05


def test_informed_deconvolve_impulse_source_returns_recording():
    h = render(_two_slope()).samples
    delta = np.zeros(1)
    delta[0] = 1.0
    est = informed_deconvolve(Waveform(h, FS), Waveform(delta, FS), length=h.size).samples
    np.testing.assert_allclose(est, h / (1 + 1e-3), rtol=1e-9, atol=1e-15)
    assert np.linalg.norm(est - h) / np.linalg.norm(h) < 1e-3


def test_impulse_source_reduces_to_rir_objective():
    h = render(_two_slope())
    delta = Waveform(np.eye(1, 1)[0], FS)
    init = init_params(14, noise_seed=5)
    direct, model = rir_objective(h, init)
    informed, informed_model, setup = reverberant_objective(h, delta, init)
    assert setup.noise_var == 0.0
    for seed in (14, 15):
        r = init_params(seed, noise_seed=5)
        a, b = direct(model.pack(r), False)[0], informed(informed_model.pack(r), False)[0]
        assert b.sc == pytest.approx(a.sc, rel=1e-9)
        assert b.sm == pytest.approx(a.sm, rel=1e-9)


def test_reverberant_fit_recovers_decay_from_white_source():
    truth = ParametricRir(EarlyRir.impulse(), from_t60s(np.full(6, 0.6), np.diag(np.full(6, 0.02)), noise_seed=2))
    x = generate_noise("white", FS, 3)
    y = convolve(x, render(truth))
    result = fit_from_reverberant(y, x, init_params(16, noise_seed=2), FitOptions(max_iters=100))
    want = analyze(render(truth).samples).t60_s
    assert analyze(render(result.params).samples).t60_s == pytest.approx(want, rel=0.1)


def test_reverberant_fit_rejects_bad_input():
    init = init_params(1)
    x = generate_noise("white", 2 * FS, 1)
    with pytest.raises(InputError):
        fit_from_reverberant(Waveform(x.samples[:100], FS), x, init)
    with pytest.raises(InputError):
        fit_from_reverberant(Waveform(x.samples, 8000), Waveform(x.samples, 8000), init)
    with pytest.raises(InputError):
        fit_to_rir(Waveform(x.samples, 8000), init)
