import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echomark.acoustics import DrrClampedWarning, EnergyDecayCurve, analyze, compare, drr, edc, t60
from echomark.dsp import Waveform, make_rng
from echomark.errors import InputError, InsufficientDecayError

FS = 16000


def _exponential(t60_s: float, duration_s: float) -> np.ndarray:
    lam = 3.0 * math.log(10.0) / t60_s
    return np.exp(-lam * np.arange(int(duration_s * FS)) / FS)


def test_edc_of_impulse():
    h = np.zeros(100)
    h[0] = 1.0
    values = edc(Waveform(h)).values
    assert values[0] == 1.0
    assert values[1] == 0.0


def test_edc_of_exponential_matches_geometric_series():
    lam = 10.0
    n = np.arange(3 * FS)  # truncated tail exp(-60) is far below the tolerance
    values = edc(Waveform(np.exp(-lam * n / FS))).values
    early = n < FS
    np.testing.assert_allclose(values[early], np.exp(-2 * lam * n[early] / FS), rtol=1e-6)


def test_edc_rejects_zero_energy():
    with pytest.raises(InputError):
        edc(Waveform(np.zeros(10)))


@pytest.mark.parametrize("target", [0.2, 0.5, 1.0, 2.0])
def test_t60_of_exponential(target):
    assert analyze(_exponential(target, 1.5 * target)).t60_s == pytest.approx(target, rel=0.02)


def test_t60_half_second_example():
    h = np.exp(-13.8155 * np.arange(FS) / FS)
    assert t60(edc(Waveform(h))) == pytest.approx(0.5, abs=0.01)


def test_t60_insufficient_decay():
    rising = EnergyDecayCurve(np.linspace(0.1, 1.0, 1000)[::-1] ** 0.01, FS)
    with pytest.raises(InsufficientDecayError):
        t60(rising)
    late_burst = np.full(1000, 0.01)
    late_burst[-1] = 1.0  # energy arrives at the end, the curve never drops 5 dB
    assert math.isnan(analyze(late_burst).t60_s)


def test_drr_examples():
    h = np.zeros(2000)
    h[100] = 1.0
    h[500:600] = math.sqrt(0.01 / 100)  # reverberant energy 0.01
    assert drr(Waveform(h)) == pytest.approx(20.0, abs=1e-9)
    h[500:600] = math.sqrt(1.0 / 100)
    assert drr(Waveform(h)) == pytest.approx(0.0, abs=1e-9)


def test_drr_pure_impulse_is_clamped_and_flagged():
    h = np.zeros(100)
    h[3] = 1.0
    with pytest.warns(DrrClampedWarning):
        assert drr(Waveform(h)) == 60.0
    assert analyze(h).drr_clamped


def test_drr_decreases_with_more_tail_energy():
    h = 0.01 * _exponential(0.5, 0.5)
    h[0] = 1.0
    values = []
    for scale in (0.5, 1.0, 2.0, 4.0):
        g = h.copy()
        g[100:] *= scale
        values.append(drr(Waveform(g)))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_compare_examples():
    truth = np.array([0.2, 0.5, 1.0, 1.7])
    same = compare(truth, truth)
    assert (same.bias, same.rmse, same.pearson_rho) == (0.0, 0.0, pytest.approx(1.0))
    shifted = compare(truth + 1, truth)
    assert shifted.bias == pytest.approx(1.0) and shifted.rmse == pytest.approx(1.0)
    assert shifted.pearson_rho == pytest.approx(1.0)
    centred = truth - truth.mean()
    assert compare(-centred, centred).pearson_rho == pytest.approx(-1.0)


def test_compare_constant_truth_and_bad_input():
    assert math.isnan(compare([1.0, 2.0], [3.0, 3.0]).pearson_rho)
    assert compare([1.0, 2.0], [3.0, 3.0]).to_dict()["pearson_rho"] is None
    with pytest.raises(InputError):
        compare([], [])
    with pytest.raises(InputError):
        compare([1.0], [1.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_edc_properties_and_scale_invariance(seed, scale):
    h = make_rng(seed, "edc").standard_normal(3000) * np.exp(-np.arange(3000) / 500)
    values = edc(Waveform(h)).values
    assert values[0] == pytest.approx(1.0)
    assert np.all(np.diff(values) <= 1e-15)
    assert np.all(values[:-1] > 0)
    np.testing.assert_allclose(edc(Waveform(scale * h)).values, values, rtol=1e-9, atol=1e-15)
    assert analyze(scale * h).t60_s == pytest.approx(analyze(h).t60_s, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=30), st.floats(-5, 5))
def test_compare_translation(values, c):
    truth = np.array(values)
    est = truth + make_rng(len(values), "cmp").standard_normal(truth.size)
    base, moved = compare(est, truth), compare(est + c, truth)
    assert moved.bias == pytest.approx(base.bias + c, abs=1e-9)
    assert abs(base.bias) <= base.rmse + 1e-12
    if np.ptp(truth) > 1e-6 and not math.isnan(base.pearson_rho):
        assert moved.pearson_rho == pytest.approx(base.pearson_rho, abs=1e-9)
