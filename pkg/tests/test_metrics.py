import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestrppg import metrics as mt
from nestrppg import synthdata as sd
from nestrppg.errors import ConstantIBIError, DataError, TooFewBeatsError

FPS = 30.0


def modulated_beats(freq, depth=0.05, mean_ibi=0.8, seconds=120.0):
    """Beat times whose IBI follows mean_ibi * (1 + depth sin(2 pi freq t))."""
    t, out = 0.0, []
    while t < seconds:
        out.append(t)
        t += mean_ibi * (1 + depth * np.sin(2 * np.pi * freq * t))
    return np.array(out)


def test_hr_metrics_perfect():
    rep = mt.hr_metrics([60.0, 70.0, 90.0], [60.0, 70.0, 90.0])
    assert (rep.sd, rep.mae, rep.rmse, rep.r) == (0.0, 0.0, 0.0, 1.0)


def test_hr_metrics_two_point():
    rep = mt.hr_metrics([72.0, 78.0], [70.0, 80.0])
    assert rep.mae == 2.0 and rep.rmse == 2.0 and rep.sd == 2.0
    assert rep.r == pytest.approx(1.0, abs=1e-15)


def test_mae_never_exceeds_rmse():
    r = np.random.default_rng(0)
    for _ in range(1000):
        n = r.integers(1, 30)
        rep = mt.hr_metrics(r.uniform(40, 180, n), r.uniform(40, 180, n))
        assert rep.mae <= rep.rmse + 1e-12


def test_constant_series_r_undefined():
    rep = mt.hr_metrics([70.0, 70.0, 70.0], [60.0, 65.0, 80.0])
    assert rep.r is None and rep.mae == pytest.approx(25 / 3)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_hr_metrics_sign_symmetry(seed):
    r = np.random.default_rng(seed)
    gt = r.uniform(50, 150, 10)
    e = r.standard_normal(10) * 5
    a, b = mt.hr_metrics(gt + e, gt), mt.hr_metrics(gt - e, gt)
    assert (a.sd, a.mae, a.rmse) == pytest.approx((b.sd, b.mae, b.rmse), abs=1e-12)
    assert a.r is None or -1.0 <= a.r <= 1.0


def test_hr_metrics_rejects_bad_shapes():
    with pytest.raises(DataError):
        mt.hr_metrics([], [])
    with pytest.raises(DataError):
        mt.hr_metrics([1.0, 2.0], [1.0])


# --- HRV -------------------------------------------------------------------------

def test_lf_modulation_lands_in_lf():
    rep = mt.hrv_from_beats(modulated_beats(0.10))
    assert rep.lf_nu >= 0.9
    assert rep.lf_nu + rep.hf_nu == pytest.approx(1.0, abs=1e-9)


def test_hf_modulation_lands_in_hf():
    rep = mt.hrv_from_beats(modulated_beats(0.25))
    assert rep.hf_nu >= 0.9
    assert rep.lf_hf == pytest.approx(rep.lf_nu / rep.hf_nu, rel=1e-12)


def test_metronomic_pulse_is_constant_ibi():
    t = np.arange(60 * FPS) / FPS
    with pytest.raises(ConstantIBIError):
        mt.hrv_features(np.sin(2 * np.pi * 1.0 * t), FPS)


def test_too_few_beats():
    with pytest.raises(TooFewBeatsError):
        mt.hrv_from_beats(np.arange(10) * 0.8)
    with pytest.raises(DataError):
        mt.hrv_features(np.zeros(100), FPS)


@pytest.mark.parametrize("freq,band", [(0.10, "lf_nu"), (0.25, "hf_nu")])
def test_hrv_from_generated_pulse(freq, band):
    bvp = sd.gen_bvp(70.0, int(60 * FPS), FPS, hr_jitter_std=0.0, seed=2, ibi_modulation=[(freq, 0.06)])
    rep = mt.hrv_features(bvp, FPS)
    assert getattr(rep, band) >= 0.9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100))
def test_hrv_units_sum_and_scale_invariance(seed, scale):
    bvp = sd.gen_bvp(80.0, int(40 * FPS), FPS, hr_jitter_std=0.04, seed=seed)
    a = mt.hrv_features(bvp, FPS)
    b = mt.hrv_features(scale * bvp, FPS)
    assert a.lf_nu + a.hf_nu == pytest.approx(1.0, abs=1e-9)
    assert 0.0 <= a.lf_nu <= 1.0
    assert (a.lf_nu, a.hf_nu) == pytest.approx((b.lf_nu, b.hf_nu), abs=1e-9)
