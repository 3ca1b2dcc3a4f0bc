import numpy as np
import pytest

from nestrppg import classical as cl
from nestrppg import synthdata as sd
from nestrppg.classical import TraceMatrix
from nestrppg.errors import DataError, NoSpectralPeakError, ZeroVarianceError
from nestrppg.synthdata import DomainSpec

FPS = 30.0
EXTRACT = {"green": cl.estimate_bvp_green, "chrom": cl.estimate_bvp_chrom, "pos": cl.estimate_bvp_pos}


def skin_traces(bvp, motion=None, strength=0.02):
    base = sd.SKIN_TONE[:, None] * (1.0 + (0.0 if motion is None else motion[None, :]))
    return base + sd.PULSE_COUPLING[:, None] * strength * bvp[None, :]


def raw_traces(hr, domain, seed, t=512, **kw):
    return TraceMatrix(sd.gen_sample(hr, domain, rois=25, t_samples=t, seed=seed, **kw).meta["raw_rgb"], FPS)


def test_green_recovers_sinusoid():
    t = np.arange(600) / FPS
    wave = np.sin(2 * np.pi * 1.2 * t)
    rgb = np.vstack([np.full(600, 0.7), 0.5 + 0.01 * wave, np.full(600, 0.4)])
    rgb[0] += 1e-3 * np.cos(t)
    out = cl.estimate_bvp_green(TraceMatrix(rgb, FPS))
    assert abs(np.corrcoef(out, wave)[0, 1]) >= 0.99


def test_extractors_reject_constant_traces():
    rgb = TraceMatrix(np.ones((3, 300)) * np.array([[0.7], [0.5], [0.4]]), FPS)
    for f in EXTRACT.values():
        with pytest.raises(ZeroVarianceError):
            f(rgb)


@pytest.mark.parametrize("name", sorted(EXTRACT))
def test_output_is_standardized(name):
    out = EXTRACT[name](raw_traces(80.0, sd.PRESET_DOMAINS["motion"], 3))
    assert abs(out.mean()) < 1e-9 and abs(out.var() - 1.0) < 1e-9


@pytest.mark.parametrize("name", ["chrom", "pos"])
def test_chrominance_recovers_clean_pulse(name):
    bvp = sd.gen_bvp(72.0, 512, FPS, seed=0)
    out = EXTRACT[name](TraceMatrix(skin_traces(bvp), FPS))
    assert abs(np.corrcoef(out, bvp)[0, 1]) >= 0.99


def test_chrom_cancels_grey_signal():
    x = 0.5 + 0.01 * np.sin(np.linspace(0, 40, 300))
    assert np.abs(cl.chrom_signal(TraceMatrix(np.vstack([x, x, x]), FPS))).max() < 1e-12


def test_pos_rejects_grey_signal():
    x = 0.5 + 0.01 * np.sin(np.linspace(0, 40, 300))
    with pytest.raises(ZeroVarianceError):
        cl.estimate_bvp_pos(TraceMatrix(np.vstack([x, x, x]), FPS))


def test_chrom_beats_green_under_intensity_motion():
    err = {"green": [], "chrom": []}
    for seed in range(20):
        r = np.random.default_rng(seed)
        hr = r.uniform(55, 140)
        bvp = sd.gen_bvp(hr, 512, FPS, seed=seed)
        t = np.arange(512) / FPS
        motion = np.zeros(512)
        for t0 in r.uniform(-1, t[-1], 6):
            on = t >= t0
            motion[on] += r.choice([-1, 1]) * 0.3 * np.exp(-(t[on] - t0) / 0.3)
        rgb = TraceMatrix(skin_traces(bvp, motion), FPS)
        for k in err:
            err[k].append(abs(cl.estimate_hr_fft(EXTRACT[k](rgb), FPS) - hr))
    assert np.mean(err["chrom"]) < np.mean(err["green"])


@pytest.mark.parametrize("name", sorted(EXTRACT))
def test_scale_invariance(name):
    tm = raw_traces(95.0, sd.PRESET_DOMAINS["dim"], 4)
    hr = cl.estimate_hr_fft(EXTRACT[name](tm), FPS)
    for k in (0.1, 3.0, 250.0):
        assert cl.estimate_hr_fft(EXTRACT[name](TraceMatrix(k * tm.rgb, FPS)), FPS) == hr


def test_pos_gain_change_keeps_hr():
    tm = raw_traces(70.0, sd.PRESET_DOMAINS["studio"], 5)
    hr = cl.estimate_hr_fft(cl.estimate_bvp_pos(tm), FPS)
    tinted = TraceMatrix(tm.rgb * np.array([[1.3], [0.9], [0.7]]), FPS)
    bin_bpm = FPS / 1024 * 60
    assert abs(cl.estimate_hr_fft(cl.estimate_bvp_pos(tinted), FPS) - hr) <= bin_bpm + 1e-9


@pytest.mark.parametrize("name,tol", [("pos", 1.0), ("chrom", 1.0), ("green", 1.0)])
def test_noiseless_hr_grid(name, tol):
    quiet = DomainSpec("quiet", noise_std=0.0)
    for hr in range(48, 181, 12):
        tm = raw_traces(float(hr), quiet, hr, t=512, hr_jitter_std=0.0)
        assert abs(cl.estimate_hr_fft(EXTRACT[name](tm), FPS) - hr) <= tol, hr


def test_motion_domain_ordering():
    mae = {k: [] for k in EXTRACT}
    for seed in range(20):
        hr = float(np.random.default_rng(seed).uniform(48, 150))
        tm = raw_traces(hr, sd.PRESET_DOMAINS["motion"], seed)
        for k, f in EXTRACT.items():
            mae[k].append(abs(cl.estimate_hr_fft(f(tm), FPS, peak_ratio=0) - hr))
    assert np.mean(mae["pos"]) <= np.mean(mae["green"])
    assert np.mean(mae["chrom"]) <= np.mean(mae["green"])


# --- spectral readout ----------------------------------------------------------------

def test_fft_pure_tone():
    x = np.sin(2 * np.pi * 1.5 * np.arange(512) / FPS)
    assert cl.estimate_hr_fft(x, FPS) == pytest.approx(90.0, abs=0.9)


def test_fft_dominant_tone_wins():
    t = np.arange(512) / FPS
    x = np.sin(2 * np.pi * 1.0 * t) + 0.3 * np.sin(2 * np.pi * 2.0 * t)
    assert cl.estimate_hr_fft(x, FPS) == pytest.approx(60.0, abs=0.9)


def test_fft_errors():
    with pytest.raises(NoSpectralPeakError):
        cl.estimate_hr_fft(np.ones(256), FPS)
    flat = np.random.default_rng(0).standard_normal(256)
    with pytest.raises(NoSpectralPeakError):
        cl.estimate_hr_fft(flat, FPS, peak_ratio=1e6)
    assert 42.0 <= cl.estimate_hr_fft(flat, FPS, peak_ratio=0) <= 180.0
    with pytest.raises(DataError):
        cl.estimate_hr_fft(np.ones(100), FPS)
    with pytest.raises(DataError):
        cl.estimate_hr_fft(np.ones(256), 5.0)


def test_trace_matrix_checks():
    with pytest.raises(DataError):
        TraceMatrix(np.ones((2, 100)), FPS)
    with pytest.raises(DataError):
        TraceMatrix(np.ones((3, 30)), FPS)
    bad = np.ones((3, 100))
    bad[0, 3] = np.nan
    with pytest.raises(DataError):
        TraceMatrix(bad, FPS)


def test_bandpass_stopband_rejection():
    t = np.arange(1024) / FPS
    for f, gain_max in ((0.2, 0.1), (6.0, 0.1)):
        out = cl.bandpass(np.sin(2 * np.pi * f * t), FPS)
        assert np.abs(out[200:-200]).max() < gain_max     # >= 20 dB down
