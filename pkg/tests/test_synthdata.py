import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from nestrppg import synthdata as sd
from nestrppg.errors import ConfigError, DataError, FormatError
from nestrppg.synthdata import DomainSpec

QUIET = DomainSpec("quiet", noise_std=0.0)


def power_at(x, freq, fps=30.0):
    spec = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(x.size, 1 / fps)
    return spec[np.argmin(np.abs(f - freq))]


# --- gen_bvp -------------------------------------------------------------------

def test_bvp_single_harmonic_peak():
    x = sd.gen_bvp(60.0, 300, 30.0, harmonic_amps=(1.0,), hr_jitter_std=0.0, seed=3)
    f = np.fft.rfftfreq(300, 1 / 30.0)
    assert f[np.argmax(np.abs(np.fft.rfft(x)))] == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_bvp_normalized(seed):
    x = sd.gen_bvp(77.0, 256, 30.0, hr_jitter_std=0.05, seed=seed)
    assert x.size == 256
    assert abs(x.mean()) < 1e-9 and abs(x.var() - 1.0) < 1e-9


def test_bvp_harmonic_power_ratio():
    x = sd.gen_bvp(90.0, 300, 30.0, harmonic_amps=(1.0, 0.4), hr_jitter_std=0.0, seed=0)
    assert power_at(x, 3.0) / power_at(x, 1.5) == pytest.approx(0.16, rel=0.2)


def test_bvp_rejects_out_of_band_hr():
    with pytest.raises(ConfigError):
        sd.gen_bvp(41.0, 256)
    with pytest.raises(ConfigError):
        sd.gen_bvp(181.0, 256)
    with pytest.raises(ConfigError):
        sd.gen_bvp(120.0, 256, fps=7.0)


def test_bvp_ibi_modulation_moves_beats():
    a = sd.gen_bvp(70.0, 600, hr_jitter_std=0.0, seed=1)
    b = sd.gen_bvp(70.0, 600, hr_jitter_std=0.0, seed=1, ibi_modulation=[(0.1, 0.05)])
    assert not np.allclose(a, b)


# --- gen_sample ------------------------------------------------------------------

def test_noiseless_green_rows_track_bvp():
    s = sd.gen_sample(80.0, QUIET, rois=6, t_samples=256, seed=4)
    bvp_scaled = (s.bvp - s.bvp.min()) / np.ptp(s.bvp)
    for r in range(6):
        assert abs(np.corrcoef(s.stmap[r, :, 1], bvp_scaled)[0, 1]) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("hr", [55.0, 84.0, 131.0])
def test_default_domain_green_peak(hr):
    s = sd.gen_sample(hr, DomainSpec("default"), t_samples=256, seed=int(hr))
    g = s.stmap[:, :, 1].mean(axis=0)
    f = np.fft.rfftfreq(256, 1 / 30.0)
    spec = np.abs(np.fft.rfft(g - g.mean()))
    band = (f >= 0.7) & (f <= 3.0)
    peak = f[band][np.argmax(spec[band])]
    assert abs(peak - hr / 60.0) <= f[1] + 1e-12


def test_sample_determinism_and_shape():
    a = sd.gen_sample(70.0, sd.PRESET_DOMAINS["motion"], seed=9)
    b = sd.gen_sample(70.0, sd.PRESET_DOMAINS["motion"], seed=9)
    assert a.stmap.shape == (25, 256, 3)
    assert np.array_equal(a.stmap, b.stmap) and np.array_equal(a.bvp, b.bvp)
    assert a.fps == 30.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), hr=st.floats(42, 180))
def test_sample_rows_are_unit_range(seed, hr):
    s = sd.gen_sample(hr, sd.PRESET_DOMAINS["flicker"], rois=4, t_samples=64, seed=seed)
    lo, hi = s.stmap.min(axis=1), s.stmap.max(axis=1)
    assert np.all((lo == 0) & ((hi == 1) | (hi == 0)))


def test_domain_validation():
    with pytest.raises(ConfigError):
        DomainSpec("x", illumination_level=3.0)
    with pytest.raises(ConfigError):
        DomainSpec("x", channel_gains=(1.0, 0.0, 1.0))
    with pytest.raises(ConfigError):
        DomainSpec("x", noise_std=-1.0)
    with pytest.raises(ConfigError):
        DomainSpec.from_dict({"id": "x", "flicker": 1.0})
    d = sd.PRESET_DOMAINS["dim"]
    assert DomainSpec.from_dict(d.to_dict()) == d


# --- normalization ------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_minmax_idempotent(seed):
    x = np.random.default_rng(seed).standard_normal((3, 20, 3)) * 5
    once = sd.minmax_rows(x)
    assert np.array_equal(sd.minmax_rows(once), once)


def test_constant_row_normalizes_to_zero():
    x = np.random.default_rng(0).random((2, 10, 3))
    x[1, :, 2] = 4.2
    out = sd.minmax_rows(x)
    assert np.array_equal(out[1, :, 2], np.zeros(10))
    assert np.isfinite(out).all()


# --- augment -------------------------------------------------------------------

@pytest.fixture(scope="module")
def long_sample():
    return sd.gen_sample(75.0, DomainSpec("a"), rois=8, t_samples=140, seed=2)


def test_row_shuffle_preserves_rows(long_sample):
    out = sd.augment(long_sample, {"row_shuffle": True}, seed=5)
    key = lambda m: sorted(map(bytes, m.reshape(m.shape[0], -1)))
    assert key(out.stmap) == key(long_sample.stmap)
    assert not np.array_equal(out.stmap, long_sample.stmap)


def test_null_augmentation_is_identity(long_sample):
    out = sd.augment(long_sample, {"time_slide": 0, "color_jitter": 0.0, "blur": 0}, seed=1)
    assert np.array_equal(out.stmap, long_sample.stmap) and np.array_equal(out.bvp, long_sample.bvp)


def test_blur_reduces_white_noise_variance():
    for seed in range(100):
        x = np.random.default_rng(seed).standard_normal((4, 64, 3))
        assert np.all(sd.blur(x, 3).var(axis=1) < x.var(axis=1))


def test_slide_moves_bvp_and_checks_margin(long_sample):
    out = sd.augment(long_sample, {"time_slide": 12}, window=128)
    np.testing.assert_allclose(out.bvp, sd.standardize(long_sample.bvp[12:]))
    with pytest.raises(ConfigError):
        sd.augment(long_sample, {"time_slide": 13}, window=128)
    with pytest.raises(ConfigError):
        sd.augment(long_sample, {"spin": 1})
    with pytest.raises(ConfigError):
        sd.augment(long_sample, {"blur": -1})


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shuffle=st.booleans(), slide=st.integers(0, 12),
       mag=st.floats(0, 0.5), width=st.integers(0, 5))
def test_augment_keeps_label(long_sample, seed, shuffle, slide, mag, width):
    ops = {"row_shuffle": shuffle, "time_slide": slide, "color_jitter": mag, "blur": width}
    out = sd.augment(long_sample, ops, seed=seed, window=128)
    assert out.hr_bpm == long_sample.hr_bpm and out.domain_id == long_sample.domain_id


# --- datasets ------------------------------------------------------------------

def test_dataset_counts_and_order():
    doms = [DomainSpec(f"d{k}") for k in range(4)]
    data = sd.gen_domain_dataset(doms, 50, seed=1, rois=2, t_samples=64)
    assert len(data) == 200
    assert [s.domain_id for s in data] == [f"d{k}" for k in range(4) for _ in range(50)]
    assert all(48.0 <= s.hr_bpm <= 150.0 for s in data)


def test_dataset_subset_reproducible_and_worker_independent():
    doms = [DomainSpec("a"), DomainSpec("b")]
    one = sd.gen_domain_dataset(doms, 6, seed=4, rois=2, t_samples=64)
    two = sd.gen_domain_dataset(doms, 6, seed=4, rois=2, t_samples=64, workers=2)
    for x, y in zip(one, two):
        assert np.array_equal(x.stmap, y.stmap) and x.hr_bpm == y.hr_bpm
    alone = sd.gen_domain_dataset([DomainSpec("b")], 6, seed=4, rois=2, t_samples=64)
    assert np.array_equal(alone[3].stmap, one[9].stmap)


def test_hr_draws_are_uniform():
    data = sd.gen_domain_dataset([DomainSpec("u", noise_std=0.0)], 10_000, seed=0, rois=1, t_samples=16)
    hr = np.array([s.hr_bpm for s in data])
    counts, _ = np.histogram(hr, bins=20, range=(48.0, 150.0))
    assert stats.chisquare(counts).pvalue > 0.01


def test_stmap_file_round_trip(tmp_path):
    s = sd.gen_sample(66.0, sd.PRESET_DOMAINS["wild"], seed=1)
    sd.write_stmap(tmp_path / "a.stm", s)
    back = sd.read_stmap(tmp_path / "a.stm")
    assert np.array_equal(back.stmap, s.stmap) and np.array_equal(back.bvp, s.bvp)
    assert back.hr_bpm == s.hr_bpm and back.domain_id == "wild"
    raw = (tmp_path / "a.stm").read_bytes()
    assert raw[:4] == b"STM1"
    assert raw[4:16] == np.array([25, 256, 3], dtype="<u4").tobytes()


def test_stmap_file_errors(tmp_path):
    p = tmp_path / "bad.stm"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(FormatError):
        sd.read_stmap(p)
    s = sd.gen_sample(66.0, QUIET, rois=2, t_samples=32, seed=1)
    sd.write_stmap(p, s)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        sd.read_stmap(p)
    with pytest.raises(DataError):
        sd.read_stmap(tmp_path / "missing.stm")


def test_dataset_round_trip_is_byte_identical(tmp_path):
    doms = [sd.PRESET_DOMAINS["studio"], sd.PRESET_DOMAINS["dim"]]
    a = sd.write_dataset(tmp_path / "a", sd.gen_domain_dataset(doms, 3, seed=5, rois=3, t_samples=40), doms, 5)
    b = sd.write_dataset(tmp_path / "b", sd.gen_domain_dataset(doms, 3, seed=5, rois=3, t_samples=40), doms, 5)
    for f in sorted(p.name for p in a.parent.iterdir()):
        assert (a.parent / f).read_bytes() == (b.parent / f).read_bytes()
    samples, back_doms, manifest = sd.read_dataset(a)
    assert back_doms == doms and manifest["generator_seed"] == 5
    assert samples[0].meta["raw_rgb"].shape == (3, 40)
