"""Synthetic multi-domain rPPG data: BVP waveforms, STMaps, augmentations, file I/O.

An STMap is an ``rows x T x 3`` array of per-ROI RGB traces, each
(row, channel) slice min-max normalized to [0, 1].  Samples are generated
from a parametric skin model: a DC skin tone per ROI, a pulsatile term
coupled most strongly into green, multiplicative illumination flicker and
motion bursts shared by all ROIs, and additive sensor noise.
"""
from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d

from .errors import ConfigError, DataError, FormatError

FPS = 30.0
ROWS = 25
WINDOW = 256
HR_MIN, HR_MAX = 42.0, 180.0

SKIN_TONE = np.array([0.75, 0.55, 0.45])
# relative pulsatile coupling per channel (green absorbs most)
PULSE_COUPLING = np.array([0.33, 0.77, 0.53])
DEFAULT_HARMONICS = (1.0, 0.4)
DEFAULT_JITTER = 0.03
MINMAX_EPS = 1e-12


@dataclass(frozen=True)
class DomainSpec:
    id: str
    illumination_level: float = 1.0
    flicker_amp: float = 0.0
    flicker_freq: float = 1.0
    motion_rate: float = 0.0
    motion_amp: float = 0.0
    channel_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_std: float = 0.3
    pulsatile_strength: float = 0.02
    # domains without BVP labels only supervise the HR head
    has_bvp_labels: bool = True

    def __post_init__(self):
        if not 0.2 <= self.illumination_level <= 2.0:
            raise ConfigError(f"domain {self.id}: illumination_level must lie in [0.2, 2]")
        if len(self.channel_gains) != 3 or min(self.channel_gains) <= 0:
            raise ConfigError(f"domain {self.id}: channel_gains must be 3 positive reals")
        for name in ("flicker_amp", "motion_rate", "motion_amp", "noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"domain {self.id}: {name} must be nonnegative")
        if self.pulsatile_strength <= 0 or self.flicker_freq <= 0:
            raise ConfigError(f"domain {self.id}: pulsatile_strength and flicker_freq must be positive")
        object.__setattr__(self, "channel_gains", tuple(float(g) for g in self.channel_gains))

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown domain keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_gains"] = list(self.channel_gains)
        return d


PRESET_DOMAINS = {
    "studio": DomainSpec("studio", noise_std=0.4),
    "motion": DomainSpec("motion", motion_rate=30.0, motion_amp=0.3, noise_std=0.5),
    "dim": DomainSpec("dim", illumination_level=0.3, channel_gains=(1.1, 1.0, 0.7), noise_std=0.4),
    "flicker": DomainSpec("flicker", illumination_level=0.8, flicker_amp=0.01, flicker_freq=1.9,
                          channel_gains=(1.3, 0.9, 0.8), motion_rate=5.0, motion_amp=0.01, noise_std=0.6),
    "wild": DomainSpec("wild", illumination_level=0.5, flicker_amp=0.01, flicker_freq=0.9,
                       motion_rate=20.0, motion_amp=0.04, noise_std=1.0, has_bvp_labels=False),
}


@dataclass
class STMapSample:
    stmap: np.ndarray            # rows x T x 3
    bvp: np.ndarray              # T
    hr_bpm: float
    domain_id: str
    fps: float = FPS
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def rows(self) -> int:
        return self.stmap.shape[0]

    @property
    def length(self) -> int:
        return self.stmap.shape[1]

    def __eq__(self, other):
        return (isinstance(other, STMapSample) and self.hr_bpm == other.hr_bpm
                and self.domain_id == other.domain_id and self.fps == other.fps
                and np.array_equal(self.stmap, other.stmap) and np.array_equal(self.bvp, other.bvp))


# --- waveform --------------------------------------------------------------

def _check_hr(hr_bpm: float, fps: float) -> None:
    if not HR_MIN <= hr_bpm <= HR_MAX:
        raise ConfigError(f"hr_bpm {hr_bpm} outside [{HR_MIN}, {HR_MAX}]")
    if fps * 60.0 / hr_bpm < 4:
        raise ConfigError(f"fps {fps} gives fewer than 4 samples per beat at {hr_bpm} bpm")


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance along the last axis."""
    x = x - x.mean(axis=-1, keepdims=True)
    return x / x.std(axis=-1, keepdims=True)


def gen_bvp(hr_bpm: float, t_samples: int, fps: float = FPS, harmonic_amps: Sequence[float] = DEFAULT_HARMONICS,
            hr_jitter_std: float = 0.0, seed: int = 0,
            ibi_modulation: Sequence[tuple[float, float]] = ()) -> np.ndarray:
    """Quasi-periodic pulse at ``hr_bpm`` with per-beat frequency jitter.

    Each beat runs at its own instantaneous frequency
    ``f0 * (1 + hr_jitter_std * z + sum_m a_m sin(2 pi f_m t + phi_m))`` where
    ``ibi_modulation`` lists ``(f_m, a_m)`` pairs (e.g. respiratory sinus
    arrhythmia).  Output is zero-mean, unit-variance.
    """
    _check_hr(hr_bpm, fps)
    rng = np.random.default_rng(seed)
    f0 = hr_bpm / 60.0
    duration = t_samples / fps
    mod_phase = rng.uniform(0, 2 * np.pi, size=len(ibi_modulation))
    start = -rng.uniform(0.0, 1.0) / f0
    starts, freqs = [], []
    while start <= duration:
        rel = 1.0
        if hr_jitter_std > 0:
            rel += hr_jitter_std * rng.standard_normal()
        for (fm, am), ph in zip(ibi_modulation, mod_phase):
            rel += am * np.sin(2 * np.pi * fm * start + ph)
        f = f0 * min(max(rel, 0.5), 1.5)
        starts.append(start)
        freqs.append(f)
        start += 1.0 / f
    starts, freqs = np.array(starts), np.array(freqs)
    t = np.arange(t_samples) / fps
    beat = np.searchsorted(starts, t, side="right") - 1
    phase = 2 * np.pi * (beat + (t - starts[beat]) * freqs[beat])
    wave = np.zeros(t_samples)
    for h, amp in enumerate(harmonic_amps, start=1):
        wave += amp * np.sin(h * phase)
    return standardize(wave)


# --- STMap -----------------------------------------------------------------

def minmax_rows(stmap: np.ndarray) -> np.ndarray:
    """Min-max normalize each (row, channel) slice along time; constant slices become 0."""
    lo = stmap.min(axis=-2, keepdims=True)
    hi = stmap.max(axis=-2, keepdims=True)
    span = hi - lo
    safe = np.where(span < MINMAX_EPS, 1.0, span)
    return np.where(span < MINMAX_EPS, 0.0, (stmap - lo) / safe)


def _motion_trace(rng: np.random.Generator, domain: DomainSpec, t: np.ndarray) -> np.ndarray:
    duration_min = t[-1] / 60.0 if t.size > 1 else 0.0
    n_events = rng.poisson(domain.motion_rate * duration_min) if domain.motion_rate > 0 else 0
    motion = np.zeros_like(t)
    for _ in range(n_events):
        t0 = rng.uniform(t[0] - 1.0, t[-1])
        sign = rng.choice([-1.0, 1.0])
        amp = domain.motion_amp * rng.uniform(0.5, 1.5)
        tau = rng.uniform(0.1, 0.5)
        on = t >= t0
        motion[on] += sign * amp * np.exp(-(t[on] - t0) / tau)
    return motion


def gen_sample(hr_bpm: float, domain: DomainSpec, rois: int = ROWS, t_samples: int = WINDOW, seed: int = 0,
               fps: float = FPS, harmonic_amps: Sequence[float] = DEFAULT_HARMONICS,
               hr_jitter_std: float = DEFAULT_JITTER,
               ibi_modulation: Sequence[tuple[float, float]] = ()) -> STMapSample:
    """One synthetic STMap of ``rois`` rows by ``t_samples`` frames.

    ``sample.meta["raw_rgb"]`` keeps the 3 x T spatial mean of the raw
    (un-normalized) ROI traces for the classical extractors.
    """
    if rois < 1:
        raise ConfigError("rois must be >= 1")
    rng = np.random.default_rng(seed)
    bvp = gen_bvp(hr_bpm, t_samples, fps, harmonic_amps, hr_jitter_std, seed=int(rng.integers(2**63)),
                  ibi_modulation=ibi_modulation)
    t = np.arange(t_samples) / fps

    baseline = SKIN_TONE[None, :] * (1.0 + 0.1 * rng.standard_normal((rois, 3)))   # rois x 3
    baseline = np.clip(baseline, 0.05, None)
    coupling = PULSE_COUPLING[None, :] * rng.uniform(0.5, 1.5, size=(rois, 1))
    flicker = np.zeros(t_samples)
    if domain.flicker_amp > 0:
        flicker = domain.flicker_amp * np.sin(2 * np.pi * domain.flicker_freq * t + rng.uniform(0, 2 * np.pi))
    motion = _motion_trace(rng, domain, t)

    pulse = coupling[:, None, :] * domain.pulsatile_strength * bvp[None, :, None]
    shared = (flicker + motion)[None, :, None]
    gains = domain.illumination_level * np.asarray(domain.channel_gains)
    raw = gains[None, None, :] * (baseline[:, None, :] * (1.0 + shared) + pulse)
    if domain.noise_std > 0:
        sigma = domain.noise_std * domain.pulsatile_strength * PULSE_COUPLING[1]
        raw = raw + sigma * rng.standard_normal(raw.shape)

    # round to float32 so the binary format round-trips bit-exactly
    stmap = minmax_rows(raw).astype(np.float32).astype(np.float64)
    # normalization equalizes channel amplitudes; chrominance methods need the raw ROI mean
    meta = {"raw_rgb": raw.mean(axis=0).T.copy()}
    return STMapSample(stmap=stmap, bvp=bvp.astype(np.float32).astype(np.float64), hr_bpm=float(hr_bpm),
                       domain_id=domain.id, fps=fps, meta=meta)


def sample_seed(seed: int, domain_id: str, index: int) -> np.random.SeedSequence:
    """Independent stream per (generator seed, domain, sample index)."""
    return np.random.SeedSequence([int(seed), zlib.crc32(domain_id.encode()), int(index)])


def _gen_one(args) -> STMapSample:
    domain, index, seed, hr_range, rois, t_samples = args
    ss = sample_seed(seed, domain.id, index)
    rng = np.random.default_rng(ss)
    hr = float(rng.uniform(*hr_range))
    sample = gen_sample(hr, domain, rois, t_samples, seed=int(rng.integers(2**63)))
    sample.meta.update(index=index, seed=seed)
    return sample


def gen_domain_dataset(domains: Sequence[DomainSpec], n_per_domain: int, hr_range=(48.0, 150.0), seed: int = 0,
                       rois: int = ROWS, t_samples: int = WINDOW, workers: int = 1) -> list[STMapSample]:
    """``n_per_domain`` samples per domain, HR drawn uniformly from ``hr_range``.

    Output order (domain-major) and content do not depend on ``workers``.
    """
    if n_per_domain < 1:
        raise ConfigError("n_per_domain must be >= 1")
    jobs = [(d, i, seed, tuple(hr_range), rois, t_samples) for d in domains for i in range(n_per_domain)]
    if workers <= 1:
        return [_gen_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_gen_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


# --- augmentation ----------------------------------------------------------

AUGMENT_OPS = ("row_shuffle", "time_slide", "color_jitter", "blur")


def shuffle_rows(maps: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent row permutation for each map in a (..., rows, T, 3) stack."""
    lead = maps.shape[:-3]
    keys = rng.random(lead + (maps.shape[-3],))
    perm = np.argsort(keys, axis=-1)
    return np.take_along_axis(maps, perm[..., None, None], axis=-3)


def color_jitter(maps: np.ndarray, mag: float, rng: np.random.Generator) -> np.ndarray:
    """Per-map, per-channel gain 1 + U(-mag, mag) and offset U(-mag, mag)/2."""
    if mag == 0:
        return maps
    shape = maps.shape[:-3] + (1, 1, 3)
    gain = 1.0 + mag * rng.uniform(-1, 1, shape)
    offset = 0.5 * mag * rng.uniform(-1, 1, shape)
    return maps * gain + offset


def blur(maps: np.ndarray, width: int) -> np.ndarray:
    """Moving average of ``width`` samples along time (edges replicate)."""
    if width <= 1:
        return maps
    return uniform_filter1d(maps, size=int(width), axis=-2, mode="nearest")


def augment(sample: STMapSample, ops: dict, seed: int = 0, window: int | None = None) -> STMapSample:
    """Label-preserving STMap augmentation.

    ``ops`` may contain ``row_shuffle`` (bool), ``time_slide`` (int offset),
    ``color_jitter`` (magnitude) and ``blur`` (width).  Sliding drops the
    first ``offset`` columns (and BVP samples) and re-normalizes rows;
    ``offset`` must not exceed the margin ``length - window``.
    """
    unknown = set(ops) - set(AUGMENT_OPS)
    if unknown:
        raise ConfigError(f"unknown augmentation ops: {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    stmap, bvp = sample.stmap, sample.bvp
    offset = int(ops.get("time_slide", 0))
    if offset:
        win = sample.length if window is None else window
        if not 0 <= offset <= sample.length - win:
            raise ConfigError(f"time_slide offset {offset} exceeds margin {sample.length - win}")
        if offset < 0:
            raise ConfigError("time_slide offset must be >= 0")
        stmap = minmax_rows(stmap[:, offset:])
        bvp = standardize(bvp[offset:])
    if ops.get("row_shuffle"):
        stmap = shuffle_rows(stmap, rng)
    mag = float(ops.get("color_jitter", 0.0))
    width = int(ops.get("blur", 0))
    if mag < 0 or width < 0:
        raise ConfigError("color_jitter and blur must be >= 0")
    stmap = blur(color_jitter(stmap, mag, rng), width)
    return replace(sample, stmap=stmap, bvp=bvp, meta=dict(sample.meta))


def crop(sample: STMapSample, offset: int, length: int) -> STMapSample:
    """Window ``[offset, offset + length)`` with rows re-normalized."""
    if offset < 0 or offset + length > sample.length:
        raise DataError(f"crop [{offset}, {offset + length}) outside sample of length {sample.length}")
    return replace(sample, stmap=minmax_rows(sample.stmap[:, offset:offset + length]),
                   bvp=standardize(sample.bvp[offset:offset + length]), meta=dict(sample.meta))


# --- files -----------------------------------------------------------------

MAGIC = b"STM1"


def write_stmap(path, sample: STMapSample) -> None:
    r, c, ch = sample.stmap.shape
    did = sample.domain_id.encode("utf-8")
    parts = [MAGIC, struct.pack("<3I", r, c, ch),
             np.ascontiguousarray(sample.stmap, dtype="<f4").tobytes(),
             struct.pack("<d", sample.hr_bpm), struct.pack("<I", sample.bvp.size),
             np.ascontiguousarray(sample.bvp, dtype="<f4").tobytes(),
             struct.pack("<I", len(did)), did]
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as e:
        raise DataError(f"cannot write STMap file {path}: {e}") from e


def read_stmap(path, fps: float = FPS) -> STMapSample:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read STMap file {path}: {e}") from e
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    try:
        r, c, ch = struct.unpack_from("<3I", buf, 4)
        pos = 16
        n = r * c * ch
        stmap = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(r, c, ch)
        pos += 4 * n
        (hr,) = struct.unpack_from("<d", buf, pos)
        (nb,) = struct.unpack_from("<I", buf, pos + 8)
        pos += 12
        bvp = np.frombuffer(buf, dtype="<f4", count=nb, offset=pos).astype(np.float64)
        pos += 4 * nb
        (nd_,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        did = buf[pos:pos + nd_].decode("utf-8")
        if pos + nd_ != len(buf):
            raise FormatError(f"{path}: {len(buf) - pos - nd_} trailing bytes")
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated or corrupt STMap file ({e})") from e
    return STMapSample(stmap=stmap, bvp=bvp, hr_bpm=hr, domain_id=did, fps=fps)


RAW_TRACES = "raw_rgb.npy"   # optional sidecar: N x 3 x T raw ROI-mean traces


def write_dataset(out_dir, samples: Sequence[STMapSample], domains: Sequence[DomainSpec], seed: int,
                  extra: dict | None = None) -> Path:
    """Write one ``.stm`` file per sample plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        name = f"{s.domain_id}_{s.meta.get('index', k):05d}.stm"
        write_stmap(out / name, s)
        entries.append({"file": name, "domain_id": s.domain_id, "hr_bpm": s.hr_bpm})
    raw = [s.meta.get("raw_rgb") for s in samples]
    if raw and all(r is not None for r in raw) and len({r.shape for r in raw}) == 1:
        np.save(out / RAW_TRACES, np.stack(raw))
    manifest = {"format": "STM1", "generator_seed": seed, "fps": FPS,
                "domains": [d.to_dict() for d in domains], "samples": entries, **(extra or {})}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_dataset(manifest_path) -> tuple[list[STMapSample], list[DomainSpec], dict]:
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    domains = [DomainSpec.from_dict(d) for d in manifest["domains"]]
    samples = []
    for i, entry in enumerate(manifest["samples"]):
        s = read_stmap(path.parent / entry["file"], fps=manifest.get("fps", FPS))
        s.meta.update(index=i)
        samples.append(s)
    raw_path = path.parent / RAW_TRACES
    if raw_path.exists():
        raw = np.load(raw_path)
        if raw.shape[0] != len(samples):
            raise FormatError(f"{raw_path}: {raw.shape[0]} traces for {len(samples)} samples")
        for s, r in zip(samples, raw):
            s.meta["raw_rgb"] = r
    return samples, domains, manifest
