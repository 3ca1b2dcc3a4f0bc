"""Hand-crafted pulse extractors (GREEN, CHROM, POS) and spectral HR readout."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .errors import DataError, NoSpectralPeakError, ZeroVarianceError

HR_BAND = (0.7, 3.0)   # Hz, 42-180 bpm
WINDOW_SECONDS = 1.6
_TINY = 1e-9


@dataclass
class TraceMatrix:
    rgb: np.ndarray   # 3 x T
    fps: float

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 2 or self.rgb.shape[0] != 3:
            raise DataError(f"TraceMatrix needs a 3 x T array, got {self.rgb.shape}")
        if not np.isfinite(self.rgb).all():
            raise DataError("TraceMatrix contains non-finite values")
        if self.rgb.shape[1] < 2 * self.fps:
            raise DataError(f"need at least 2 s of signal, got {self.rgb.shape[1]} samples at {self.fps} fps")

    @classmethod
    def from_stmap(cls, stmap: np.ndarray, fps: float) -> "TraceMatrix":
        """Spatial mean over the STMap rows (rows x T x 3)."""
        return cls(np.asarray(stmap).mean(axis=0).T, fps)


def bandpass(x: np.ndarray, fps: float, band=HR_BAND, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass (forward-backward)."""
    sos = signal.butter(order, band, btype="band", fs=fps, output="sos")
    return signal.sosfiltfilt(sos, x, axis=-1)


def _normalized(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    sd = x.std()
    scale = max(1.0, float(np.abs(x).max()))
    if sd < _TINY * scale:
        raise ZeroVarianceError("extracted pulse has zero variance")
    return x / sd


def estimate_bvp_green(traces: TraceMatrix) -> np.ndarray:
    g = traces.rgb[1]
    if np.ptp(g) < _TINY * max(1.0, abs(g).max()):
        raise ZeroVarianceError("green channel is constant")
    return _normalized(bandpass(signal.detrend(g), traces.fps))


def _window_len(fps: float, n: int) -> int:
    return min(n, max(2, int(round(WINDOW_SECONDS * fps))))


def chrom_signal(traces: TraceMatrix) -> np.ndarray:
    """Raw CHROM overlap-add signal (before band-pass and normalization).

    Windows of 1.6 s with 50% overlap; each window is temporally normalized,
    projected to X = 3R - 2G and Y = 1.5R + G - 1.5B, combined as
    S = X - (std X / std Y) Y, Hann-weighted into the output and divided
    by the summed window weight.
    """
    rgb = traces.rgb
    n = rgb.shape[1]
    win = _window_len(traces.fps, n)
    hop = max(1, win // 2)
    starts = np.arange(0, n - win + 1, hop)
    if starts[-1] != n - win:
        starts = np.append(starts, n - win)
    hann = signal.get_window("hann", win)
    out = np.zeros(n)
    weight = np.zeros(n)
    used = 0
    for s in starts:
        c = rgb[:, s:s + win]
        mu = c.mean(axis=1, keepdims=True)
        if np.any(np.abs(mu) < _TINY) or np.any(np.ptp(c, axis=1) < _TINY * np.abs(mu[:, 0])):
            continue
        cn = c / mu
        x = 3 * cn[0] - 2 * cn[1]
        y = 1.5 * cn[0] + cn[1] - 1.5 * cn[2]
        sy = y.std()
        if sy < _TINY:
            continue
        seg = x - (x.std() / sy) * y
        out[s:s + win] += hann * (seg - seg.mean())
        weight[s:s + win] += hann
        used += 1
    if used == 0:
        raise ZeroVarianceError("CHROM: every window has a constant channel")
    return _unweight(out, weight)


def _unweight(out: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # edges are covered by fewer windows; divide out the accumulated weight
    floor = 1e-3 * weight.max()
    return np.where(weight > floor, out / np.maximum(weight, floor), 0.0)


def estimate_bvp_chrom(traces: TraceMatrix) -> np.ndarray:
    return _normalized(bandpass(chrom_signal(traces), traces.fps))


POS_PROJECTION = np.array([[0.0, 1.0, -1.0], [-2.0, 1.0, 1.0]])


def pos_signal(traces: TraceMatrix) -> np.ndarray:
    """Raw POS overlap-add signal; sliding 1.6 s window with unit step."""
    rgb = traces.rgb
    n = rgb.shape[1]
    win = _window_len(traces.fps, n)
    windows = sliding_window_view(rgb, win, axis=1).transpose(1, 0, 2)   # nw x 3 x win
    mu = windows.mean(axis=2, keepdims=True)
    ok = np.all(np.abs(mu[:, :, 0]) > _TINY, axis=1)
    cn = windows / np.where(np.abs(mu) > _TINY, mu, 1.0)
    s = np.einsum("ij,wjt->wit", POS_PROJECTION, cn)
    s1, s2 = s[:, 0], s[:, 1]
    sd1, sd2 = s1.std(axis=1), s2.std(axis=1)
    ok &= sd2 > _TINY
    alpha = np.where(ok, sd1 / np.where(ok, sd2, 1.0), 0.0)
    h = s1 + alpha[:, None] * s2
    h = h - h.mean(axis=1, keepdims=True)
    h[~ok] = 0.0
    if not ok.any() or np.abs(h).max() < _TINY:
        raise ZeroVarianceError("POS: projected signal vanishes in every window")
    out = np.zeros(n)
    weight = np.zeros(n)
    for w in np.flatnonzero(ok):
        out[w:w + win] += h[w]
        weight[w:w + win] += 1.0
    return _unweight(out, weight)


def estimate_bvp_pos(traces: TraceMatrix) -> np.ndarray:
    return _normalized(bandpass(pos_signal(traces), traces.fps))


EXTRACTORS = {
    "green": estimate_bvp_green,
    "chrom": estimate_bvp_chrom,
    "pos": estimate_bvp_pos,
}


def hr_spectrum(bvp: np.ndarray, fps: float) -> tuple[np.ndarray, np.ndarray]:
    """Welch PSD: Hann segments of 256 (or the whole signal if shorter), 50% overlap, zero-padded x4."""
    x = np.asarray(bvp, dtype=np.float64)
    nper = min(256, x.size)
    return signal.welch(x, fs=fps, window="hann", nperseg=nper, noverlap=nper // 2, nfft=4 * nper,
                        detrend="constant")


def estimate_hr_fft(bvp: np.ndarray, fps: float, band=HR_BAND, peak_ratio: float = 3.0) -> float:
    """Heart rate (bpm) at the dominant spectral peak inside ``band``.

    The peak must exceed ``peak_ratio`` times the median band power;
    ``peak_ratio=0`` reads the band maximum unconditionally.
    """
    x = np.asarray(bvp, dtype=np.float64)
    if x.size < 128:
        raise DataError(f"need at least 128 samples for HR readout, got {x.size}")
    if fps <= 6:
        raise DataError(f"fps must exceed 6, got {fps}")
    if not np.isfinite(x).all():
        raise DataError("non-finite BVP")
    freqs, power = hr_spectrum(x, fps)
    sel = (freqs >= band[0]) & (freqs <= band[1])
    p = power[sel]
    k = int(np.argmax(p))
    if peak_ratio > 0 and not p[k] > peak_ratio * np.median(p):
        raise NoSpectralPeakError(f"no band bin exceeds {peak_ratio:g}x the median band power")
    return float(freqs[sel][k] * 60.0)
