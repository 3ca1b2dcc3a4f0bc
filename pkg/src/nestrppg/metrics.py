"""HR error statistics and HRV frequency-domain features."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

from .errors import ConstantIBIError, DataError, TooFewBeatsError

LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.40)
IBI_RESAMPLE_HZ = 4.0
MIN_BEATS = 20
MIN_SECONDS = 30.0


@dataclass
class HrReport:
    sd: float
    mae: float
    rmse: float
    r: float | None    # None when either series is constant
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HrvReport:
    lf_nu: float
    hf_nu: float
    lf_hf: float

    def to_dict(self) -> dict:
        return asdict(self)


def pearson(a: Sequence[float], b: Sequence[float]) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt((da * da).sum() * (db * db).sum())
    if den < 1e-300 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(np.clip((da * db).sum() / den, -1.0, 1.0))


def hr_metrics(pred: Sequence[float], gt: Sequence[float]) -> HrReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1 or pred.size == 0:
        raise DataError(f"hr_metrics needs equal non-empty 1-D inputs, got {pred.shape} and {gt.shape}")
    err = pred - gt
    return HrReport(sd=float(err.std()), mae=float(np.abs(err).mean()), rmse=float(np.sqrt((err * err).mean())),
                    r=pearson(pred, gt), n=int(err.size))


def detect_beats(bvp: np.ndarray, fps: float) -> np.ndarray:
    """Peak times in seconds, refined by parabolic interpolation around each local maximum."""
    x = np.asarray(bvp, dtype=np.float64)
    x = x - x.mean()
    distance = max(1, int(np.floor(fps * 60.0 / 180.0)))
    peaks, _ = signal.find_peaks(x, distance=distance, prominence=0.3 * x.std())
    inner = peaks[(peaks > 0) & (peaks < x.size - 1)]
    y0, y1, y2 = x[inner - 1], x[inner], x[inner + 1]
    den = y0 - 2 * y1 + y2
    shift = np.where(np.abs(den) > 1e-12, 0.5 * (y0 - y2) / np.where(den == 0, 1.0, den), 0.0)
    times = peaks.astype(np.float64)
    times[np.isin(peaks, inner)] += np.clip(shift, -0.5, 0.5)
    return times / fps


def _band_power(freqs: np.ndarray, psd: np.ndarray, band) -> float:
    sel = (freqs >= band[0]) & (freqs < band[1])
    return float(np.trapezoid(psd[sel], freqs[sel])) if sel.sum() > 1 else float(psd[sel].sum())


def hrv_from_beats(beat_times: np.ndarray) -> HrvReport:
    beat_times = np.asarray(beat_times, dtype=np.float64)
    if beat_times.size < MIN_BEATS:
        raise TooFewBeatsError(f"{beat_times.size} beats detected, need {MIN_BEATS}")
    ibi = np.diff(beat_times)
    if ibi.var() < 1e-10:
        raise ConstantIBIError("inter-beat intervals are constant")
    t = beat_times[1:]
    grid = np.arange(t[0], t[-1], 1.0 / IBI_RESAMPLE_HZ)
    series = CubicSpline(t, ibi)(grid)
    nper = min(256, series.size)
    freqs, psd = signal.welch(series - series.mean(), fs=IBI_RESAMPLE_HZ, window="hann", nperseg=nper,
                              noverlap=nper // 2, detrend="linear")
    lf = _band_power(freqs, psd, LF_BAND)
    hf = _band_power(freqs, psd, HF_BAND)
    total = lf + hf
    if total <= 0:
        raise ConstantIBIError("no IBI power in the LF/HF bands")
    lf_nu = lf / total
    hf_nu = hf / total
    return HrvReport(lf_nu=lf_nu, hf_nu=hf_nu, lf_hf=lf / hf if hf > 0 else float("inf"))


def hrv_features(bvp: np.ndarray, fps: float) -> HrvReport:
    """LF/HF in normalized units from the beats of a BVP trace (>= 30 s)."""
    bvp = np.asarray(bvp, dtype=np.float64)
    if bvp.size < MIN_SECONDS * fps:
        raise DataError(f"HRV needs >= {MIN_SECONDS:g} s of signal, got {bvp.size / fps:.1f} s")
    return hrv_from_beats(detect_beats(bvp, fps))
