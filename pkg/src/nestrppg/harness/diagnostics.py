"""Post-training probes of the NEST space.

``basis_gaps`` measures how far a target domain drifts from the source
domains along each singular direction of the source NEST matrix.
``label_curve`` traces how NEST similarity to an anchor heart rate decays
as the label moves away from it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import ndmath as nd
from ..backbone import Backbone
from ..errors import BatchTooSmallError, DataError
from ..nest import batch_nest
from .config import ExperimentConfig
from .data import PreparedData

_CHUNK = 256


def nest_reps(model: Backbone, inputs: np.ndarray, layers=None) -> list[np.ndarray]:
    """Eval-mode NEST matrices (one N x C_j array per layer) for pooled inputs."""
    parts = []
    with nd.no_grad():
        for a in range(0, inputs.shape[0], _CHUNK):
            out = model.forward(inputs[a:a + _CHUNK], training=False, prepared=True)
            b = batch_nest(out.feature_maps, np.zeros(min(_CHUNK, inputs.shape[0] - a)), layers=layers)
            parts.append([m.data for m in b.layers])
    return [np.concatenate([p[j] for p in parts]) for j in range(len(parts[0]))]


@dataclass
class BasisGaps:
    singular_values: np.ndarray   # descending
    gaps: np.ndarray              # |mean_source - mean_target| along each right singular vector

    @property
    def lowest_exceeds_highest(self) -> bool:
        return bool(self.gaps[-1] > self.gaps[0])

    def to_dict(self) -> dict:
        return {"singular_values": [float(v) for v in self.singular_values], "gaps": [float(v) for v in self.gaps]}


def basis_gaps(source: np.ndarray, target: np.ndarray) -> BasisGaps:
    """Project both sets onto the right singular vectors of ``source`` and compare means.

    Only directions with a numerically nonzero singular value are kept
    (the matrix-rank tolerance), so the result can be shorter than C.
    """
    source, target = np.asarray(source, dtype=float), np.asarray(target, dtype=float)
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise DataError(f"incompatible NEST matrices {source.shape} and {target.shape}")
    n, c = source.shape
    if n < c or target.shape[0] == 0:
        raise BatchTooSmallError(f"source batch of {n} is smaller than the channel count {c}")
    _, s, vt = np.linalg.svd(source, full_matrices=False)
    # directions with a zero singular value (dead channels) are an arbitrary null-space basis
    keep = s > s[0] * max(n, c) * np.finfo(float).eps if s[0] > 0 else np.zeros(s.size, bool)
    if not keep.any():
        raise DataError("source NEST matrix is zero")
    s, vt = s[keep], vt[keep]
    gaps = np.abs(source.mean(axis=0) @ vt.T - target.mean(axis=0) @ vt.T)
    return BasisGaps(singular_values=s, gaps=gaps)


def run_basis_gap_diagnostic(config: ExperimentConfig, model: Backbone, data: PreparedData,
                             target_domain: str | None = None) -> BasisGaps:
    """Basis gaps of the deepest NEST layer between all source samples and the target domain."""
    target = target_domain or config.target_domain
    if target is None:
        raise DataError("the basis-gap diagnostic needs a target domain")
    src = [d for d in config.sources if d != target]
    last = [config.layers[-1]]
    s = nest_reps(model, data.inputs[data.indices(src)], last)[0]
    t = nest_reps(model, data.inputs[data.indices([target])], last)[0]
    return basis_gaps(s, t)


@dataclass
class LabelCurve:
    anchor: float
    width: float
    centers: list[float]
    correlation: list[float | None]   # None marks an empty bin
    pairs: list[int]

    def roughness(self) -> float:
        """Mean |difference| between adjacent bins that both hold a value."""
        steps = [abs(b - a) for a, b in zip(self.correlation, self.correlation[1:]) if a is not None and b is not None]
        if not steps:
            raise DataError("label curve has no adjacent populated bins")
        return float(np.mean(steps))

    def to_dict(self) -> dict:
        return {"anchor": self.anchor, "width": self.width, "centers": list(self.centers),
                "correlation": list(self.correlation), "pairs": list(self.pairs)}


def label_curve(reps: np.ndarray, hr: np.ndarray, anchor: float = 60.0, width: float = 5.0,
                hr_range: tuple[float, float] | None = None) -> LabelCurve:
    """Mean Pearson correlation between anchor-bin reps and the reps of each ``width``-bpm bin."""
    reps, hr = np.asarray(reps, dtype=float), np.asarray(hr, dtype=float)
    if reps.shape[0] != hr.size:
        raise DataError("one label per representation required")
    lo, hi = hr_range if hr_range is not None else (hr.min(), hr.max())
    half = width / 2
    k_lo = int(np.ceil((lo - anchor) / width - 1e-9))
    k_hi = int(np.floor((hi - anchor) / width + 1e-9))
    centers = [anchor + k * width for k in range(k_lo, k_hi + 1)]
    member = lambda c: np.flatnonzero((hr >= c - half) & (hr < c + half))
    anchors = member(anchor)
    if anchors.size == 0:
        raise DataError(f"no samples within {half} bpm of the anchor {anchor}")
    with np.errstate(invalid="ignore", divide="ignore"):
        corr_mat = np.corrcoef(reps)   # zero-variance rows give nan and are skipped
    out, pairs = [], []
    for c in centers:
        idx = member(c)
        vals = [corr_mat[i, j] for i in anchors for j in idx if i != j and np.isfinite(corr_mat[i, j])]
        out.append(float(np.mean(vals)) if vals else None)
        pairs.append(len(vals))
    return LabelCurve(anchor=anchor, width=width, centers=[float(c) for c in centers], correlation=out, pairs=pairs)


def run_label_curve_diagnostic(config: ExperimentConfig, model: Backbone, data: PreparedData,
                               anchor_hr: float = 60.0, domains=None, width: float = 5.0) -> LabelCurve:
    """Label-correlation curve over the NEST reps (all layers concatenated) of ``domains`` (default: sources)."""
    idx = data.indices(config.sources if domains is None else domains)
    reps = np.concatenate(nest_reps(model, data.inputs[idx], config.layers), axis=1)
    return label_curve(reps, data.hr[idx], anchor_hr, width, config.hr_range)


# names used by the diagnose command's --kind choices
run_fig3_diagnostic = run_basis_gap_diagnostic
run_fig5_diagnostic = run_label_curve_diagnostic
