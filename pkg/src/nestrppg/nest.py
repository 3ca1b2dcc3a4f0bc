"""Neuron-structure (NEST) representation and its regularizers.

A sample's NEST representation is, for every selected layer, the spatial
mean of each channel's activation min-max normalized across channels; the
concatenation over layers is the vector the losses compare.  Three
regularizers act on a batch of such vectors:

* coverage maximization (``loss_cm``) lifts the small normalized singular
  values of each layer's batch matrix;
* targeted alignment (``loss_ta``) pulls each sample towards a prototype
  extrapolated to its label from label-nearest batch neighbours;
* diversity maximization (``loss_dm``) is a contrastive term between each
  sample and the augmented twins of the batch.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ndmath as nd
from .errors import BatchTooSmallError, ConfigError, DegenerateBatchError, ShapeError
from .ndmath import Tensor

MINMAX_EPS = 1e-12
LABEL_EPS = 1e-6     # bpm; neighbours this close to their centre are dropped from the direction term
ZERO_NORM = 1e-12


@dataclass(frozen=True)
class LossWeights:
    k1: float = 1.0
    k2: float = 0.1
    k3: float = 0.001
    k4: float = 0.1
    k5: float = 0.01
    rho: float = 0.1
    sigma: float = 5.0
    tau: float = 0.2
    K: int = 8

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "k4", "k5", "rho", "sigma", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"loss weight {name} must be positive")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K must be a positive integer")

    def check_channels(self, channels: Sequence[int]) -> None:
        if not self.rho < min(channels):
            raise ConfigError(f"rho={self.rho} must be below the smallest layer width {min(channels)}")


@dataclass
class NestRep:
    per_layer: list[np.ndarray]

    @property
    def concat(self) -> np.ndarray:
        return np.concatenate(self.per_layer)


@dataclass
class BatchNest:
    """N samples' NEST vectors, stored per layer as differentiable N x C_j matrices."""
    layers: list[Tensor]
    labels: np.ndarray
    domains: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.layers = [nd.as_tensor(m) for m in self.layers]
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        n = {m.shape[0] for m in self.layers}
        if len(n) != 1 or self.labels.size != n.pop():
            raise ShapeError("BatchNest: layer matrices and labels disagree on batch size")

    @property
    def n(self) -> int:
        return self.labels.size

    def layer_matrix(self, j: int) -> Tensor:
        return self.layers[j]

    @property
    def concat(self) -> Tensor:
        return self.layers[0] if len(self.layers) == 1 else nd.concat(self.layers, axis=1)

    @property
    def reps(self) -> list[NestRep]:
        return [NestRep([m.data[i].copy() for m in self.layers]) for i in range(self.n)]

    def select(self, layers: Sequence[int]) -> "BatchNest":
        return BatchNest([self.layers[j] for j in layers], self.labels, self.domains)


# --- representation -------------------------------------------------------

def minmax_channels(pooled: Tensor) -> Tensor:
    """Row-wise min-max over channels of an (N, C) tensor; constant rows -> 0."""
    lo = pooled.min(axis=1, keepdims=True)
    hi = pooled.max(axis=1, keepdims=True)
    span = hi - lo
    flat = span.data < MINMAX_EPS
    if flat.any():
        safe = nd.where(flat, 1.0, span)
        return nd.where(np.broadcast_to(flat, pooled.shape), 0.0, (pooled - lo) / safe)
    return (pooled - lo) / span


def batch_nest(feature_maps: Sequence[Tensor], labels, domains: Sequence[str] = (),
               layers: Sequence[int] | None = None) -> BatchNest:
    """NEST of a batch from per-stage (N, C, H, W) maps; ``layers`` picks a subset of stages."""
    idx = range(len(feature_maps)) if layers is None else layers
    mats = []
    for j in idx:
        m = nd.as_tensor(feature_maps[j])
        if m.ndim != 4:
            raise ShapeError(f"feature map {j} must be (N, C, H, W), got {m.shape}")
        mats.append(minmax_channels(m.mean(axis=(2, 3))))
    if not mats:
        raise ConfigError("no NEST layers selected")
    return BatchNest(mats, labels, list(domains))


def extract_nest(feature_maps: Sequence) -> NestRep:
    """NEST of one sample from per-layer maps laid out (W, H, C)."""
    if len(feature_maps) < 1:
        raise ConfigError("extract_nest needs at least one feature map")
    per_layer = []
    for m in feature_maps:
        m = nd.as_tensor(m)
        if m.ndim != 3:
            raise ShapeError(f"single-sample map must be (W, H, C), got {m.shape}")
        pooled = m.mean(axis=(0, 1)).reshape(1, -1)
        per_layer.append(minmax_channels(pooled).data[0])
    return NestRep(per_layer)


# --- coverage maximization -------------------------------------------------

def loss_cm(batch, rho: float = 0.1) -> Tensor:
    """Minus the mass of normalized singular values below rho / C_j, averaged over layers.

    ``batch`` is a :class:`BatchNest` or a sequence of N x C_j matrices.
    Singular values are normalized to sum to one, so the printed ratio's
    denominator is 1.
    """
    layers = batch.layers if isinstance(batch, BatchNest) else [nd.as_tensor(m) for m in batch]
    terms = []
    for j, b in enumerate(layers):
        n, c = b.shape
        if n <= c:
            raise BatchTooSmallError(f"loss_cm: layer {j} has {c} channels but the batch has only {n} samples")
        s = nd.singular_values(b)
        total = s.data.sum()
        if total < MINMAX_EPS:
            terms.append(Tensor(0.0))
            continue
        lam = s / s.sum()
        below = lam.data < rho / c
        terms.append(-(lam * below).sum() if below.any() else Tensor(0.0) * lam.sum())
    return nd.stack(terms).mean()


def count_below_threshold(matrix, rho: float) -> int:
    s = nd.svd(matrix).singular_values
    c = np.shape(matrix)[1]
    return int(np.sum(s / s.sum() < rho / c))


# --- targeted alignment ----------------------------------------------------

def _gauss(x: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-x * x / (2 * sigma * sigma)) / np.sqrt(2 * np.pi)


def prototype_coefficients(labels, K: int, sigma: float) -> np.ndarray:
    """N x N matrix P with prototype_i = sum_m P[i, m] O_m.

    Row i uses the K samples nearest to label y_i (excluding i itself, ties
    broken by index): centre plus Gaussian-weighted label-scaled directions.
    """
    y = np.asarray(labels, dtype=np.float64)
    n = y.size
    if K > n - 1:
        raise BatchTooSmallError(f"K={K} needs at least {K + 1} samples, batch has {n}")
    dist = np.abs(y[None, :] - y[:, None])
    np.fill_diagonal(dist, np.inf)
    sel = np.argsort(dist, axis=1, kind="stable")[:, :K]     # stable sort: ties go to the lower index
    ys = y[sel]
    ybar = ys.mean(axis=1, keepdims=True)
    d = ys - ybar
    keep = np.abs(d) >= LABEL_EPS
    w = np.where(keep, _gauss(d, sigma), 0.0)
    wsum = w.sum(axis=1, keepdims=True)
    w = np.divide(w, wsum, out=np.zeros_like(w), where=wsum > 0)
    scale = w * (y[:, None] - ybar) / np.where(keep, d, 1.0)
    rows = np.arange(n)[:, None]
    coef = np.zeros((n, n))
    coef[rows, sel] = 1.0 / K + scale - scale.sum(axis=1, keepdims=True) / K
    return coef


def synth_prototype(target_index: int, batch: BatchNest, K: int = 8, sigma: float = 5.0) -> NestRep:
    if K > batch.n - 1:
        raise BatchTooSmallError(f"K={K} needs at least {K + 1} samples, batch has {batch.n}")
    row = prototype_coefficients(batch.labels, K, sigma)[target_index]
    return NestRep([row @ m.data for m in batch.layers])


def loss_ta(batch: BatchNest, K: int = 8, sigma: float = 5.0, verbatim: bool = False,
            detach_prototype: bool = False, counter: Counter | None = None) -> Tensor:
    """Mean over samples of 1 - Cos(O_i, prototype_i) (or mean Cos if ``verbatim``).

    Samples whose representation or prototype has zero norm are skipped and
    counted under ``counter["ta_skipped"]``.
    """
    coef = prototype_coefficients(batch.labels, K, sigma)
    reps = batch.concat
    source = reps.detach() if detach_prototype else reps
    proto = Tensor(coef) @ source
    ok = (np.linalg.norm(reps.data, axis=1) >= ZERO_NORM) & (np.linalg.norm(proto.data, axis=1) >= ZERO_NORM)
    skipped = int((~ok).sum())
    if counter is not None and skipped:
        counter["ta_skipped"] += skipped
    if not ok.any():
        raise DegenerateBatchError("loss_ta: every sample has a zero-norm representation or prototype")
    if skipped:
        keep = np.flatnonzero(ok)
        reps, proto = reps[keep], proto[keep]
    cos = nd.cosine_rows(reps, proto)
    return cos.mean() if verbatim else 1.0 - cos.mean()


# --- diversity maximization ------------------------------------------------

def loss_dm(batch: BatchNest, augmented: BatchNest, tau: float = 0.2, include_positive: bool = False,
            counter: Counter | None = None) -> Tensor:
    """Contrastive term: -log(exp(Cos(O_i, Ô_i)/tau) / sum_{j != i} exp(Cos(O_i, Ô_j)/tau)), averaged.

    ``include_positive`` adds j = i to the denominator (standard InfoNCE).
    """
    a, b = batch.concat, augmented.concat
    if a.shape != b.shape:
        raise ShapeError("loss_dm: batch and augmented batch differ in shape")
    ok = (np.linalg.norm(a.data, axis=1) >= ZERO_NORM) & (np.linalg.norm(b.data, axis=1) >= ZERO_NORM)
    if not ok.all():
        if counter is not None:
            counter["dm_skipped"] += int((~ok).sum())
        keep = np.flatnonzero(ok)
        a, b = a[keep], b[keep]
    n = a.shape[0]
    if n < 2:
        raise BatchTooSmallError("loss_dm needs at least 2 samples")
    logits = nd.cosine_matrix(a, b) / tau
    positive = logits[np.arange(n), np.arange(n)]
    mask = None if include_positive else ~np.eye(n, dtype=bool)
    return (nd.logsumexp(logits, axis=1, mask=mask) - positive).mean()


# --- schedule and composite ------------------------------------------------

def adaptation_factor(iter_current: int, iter_total: int, corrected: bool = True) -> float:
    """Ramp 2 / (1 + exp(-10 r)) with r = iter_current / iter_total; minus 1 when ``corrected``."""
    if iter_total <= 0 or not 0 <= iter_current <= iter_total:
        raise ConfigError(f"need 0 <= iter_current <= iter_total and iter_total > 0, got {iter_current}/{iter_total}")
    r = iter_current / iter_total
    g = 2.0 / (1.0 + np.exp(-10.0 * r))
    return float(g - 1.0) if corrected else float(g)


def loss_overall(lp, l1, cm, ta, dm, weights: LossWeights = LossWeights(), gamma: float = 1.0,
                 use_lp: bool = True):
    """k1 Lp + gamma (k2 L1 + k3 CM + k4 TA + k5 DM); Lp dropped when ``use_lp`` is false."""
    if gamma < 0:
        raise ConfigError("gamma must be nonnegative")
    reg = weights.k2 * l1 + weights.k3 * cm + weights.k4 * ta + weights.k5 * dm
    return (weights.k1 * lp if use_lp else 0.0) + gamma * reg
