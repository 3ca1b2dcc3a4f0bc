"""Dataset construction and per-run input preparation.

Samples are generated ``slide_margin`` frames longer than the network
window so the augmented twin can slide.  Inputs are pooled once up front;
for each source sample ``aug_variants`` augmented windows (slide, row
shuffle, blur, each with probability ``aug_prob``) are precomputed, and a
training step draws one of them and applies colour jitter on the pooled
input.  Jitter is a per-channel affine map, so it commutes exactly with
average pooling and with the blur.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..backbone import Backbone
from ..errors import DataError
from ..synthdata import STMapSample, blur, gen_domain_dataset, minmax_rows, shuffle_rows, standardize
from .config import ExperimentConfig

_CHUNK = 128
_BANK_TAG = 0xA116


@dataclass
class PreparedData:
    samples: list[STMapSample]
    inputs: np.ndarray        # (n, 3, h, w) pooled base windows
    bvp: np.ndarray           # (n, T) standardized ground truth of the base window
    hr: np.ndarray            # (n,)
    domain: np.ndarray        # (n,) domain ids
    has_bvp: np.ndarray       # (n,) whether the domain provides BVP labels
    bank: dict[int, tuple[np.ndarray, np.ndarray]]   # sample index -> (variants inputs, variants bvp)

    def indices(self, domains) -> np.ndarray:
        return np.flatnonzero(np.isin(self.domain, list(domains)))


def build_samples(config: ExperimentConfig, workers: int = 1) -> list[STMapSample]:
    cfg = config.model
    return gen_domain_dataset(config.domains, config.n_per_domain, config.hr_range, seed=config.generator_seed,
                              rois=cfg.rows, t_samples=cfg.t_samples + config.slide_margin, workers=workers)


def _windows(maps: np.ndarray, offsets: np.ndarray, length: int) -> np.ndarray:
    idx = offsets[:, None] + np.arange(length)
    return np.take_along_axis(maps, idx[:, None, :, None], axis=2)


def prepare(config: ExperimentConfig, model: Backbone, samples: list[STMapSample],
            bank_indices=None) -> PreparedData:
    """Pool the base windows of every sample and build the augmentation bank for ``bank_indices``."""
    T = config.model.t_samples
    if not samples:
        raise DataError("empty dataset")
    if any(s.length < T for s in samples):
        raise DataError(f"samples shorter than the {T}-frame window")
    has = {d.id: d.has_bvp_labels for d in config.domains}
    n = len(samples)
    inputs = np.empty((n,) + model.input_shape())
    bvp = np.empty((n, T))
    for a in range(0, n, _CHUNK):
        chunk = samples[a:a + _CHUNK]
        maps = np.stack([s.stmap[:, :T] for s in chunk])
        inputs[a:a + len(chunk)] = model.prepare(minmax_rows(maps))
        bvp[a:a + len(chunk)] = [standardize(s.bvp[:T]) for s in chunk]
    data = PreparedData(samples=samples, inputs=inputs, bvp=bvp,
                        hr=np.array([s.hr_bpm for s in samples]),
                        domain=np.array([s.domain_id for s in samples]),
                        has_bvp=np.array([has.get(s.domain_id, True) for s in samples]), bank={})
    if bank_indices is not None:
        data.bank = _augmentation_bank(config, model, samples, np.asarray(bank_indices))
    return data


def _augmentation_bank(config, model, samples, indices):
    T = config.model.t_samples
    p = config.aug_prob
    bank = {}
    for a in range(0, indices.size, _CHUNK):
        idx = indices[a:a + _CHUNK]
        maps = np.stack([samples[i].stmap for i in idx])
        bvps = np.stack([samples[i].bvp for i in idx])
        v_inputs, v_bvp = [], []
        for v in range(config.aug_variants):
            rng = np.random.default_rng(np.random.SeedSequence([config.generator_seed, _BANK_TAG, a, v]))
            margin = min(config.slide_margin, maps.shape[2] - T)
            slide = rng.random(idx.size) < p
            off = np.where(slide, rng.integers(1, margin + 1, idx.size) if margin > 0 else 0, 0)
            w = minmax_rows(_windows(maps, off, T))
            shuffle = rng.random(idx.size) < p
            if shuffle.any():
                w[shuffle] = shuffle_rows(w[shuffle], rng)
            soften = rng.random(idx.size) < p
            if soften.any() and config.blur_width > 1:
                w[soften] = blur(w[soften], config.blur_width)
            v_inputs.append(model.prepare(w))
            b = np.take_along_axis(bvps, off[:, None] + np.arange(T), axis=1)
            v_bvp.append(standardize(b))
        for k, i in enumerate(idx):
            bank[int(i)] = (np.stack([x[k] for x in v_inputs]), np.stack([x[k] for x in v_bvp]))
    return bank


def jitter_pooled(x: np.ndarray, mag: float, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Colour jitter (per-sample, per-channel gain and offset) on pooled NCHW input, applied with ``prob``."""
    n = x.shape[0]
    apply = rng.random(n) < prob
    gain = 1.0 + mag * rng.uniform(-1, 1, (n, 3))
    offset = 0.5 * mag * rng.uniform(-1, 1, (n, 3))
    gain[~apply], offset[~apply] = 1.0, 0.0
    return x * gain[:, :, None, None] + offset[:, :, None, None]
