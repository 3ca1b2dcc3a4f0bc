"""Training loop with the scheduled composite objective and the DG protocols."""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .. import ndmath as nd
from ..backbone import Backbone, l1_hr_loss, pearson_loss
from ..classical import estimate_hr_fft
from ..errors import ConstantIBIError, DataError, NoSpectralPeakError, TooFewBeatsError
from ..metrics import HrReport, hr_metrics, hrv_features
from ..nest import adaptation_factor, batch_nest, loss_cm, loss_dm, loss_overall, loss_ta
from ..synthdata import FPS, crop, gen_sample, sample_seed, standardize
from .config import ExperimentConfig
from .data import PreparedData, build_samples, jitter_pooled, prepare

TERM_NAMES = ("lp", "l1", "cm", "ta", "dm")
CURVE_COLUMNS = ("fold", "iteration", "gamma", "total") + TERM_NAMES
_TRAIN_TAG = 0x7EA1
_HRV_TAG = 0x44B7
_EVAL_CHUNK = 256


@dataclass
class StepBatch:
    index: np.ndarray       # dataset indices of the base samples
    inputs: np.ndarray      # (2N, 3, h, w): base then twin
    bvp: np.ndarray         # (2N, T)
    hr: np.ndarray          # (2N,)
    has_bvp: np.ndarray     # (2N,)


class Trainer:
    """One model trained on ``train_idx`` of a prepared dataset."""

    def __init__(self, config: ExperimentConfig, data: PreparedData, train_idx, model_seed: int | None = None,
                 stream: int = 0):
        self.config = config
        self.data = data
        self.train_idx = np.asarray(train_idx)
        if self.train_idx.size < config.batch_size:
            raise DataError(f"{self.train_idx.size} training samples cannot fill a batch of {config.batch_size}")
        missing = [int(i) for i in self.train_idx if int(i) not in data.bank]
        if missing:
            raise DataError(f"{len(missing)} training samples have no augmentation bank")
        self.allowed = set(data.domain[self.train_idx])
        self.model = Backbone(config.model, seed=config.seed if model_seed is None else model_seed)
        self.params = list(self.model.params.values())
        self.adam = nd.AdamState.for_params(self.params, lr=config.lr)
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, _TRAIN_TAG, stream]))
        self.counter: Counter = Counter()

    # --- batches -----------------------------------------------------------
    def sample_batch(self) -> StepBatch:
        cfg, data, rng = self.config, self.data, self.rng
        n = cfg.batch_size
        if cfg.sampling == "pooled":
            idx = rng.choice(self.train_idx, size=n, replace=False)
        else:
            groups = [self.train_idx[data.domain[self.train_idx] == d] for d in sorted(self.allowed)]
            share = np.full(len(groups), n // len(groups))
            share[: n - share.sum()] += 1
            idx = np.concatenate([rng.choice(g, size=k, replace=False) for g, k in zip(groups, share)])
        self.check_provenance(idx)
        pick = rng.integers(0, cfg.aug_variants, size=n)
        twin = np.stack([data.bank[int(i)][0][v] for i, v in zip(idx, pick)])
        twin = jitter_pooled(twin, cfg.color_jitter, cfg.aug_prob, rng)
        twin_bvp = np.stack([data.bank[int(i)][1][v] for i, v in zip(idx, pick)])
        return StepBatch(index=idx, inputs=np.concatenate([data.inputs[idx], twin]),
                         bvp=np.concatenate([data.bvp[idx], twin_bvp]),
                         hr=np.concatenate([data.hr[idx], data.hr[idx]]),
                         has_bvp=np.concatenate([data.has_bvp[idx], data.has_bvp[idx]]))

    def check_provenance(self, idx: np.ndarray) -> None:
        """Every sample in a batch must come from the training split; target data never reaches an update."""
        doms = set(self.data.domain[idx])
        if not doms <= self.allowed or not np.isin(idx, self.train_idx).all():
            raise DataError(f"batch contains samples outside the training split: {sorted(doms - self.allowed)}")
        target = self.config.target_domain if self.config.protocol != "intra_kfold" else None
        if target is not None and target in doms:
            raise DataError(f"target domain {target!r} leaked into a training batch")
        self.counter["batches_checked"] += 1

    # --- objective ---------------------------------------------------------
    def gamma(self, iteration: int) -> float:
        return adaptation_factor(iteration, self.config.iterations, self.config.gamma_mode == "corrected")

    def loss_terms(self, batch: StepBatch, terms=TERM_NAMES) -> dict:
        """Differentiable loss terms for ``batch``; terms not requested are omitted."""
        cfg, w = self.config, self.config.weights
        n = cfg.batch_size
        out = self.model.forward(batch.inputs, training=True, prepared=True)
        res = {}
        if "lp" in terms and batch.has_bvp.any():
            keep = np.flatnonzero(batch.has_bvp)
            pred = out.bvp_pred if keep.size == batch.has_bvp.size else out.bvp_pred[keep]
            res["lp"] = pearson_loss(pred, batch.bvp[keep])
        if "l1" in terms:
            res["l1"] = l1_hr_loss(out.hr_pred, batch.hr, cfg.model)
        if any(t in terms for t in ("cm", "ta", "dm")):
            base = batch_nest([m[:n] for m in out.feature_maps], batch.hr[:n], layers=cfg.layers)
            if "cm" in terms:
                res["cm"] = loss_cm(base, w.rho)
            if "ta" in terms:
                res["ta"] = loss_ta(base, w.K, w.sigma, verbatim=cfg.ta_verbatim,
                                    detach_prototype=cfg.detach_prototype, counter=self.counter)
            if "dm" in terms:
                twin = batch_nest([m[n:] for m in out.feature_maps], batch.hr[n:], layers=cfg.layers)
                res["dm"] = loss_dm(base, twin, w.tau, include_positive=cfg.dm_include_positive,
                                    counter=self.counter)
        return res

    def active_terms(self) -> tuple[str, ...]:
        return tuple(t for t in TERM_NAMES if t not in self.config.ablation)

    def objective(self, parts: dict, gamma: float):
        zero = 0.0
        return loss_overall(parts.get("lp", zero), parts.get("l1", zero), parts.get("cm", zero),
                            parts.get("ta", zero), parts.get("dm", zero), self.config.weights, gamma,
                            use_lp="lp" in parts)

    def step(self, iteration: int, batch: StepBatch | None = None) -> dict:
        batch = self.sample_batch() if batch is None else batch
        gamma = self.gamma(iteration)
        parts = self.loss_terms(batch, self.active_terms())
        total = self.objective(parts, gamma)
        for p in self.params:
            p.grad = None
        total.backward()
        nd.adam_step(self.params, [p.grad for p in self.params], self.adam)
        rec = {"iteration": iteration, "gamma": gamma, "total": total.item()}
        rec.update({t: (parts[t].item() if t in parts else 0.0) for t in TERM_NAMES})
        return rec

    def fit(self, fold: int = 0) -> list[dict]:
        curves = []
        every = self.config.curve_every
        for it in range(self.config.iterations):
            rec = self.step(it)
            if it % every == 0 or it == self.config.iterations - 1:
                curves.append({"fold": fold, **rec})
        return curves


# --- evaluation ------------------------------------------------------------

def predict(model: Backbone, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """HR-head bpm and BVP predictions in evaluation mode."""
    hrs, bvps = [], []
    with nd.no_grad():
        for a in range(0, inputs.shape[0], _EVAL_CHUNK):
            out = model.forward(inputs[a:a + _EVAL_CHUNK], training=False, prepared=True)
            hrs.append(out.hr_pred.data)
            bvps.append(out.bvp_pred.data)
    return np.concatenate(hrs), np.concatenate(bvps)


def hr_from_predictions(hr_head: np.ndarray, bvp: np.ndarray, use_bvp: bool, fps: float,
                        counter: Counter) -> np.ndarray:
    if not use_bvp:
        return hr_head.copy()
    out = np.empty_like(hr_head)
    for i in range(hr_head.size):
        try:
            out[i] = estimate_hr_fft(bvp[i], fps)
        except NoSpectralPeakError:
            out[i] = hr_head[i]
            counter["hr_head_fallback"] += 1
    return out


def uses_bvp(config: ExperimentConfig, domain_id: str) -> bool:
    if config.hr_source == "auto":
        return config.domain(domain_id).has_bvp_labels
    return config.hr_source == "bvp"


@dataclass
class TargetResult:
    domain: str
    hr: HrReport
    hr_source: str
    predictions: list[float]
    truths: list[float]
    hrv: dict[str, HrReport] = field(default_factory=dict)    # feature -> error statistics
    hrv_rows: list[dict] = field(default_factory=list)         # per recording, predicted and true features

    def to_dict(self) -> dict:
        return {"domain": self.domain, "hr": self.hr.to_dict(), "hr_source": self.hr_source,
                "predictions": list(self.predictions), "truths": list(self.truths),
                "hrv": {k: v.to_dict() for k, v in self.hrv.items()}, "hrv_rows": list(self.hrv_rows)}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetResult":
        return cls(domain=d["domain"], hr=HrReport(**d["hr"]), hr_source=d["hr_source"],
                   predictions=list(d["predictions"]), truths=list(d["truths"]),
                   hrv={k: HrReport(**v) for k, v in d["hrv"].items()}, hrv_rows=list(d["hrv_rows"]))


HRV_FEATURES = ("lf_nu", "hf_nu", "lf_hf")


def hrv_recording(config: ExperimentConfig, domain_id: str, k: int):
    """Long recording with random LF and HF modulation of the beat intervals."""
    rng = np.random.default_rng(sample_seed(config.generator_seed + _HRV_TAG, domain_id, k))
    hr = float(rng.uniform(*config.hr_range))
    mod = [(float(rng.uniform(0.05, 0.14)), float(rng.uniform(0.01, 0.06))),
           (float(rng.uniform(0.17, 0.37)), float(rng.uniform(0.01, 0.06)))]
    frames = int(round(config.hrv_seconds * FPS))
    return gen_sample(hr, config.domain(domain_id), config.model.rows, frames,
                      seed=int(rng.integers(2**63)), ibi_modulation=mod)


def predict_long_bvp(model: Backbone, sample, hop: int) -> np.ndarray:
    """Sliding-window BVP over a long recording, Hann-weighted overlap-add of standardized windows."""
    T = model.config.t_samples
    L = sample.length
    starts = list(range(0, L - T + 1, hop))
    if starts[-1] != L - T:
        starts.append(L - T)
    windows = np.stack([crop(sample, s, T).stmap for s in starts])
    _, bvp = predict(model, model.prepare(windows))
    weight = np.hanning(T + 2)[1:-1]
    acc, norm = np.zeros(L), np.zeros(L)
    for s, b in zip(starts, standardize(bvp)):
        acc[s:s + T] += weight * b
        norm[s:s + T] += weight
    return acc / norm


def evaluate_hrv(config: ExperimentConfig, model: Backbone, domain_id: str, counter: Counter):
    rows = []
    for k in range(config.hrv_recordings):
        rec = hrv_recording(config, domain_id, k)
        try:
            truth = hrv_features(rec.bvp, rec.fps)
            pred = hrv_features(predict_long_bvp(model, rec, config.hrv_hop), rec.fps)
        except (TooFewBeatsError, ConstantIBIError):
            counter["hrv_recordings_skipped"] += 1
            continue
        row = {"recording": k}
        row.update({f"pred_{f}": getattr(pred, f) for f in HRV_FEATURES})
        row.update({f"true_{f}": getattr(truth, f) for f in HRV_FEATURES})
        rows.append(row)
    stats = {}
    if rows:
        for f in HRV_FEATURES:
            stats[f] = hr_metrics([r[f"pred_{f}"] for r in rows], [r[f"true_{f}"] for r in rows])
    return stats, rows


def evaluate_target(config: ExperimentConfig, model: Backbone, data: PreparedData, idx: np.ndarray,
                    domain_id: str, counter: Counter, with_hrv: bool = True) -> TargetResult:
    hr_head, bvp = predict(model, data.inputs[idx])
    bvp_mode = uses_bvp(config, domain_id)
    preds = hr_from_predictions(hr_head, bvp, bvp_mode, data.samples[int(idx[0])].fps, counter)
    truths = data.hr[idx]
    res = TargetResult(domain=domain_id, hr=hr_metrics(preds, truths), hr_source="bvp" if bvp_mode else "hr_head",
                       predictions=[float(v) for v in preds], truths=[float(v) for v in truths])
    if with_hrv and config.domain(domain_id).has_bvp_labels and config.hrv_recordings > 0:
        res.hrv, res.hrv_rows = evaluate_hrv(config, model, domain_id, counter)
    return res


# --- report ----------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    seed: int
    targets: dict[str, TargetResult]
    curves: list[dict]
    counters: dict
    wall_clock: float = 0.0          # seconds; kept out of exported files so they stay reproducible
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "seed": self.seed,
                "targets": {k: v.to_dict() for k, v in sorted(self.targets.items())},
                "curves": self.curves, "counters": dict(sorted(self.counters.items())),
                "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(config=d["config"], seed=d["seed"],
                   targets={k: TargetResult.from_dict(v) for k, v in d["targets"].items()},
                   curves=list(d["curves"]), counters=dict(d["counters"]), diagnostics=dict(d.get("diagnostics", {})))

    def target_mae(self, domain_id: str | None = None) -> float:
        key = domain_id if domain_id is not None else next(iter(sorted(self.targets)))
        return self.targets[key].hr.mae


@dataclass
class TrainedRun:
    report: RunReport
    models: dict[str, Backbone]    # "final" for msdg/ssdg; "<domain>/fold<k>" for intra_kfold
    data: PreparedData


def load_data(config: ExperimentConfig, workers: int = 1, bank_domains=None) -> PreparedData:
    samples = build_samples(config, workers)
    probe = Backbone(config.model, seed=0)
    doms = config.sources if bank_domains is None else bank_domains
    bank_idx = [i for i, s in enumerate(samples) if s.domain_id in doms]
    return prepare(config, probe, samples, bank_idx)


def train_experiment(config: ExperimentConfig, workers: int = 1, data: PreparedData | None = None) -> TrainedRun:
    """Train and evaluate per the configured protocol."""
    start = time.perf_counter()
    data = load_data(config, workers) if data is None else data
    counter: Counter = Counter()
    curves: list[dict] = []
    targets: dict[str, TargetResult] = {}
    models: dict[str, Backbone] = {}
    if config.protocol in ("msdg", "ssdg"):
        trainer = Trainer(config, data, data.indices(config.sources))
        curves = trainer.fit()
        counter.update(trainer.counter)
        idx = data.indices([config.target_domain])
        targets[config.target_domain] = evaluate_target(config, trainer.model, data, idx, config.target_domain,
                                                        counter)
        models["final"] = trainer.model
    else:
        for d_i, dom in enumerate(config.domain_ids):
            local = data.indices([dom])
            folds = np.array_split(local, config.folds)
            preds, truths = np.empty(local.size), data.hr[local]
            for k, test in enumerate(folds):
                train = np.setdiff1d(local, test)
                trainer = Trainer(config, data, train, stream=d_i * config.folds + k)
                curves.extend({**r, "fold": f"{dom}/{k}"} for r in trainer.fit(k))
                counter.update(trainer.counter)
                r = evaluate_target(config, trainer.model, data, test, dom, counter, with_hrv=False)
                preds[np.isin(local, test)] = r.predictions
                models[f"{dom}/fold{k}"] = trainer.model
            targets[dom] = TargetResult(domain=dom, hr=hr_metrics(preds, truths),
                                        hr_source="bvp" if uses_bvp(config, dom) else "hr_head",
                                        predictions=[float(v) for v in preds], truths=[float(v) for v in truths])
    report = RunReport(config=config.to_dict(), seed=config.seed, targets=targets, curves=curves,
                       counters=dict(counter), wall_clock=time.perf_counter() - start)
    return TrainedRun(report=report, models=models, data=data)


def run_experiment(config: ExperimentConfig, workers: int = 1) -> RunReport:
    return train_experiment(config, workers).report
