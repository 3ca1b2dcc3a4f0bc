"""Declarative experiment description, loaded from a single JSON document."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..backbone import ModelConfig
from ..errors import BatchTooSmallError, ConfigError
from ..nest import LossWeights
from ..synthdata import PRESET_DOMAINS, DomainSpec

PROTOCOLS = ("msdg", "ssdg", "intra_kfold")
TERMS = ("cm", "ta", "dm")
GAMMA_MODES = ("verbatim", "corrected")
SAMPLING = ("pooled", "balanced")
HR_SOURCES = ("auto", "bvp", "hr_head")


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "msdg"
    domains: tuple[DomainSpec, ...] = ()
    target_domain: str | None = None
    source_domains: tuple[str, ...] | None = None   # default: every domain except the target
    folds: int = 5
    model: ModelConfig = ModelConfig()
    weights: LossWeights = LossWeights()
    ablation: frozenset = frozenset()
    nest_layers: tuple[int, ...] | None = None       # default: every stage
    batch_size: int = 160
    iterations: int = 2000
    lr: float = 1e-3
    seed: int = 0
    data_seed: int | None = None                     # default: seed
    gamma_mode: str = "corrected"
    ta_verbatim: bool = False
    dm_include_positive: bool = False
    detach_prototype: bool = False
    sampling: str = "pooled"
    # data
    n_per_domain: int = 400
    hr_range: tuple[float, float] = (48.0, 150.0)
    slide_margin: int = 10
    # augmentation
    aug_prob: float = 0.5
    aug_variants: int = 4
    color_jitter: float = 0.1
    blur_width: int = 3
    # evaluation
    hr_source: str = "auto"
    hrv_recordings: int = 4
    hrv_seconds: float = 40.0
    hrv_hop: int = 64
    curve_every: int = 1

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)
        set_("domains", tuple(d if isinstance(d, DomainSpec) else resolve_domain(d) for d in self.domains))
        if isinstance(self.model, dict):
            set_("model", ModelConfig.from_dict(self.model))
        if isinstance(self.weights, dict):
            set_("weights", _weights(self.weights))
        set_("ablation", frozenset(self.ablation))
        set_("hr_range", tuple(float(v) for v in self.hr_range))
        if self.source_domains is not None:
            set_("source_domains", tuple(self.source_domains))
        if self.nest_layers is not None:
            set_("nest_layers", tuple(int(j) for j in self.nest_layers))
        self.validate()

    # --- derived ----------------------------------------------------------
    @property
    def domain_ids(self) -> list[str]:
        return [d.id for d in self.domains]

    @property
    def sources(self) -> list[str]:
        if self.protocol == "intra_kfold":
            return self.domain_ids
        if self.source_domains is not None:
            return list(self.source_domains)
        return [d for d in self.domain_ids if d != self.target_domain]

    @property
    def layers(self) -> list[int]:
        return list(range(len(self.model.stage_channels))) if self.nest_layers is None else list(self.nest_layers)

    @property
    def generator_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def domain(self, domain_id: str) -> DomainSpec:
        return {d.id: d for d in self.domains}[domain_id]

    # --- checks -----------------------------------------------------------
    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        ids = self.domain_ids
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate domain ids: {ids}")
        if not ids:
            raise ConfigError("no domains configured")
        if self.protocol in ("msdg", "ssdg"):
            if self.target_domain not in ids:
                raise ConfigError(f"target_domain {self.target_domain!r} is not among the domains {ids}")
            src = self.sources
            unknown = set(src) - set(ids)
            if unknown:
                raise ConfigError(f"unknown source domains: {sorted(unknown)}")
            if self.target_domain in src:
                raise ConfigError("target_domain must not be a source domain")
            if self.protocol == "msdg" and len(src) < 2:
                raise ConfigError("msdg needs at least 2 source domains")
            if self.protocol == "ssdg" and len(src) != 1:
                raise ConfigError("ssdg needs exactly 1 source domain")
        else:
            if self.folds < 2:
                raise ConfigError("intra_kfold needs folds >= 2")
            if self.n_per_domain < self.folds:
                raise ConfigError("n_per_domain must be at least the number of folds")
        bad = set(self.ablation) - set(TERMS)
        if bad:
            raise ConfigError(f"ablation may only name {TERMS}, got {sorted(bad)}")
        if self.gamma_mode not in GAMMA_MODES:
            raise ConfigError(f"gamma_mode must be one of {GAMMA_MODES}")
        if self.sampling not in SAMPLING:
            raise ConfigError(f"sampling must be one of {SAMPLING}")
        if self.hr_source not in HR_SOURCES:
            raise ConfigError(f"hr_source must be one of {HR_SOURCES}")
        n_stages = len(self.model.stage_channels)
        if not self.layers or any(not 0 <= j < n_stages for j in self.layers):
            raise ConfigError(f"nest_layers must index stages 0..{n_stages - 1}")
        widths = [self.model.stage_channels[j] for j in self.layers]
        self.weights.check_channels(widths)
        if self.batch_size <= max(widths):
            raise BatchTooSmallError(f"batch_size {self.batch_size} must exceed the widest NEST layer ({max(widths)})")
        if "ta" not in self.ablation and self.weights.K > self.batch_size - 1:
            raise BatchTooSmallError(f"K={self.weights.K} needs batch_size >= {self.weights.K + 1}")
        if self.iterations < 1 or self.lr <= 0:
            raise ConfigError("iterations must be >= 1 and lr > 0")
        lo, hi = self.hr_range
        if not 42.0 <= lo < hi <= 180.0:
            raise ConfigError("hr_range must lie within [42, 180] bpm")
        if self.n_per_domain < 1 or self.slide_margin < 0 or self.aug_variants < 1:
            raise ConfigError("n_per_domain, aug_variants must be >= 1 and slide_margin >= 0")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ConfigError("aug_prob must lie in [0, 1]")
        if self.color_jitter < 0 or self.blur_width < 0:
            raise ConfigError("color_jitter and blur_width must be >= 0")
        if self.hrv_recordings < 0 or self.hrv_hop < 1 or self.curve_every < 1:
            raise ConfigError("hrv_recordings >= 0, hrv_hop >= 1 and curve_every >= 1 required")

    # --- (de)serialization -------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "domains":
                v = [d.to_dict() for d in v]
            elif f.name == "model":
                v = v.to_dict()
            elif f.name == "weights":
                v = asdict(v)
            elif f.name == "ablation":
                v = sorted(v)
            out[f.name] = v
        return json.loads(json.dumps(out))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def resolve_domain(d) -> DomainSpec:
    if isinstance(d, str):
        if d not in PRESET_DOMAINS:
            raise ConfigError(f"unknown preset domain {d!r}; presets: {sorted(PRESET_DOMAINS)}")
        return PRESET_DOMAINS[d]
    return DomainSpec.from_dict(d)


def _weights(d: dict) -> LossWeights:
    unknown = set(d) - {f.name for f in fields(LossWeights)}
    if unknown:
        raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
    return LossWeights(**d)
