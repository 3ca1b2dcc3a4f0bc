"""Small STMap CNN with an HR regression head and a BVP reconstruction head.

Layout is NCHW throughout: an STMap batch ``(N, rows, T, 3)`` enters as
``(N, 3, rows, T)``.  Each stage is conv3x3 -> batch norm -> ReLU (plus an
optional residual branch); every stage output is kept for NEST extraction.
The BVP head averages the last stage over rows and decodes back to T
samples through blocks of conv, transposed conv and two convs.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndmath as nd
from .errors import ConfigError, FormatError, ShapeError, ZeroVarianceError
from .ndmath import Tensor


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stage_strides: tuple[tuple[int, int], ...] = ((1, 2), (2, 2), (2, 2), (2, 2))
    input_pool: tuple[int, int] = (1, 1)
    residual: bool = False
    bvp_channels: tuple[int, ...] = (64, 32, 16, 16)
    hr_offset: float = 40.0
    hr_scale: float = 140.0
    rows: int = 25
    t_samples: int = 256

    def __post_init__(self):
        conv = lambda v: tuple(tuple(int(a) for a in x) if isinstance(x, (list, tuple)) else int(x) for x in v)
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_strides", conv(self.stage_strides))
        object.__setattr__(self, "input_pool", tuple(int(p) for p in self.input_pool))
        object.__setattr__(self, "bvp_channels", tuple(int(c) for c in self.bvp_channels))
        if len(self.stage_channels) < 2:
            raise ConfigError("backbone needs at least 2 stages")
        if len(self.stage_strides) != len(self.stage_channels):
            raise ConfigError("stage_strides must match stage_channels in length")
        if len(self.bvp_channels) < 1:
            raise ConfigError("bvp head needs at least one block")
        if min(self.stage_channels) < 1 or min(self.bvp_channels) < 1:
            raise ConfigError("channel counts must be positive")
        if self.hr_scale <= 0:
            raise ConfigError("hr_scale must be positive")

    @property
    def bvp_head_blocks(self) -> int:
        return len(self.bvp_channels)

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """(C_j, H_j, W_j) per stage for the configured input size."""
        h, w = self.rows // self.input_pool[0], self.t_samples // self.input_pool[1]
        shapes = []
        for c, (sh, sw) in zip(self.stage_channels, self.stage_strides):
            h, w = (h - 1) // sh + 1, (w - 1) // sw + 1
            shapes.append((c, h, w))
        return shapes

    def upsample_factors(self) -> list[int]:
        """Time upsampling of each BVP block (2 while below T, else 1)."""
        w = self.feature_shapes()[-1][2]
        factors = []
        for _ in self.bvp_channels:
            f = 2 if w * 2 <= self.t_samples else 1
            factors.append(f)
            w *= f
        return factors

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass
class ForwardOutput:
    hr_pred: Tensor          # (N,) bpm
    hr_unit: Tensor          # (N,) normalized target units
    bvp_pred: Tensor         # (N, T)
    feature_maps: list[Tensor] = field(default_factory=list)   # per stage, (N, C_j, H_j, W_j)


class Backbone:
    """Parameters live in ``params`` (declaration order); BN running stats in ``buffers``."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        cin = 3
        for j, c in enumerate(config.stage_channels):
            self._conv(rng, f"stage{j}.conv", c, cin, 3, 3)
            self._bn(f"stage{j}.bn", c)
            if config.residual:
                self._conv(rng, f"stage{j}.conv2", c, c, 3, 3)
                self._bn(f"stage{j}.bn2", c)
                self._conv(rng, f"stage{j}.skip", c, cin, 1, 1)
            cin = c
        self._linear(rng, "hr_head", 1, cin)
        for b, c in enumerate(config.bvp_channels):
            self._conv(rng, f"bvp{b}.conv_in", c, cin, 1, 3)
            self._bn(f"bvp{b}.bn_in", c)
            self._add(f"bvp{b}.up.weight", _kaiming(rng, (c, c, 1, 2), c * 2))
            self._bn(f"bvp{b}.bn_up", c)
            for k in (1, 2):
                self._conv(rng, f"bvp{b}.conv{k}", c, c, 1, 3)
                self._bn(f"bvp{b}.bn{k}", c)
            cin = c
        self._conv(rng, "bvp_out", 1, cin, 1, 1)
        self._add("bvp_out.bias", np.zeros(1))

    # --- construction helpers --------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def _conv(self, rng, name, cout, cin, kh, kw):
        self._add(f"{name}.weight", _kaiming(rng, (cout, cin, kh, kw), cin * kh * kw))

    def _linear(self, rng, name, cout, cin):
        self._add(f"{name}.weight", _kaiming(rng, (cout, cin), cin))
        self._add(f"{name}.bias", np.zeros(cout))

    def _bn(self, name, c):
        self._add(f"{name}.gamma", np.ones(c))
        self._add(f"{name}.beta", np.zeros(c))
        self.buffers[f"{name}.mean"] = np.zeros(c)
        self.buffers[f"{name}.var"] = np.ones(c)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _bn_apply(self, x, name, training, relu=False):
        p = self.params
        return nd.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.buffers[f"{name}.mean"],
                             self.buffers[f"{name}.var"], training, relu=relu)

    # --- forward -----------------------------------------------------------
    def prepare(self, stmaps) -> np.ndarray:
        """STMaps (N, rows, T, 3) or one (rows, T, 3) -> pooled NCHW network input."""
        cfg = self.config
        x = stmaps.data if isinstance(stmaps, Tensor) else np.asarray(stmaps, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (cfg.rows, cfg.t_samples, 3):
            raise ShapeError(f"expected input (N, {cfg.rows}, {cfg.t_samples}, 3), got {x.shape}")
        return nd.avg_pool2d(Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2))), cfg.input_pool).data

    def input_shape(self) -> tuple[int, int, int]:
        cfg = self.config
        return 3, cfg.rows // cfg.input_pool[0], cfg.t_samples // cfg.input_pool[1]

    def forward(self, stmaps, training: bool = False, prepared: bool = False) -> ForwardOutput:
        """Run the network; ``prepared`` input comes from :meth:`prepare` (lets callers pool once)."""
        cfg, p = self.config, self.params
        if prepared:
            x = np.asarray(stmaps, dtype=np.float64)
            if x.ndim != 4 or x.shape[1:] != self.input_shape():
                raise ShapeError(f"prepared input must be (N, *{self.input_shape()}), got {x.shape}")
            h = Tensor(x)
        else:
            h = Tensor(self.prepare(stmaps))

        feats = []
        for j, stride in enumerate(cfg.stage_strides):
            y = nd.conv2d(h, p[f"stage{j}.conv.weight"], stride=stride, padding=1)
            if cfg.residual:
                y = self._bn_apply(y, f"stage{j}.bn", training, relu=True)
                y = nd.conv2d(y, p[f"stage{j}.conv2.weight"], padding=1)
                y = self._bn_apply(y, f"stage{j}.bn2", training)
                h = nd.relu(y + nd.conv2d(h, p[f"stage{j}.skip.weight"], stride=stride))
            else:
                h = self._bn_apply(y, f"stage{j}.bn", training, relu=True)
            feats.append(h)

        pooled = h.mean(axis=(2, 3))
        hr_unit = nd.linear(pooled, p["hr_head.weight"], p["hr_head.bias"]).reshape(-1)
        hr_pred = hr_unit * cfg.hr_scale + cfg.hr_offset

        z = h.mean(axis=2, keepdims=True)          # N, C, 1, W
        for b, f in enumerate(cfg.upsample_factors()):
            z = self._bn_apply(nd.conv2d(z, p[f"bvp{b}.conv_in.weight"], padding=(0, 1)),
                               f"bvp{b}.bn_in", training, relu=True)
            w_up = p[f"bvp{b}.up.weight"]
            if f == 1:
                w_up = w_up[:, :, :, :1]
            z = self._bn_apply(nd.conv_transpose2d(z, w_up, stride=(1, f)), f"bvp{b}.bn_up", training, relu=True)
            for k in (1, 2):
                z = self._bn_apply(nd.conv2d(z, p[f"bvp{b}.conv{k}.weight"], padding=(0, 1)),
                                   f"bvp{b}.bn{k}", training, relu=True)
        out = nd.conv2d(z, p["bvp_out.weight"], p["bvp_out.bias"])     # N, 1, 1, W
        bvp = nd.upsample_linear1d(out.reshape(out.shape[0], out.shape[-1]), cfg.t_samples)
        return ForwardOutput(hr_pred=hr_pred, hr_unit=hr_unit, bvp_pred=bvp, feature_maps=feats)

    __call__ = forward

    # --- state -------------------------------------------------------------
    def state_arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.params.values()] + list(self.buffers.values())

    def copy_state_from(self, other: "Backbone") -> None:
        for k, t in other.params.items():
            self.params[k].data = t.data.copy()
        for k, b in other.buffers.items():
            self.buffers[k][...] = b


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --- losses --------------------------------------------------------------

VAR_EPS = 1e-12


def pearson_loss(bvp_pred, bvp_gt) -> Tensor:
    """1 - Pearson correlation, averaged over rows for 2-D input.

    A constant ground truth is a precondition violation.  A constant
    prediction raises ``ZeroVarianceError`` for 1-D input; in a batch such
    rows contribute a constant 1 with no gradient.
    """
    pred = nd.as_tensor(bvp_pred)
    gt = np.asarray(bvp_gt.data if isinstance(bvp_gt, Tensor) else bvp_gt, dtype=np.float64)
    single = pred.ndim == 1
    if single:
        pred = pred.reshape(1, -1)
        gt = gt.reshape(1, -1)
    if pred.shape != gt.shape or pred.shape[1] < 2:
        raise ShapeError(f"pearson_loss: shapes {pred.shape} vs {gt.shape}")
    gc = gt - gt.mean(axis=1, keepdims=True)
    gnorm = np.sqrt((gc * gc).sum(axis=1))
    if np.any(gnorm < VAR_EPS):
        raise ZeroVarianceError("pearson_loss: constant ground truth")
    pvar = pred.data.var(axis=1)
    ok = pvar > VAR_EPS
    if not ok.all():
        if single:
            raise ZeroVarianceError("pearson_loss: constant prediction")
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            return Tensor(1.0)
        part = pearson_loss(pred[idx], gt[idx])
        return (part * idx.size + (pred.shape[0] - idx.size)) / pred.shape[0]
    pc = pred - pred.mean(axis=1, keepdims=True)
    r = (pc * (gc / gnorm[:, None])).sum(axis=1) / nd.norm(pc, axis=1)
    return 1.0 - r.mean()


def l1_hr_loss(hr_pred, hr_gt, config: ModelConfig = ModelConfig()) -> Tensor:
    """Mean |pred - gt| in normalized target units (bpm / hr_scale)."""
    pred = nd.as_tensor(hr_pred)
    gt = np.asarray(hr_gt, dtype=np.float64)
    return nd.tabs((pred - gt) / config.hr_scale).mean()


def to_unit(hr_bpm, config: ModelConfig = ModelConfig()):
    return (np.asarray(hr_bpm, dtype=np.float64) - config.hr_offset) / config.hr_scale


# --- checkpoint ----------------------------------------------------------

CKPT_MAGIC = b"NSTW"
CKPT_VERSION = 1


def save_checkpoint(path, model: Backbone) -> None:
    arrays = model.state_arrays()
    flat = np.concatenate([a.reshape(-1) for a in arrays]) if arrays else np.zeros(0)
    blob = b"".join([CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), model.config.digest(),
                     struct.pack("<Q", flat.size), flat.astype("<f8").tobytes()])
    Path(path).write_bytes(blob)


def load_checkpoint(path, config: ModelConfig) -> Backbone:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a weight checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if buf[8:40] != config.digest():
        raise FormatError(f"{path}: checkpoint was written for a different model config")
    (count,) = struct.unpack_from("<Q", buf, 40)
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=48)
    model = Backbone(config)
    pos = 0
    for t in model.params.values():
        t.data = flat[pos:pos + t.size].reshape(t.shape).copy()
        pos += t.size
    for b in model.buffers.values():
        b[...] = flat[pos:pos + b.size].reshape(b.shape)
        pos += b.size
    if pos != count or len(buf) != 48 + 8 * count:
        raise FormatError(f"{path}: checkpoint size does not match the model")
    return model
