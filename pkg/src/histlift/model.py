"""Full lifting network: embedding, stacked layers with history wiring,
regression head, loss, and parameter/MAC accounting.

The forward pass keeps tokens flattened as (batch, frames*joints, channels);
the history pool stores (batch, frames, joints, channels) entries. Closed-form
parameter and MAC counts mirror the executed ops exactly, so they can be
cross-checked against runtime enumeration.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as ht
from .errors import BadMagicError, ConfigError, NumericError, ShapeError, TruncatedError, VersionError
from .hpa import HistoryPool, hpa_inject, select_extent
from .lpa import default_token_counts, lpa_apply
from .rng import derive_rng
from .stlayer import (
    ParallelLayerParams,
    SequentialLayerParams,
    _ones,
    _proj,
    _zeros,
    sequential_layer,
    st_parallel_layer,
)
from .tensor import Tensor

DW_WIDTH = 3

ORDERINGS = ("parallel", "sequential", "hybrid")
HPA_MODES = ("add", "replace")
HPA_EXTENTS = ("all", "first_m", "last_m")

# depth / hidden size / input frames per published variant
VARIANT_PRESETS = {
    "S": dict(layers=26, channels=64, frames=81),
    "B": dict(layers=16, channels=128, frames=243),
    "L": dict(layers=26, channels=128, frames=243),
}


@dataclass
class ModelConfig:
    layers: int = 16
    channels: int = 128
    frames: int = 243
    joints: int = 17
    heads: int = 8
    e_temporal: int = 0  # 0 = derive from frames
    e_spatial: int = 0   # 0 = derive from joints
    hpa_enabled: bool = True
    lpa_enabled: bool = True
    ordering: str = "parallel"
    hpa_mode: str = "add"
    hpa_extent: str = "all"
    hpa_extent_m: int = 2
    ffn_ratio: int = 4
    head_ratio: int = 2
    output_scale: float = 300.0
    velocity_weight: float = 20.0
    rms_eps: float = 1e-6
    dropout: float = 0.0

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in VARIANT_PRESETS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANT_PRESETS)}")
        merged = dict(VARIANT_PRESETS[name])
        merged.update(overrides)
        return cls(**merged)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown model config field(s): {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> "ModelConfig":
        """Copy with derived token counts materialized."""
        cfg = ModelConfig(**self.to_dict())
        e_t, e_s = default_token_counts(cfg.frames, cfg.joints)
        if cfg.e_temporal == 0:
            cfg.e_temporal = e_t
        if cfg.e_spatial == 0:
            cfg.e_spatial = e_s
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.layers < 0:
            raise ConfigError(f"layer count must be >= 0, got {self.layers}")
        if self.heads % 2 != 0 or self.heads < 2:
            raise ConfigError(f"head count must be even and >= 2, got {self.heads}")
        if self.channels % self.heads != 0 or self.channels % 2 != 0:
            raise ConfigError(
                f"channels {self.channels} must be even and divisible by heads {self.heads}")
        if self.frames < 1 or self.joints < 1:
            raise ConfigError("frames and joints must be positive")
        if self.e_temporal and not 1 <= self.e_temporal <= self.frames:
            raise ConfigError(f"e_temporal {self.e_temporal} not in [1, {self.frames}]")
        if self.e_spatial and not 1 <= self.e_spatial <= self.joints:
            raise ConfigError(f"e_spatial {self.e_spatial} not in [1, {self.joints}]")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        if self.hpa_mode not in HPA_MODES:
            raise ConfigError(f"hpa_mode must be one of {HPA_MODES}, got {self.hpa_mode!r}")
        if self.hpa_extent not in HPA_EXTENTS:
            raise ConfigError(f"hpa_extent must be one of {HPA_EXTENTS}, got {self.hpa_extent!r}")
        if self.hpa_extent != "all" and self.hpa_extent_m < 1:
            raise ConfigError("hpa_extent_m must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.output_scale <= 0:
            raise ConfigError(f"output_scale must be positive, got {self.output_scale}")

    def layer_kind(self, index: int) -> str:
        """Layer type at 1-based depth ``index`` under the configured ordering."""
        if self.ordering == "parallel":
            return "parallel"
        if self.ordering == "sequential":
            return "sequential"
        return "sequential" if index % 2 == 1 else "parallel"

    def history_size_at(self, index: int) -> int:
        """Pool entries visible to the layer at 1-based depth ``index``."""
        full = index + 1  # embedding plus layers 1..index
        if self.hpa_extent == "all":
            return full
        return min(self.hpa_extent_m, full)


@dataclass
class Diagnostics:
    """Per-forward records: layer output features and history mix weights."""

    layer_outputs: list = field(default_factory=list)   # (B, T, J, C) arrays, embed first
    history_weights: list = field(default_factory=list)  # (pool, B, T, J) arrays per layer


class PoseLifter:
    """2D-to-3D sequence lifting network.

    float64 by default; float32 is supported for training speed while the
    test and oracle suites stay pinned to float64.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        cfg = config.resolved()
        self.config = cfg
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ConfigError(f"dtype must be float32 or float64, got {dtype}")
        C, T, J = cfg.channels, cfg.frames, cfg.joints
        rng = derive_rng(seed, "init")

        self.embed_w = _proj(rng, (3, C), self.dtype)
        self.embed_b = _zeros((C,), self.dtype)
        self.pos_joint = _zeros((J, C), self.dtype)
        self.pos_frame = _zeros((T, C), self.dtype)

        self.layer_params = []
        self.pseudo_queries = []
        for index in range(1, cfg.layers + 1):
            kind = cfg.layer_kind(index)
            cls = ParallelLayerParams if kind == "parallel" else SequentialLayerParams
            self.layer_params.append(
                cls.init(C, cfg.heads, cfg.ffn_ratio, rng, DW_WIDTH, self.dtype))
            if cfg.hpa_enabled:
                self.pseudo_queries.append(
                    Tensor(np.zeros(C, dtype=self.dtype), requires_grad=True))

        hid = cfg.head_ratio * C
        self.head_gain = _ones(C, self.dtype)
        self.head_w1 = _proj(rng, (C, hid), self.dtype)
        self.head_b1 = _zeros((hid,), self.dtype)
        self.head_w2 = _proj(rng, (hid, 3), self.dtype)
        self.head_b2 = _zeros((3,), self.dtype)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        out = [
            ("embed.w", self.embed_w),
            ("embed.b", self.embed_b),
            ("embed.pos_joint", self.pos_joint),
            ("embed.pos_frame", self.pos_frame),
        ]
        for i, params in enumerate(self.layer_params, start=1):
            out.extend(params.named_tensors(f"layer{i}."))
            if self.config.hpa_enabled:
                out.append((f"layer{i}.pseudo_query", self.pseudo_queries[i - 1]))
        out.extend([
            ("head.gain", self.head_gain),
            ("head.w1", self.head_w1),
            ("head.b1", self.head_b1),
            ("head.w2", self.head_w2),
            ("head.b2", self.head_b2),
        ])
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    # -- forward ------------------------------------------------------------

    def embed(self, seq2d) -> Tensor:
        """(B, T, J, 3) normalized keypoints+confidence -> (B, T*J, C) tokens."""
        cfg = self.config
        x = seq2d if isinstance(seq2d, Tensor) else Tensor(np.asarray(seq2d, dtype=self.dtype))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.shape[1:] != (cfg.frames, cfg.joints, 3):
            raise ShapeError(
                f"input shape {x.shape[1:]} != ({cfg.frames}, {cfg.joints}, 3)")
        batch = x.shape[0]
        tokens = x.reshape(batch, cfg.frames * cfg.joints, 3) @ self.embed_w + self.embed_b
        grid = tokens.reshape(batch, cfg.frames, cfg.joints, cfg.channels)
        grid = grid + self.pos_joint + self.pos_frame.reshape(cfg.frames, 1, cfg.channels)
        return grid.reshape(batch, cfg.frames * cfg.joints, cfg.channels)

    def forward(self, seq2d, train_mode: bool = False, rng=None):
        """Lift a batch of 2D sequences; returns (pred (B,T,J,3), Diagnostics)."""
        cfg = self.config
        T, J, C = cfg.frames, cfg.joints, cfg.channels
        drop_p = cfg.dropout if train_mode else 0.0
        if drop_p > 0 and rng is None:
            raise ConfigError("dropout needs an rng in train mode")

        h = self.embed(seq2d)
        batch = h.shape[0]
        diag = Diagnostics()
        diag.layer_outputs.append(h.data.reshape(batch, T, J, C))

        use_pool = cfg.hpa_enabled or cfg.lpa_enabled
        pool = HistoryPool()
        if use_pool:
            pool.push(h.reshape(batch, T, J, C))

        prev = h
        for index in range(1, cfg.layers + 1):
            params = self.layer_params[index - 1]
            layer_fn = st_parallel_layer if isinstance(params, ParallelLayerParams) else sequential_layer
            out, branches = layer_fn(
                prev, params, T, J, eps=cfg.rms_eps,
                need_branches=cfg.lpa_enabled, drop_p=drop_p, rng=rng)
            if not np.all(np.isfinite(out.data)):
                raise NumericError(f"non-finite activation after layer {index}")
            diag.layer_outputs.append(out.data.reshape(batch, T, J, C))

            if use_pool:
                entry = lpa_apply(out, branches, T, J, cfg.e_temporal, cfg.e_spatial,
                                  enabled=cfg.lpa_enabled)
                pool.push(entry)
            if cfg.hpa_enabled:
                entries = select_extent(pool.entries, cfg.hpa_extent, cfg.hpa_extent_m)
                grid = out.reshape(batch, T, J, C)
                mixed, weights = hpa_inject(
                    grid, entries, self.pseudo_queries[index - 1],
                    mode=cfg.hpa_mode, eps=cfg.rms_eps, return_weights=True)
                diag.history_weights.append(weights.data)
                prev = mixed.reshape(batch, T * J, C)
            else:
                prev = out

        hn = ht.rms_norm(prev, axis=-1, eps=cfg.rms_eps, gain=self.head_gain)
        mid = (hn @ self.head_w1 + self.head_b1).gelu()
        out = (mid @ self.head_w2 + self.head_b2) * cfg.output_scale
        return out.reshape(batch, T, J, 3), diag

    def loss(self, pred: Tensor, target) -> Tensor:
        """Mean per-joint distance plus weighted velocity-difference term."""
        cfg = self.config
        tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=self.dtype))
        if pred.shape != tgt.shape:
            raise ShapeError(f"pred {pred.shape} vs target {tgt.shape}")
        diff = pred - tgt
        position = diff.pow(2.0).sum(axis=-1).sqrt().mean()
        frames = pred.shape[1]
        if frames < 2:
            return position
        vel_pred = pred.narrow(1, 1, frames - 1) - pred.narrow(1, 0, frames - 1)
        vel_tgt = tgt.narrow(1, 1, frames - 1) - tgt.narrow(1, 0, frames - 1)
        velocity = (vel_pred - vel_tgt).pow(2.0).sum(axis=-1).sqrt().mean()
        return position + cfg.velocity_weight * velocity


# -- accounting -----------------------------------------------------------------


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count; equals runtime enumeration exactly."""
    cfg = config.resolved()
    C, T, J, K, N = cfg.channels, cfg.frames, cfg.joints, cfg.heads, cfg.layers
    dk = C // K
    half = C // 2
    hid = cfg.ffn_ratio * C
    head_hid = cfg.head_ratio * C

    total = 3 * C + C + J * C + T * C
    for index in range(1, N + 1):
        ffn = C * hid + hid + hid * C + C
        if cfg.layer_kind(index) == "parallel":
            total += 2 * C                       # norm gains
            total += 3 * K * C * dk              # per-head q/k/v
            total += 2 * half * DW_WIDTH         # branch conv kernels
            total += C * C                       # output projection
        else:
            total += 3 * C
            total += 2 * 3 * (K // 2) * C * dk   # per-sublayer q/k/v
            total += 2 * half * DW_WIDTH
            total += 2 * half * C                # per-sublayer out projections
        total += ffn
        if cfg.hpa_enabled:
            total += C                           # pseudo-query
    total += C + C * head_hid + head_hid + head_hid * 3 + 3
    return total


def count_macs(config: ModelConfig) -> int:
    """Closed-form multiply-accumulate count for one forward sample.

    Counts matmul and depthwise-conv kernels only, mirroring the runtime
    counter; normalization, softmax, pooling and elementwise work are free.
    """
    cfg = config.resolved()
    C, T, J, K = cfg.channels, cfg.frames, cfg.joints, cfg.heads
    dk = C // K
    half = C // 2
    hid = cfg.ffn_ratio * C
    tj = T * J

    total = tj * 3 * C
    for index in range(1, cfg.layers + 1):
        total += 3 * tj * C * C                    # q/k/v projections
        total += 2 * (K // 2) * J * T * T * dk     # temporal attention
        total += 2 * (K // 2) * T * J * J * dk     # spatial attention
        total += 2 * tj * half * DW_WIDTH          # conv bias, both branches
        total += tj * C * C                        # output projection(s)
        total += 2 * tj * C * hid                  # ffn
        if cfg.lpa_enabled:
            total += 4 * cfg.e_temporal * tj * half + 4 * cfg.e_spatial * tj * half
        if cfg.hpa_enabled:
            total += cfg.history_size_at(index) * tj * C
    total += tj * C * (cfg.head_ratio * C) + tj * (cfg.head_ratio * C) * 3
    return total


def enumerate_params(model: PoseLifter) -> int:
    return sum(t.data.size for t in model.parameters())


def measure_macs(model: PoseLifter) -> int:
    """Run one single-sample forward under the MAC counter."""
    cfg = model.config
    x = np.zeros((1, cfg.frames, cfg.joints, 3))
    with ht.no_grad(), ht.count_macs_scope() as counter:
        model.forward(x)
    return counter.total


# -- HPKC checkpoint format ------------------------------------------------------

_HPKC_MAGIC = b"HPKC"
_HPKC_VERSION = 1


def save_checkpoint(path, model: PoseLifter, meta: dict | None = None,
                    extra_tensors: dict | None = None) -> None:
    """Write config + named tensors; round-trips bit-identically."""
    block = {
        "format_version": _HPKC_VERSION,
        "model": model.config.to_dict(),
        "dtype": model.dtype.name,
        "meta": meta or {},
    }
    payload = json.dumps(block, sort_keys=True).encode("utf-8")
    named = list(model.named_parameters())
    named.extend(sorted((extra_tensors or {}).items()))
    with open(path, "wb") as fh:
        fh.write(_HPKC_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(named)))
        for name, tensor in named:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            ht.write_tensor(fh, tensor)


def read_checkpoint(path):
    """Return (config block dict, {name: array})."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) < 4:
            raise TruncatedError("HPKC: file ended inside header")
        if magic != _HPKC_MAGIC:
            raise BadMagicError(f"HPKC: bad magic {magic!r}")
        raw = fh.read(4)
        if len(raw) < 4:
            raise TruncatedError("HPKC: file ended inside header")
        (json_len,) = struct.unpack("<I", raw)
        payload = fh.read(json_len)
        if len(payload) < json_len:
            raise TruncatedError("HPKC: file ended inside config block")
        block = json.loads(payload.decode("utf-8"))
        if block.get("format_version") != _HPKC_VERSION:
            raise VersionError(f"HPKC: unsupported version {block.get('format_version')}")
        raw = fh.read(4)
        if len(raw) < 4:
            raise TruncatedError("HPKC: file ended before tensor table")
        (count,) = struct.unpack("<I", raw)
        tensors = {}
        for _ in range(count):
            raw = fh.read(4)
            if len(raw) < 4:
                raise TruncatedError("HPKC: file ended inside tensor table")
            (name_len,) = struct.unpack("<I", raw)
            name = fh.read(name_len)
            if len(name) < name_len:
                raise TruncatedError("HPKC: file ended inside tensor name")
            tensors[name.decode("utf-8")] = ht.read_tensor(fh)
    return block, tensors


def load_checkpoint(path):
    """Rebuild a PoseLifter from a checkpoint; returns (model, meta, extras)."""
    block, tensors = read_checkpoint(path)
    config = ModelConfig.from_dict(block["model"])
    model = PoseLifter(config, seed=0, dtype=np.dtype(block.get("dtype", "float64")))
    extras = dict(tensors)
    for name, param in model.named_parameters():
        if name not in extras:
            raise VersionError(f"HPKC: missing tensor {name!r}")
        stored = extras.pop(name)
        if stored.shape != param.data.shape:
            raise ShapeError(f"HPKC: tensor {name!r} shape {stored.shape} != {param.data.shape}")
        param.data = stored.astype(param.data.dtype, copy=False)
    return model, block.get("meta", {}), extras
