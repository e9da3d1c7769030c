"""Parallel and sequential spatial-temporal transformer layers.

Tokens arrive flattened frame-major: row t*J + j holds joint j of frame t.
The parallel layer splits its heads evenly between a temporal branch
(attention per joint across frames) and a spatial branch (attention per
frame across joints), each with a depthwise-convolution positional bias on
the values. The sequential layer reorganizes the same parameter budget as
a spatial attention sublayer followed by a temporal one and is used as the
ablation baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as ht
from .errors import ConfigError
from .tensor import Tensor


def group_tokens(x: Tensor, branch: str, frames: int, joints: int) -> Tensor:
    """(.., T*J, d) -> (.., G, L, d); temporal groups per joint, spatial per frame."""
    lead = x.shape[:-2]
    d = x.shape[-1]
    y = x.reshape(*lead, frames, joints, d)
    if branch == "temporal":
        y = y.swapaxes(-3, -2)
    elif branch != "spatial":
        raise ConfigError(f"unknown branch {branch!r}")
    return y


def ungroup_tokens(x: Tensor, branch: str, frames: int, joints: int) -> Tensor:
    """Inverse of :func:`group_tokens`; bitwise round-trip."""
    if branch == "temporal":
        x = x.swapaxes(-3, -2)
    elif branch != "spatial":
        raise ConfigError(f"unknown branch {branch!r}")
    lead = x.shape[:-3]
    d = x.shape[-1]
    return x.reshape(*lead, frames * joints, d)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    The 1/sqrt(d) scale is folded into q before the logits matmul (queries
    are much smaller than the logit matrix).
    """
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    weights = ht.softmax((q * scale) @ k.swapaxes(-1, -2), axis=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def _merge_heads(x: Tensor) -> Tensor:
    """(.., H, N, d) -> (.., N, H*d), heads becoming channel blocks."""
    y = x.swapaxes(-3, -2)
    lead = y.shape[:-2]
    return y.reshape(*lead, y.shape[-2] * y.shape[-1])


def _conv_bias(v: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise conv along the group axis of (.., H, G, L, d) values.

    Heads are folded into channels so one (H*d, k) kernel covers the branch.
    """
    n = v.ndim
    perm = list(range(n))
    perm = perm[:-4] + [n - 3, n - 2, n - 4, n - 1]  # (.., G, L, H, d)
    y = v.transpose(perm)
    lead = y.shape[:-2]
    folded = y.reshape(*lead, y.shape[-2] * y.shape[-1])
    conv = ht.depthwise_conv1d(folded, kernel, axis=-2)
    back = conv.reshape(*y.shape)
    inv = list(range(n))
    inv = inv[:-4] + [n - 2, n - 4, n - 3, n - 1]  # undo the head fold
    return back.transpose(inv)


def branch_attention(q: Tensor, k: Tensor, v: Tensor, dw_kernel: Tensor,
                     branch: str, frames: int, joints: int) -> Tensor:
    """Grouped attention plus conv positional bias for one branch.

    q, k, v: (.., H, T*J, d); attention never crosses group boundaries.
    """
    qg = group_tokens(q, branch, frames, joints)
    kg = group_tokens(k, branch, frames, joints)
    vg = group_tokens(v, branch, frames, joints)
    out = scaled_dot_attention(qg, kg, vg) + _conv_bias(vg, dw_kernel)
    return ungroup_tokens(out, branch, frames, joints)


def _ensure_batch(x: Tensor):
    if x.ndim == 2:
        return x.reshape(1, *x.shape), False
    if x.ndim == 3:
        return x, True
    raise ConfigError(f"expected (T*J, C) or (B, T*J, C), got shape {x.shape}")


def _flatten_heads_weight(w: Tensor) -> Tensor:
    """(H, C, d) per-head weight -> (C, H*d) fused projection matrix."""
    heads, channels, d = w.shape
    return w.transpose((1, 0, 2)).reshape(channels, heads * d)


def project_heads(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor):
    """Project tokens into per-head q/k/v: (.., N, C) -> (.., H, N, d).

    The three per-head weight stacks are fused into one (C, 3*H*d) matmul;
    head k's slice equals x @ w[k] exactly.
    """
    x3, batched = _ensure_batch(x)
    heads, channels, d = w_q.shape
    if x3.shape[-1] != channels:
        raise ConfigError(f"channel mismatch: tokens {x3.shape[-1]} vs weight {channels}")
    fused = ht.concat([_flatten_heads_weight(w_q), _flatten_heads_weight(w_k),
                       _flatten_heads_weight(w_v)], axis=1)
    qkv = x3 @ fused
    batch, tokens = x3.shape[0], x3.shape[1]
    width = heads * d
    outs = []
    for role in range(3):
        part = qkv.narrow(-1, role * width, width)
        part = part.reshape(batch, tokens, heads, d).transpose((0, 2, 1, 3))
        if not batched:
            part = part.reshape(heads, tokens, d)
        outs.append(part)
    return tuple(outs)


def _ffn(x: Tensor, params, drop_p: float, rng) -> Tensor:
    hidden = (x @ params.w_ff1 + params.b_ff1).gelu()
    hidden = ht.dropout(hidden, drop_p, rng) if drop_p > 0 else hidden
    return hidden @ params.w_ff2 + params.b_ff2


@dataclass
class BranchFeatures:
    """Per-branch head projections of one layer, flattened to (B, T*J, C/2)."""

    q_temporal: Tensor
    k_temporal: Tensor
    v_temporal: Tensor
    q_spatial: Tensor
    k_spatial: Tensor
    v_spatial: Tensor


class _ParamMixin:
    def named_tensors(self, prefix: str = ""):
        return [(prefix + f.name, getattr(self, f.name)) for f in fields(self)]

    def tensors(self):
        return [t for _, t in self.named_tensors()]


@dataclass
class ParallelLayerParams(_ParamMixin):
    attn_gain: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    dw_temporal: Tensor
    dw_spatial: Tensor
    w_out: Tensor
    ffn_gain: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor

    @classmethod
    def init(cls, channels: int, heads: int, ffn_ratio: int, rng: np.random.Generator,
             dw_width: int = 3, dtype=np.float64):
        _validate_dims(channels, heads)
        dk = channels // heads
        half = channels // 2
        hid = ffn_ratio * channels
        return cls(
            attn_gain=_ones(channels, dtype),
            w_q=_proj(rng, (heads, channels, dk), dtype),
            w_k=_proj(rng, (heads, channels, dk), dtype),
            w_v=_proj(rng, (heads, channels, dk), dtype),
            dw_temporal=_zeros((half, dw_width), dtype),
            dw_spatial=_zeros((half, dw_width), dtype),
            w_out=_proj(rng, (channels, channels), dtype),
            ffn_gain=_ones(channels, dtype),
            w_ff1=_proj(rng, (channels, hid), dtype),
            b_ff1=_zeros((hid,), dtype),
            w_ff2=_proj(rng, (hid, channels), dtype),
            b_ff2=_zeros((channels,), dtype),
        )


@dataclass
class SequentialLayerParams(_ParamMixin):
    spatial_gain: Tensor
    sp_w_q: Tensor
    sp_w_k: Tensor
    sp_w_v: Tensor
    sp_dw: Tensor
    sp_w_out: Tensor
    temporal_gain: Tensor
    tm_w_q: Tensor
    tm_w_k: Tensor
    tm_w_v: Tensor
    tm_dw: Tensor
    tm_w_out: Tensor
    ffn_gain: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor

    @classmethod
    def init(cls, channels: int, heads: int, ffn_ratio: int, rng: np.random.Generator,
             dw_width: int = 3, dtype=np.float64):
        _validate_dims(channels, heads)
        dk = channels // heads
        half_heads = heads // 2
        half = channels // 2
        hid = ffn_ratio * channels

        def sub():
            return dict(
                w_q=_proj(rng, (half_heads, channels, dk), dtype),
                w_k=_proj(rng, (half_heads, channels, dk), dtype),
                w_v=_proj(rng, (half_heads, channels, dk), dtype),
                dw=_zeros((half, dw_width), dtype),
                w_out=_proj(rng, (half, channels), dtype),
            )

        sp, tm = sub(), sub()
        return cls(
            spatial_gain=_ones(channels, dtype),
            sp_w_q=sp["w_q"], sp_w_k=sp["w_k"], sp_w_v=sp["w_v"],
            sp_dw=sp["dw"], sp_w_out=sp["w_out"],
            temporal_gain=_ones(channels, dtype),
            tm_w_q=tm["w_q"], tm_w_k=tm["w_k"], tm_w_v=tm["w_v"],
            tm_dw=tm["dw"], tm_w_out=tm["w_out"],
            ffn_gain=_ones(channels, dtype),
            w_ff1=_proj(rng, (channels, hid), dtype),
            b_ff1=_zeros((hid,), dtype),
            w_ff2=_proj(rng, (hid, channels), dtype),
            b_ff2=_zeros((channels,), dtype),
        )


def _validate_dims(channels: int, heads: int) -> None:
    if heads % 2 != 0:
        raise ConfigError(f"head count must be even to split across branches, got {heads}")
    if channels % heads != 0:
        raise ConfigError(f"channels {channels} not divisible by heads {heads}")
    if channels % 2 != 0:
        raise ConfigError(f"channels must be even, got {channels}")


def _proj(rng, shape, dtype=np.float64):
    fan_in = shape[-2]
    return Tensor(rng.normal(0.0, fan_in ** -0.5, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(length, dtype=np.float64):
    return Tensor(np.ones(length, dtype=dtype), requires_grad=True)


def st_parallel_layer(x: Tensor, params: ParallelLayerParams, frames: int, joints: int,
                      eps: float = 1e-6, need_branches: bool = False,
                      drop_p: float = 0.0, rng=None):
    """One parallel layer: pre-norm grouped attention + pre-norm FFN.

    Returns (output, BranchFeatures | None); output shape matches input.
    """
    x3, batched = _ensure_batch(x)
    heads = params.w_q.shape[0]
    half_heads = heads // 2

    xn = ht.rms_norm(x3, axis=-1, eps=eps, gain=params.attn_gain)
    q, k, v = project_heads(xn, params.w_q, params.w_k, params.w_v)
    qt, qs = q.narrow(1, 0, half_heads), q.narrow(1, half_heads, half_heads)
    kt, ks = k.narrow(1, 0, half_heads), k.narrow(1, half_heads, half_heads)
    vt, vs = v.narrow(1, 0, half_heads), v.narrow(1, half_heads, half_heads)

    temporal = branch_attention(qt, kt, vt, params.dw_temporal, "temporal", frames, joints)
    spatial = branch_attention(qs, ks, vs, params.dw_spatial, "spatial", frames, joints)
    merged = _merge_heads(ht.concat([temporal, spatial], axis=1))
    attn_out = merged @ params.w_out
    attn_out = ht.dropout(attn_out, drop_p, rng) if drop_p > 0 else attn_out
    h = x3 + attn_out

    hn = ht.rms_norm(h, axis=-1, eps=eps, gain=params.ffn_gain)
    h = h + _ffn(hn, params, drop_p, rng)

    branches = None
    if need_branches:
        branches = BranchFeatures(
            q_temporal=_merge_heads(qt), k_temporal=_merge_heads(kt), v_temporal=_merge_heads(vt),
            q_spatial=_merge_heads(qs), k_spatial=_merge_heads(ks), v_spatial=_merge_heads(vs),
        )
    if not batched:
        h = h.reshape(*h.shape[1:])
    return h, branches


def _attention_sublayer(x: Tensor, gain: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                        dw_kernel: Tensor, w_out: Tensor, branch: str,
                        frames: int, joints: int, eps: float):
    xn = ht.rms_norm(x, axis=-1, eps=eps, gain=gain)
    q, k, v = project_heads(xn, w_q, w_k, w_v)
    att = branch_attention(q, k, v, dw_kernel, branch, frames, joints)
    return x + _merge_heads(att) @ w_out, (q, k, v)


def sequential_layer(x: Tensor, params: SequentialLayerParams, frames: int, joints: int,
                     eps: float = 1e-6, need_branches: bool = False,
                     drop_p: float = 0.0, rng=None):
    """Decoupled baseline: spatial sublayer, then temporal sublayer, then FFN."""
    x3, batched = _ensure_batch(x)
    h, (qs, ks, vs) = _attention_sublayer(
        x3, params.spatial_gain, params.sp_w_q, params.sp_w_k, params.sp_w_v,
        params.sp_dw, params.sp_w_out, "spatial", frames, joints, eps)
    h, (qt, kt, vt) = _attention_sublayer(
        h, params.temporal_gain, params.tm_w_q, params.tm_w_k, params.tm_w_v,
        params.tm_dw, params.tm_w_out, "temporal", frames, joints, eps)
    hn = ht.rms_norm(h, axis=-1, eps=eps, gain=params.ffn_gain)
    h = h + _ffn(hn, params, drop_p, rng)

    branches = None
    if need_branches:
        branches = BranchFeatures(
            q_temporal=_merge_heads(qt), k_temporal=_merge_heads(kt), v_temporal=_merge_heads(vt),
            q_spatial=_merge_heads(qs), k_spatial=_merge_heads(ks), v_spatial=_merge_heads(vs),
        )
    if not batched:
        h = h.reshape(*h.shape[1:])
    return h, branches
