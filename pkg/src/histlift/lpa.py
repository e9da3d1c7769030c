"""Layer Pose History Aggregation: restructure features before pooling.

Each branch's query tokens are compressed into a small set of global pose
tokens by adaptive pooling, the tokens are refined by cross-attention over
the branch's full key/value set, and every original token is re-expressed
against the refined tokens. The two branch outputs concatenate channel-wise
into the (T, J, C) feature stored in the history pool; token count never
changes, only the structure of the feature.
"""
from __future__ import annotations

from . import tensor as ht
from .errors import ConfigError
from .stlayer import BranchFeatures, _ensure_batch, scaled_dot_attention
from .tensor import Tensor


def make_global_tokens(q_flat: Tensor, branch: str, frames: int, joints: int,
                       token_count: int) -> Tensor:
    """Pool branch queries (.., T*J, C/2) down to (.., E, C/2) global tokens.

    The off-branch axis is reduced by averaging first (joints for the
    temporal branch, frames for the spatial branch), then the branch axis is
    adaptively pooled to ``token_count`` bins.
    """
    x, batched = _ensure_batch(q_flat)
    width = x.shape[-1]
    grid = x.reshape(x.shape[0], frames, joints, width)
    if branch == "temporal":
        reduced = grid.mean(axis=2)  # (B, T, C/2)
    elif branch == "spatial":
        reduced = grid.mean(axis=1)  # (B, J, C/2)
    else:
        raise ConfigError(f"unknown branch {branch!r}")
    tokens = ht.adaptive_avg_pool(reduced, axis=-2, out_size=token_count)
    if not batched:
        tokens = tokens.reshape(*tokens.shape[1:])
    return tokens


def refine_tokens(global_q: Tensor, k_flat: Tensor, v_flat: Tensor) -> Tensor:
    """Cross-attend global tokens over the branch's full key/value tokens."""
    return scaled_dot_attention(global_q, k_flat, v_flat)


def align_tokens(q_flat: Tensor, global_q: Tensor, refined: Tensor) -> Tensor:
    """Re-express every original token in the refined global-token space."""
    return scaled_dot_attention(q_flat, global_q, refined)


def _branch_restructure(q_flat, k_flat, v_flat, branch, frames, joints, token_count):
    tokens = make_global_tokens(q_flat, branch, frames, joints, token_count)
    refined = refine_tokens(tokens, k_flat, v_flat)
    return align_tokens(q_flat, tokens, refined)


def lpa_apply(feature: Tensor, branches: BranchFeatures | None, frames: int, joints: int,
              e_temporal: int, e_spatial: int, enabled: bool = True) -> Tensor:
    """Build the pool entry for one layer, shape (B, T, J, C).

    Disabled is an exact pass-through of ``feature``; enabled concatenates
    the restructured temporal and spatial halves along channels.
    """
    x, _ = _ensure_batch(feature)
    channels = x.shape[-1]
    if channels % 2 != 0:
        raise ConfigError(f"channel count must be even, got {channels}")
    if not enabled:
        return x.reshape(x.shape[0], frames, joints, channels)
    if branches is None:
        raise ConfigError("lpa_apply needs the layer's branch features when enabled")
    temporal = _branch_restructure(branches.q_temporal, branches.k_temporal,
                                   branches.v_temporal, "temporal", frames, joints,
                                   e_temporal)
    spatial = _branch_restructure(branches.q_spatial, branches.k_spatial,
                                  branches.v_spatial, "spatial", frames, joints,
                                  e_spatial)
    merged = ht.concat([temporal, spatial], axis=-1)
    return merged.reshape(merged.shape[0], frames, joints, channels)


def default_token_counts(frames: int, joints: int):
    """Pooling sizes: 49 temporal tokens at the 243-frame scale, 9 spatial,
    scaled to roughly a fifth of the axis (floor 2) for shorter clips."""
    e_t = 49 if frames == 243 else max(2, min(frames, round(frames / 5)))
    e_s = min(9, joints)
    return e_t, e_s
