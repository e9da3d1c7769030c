"""History Pose Accumulation: depth-wise attention over per-layer features.

A forward pass accumulates every layer's output feature into an ordered
pool. A zero-initialized pseudo-query scores the RMS-normalized pool
entries independently at each (frame, joint) position; the softmax over
the pool index gives position-wise mixing weights, and the weighted sum is
injected back into the running representation.
"""
from __future__ import annotations

import numpy as np

from . import tensor as ht
from .errors import ConfigError, ShapeError
from .tensor import Tensor

RMS_EPS = 1e-6


class HistoryPool:
    """Ordered, append-only pool of same-shaped layer features."""

    def __init__(self):
        self.entries: list[Tensor] = []

    def push(self, feature: Tensor) -> None:
        if self.entries and feature.shape != self.entries[0].shape:
            raise ShapeError(
                f"pool entry shape {feature.shape} != existing {self.entries[0].shape}")
        self.entries.append(feature)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index):
        return self.entries[index]


def select_extent(entries, extent: str = "all", m: int = 2):
    """Restrict which pool entries participate in aggregation."""
    if extent == "all":
        return list(entries)
    if extent == "first_m":
        return list(entries[:m])
    if extent == "last_m":
        return list(entries[-m:])
    raise ConfigError(f"unknown history extent {extent!r}")


def _stack_entries(entries) -> Tensor:
    if len(entries) == 0:
        raise ConfigError("history pool is empty")
    return ht.stack(list(entries), axis=0)


def _weights_from_stacked(stacked: Tensor, pseudo_query: Tensor, eps: float) -> Tensor:
    pool_size = stacked.shape[0]
    channels = stacked.shape[-1]
    rest = stacked.shape[1:-1]
    normed = ht.rms_norm(stacked, axis=-1, eps=eps)
    flat = normed.reshape(-1, channels)
    logits = (flat @ pseudo_query.reshape(channels, 1)).reshape(pool_size, *rest)
    return ht.softmax(logits, axis=0)


def hpa_weights(entries, pseudo_query: Tensor, eps: float = RMS_EPS) -> Tensor:
    """Mixing weights over the pool, shape (pool, *positions).

    Entries are (.., C) features sharing one shape; the weight at each
    position normalizes over the pool index only. A zero pseudo-query gives
    exactly uniform weights.
    """
    return _weights_from_stacked(_stack_entries(entries), pseudo_query, eps)


def hpa_aggregate(entries, pseudo_query: Tensor, eps: float = RMS_EPS,
                  return_weights: bool = False):
    """Position-wise convex combination of pool entries."""
    stacked = _stack_entries(entries)
    weights = _weights_from_stacked(stacked, pseudo_query, eps)
    mixed = (weights.reshape(*weights.shape, 1) * stacked).sum(axis=0)
    if return_weights:
        return mixed, weights
    return mixed


def hpa_inject(feature: Tensor, entries, pseudo_query: Tensor, mode: str = "add",
               enabled: bool = True, eps: float = RMS_EPS,
               return_weights: bool = False):
    """Blend aggregated history into the current feature.

    ``mode='add'`` keeps the residual form (feature + history); ``'replace'``
    forwards the aggregate alone. Disabled is an exact pass-through.
    """
    if not enabled:
        return (feature, None) if return_weights else feature
    mixed, weights = hpa_aggregate(entries, pseudo_query, eps, return_weights=True)
    if mode == "add":
        out = feature + mixed
    elif mode == "replace":
        out = mixed
    else:
        raise ConfigError(f"unknown hpa mode {mode!r}")
    if return_weights:
        return out, weights
    return out


def zero_pseudo_query(channels: int) -> Tensor:
    """Per-layer learned query; zero init makes the initial mix uniform."""
    return Tensor(np.zeros(channels), requires_grad=True)
