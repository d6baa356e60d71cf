"""Triplet margin loss and in-batch contrastive loss over sentence embeddings."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    temperature: float = 0.05

    def __post_init__(self):
        if not self.margin >= 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


class ZeroNormError(ValueError):
    pass


@dataclass
class TripletBatch:
    """Anchor, positive and negative embeddings, each ``(N, D)``."""

    anchors: Tensor
    positives: Tensor
    negatives: Tensor

    def __post_init__(self):
        shapes = {self.anchors.shape, self.positives.shape, self.negatives.shape}
        if len(shapes) != 1:
            raise ShapeError(
                f"triplet batch: mismatched shapes {self.anchors.shape}, {self.positives.shape}, {self.negatives.shape}"
            )
        if self.anchors.ndim != 2:
            raise ShapeError(f"triplet batch: expected (N, D) embeddings, got {self.anchors.shape}")

    @property
    def batch_size(self) -> int:
        return self.anchors.shape[0]

    @classmethod
    def from_vectors(cls, anchors: Sequence, positives: Sequence, negatives: Sequence) -> TripletBatch:
        def stack(vs):
            vs = [v.vector if hasattr(v, "vector") else v for v in vs]
            return Tensor(np.stack([np.asarray(v, dtype=np.float64) for v in vs]))

        return cls(stack(anchors), stack(positives), stack(negatives))

    @classmethod
    def from_stacked(cls, embeddings: Tensor) -> TripletBatch:
        """Split a ``(3N, D)`` tensor laid out as anchors, positives, negatives."""
        n = embeddings.shape[0] // 3
        if embeddings.shape[0] != 3 * n or n == 0:
            raise ShapeError(f"triplet batch: cannot split {embeddings.shape} into three groups")
        return cls(embeddings[:n], embeddings[n:2 * n], embeddings[2 * n:])


def triplet_margin_loss(batch: TripletBatch, config: LossConfig = LossConfig()) -> Tensor:
    """Mean over the batch of ``max(|h - h+| - |h - h-| + m, 0)`` with Euclidean distance."""
    d_pos = T.l2_norm(batch.anchors - batch.positives, axis=-1)
    d_neg = T.l2_norm(batch.anchors - batch.negatives, axis=-1)
    hinge = T.max_with_zero(d_pos - d_neg + Tensor(config.margin))
    return T.mean(hinge)


def _unit_rows(x: Tensor, role: str) -> Tensor:
    norms = T.l2_norm(x, axis=-1)
    zero = np.flatnonzero(norms.data == 0)
    if zero.size:
        raise ZeroNormError(f"contrastive loss: {role} embedding at index {int(zero[0])} has zero norm")
    return x / _expand_cols(norms, x.shape[1])


def _expand_cols(norms: Tensor, d: int) -> Tensor:
    # (N,) -> (N, D) by an explicit ones-matmul; keeps broadcasting trailing-only
    col = T.reshape(norms, (norms.shape[0], 1))
    return col @ Tensor(np.ones((1, d)))


def contrastive_loss(batch: TripletBatch, config: LossConfig = LossConfig()) -> Tensor:
    """In-batch softmax over cosine similarities to every positive and negative.

    For anchor ``i`` the logits are ``cos(h_i, h_j+) / tau`` and
    ``cos(h_i, h_j-) / tau`` for all ``j``; the target is its own positive.
    """
    a = _unit_rows(batch.anchors, "anchor")
    p = _unit_rows(batch.positives, "positive")
    n = _unit_rows(batch.negatives, "negative")
    size = batch.batch_size
    logits = T.scale(
        T.concat_lastdim([a @ T.transpose(p, (1, 0)), a @ T.transpose(n, (1, 0))]),
        1.0 / config.temperature,
    )
    row_max = Tensor(logits.data.max(axis=-1))
    shifted = logits - _expand_cols(row_max, 2 * size)
    log_denominator = T.log(T.sum(T.exp(shifted), axis=-1))
    eye = np.zeros((size, 2 * size))
    eye[np.arange(size), np.arange(size)] = 1.0
    own = T.sum(shifted * Tensor(eye), axis=-1)
    return T.mean(log_denominator - own)


LOSSES = {"l1": triplet_margin_loss, "l2": contrastive_loss}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}") from None
