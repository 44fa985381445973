"""Cosine similarity and the contrastive losses.

``pairwise_loss`` is the two-view NT-Xent/InfoNCE loss over a batch of ``2N``
views. ``fullgraph_cmc_loss`` is the full-graph multiview loss: for every
scene ``t`` and ordered pair of distinct views ``(v, w)`` of that scene, view
``w`` of the same scene is the positive for anchor ``z[t, v]`` and view ``w``
of every scene (including ``t`` itself) forms the softmax denominator::

    l(t, v, w) = -log( exp(d(z[t,v], z[t,w]) / tau)
                       / sum_i exp(d(z[t,v], z[i,w]) / tau) )

``loss_oracle`` recomputes the same quantity with plain Python loops and is
used only for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    DegenerateEmbeddingError,
    DimensionError,
    DomainError,
    InsufficientNegativesError,
    OracleScopeError,
    PairingError,
)
from .tensor import Tensor


@dataclass
class EmbeddingSet:
    """Projected embeddings ``z`` of shape ``(B, V, D)`` plus the view->modality map."""

    z: Tensor
    modality_of_view: list = field(default_factory=list)
    temperature: float = 0.1

    def __post_init__(self):
        if not isinstance(self.z, Tensor):
            self.z = Tensor(self.z)
        if self.z.ndim != 3:
            raise DimensionError(f"EmbeddingSet.z must be B×V×D, got {self.z.shape}")
        if self.temperature <= 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")
        v = self.z.shape[1]
        if not self.modality_of_view:
            self.modality_of_view = [0] * v
        if len(self.modality_of_view) != v:
            raise DimensionError(f"{len(self.modality_of_view)} modality labels for {v} views")
        counts = np.bincount(np.asarray(self.modality_of_view))
        counts = counts[counts > 0]
        if len(set(counts.tolist())) != 1:
            raise DimensionError("every modality must contribute the same number of views")

    @property
    def n_instances(self):
        return self.z.shape[0]

    @property
    def n_views(self):
        return self.z.shape[1]

    @property
    def n_modalities(self):
        return len(set(self.modality_of_view))


def cosine_similarity(u, v):
    """``u·v / (|u||v|)`` as a differentiable 0-d tensor."""
    if not isinstance(u, Tensor):
        u = Tensor(u)
    if not isinstance(v, Tensor):
        v = Tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"cosine_similarity: shapes {u.shape} and {v.shape}")
    if not np.any(u.data) or not np.any(v.data):
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm vector")
    return T.tsum(T.mul(T.l2_normalize(u), T.l2_normalize(v)))


def similarity_matrix(z):
    """Row-wise cosine similarities of a ``(n, D)`` tensor."""
    if np.any(~np.any(z.data, axis=-1)):
        raise DegenerateEmbeddingError("zero-norm embedding in batch")
    zn = T.l2_normalize(z, axis=-1)
    return T.matmul(zn, T.transpose(zn, (1, 0)))


def _check_pairing(partner, n):
    partner = np.asarray(partner, dtype=np.int64)
    if partner.shape != (n,):
        raise PairingError(f"pairing has {partner.size} entries for {n} views")
    if np.any(partner < 0) or np.any(partner >= n):
        raise PairingError("pairing refers to a view index out of range")
    idx = np.arange(n)
    if np.any(partner == idx) or np.any(partner[partner] != idx):
        raise PairingError("pairing is not a perfect matching")
    return partner


def pairwise_loss(z, partner, temperature):
    """Sum over both orders of every positive pair of the two-view contrastive loss.

    ``partner[i]`` is the index of view ``i``'s positive. The denominator runs
    over every ``k != i``, which keeps the positive itself.
    """
    if not isinstance(z, Tensor):
        z = Tensor(z)
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    n = z.shape[0]
    if n < 2 or n % 2:
        raise PairingError(f"need an even number (>= 2) of views, got {n}")
    partner = _check_pairing(partner, n)
    logits = T.scale(similarity_matrix(z), 1.0 / temperature)
    off_diag = ~np.eye(n, dtype=bool)
    lse = T.logsumexp(logits, axis=1, where=off_diag)
    pos_mask = np.zeros((n, n), dtype=logits.dtype)
    pos_mask[np.arange(n), partner] = 1
    pos = T.tsum(T.mul(logits, Tensor(pos_mask, dtype=logits.dtype)))
    return T.sub(T.tsum(lse), pos)


def fullgraph_cmc_loss(e, reduction="sum"):
    """Full-graph multiview contrastive loss of an :class:`EmbeddingSet`.

    ``reduction="mean"`` divides by the number of terms ``B·V·(V-1)``.
    """
    b, v, d = e.z.shape
    if b < 2:
        raise InsufficientNegativesError(f"need at least 2 instances for negatives, got {b}")
    if v < 2:
        raise DimensionError("need at least 2 views per instance")
    z = e.z
    dt = z.dtype
    sims = similarity_matrix(T.reshape(z, (b * v, d)))
    logits = T.scale(T.reshape(sims, (b, v, b, v)), 1.0 / e.temperature)
    # logits[t, v, i, w]; denominator runs over i for fixed (t, v, w)
    lse = T.logsumexp(T.transpose(logits, (0, 1, 3, 2)), axis=3)  # (t, v, w)
    off = ~np.eye(v, dtype=bool)
    lse_mask = np.broadcast_to(off, (b, v, v)).astype(dt)
    pos_mask = np.zeros((b, v, b, v), dtype=dt)
    for t in range(b):
        pos_mask[t, :, t, :] = off
    total = T.sub(
        T.tsum(T.mul(lse, Tensor(lse_mask, dtype=dt))),
        T.tsum(T.mul(logits, Tensor(pos_mask, dtype=dt))),
    )
    if reduction == "sum":
        return total
    if reduction == "mean":
        return T.scale(total, 1.0 / (b * v * (v - 1)))
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def relationships_per_instance(n_modalities, n_augmentations):
    """Unordered view relationships per scene, ``C(M·N, 2)``."""
    return math.comb(n_modalities * n_augmentations, 2)


ORACLE_LIMIT = 64


def loss_oracle(e, reduction="sum"):
    """Brute-force reference for :func:`fullgraph_cmc_loss` (``B·V <= 64``)."""
    z = np.asarray(e.z.data, dtype=np.float64)
    b, v, d = z.shape
    if b * v > ORACLE_LIMIT:
        raise OracleScopeError(f"oracle limited to B·V <= {ORACLE_LIMIT}, got {b * v}")
    if b < 2:
        raise InsufficientNegativesError("need at least 2 instances")
    rows = [[[float(z[t, j, k]) for k in range(d)] for j in range(v)] for t in range(b)]
    tau = float(e.temperature)

    def cos(p, q):
        dot = pp = qq = 0.0
        for a, c in zip(p, q):
            dot += a * c
            pp += a * a
            qq += c * c
        if pp == 0.0 or qq == 0.0:
            raise DegenerateEmbeddingError("zero-norm embedding")
        return dot / (math.sqrt(pp) * math.sqrt(qq))

    total = 0.0
    for t in range(b):
        for a in range(v):
            for w in range(v):
                if a == w:
                    continue
                pos = cos(rows[t][a], rows[t][w]) / tau
                terms = [cos(rows[t][a], rows[i][w]) / tau for i in range(b)]
                top = max(terms)
                denom = top + math.log(sum(math.exp(x - top) for x in terms))
                total += denom - pos
    if reduction == "mean":
        total /= b * v * (v - 1)
    return total
