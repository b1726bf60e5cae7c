"""Losses: supervised contrastive (SHARP training) and cross-entropy (reference modes)."""
from __future__ import annotations

import numpy as np

from .engine import ConfigurationError, Tensor, record_op


def _normalize_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((u * u).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    return u / safe[:, None], norms


def supcon_loss(z: Tensor, labels: np.ndarray, rank0_dims: np.ndarray | None = None,
                temperature: float = 0.1) -> Tensor:
    """Summed supervised contrastive loss over a pooled stream + replay batch.

    Rows of ``z`` have their ``rank0_dims`` zeroed, are L2-normalised, and
    compared by dot product / ``temperature``. Anchors without any positive in
    the batch contribute nothing. All-zero rows stay zero after normalisation.
    Internals run in float64.
    """
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise ConfigurationError("supcon_loss needs a batch of at least 2")
    if len(labels) != n:
        raise ConfigurationError("labels must match rows of z")
    if not temperature > 0:
        raise ConfigurationError("temperature must be positive")

    keep = np.ones(z.shape[1], dtype=bool) if rank0_dims is None else ~np.asarray(rank0_dims, bool)
    u = z.data.astype(np.float64) * keep
    zhat, norms = _normalize_rows(u)
    sim = zhat @ zhat.T / temperature

    eye = np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0

    logits = np.where(eye, -np.inf, sim)
    row_max = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(denom[:, 0])

    safe_npos = np.maximum(n_pos, 1)
    pos_mean = (sim * pos).sum(axis=1) / safe_npos
    per_anchor = np.where(anchors, lse - pos_mean, 0.0)
    out = Tensor(per_anchor.sum())

    def vjp(g):
        # dL/dsim: softmax over A(i) minus uniform weight over P(i), anchor rows only
        dsim = expd / denom - pos / safe_npos[:, None]
        dsim[~anchors] = 0.0
        dzhat = (dsim + dsim.T) @ zhat / temperature
        radial = (dzhat * zhat).sum(axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)[:, None]
        du = np.where(norms[:, None] > 0, (dzhat - zhat * radial) / safe, 0.0)
        return ((float(g) * du * keep).astype(np.float32),)

    return record_op(out, (z,), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ConfigurationError(f"label out of range for {c} classes")
    x = logits.data.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    out = Tensor(-logp[np.arange(n), labels].mean())

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((float(g) * p / n).astype(np.float32),)

    return record_op(out, (logits,), vjp)
