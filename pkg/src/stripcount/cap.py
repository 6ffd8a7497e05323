"""Affinity propagation from unlabeled-region features into labeled ones.

Training-only branch: labeled and unlabeled feature columns are softmax
normalized along channels, pairwise dot-product affinities are row-softmaxed
over the unlabeled positions, and each labeled feature becomes a learnable
blend of itself and the affinity-weighted unlabeled features.  Because the
blend feeds the counting head, the loss on labeled cells backpropagates into
unlabeled-region features.  Inference never calls into this module.

Features are channel-major ``(C, N)`` matrices; grids reshape via
``values.reshape(C, -1)`` or by gathering masked positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CapConfig:
    eps: float = 1e-6
    gamma_init: float = 0.2

    def __post_init__(self) -> None:
        if not 0 < self.eps <= 1e-3:
            raise ValueError("eps must be in (0, 1e-3]")
        if not 0 <= self.gamma_init <= 1:
            raise ValueError("gamma_init must be in [0, 1]")


@dataclass
class AffinityMatrix:
    weights: np.ndarray  # (N_l, N_u), rows sum to 1

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("affinity weights must be a matrix")

    @property
    def n_labeled(self) -> int:
        return self.weights.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.weights.shape[1]


def _softmax_columns(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def cap_normalize(features: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Softmax over the channel axis of ``features + eps``.

    The uniform eps shift is a no-op under softmax; it is kept because the
    normalization is specified as guarding a division and the literal form
    documents that intent.
    """
    f = np.asarray(features, dtype=np.float64)
    if not np.isfinite(f).all():
        raise ValueError("features must be finite")
    flat = f.reshape(f.shape[0], -1)
    return _softmax_columns(flat + eps).reshape(f.shape)


def cap_similarity(f_l: np.ndarray, f_u: np.ndarray) -> AffinityMatrix:
    """Row-softmax over unlabeled positions of labeled/unlabeled dot products.

    Inputs are channel-normalized ``(C, N_l)`` and ``(C, N_u)`` matrices.
    """
    if f_l.shape[0] != f_u.shape[0]:
        raise ValueError(f"channel mismatch: {f_l.shape[0]} vs {f_u.shape[0]}")
    logits = f_l.T @ f_u  # (N_l, N_u)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return AffinityMatrix(weights=e / e.sum(axis=1, keepdims=True))


def cap_propagate(
    f_l: np.ndarray, f_u: np.ndarray, affinity: AffinityMatrix, gamma: float
) -> np.ndarray:
    """Blend each labeled feature with the affinity-weighted unlabeled mean:
    ``gamma * f_u @ W.T + (1 - gamma) * f_l``."""
    w = affinity.weights
    if f_l.shape[1] != w.shape[0] or f_u.shape[1] != w.shape[1]:
        raise ValueError(
            f"affinity shape {w.shape} inconsistent with features "
            f"{f_l.shape} / {f_u.shape}"
        )
    return gamma * (f_u @ w.T) + (1.0 - gamma) * f_l


@dataclass
class CapCache:
    """Forward intermediates needed for the exact backward pass."""

    f_l_raw: np.ndarray
    f_u_raw: np.ndarray
    n_l: np.ndarray  # normalized labeled features
    n_u: np.ndarray  # normalized unlabeled features
    weights: np.ndarray  # affinity rows
    gamma: float


def cap_forward(
    f_l_raw: np.ndarray, f_u_raw: np.ndarray, gamma: float, eps: float = 1e-6
) -> tuple[np.ndarray, CapCache]:
    """Full normalize -> similarity -> propagate pass, returning the blended
    labeled features and the cache for ``cap_backward``."""
    n_l = cap_normalize(f_l_raw, eps)
    n_u = cap_normalize(f_u_raw, eps)
    affinity = cap_similarity(n_l, n_u)
    out = cap_propagate(n_l, n_u, affinity, gamma)
    cache = CapCache(
        f_l_raw=np.asarray(f_l_raw, dtype=np.float64),
        f_u_raw=np.asarray(f_u_raw, dtype=np.float64),
        n_l=n_l,
        n_u=n_u,
        weights=affinity.weights,
        gamma=gamma,
    )
    return out, cache


def _softmax_columns_backward(grad_p: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of a column-wise softmax: for each column,
    dx = p * (dp - <dp, p>)."""
    dot = (grad_p * p).sum(axis=0, keepdims=True)
    return p * (grad_p - dot)


def cap_backward(
    upstream: np.ndarray, cache: CapCache
) -> tuple[np.ndarray, np.ndarray, float]:
    """Exact gradients of the blended output w.r.t. the raw labeled features,
    raw unlabeled features, and gamma."""
    if cache is None:
        raise ValueError("cap_backward requires the forward cache")
    g = np.asarray(upstream, dtype=np.float64)
    n_l, n_u, s, gamma = cache.n_l, cache.n_u, cache.weights, cache.gamma

    propagated = n_u @ s.T  # (C, N_l)
    d_gamma = float((g * (propagated - n_l)).sum())

    d_n_l = (1.0 - gamma) * g
    d_n_u = gamma * (g @ s)
    d_s = gamma * (g.T @ n_u)  # (N_l, N_u)

    # row softmax over unlabeled positions
    row_dot = (d_s * s).sum(axis=1, keepdims=True)
    d_logits = s * (d_s - row_dot)

    d_n_l += n_u @ d_logits.T
    d_n_u += n_l @ d_logits

    d_f_l = _softmax_columns_backward(d_n_l, n_l)
    d_f_u = _softmax_columns_backward(d_n_u, n_u)
    return d_f_l, d_f_u, d_gamma


def affinity_rows_csv(
    affinity: AffinityMatrix, row_indices: list[int]
) -> list[list[float]]:
    """Numeric affinity dump for chosen labeled positions (one row per index)."""
    return [affinity.weights[i].tolist() for i in row_indices]
