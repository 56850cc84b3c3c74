"""Cosine kernels and the contrastive objectives.

``inner_instance_loss`` only ever compares masked patches of the same
cloud; ``inter_instance_loss`` pools every patch in the batch into one
InfoNCE problem. ``alignment_target_loss`` drives the triplet-branch
ablation.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .numerics import Tensor, ops

COS_EPS = 1e-12


class Cosine(NamedTuple):
    value: float
    degenerate: bool


def cosine_sim(a, b) -> Cosine:
    """a.b / (|a| |b|); a zero operand gives 0 with ``degenerate`` set."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("cosine_sim: non-finite operand")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return Cosine(0.0, True)
    return Cosine(float(a @ b / (na * nb)), False)


def similarity_matrix(v_c, v_s) -> np.ndarray:
    """Plain-numpy (M, M) cosine matrix, row i = v_c[i] against every v_s[j]."""
    a = np.asarray(v_c, dtype=np.float64)
    b = np.asarray(v_s, dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), COS_EPS)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), COS_EPS)
    return a @ np.swapaxes(b, -1, -2)


def _tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v))


def _batched(v) -> Tensor:
    v = _tensor(v)
    if v.ndim == 2:
        return ops.reshape(v, (1, *v.shape))
    if v.ndim != 3:
        raise ValueError(f"expected (M, D) or (B, M, D), got {v.shape}")
    return v


def _row_losses(v_c: Tensor, v_s: Tensor, tau: float) -> Tensor:
    """Per-anchor InfoNCE terms (B, M): logsumexp_j s_ij - s_ii."""
    if v_c.shape != v_s.shape:
        raise ValueError(f"branch shapes differ: {v_c.shape} vs {v_s.shape}")
    a = ops.l2_normalize(v_c, COS_EPS)
    b = ops.l2_normalize(v_s, COS_EPS)
    s = ops.scale(a @ ops.transpose(b), 1.0 / tau)
    eye = np.eye(s.shape[-1], dtype=s.dtype)
    diag = ops.reduce_sum(s * eye, axis=-1)
    return ops.logsumexp(s) - diag


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")


def inner_instance_loss(v_c, v_s, tau: float = 1.0, symmetric: bool = False) -> Tensor:
    """Patch-level InfoNCE inside each sample, averaged over the batch.

    ``v_c``/``v_s`` are (M, D) or (B, M, D); row i of both comes from the
    same masked patch. Anchors are ``v_c`` rows unless ``symmetric``.
    """
    _check_tau(tau)
    v_c, v_s = _batched(v_c), _batched(v_s)
    loss = ops.reduce_mean(ops.reduce_mean(_row_losses(v_c, v_s, tau), axis=-1))
    if symmetric:
        back = ops.reduce_mean(ops.reduce_mean(_row_losses(v_s, v_c, tau), axis=-1))
        loss = ops.scale(loss + back, 0.5)
    return loss


def inter_instance_loss(v_c, v_s, tau: float = 1.0) -> Tensor:
    """InfoNCE over all B*M masked patches of the batch at once."""
    _check_tau(tau)
    v_c, v_s = _batched(v_c), _batched(v_s)
    b, m, d = v_c.shape
    flat_c = ops.reshape(v_c, (1, b * m, d))
    flat_s = ops.reshape(v_s, (1, b * m, d))
    return ops.reduce_mean(ops.reduce_mean(_row_losses(flat_c, flat_s, tau), axis=-1))


def alignment_target_loss(full_repr, branch_repr) -> Tensor:
    """Negative mean cosine between corresponding tokens."""
    full_repr, branch_repr = _tensor(full_repr), _tensor(branch_repr)
    if full_repr.shape != branch_repr.shape:
        raise ValueError(f"shapes differ: {full_repr.shape} vs {branch_repr.shape}")
    a = ops.l2_normalize(full_repr, COS_EPS)
    b = ops.l2_normalize(branch_repr, COS_EPS)
    return -ops.reduce_mean(ops.reduce_sum(a * b, axis=-1))


def simplex_floor(m: int, tau: float = 1.0) -> float:
    """Smallest value the inner-instance loss can take for M masked patches.

    Reached by perfectly aligned branches whose M tokens form a regular
    simplex (pairwise cosine -1/(M-1)).
    """
    if m == 1:
        return 0.0
    gap = (1.0 + 1.0 / (m - 1)) / tau
    return float(np.log1p((m - 1) * np.exp(-gap)))
