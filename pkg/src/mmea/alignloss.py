"""Cosine similarity, the NCA alignment loss and the joint objective."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from mmea.encoders import STRUCTURE, softmax, softmax_backward
from mmea.numcore import DTYPE, as_matrix, row_l2_normalize, row_l2_normalize_backward

log = logging.getLogger(__name__)

FUSED = "fused"


@dataclass
class LossConfig:
    alpha: dict = field(default_factory=lambda: {
        STRUCTURE: 5.0, "image": 15.0, "relation": 15.0, "attribute": 15.0,
        "surface": 15.0, FUSED: 15.0})
    beta: float = 10.0

    def __post_init__(self):
        if self.beta <= 0 or any(a <= 0 for a in self.alpha.values()):
            raise ValueError("alpha and beta must be positive")

    def alpha_for(self, term):
        return self.alpha.get(term, 15.0)


def cosine_matrix(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"width mismatch: {a.shape[1]} vs {b.shape[1]}")
    return row_l2_normalize(a) @ row_l2_normalize(b).T


def cosine_backward(a, b, d_s):
    """Gradients of ``cosine_matrix(a, b)`` w.r.t. ``a`` and ``b``."""
    an, bn = row_l2_normalize(a), row_l2_normalize(b)
    da = row_l2_normalize_backward(a, an, d_s @ bn)
    db = row_l2_normalize_backward(b, bn, d_s.T @ an)
    return da, db


def _log1p_sum_exp(x):
    """``log(1 + sum(exp(x)))`` along the last axis, plus the softmax weights."""
    top = x.max(axis=-1, keepdims=True, initial=0.0)
    e = np.exp(x - top)
    z = np.exp(-top) + e.sum(axis=-1, keepdims=True)
    return (top + np.log(z))[..., 0], e / z


def nca_loss(S, alpha=15.0, beta=10.0, return_grad=False):
    """NCA loss over an ``N x N`` pivot similarity matrix.

    Row ``i`` and column ``i`` belong to the ``i``-th pivot pair. Off-diagonal
    entries act as in-batch negatives for both directions. With
    ``return_grad`` the gradient w.r.t. ``S`` is returned as well.
    """
    S = np.asarray(S, dtype=DTYPE)
    n = S.shape[0]
    if n == 0 or S.ndim != 2 or S.shape[1] != n:
        raise ValueError(f"nca_loss needs a non-empty square matrix, got {S.shape}")
    off = ~np.eye(n, dtype=bool)
    scaled = alpha * S
    # rows of `neg_*` hold the n-1 negatives of pivot i
    neg_rows = scaled[off].reshape(n, n - 1)
    neg_cols = scaled.T[off].reshape(n, n - 1)
    row_term, row_w = _log1p_sum_exp(neg_rows)
    col_term, col_w = _log1p_sum_exp(neg_cols)

    diag = np.diag(S).copy()
    floor = -1.0 / beta + 1e-6
    clamped = diag < floor
    if clamped.any():
        warnings.warn(f"{int(clamped.sum())} pivot similarities below {floor:.4g} clamped "
                      "inside log(1 + beta*S_ii)", RuntimeWarning, stacklevel=2)
        diag = np.where(clamped, floor, diag)
    pos = np.log1p(beta * diag)
    loss = float(np.sum(row_term / alpha + col_term / alpha - pos) / n)
    if not return_grad:
        return loss

    g = np.zeros_like(S)
    g[off] += row_w.reshape(-1)
    gt = np.zeros_like(S)
    gt[off] = col_w.reshape(-1)
    g += gt.T
    g[np.diag_indices(n)] = np.where(clamped, 0.0, -beta / (1.0 + beta * diag))
    return loss, g / n


def _batch_similarity(norm, src, tgt):
    a, b = norm[src], norm[tgt]
    return a, b, a @ b.T


def joint_loss(embeddings, weights_logits, batch, cfg, n_source, frozen=None,
               include_modalities=True, include_fused=True):
    """Sum of per-modality NCA losses plus the fused-embedding NCA loss.

    ``embeddings`` maps modality -> raw (N, d) embedding for all entities,
    source rows first. ``batch`` is a ``(B, 2)`` array of (source, target) ids.
    The fused term only trains the modality logits: its normalized blocks
    are taken from ``frozen`` (default: the current embeddings) and treated
    as constants.

    Returns ``(loss, d_embeddings, d_logits, terms)``.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 2)
    if len(batch) == 0:
        raise ValueError("empty batch")
    src = batch[:, 0]
    tgt = batch[:, 1] + n_source
    order = list(embeddings)
    logits = np.asarray(weights_logits, dtype=DTYPE).reshape(-1)

    total = 0.0
    terms = {}
    grads = {m: np.zeros_like(embeddings[m]) for m in order}
    normalized = {m: row_l2_normalize(embeddings[m]) for m in order}

    if include_modalities:
        for m in order:
            a, b, S = _batch_similarity(normalized[m], src, tgt)
            loss, dS = nca_loss(S, cfg.alpha_for(m), cfg.beta, return_grad=True)
            terms[m] = loss
            total += loss
            dn = np.zeros_like(normalized[m])
            np.add.at(dn, src, dS @ b)
            np.add.at(dn, tgt, dS.T @ a)
            grads[m] = row_l2_normalize_backward(embeddings[m], normalized[m], dn)

    d_logits = np.zeros_like(logits)
    if include_fused:
        blocks = frozen if frozen is not None else normalized
        p = softmax(logits)
        a_blocks = [blocks[m][src] for m in order]
        b_blocks = [blocks[m][tgt] for m in order]
        u = np.concatenate([pi * x for pi, x in zip(p, a_blocks)], axis=1)
        v = np.concatenate([pi * x for pi, x in zip(p, b_blocks)], axis=1)
        S = cosine_matrix(u, v)
        loss, dS = nca_loss(S, cfg.alpha_for(FUSED), cfg.beta, return_grad=True)
        terms[FUSED] = loss
        total += loss
        du, dv = cosine_backward(u, v, dS)
        dp = np.zeros_like(p)
        col = 0
        for k, (xa, xb) in enumerate(zip(a_blocks, b_blocks)):
            w = xa.shape[1]
            dp[k] = np.sum(du[:, col:col + w] * xa) + np.sum(dv[:, col:col + w] * xb)
            col += w
        d_logits = softmax_backward(p, dp)
    return total, grads, d_logits, terms


def model_loss(encoder, batch, cfg, n_source, frozen=None, **kw):
    """Forward + backward for a bound encoder; accumulates into ``Param.grad``."""
    emb = encoder.forward()
    total, grads, d_logits, terms = joint_loss(
        emb, encoder.params.modality_logits.value, batch, cfg, n_source, frozen=frozen, **kw)
    encoder.backward(grads)
    encoder.params.modality_logits.grad += d_logits.reshape(encoder.params.modality_logits.shape)
    return total, terms
