"""Pure-NumPy attention kernels over packed sequences.

Fallback backend with the same contract as the compiled extension:
scaled-dot-product attention restricted to pairs inside one sequence and,
when ``half_window >= 0``, to ``|i - j| <= half_window``. The forward pass
returns the per-row log-sum-exp so the backward pass can rebuild the
softmax without storing the score matrices (dense scores are materialized
per sequence here, so this backend is memory-hungry on long global
sequences).
"""

from __future__ import annotations

import numpy as np


def attend_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray, cu_seqlens: np.ndarray,
               half_window: int, scale: float):
    """Returns (out, lse) for [tokens, heads, head_dim] inputs."""
    out = np.empty_like(q)
    lse = np.empty(q.shape[:2], dtype=q.dtype)
    for s, e in zip(cu_seqlens[:-1], cu_seqlens[1:]):
        n = e - s
        qs, ks, vs = q[s:e], k[s:e], v[s:e]
        scores = np.einsum("ihd,jhd->hij", qs, ks) * scale
        if half_window >= 0:
            idx = np.arange(n)
            banned = np.abs(idx[:, None] - idx[None, :]) > half_window
            scores[:, banned] = -np.inf
        m = scores.max(axis=2, keepdims=True)
        p = np.exp(scores - m)
        z = p.sum(axis=2, keepdims=True)
        out[s:e] = np.einsum("hij,jhd->ihd", p / z, vs)
        lse[s:e] = (m[:, :, 0] + np.log(z[:, :, 0])).T
    return out, lse


def attend_bwd(q: np.ndarray, k: np.ndarray, v: np.ndarray, out: np.ndarray,
               d_out: np.ndarray, lse: np.ndarray, cu_seqlens: np.ndarray,
               half_window: int, scale: float):
    """Returns (dq, dk, dv); softmax probabilities are rebuilt from lse."""
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for s, e in zip(cu_seqlens[:-1], cu_seqlens[1:]):
        n = e - s
        qs, ks, vs = q[s:e], k[s:e], v[s:e]
        gs = d_out[s:e]
        scores = np.einsum("ihd,jhd->hij", qs, ks) * scale
        if half_window >= 0:
            idx = np.arange(n)
            banned = np.abs(idx[:, None] - idx[None, :]) > half_window
            scores[:, banned] = -np.inf
        p = np.exp(scores - lse[s:e].T[:, :, None])
        dv[s:e] = np.einsum("hij,ihd->jhd", p, gs)
        dp = np.einsum("ihd,jhd->hij", gs, vs)
        # sum_j p_ij * dp_ij == dout_i . out_i, the usual softmax shortcut
        delta = (out[s:e] * gs).sum(axis=2).T[:, :, None]
        ds = p * (dp - delta) * scale
        dq[s:e] = np.einsum("hij,jhd->ihd", ds, ks)
        dk[s:e] = np.einsum("hij,ihd->jhd", ds, qs)
    return dq, dk, dv
