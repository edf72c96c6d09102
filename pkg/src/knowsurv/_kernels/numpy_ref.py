"""Pure-numpy reference kernels.

Same contracts as the compiled `_core` extension; this module is the
import-time fallback and the ground truth the extension is tested
against. All arrays are float64 and C-contiguous.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def attention_probs_fwd(Q, K, scale):
    """Row-softmax of scaled dot products per head.

    Q: (H, nq, dh), K: (H, nk, dh) -> P: (H, nq, nk), rows sum to 1.
    """
    S = np.matmul(Q, np.swapaxes(K, 1, 2)) * scale
    S -= S.max(axis=2, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=2, keepdims=True)
    return S


def attention_probs_bwd(Q, K, P, dP, scale):
    """Gradients of attention_probs_fwd w.r.t. Q and K given dL/dP."""
    dS = P * (dP - np.sum(dP * P, axis=2, keepdims=True))
    dQ = np.matmul(dS, K) * scale
    dK = np.matmul(np.swapaxes(dS, 1, 2), Q) * scale
    return dQ, dK


def layernorm_fwd(X, gamma, beta, eps):
    """Per-row layer norm with elementwise affine. Returns (Y, mean, rstd)."""
    mean = X.mean(axis=-1, keepdims=True)
    var = X.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    Y = (X - mean) * rstd * gamma + beta
    return Y, mean, rstd


def layernorm_bwd(X, gamma, mean, rstd, dY):
    """Returns (dX, dgamma, dbeta) for layernorm_fwd."""
    xhat = (X - mean) * rstd
    dbeta = dY.sum(axis=tuple(range(dY.ndim - 1)))
    dgamma = (dY * xhat).sum(axis=tuple(range(dY.ndim - 1)))
    dxhat = dY * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dX = rstd * (dxhat - m1 - xhat * m2)
    return dX, dgamma, dbeta


def rownorm_fwd(X, gamma, beta, eps):
    """Row-wise normalization with scalar gain/bias over the last axis."""
    mean = X.mean(axis=-1, keepdims=True)
    var = X.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    Y = (X - mean) * rstd * gamma + beta
    return Y, mean, rstd


def rownorm_bwd(X, gamma, mean, rstd, dY):
    """Returns (dX, dgamma, dbeta) with scalar dgamma/dbeta."""
    xhat = (X - mean) * rstd
    dbeta = float(dY.sum())
    dgamma = float((dY * xhat).sum())
    dxhat = dY * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dX = rstd * (dxhat - m1 - xhat * m2)
    return dX, dgamma, dbeta
