"""Pure-numpy kernels for the NetFV / NetVLAD hot paths.

These are the reference implementations: batched over utterances but
otherwise written to mirror the math directly.  The compiled extension
(``uttenc._kernels``) provides the same signatures; the backend module
picks one at import time.

Shapes (all float64):
  x    (B, L, D)   batch of equal-length frame sequences
  netfv   w, b  (K, D);  output (B, 2*K*D)  [mean blocks, then dev blocks]
  netvlad mu, w (K, D), b (K,);  output (B, K, D) raw (unnormalized)
Backward kernels return parameter gradients summed over the batch plus
the per-frame input gradient.
"""

from __future__ import annotations

import numpy as np

_SQRT2 = float(np.sqrt(2.0))


def _softmax_last(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# --- NetFV ---------------------------------------------------------------

def _netfv_assignments(x, w, b):
    """Soft posteriors from the simplified equal-weight Gaussian score."""
    B, L, D = x.shape
    K = w.shape[0]
    a = np.empty((B, L, K))
    for k in range(K):
        zk = (x + b[k]) * w[k]
        a[:, :, k] = -0.5 * (zk * zk).sum(axis=-1)
    return _softmax_last(a)


def netfv_forward(x, w, b):
    B, L, D = x.shape
    K = w.shape[0]
    gamma = _netfv_assignments(x, w, b)
    mean_part = np.empty((B, K, D))
    dev_part = np.empty((B, K, D))
    for k in range(K):
        zk = (x + b[k]) * w[k]
        gk = gamma[:, :, k]
        mean_part[:, k] = np.einsum("bl,bld->bd", gk, zk) / L
        dev_part[:, k] = np.einsum("bl,bld->bd", gk, zk * zk - 1.0) / (L * _SQRT2)
    return np.concatenate([mean_part.reshape(B, K * D),
                           dev_part.reshape(B, K * D)], axis=1)


def netfv_backward(x, w, b, gout):
    B, L, D = x.shape
    K = w.shape[0]
    gm = gout[:, :K * D].reshape(B, K, D)
    gs = gout[:, K * D:].reshape(B, K, D)
    gamma = _netfv_assignments(x, w, b)

    # d(output)/d(gamma), per frame and cluster
    c = np.empty((B, L, K))
    for k in range(K):
        zk = (x + b[k]) * w[k]
        c[:, :, k] = (
            np.einsum("bld,bd->bl", zk, gm[:, k])
            + np.einsum("bld,bd->bl", zk * zk - 1.0, gs[:, k]) / _SQRT2
        ) / L
    # softmax coupling: gradient w.r.t. the assignment logits
    da = gamma * (c - (gamma * c).sum(axis=-1, keepdims=True))

    gw = np.zeros((K, D))
    gb = np.zeros((K, D))
    gx = np.zeros_like(x)
    for k in range(K):
        zk = (x + b[k]) * w[k]
        gk = gamma[:, :, k][:, :, None]
        dz = (
            gk * gm[:, k][:, None, :] / L
            + (gk * gs[:, k][:, None, :] * _SQRT2 / L - da[:, :, k][:, :, None]) * zk
        )
        gw[k] = (dz * (x + b[k])).sum(axis=(0, 1))
        gb[k] = (dz * w[k]).sum(axis=(0, 1))
        gx += dz * w[k]
    return gw, gb, gx


# --- NetVLAD -------------------------------------------------------------

def netvlad_forward(x, mu, w, b):
    beta = _softmax_last(x @ w.T + b)                      # (B, L, K)
    nk = beta.sum(axis=1)                                  # (B, K)
    v = np.einsum("blk,bld->bkd", beta, x) - nk[:, :, None] * mu
    return v


def netvlad_backward(x, mu, w, b, gv):
    beta = _softmax_last(x @ w.T + b)
    nk = beta.sum(axis=1)
    # d(output)/d(beta[l, k]) = G_k . (x_l - mu_k)
    c = np.einsum("bld,bkd->blk", x, gv) - (gv * mu).sum(axis=-1)[:, None, :]
    ds = beta * (c - (beta * c).sum(axis=-1, keepdims=True))
    gmu = -(nk[:, :, None] * gv).sum(axis=0)
    gw = np.einsum("blk,bld->kd", ds, x)
    gb = ds.sum(axis=(0, 1))
    gx = ds @ w + np.einsum("blk,bkd->bld", beta, gv)
    return gmu, gw, gb, gx
