"""Diagonal-covariance Gaussian mixtures: k-means init, EM, posteriors.

Fitted mixtures serve two roles: codebooks for the classical encoders
(supervector / Fisher vector) and canonical initialization for the
learnable encoding layers.  All densities are evaluated in the log
domain; feature dimensions up to 64 underflow linear-domain Gaussians.
"""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numcore import as_matrix, logsumexp_rows
from .rng import Rng

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DiagonalGmm:
    """Mixture weights, means and per-dimension standard deviations.

    weights: (K,), means: (K, D), stds: (K, D).  Immutable once built.
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        sd = np.asarray(self.stds, dtype=np.float64)
        if mu.ndim != 2 or sd.shape != mu.shape or w.shape != (mu.shape[0],):
            raise ValueError("inconsistent GMM parameter shapes")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu))
                and np.all(np.isfinite(sd))):
            raise ValueError("non-finite GMM parameters")
        if abs(w.sum() - 1.0) > 1e-10 or np.any(w <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(sd <= 0):
            raise ValueError("standard deviations must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class KmeansCodebook:
    """K centroids plus the per-cluster assignment counts from fitting."""

    centroids: np.ndarray  # (K, D)
    counts: np.ndarray     # (K,)

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class GmmFitResult:
    """EM output: the model, the log-likelihood trace, degeneracy flag."""

    gmm: DiagonalGmm
    log_likelihood: list = field(default_factory=list)
    degenerate: bool = False


def _sq_dists(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(L, K) squared Euclidean distances."""
    # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2
    d2 = (
        (frames * frames).sum(axis=1)[:, None]
        - 2.0 * frames @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def kmeans_fit(frames, K: int, rng: Rng, max_iters: int = 100) -> KmeansCodebook:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are reseeded to the frame farthest from its centroid.
    Raises on L < K.
    """
    x = as_matrix(frames, "frames")
    L = x.shape[0]
    if K < 1:
        raise ValueError("K must be >= 1")
    if L < K:
        raise ValueError("insufficient data: fewer frames than clusters")

    # k-means++ seeding
    centroids = np.empty((K, x.shape[1]))
    first = int(rng.integers(0, L - 1))
    centroids[0] = x[first]
    if K > 1:
        d2 = _sq_dists(x, centroids[:1]).ravel()
        for k in range(1, K):
            total = d2.sum()
            if total <= 0.0:
                idx = int(rng.integers(0, L - 1))
            else:
                idx = int(rng.choice(L, p=d2 / total))
            centroids[k] = x[idx]
            d2 = np.minimum(d2, _sq_dists(x, centroids[k:k + 1]).ravel())

    assign = np.zeros(L, dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        new_assign = d2.argmin(axis=1)
        for k in range(K):
            mask = new_assign == k
            if mask.any():
                centroids[k] = x[mask].mean(axis=0)
            else:
                far = int(d2[np.arange(L), new_assign].argmax())
                centroids[k] = x[far]
                new_assign[far] = k
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign

    counts = np.bincount(assign, minlength=K).astype(np.int64)
    return KmeansCodebook(centroids=centroids.copy(), counts=counts)


def default_std_floor(frames: np.ndarray, rel: float = 1e-3,
                      abs_min: float = 1e-6) -> np.ndarray:
    """Per-dimension sigma floor: sqrt(rel * data variance), clipped below."""
    var = np.var(frames, axis=0)
    return np.maximum(np.sqrt(rel * var), abs_min)


def log_densities(gmm: DiagonalGmm, frames) -> np.ndarray:
    """(L, K) log of alpha_k * N(x_i; mu_k, diag(sigma_k^2))."""
    x = as_matrix(frames, "frames")
    if x.shape[1] != gmm.dim:
        raise ValueError("dimension mismatch between frames and GMM")
    log_norm = -0.5 * gmm.dim * _LOG_2PI - np.log(gmm.stds).sum(axis=1)
    z = (x[:, None, :] - gmm.means[None, :, :]) / gmm.stds[None, :, :]
    quad = -0.5 * (z * z).sum(axis=2)
    return np.log(gmm.weights)[None, :] + log_norm[None, :] + quad


def posteriors(gmm: DiagonalGmm, frames) -> np.ndarray:
    """Per-frame component posteriors, (L, K); rows sum to 1."""
    lp = log_densities(gmm, frames)
    return np.exp(lp - logsumexp_rows(lp)[:, None])


def gmm_fit_em(frames, K: int, init: KmeansCodebook,
               max_iters: int = 100, var_floor=None,
               rel_tol: float = 1e-6) -> GmmFitResult:
    """EM for a diagonal GMM from a k-means codebook.

    ``var_floor`` is the sigma floor (scalar or per-dimension); defaults
    to a floor relative to the per-dimension data variance.  The
    log-likelihood trace is non-decreasing up to roundoff; fitting stops
    at ``max_iters`` or when the relative improvement drops below
    ``rel_tol``.
    """
    x = as_matrix(frames, "frames")
    L, D = x.shape
    if init.num_clusters != K or init.dim != D:
        raise ValueError("init codebook does not match K/D")
    if var_floor is None:
        floor = default_std_floor(x)
    else:
        floor = np.broadcast_to(np.asarray(var_floor, dtype=np.float64), (D,)).copy()
        if np.any(floor <= 0):
            raise ValueError("var_floor must be > 0")

    degenerate = bool(np.all(np.var(x, axis=0) <= floor ** 2))
    if degenerate:
        warnings.warn("degenerate input: variance at or below the floor",
                      RuntimeWarning)

    means = init.centroids.copy()
    weights = np.maximum(init.counts.astype(np.float64), 1.0)
    weights = weights / weights.sum()
    global_std = np.maximum(np.std(x, axis=0), floor)
    stds = np.tile(global_std, (K, 1))

    trace: list = []
    prev_ll = -np.inf
    for _ in range(max_iters):
        gmm = DiagonalGmm(weights=weights, means=means, stds=stds)
        lp = log_densities(gmm, x)
        frame_ll = logsumexp_rows(lp)
        ll = float(frame_ll.sum())
        trace.append(ll)
        gamma = np.exp(lp - frame_ll[:, None])

        nk = gamma.sum(axis=0)
        nk_safe = np.maximum(nk, 1e-12)
        weights = np.maximum(nk / L, 1e-10)
        weights = weights / weights.sum()
        means = (gamma.T @ x) / nk_safe[:, None]
        second = (gamma.T @ (x * x)) / nk_safe[:, None]
        var = np.maximum(second - means * means, 0.0)
        stds = np.maximum(np.sqrt(var), floor[None, :])

        if np.isfinite(prev_ll):
            rel = (ll - prev_ll) / max(abs(prev_ll), 1.0)
            if rel < rel_tol:
                break
        prev_ll = ll

    gmm = DiagonalGmm(weights=weights, means=means, stds=stds)
    return GmmFitResult(gmm=gmm, log_likelihood=trace, degenerate=degenerate)


# --- serialization: "DGMM" binary section -------------------------------

_DGMM_MAGIC = b"DGMM"
_DGMM_VERSION = 1


def write_gmm(path, gmm: DiagonalGmm) -> None:
    """Persist a mixture as the versioned little-endian DGMM format."""
    buf = io.BytesIO()
    buf.write(_DGMM_MAGIC)
    buf.write(struct.pack("<III", _DGMM_VERSION, gmm.num_components, gmm.dim))
    buf.write(gmm.weights.astype("<f8").tobytes())
    buf.write(gmm.means.astype("<f8").tobytes())
    buf.write(gmm.stds.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_gmm(path) -> DiagonalGmm:
    from .dataio import BadMagicError, BadVersionError, TruncatedPayloadError

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _DGMM_MAGIC:
        raise BadMagicError("bad magic: not a DGMM file")
    if len(raw) < 16:
        raise TruncatedPayloadError("truncated DGMM header")
    version, K, D = struct.unpack("<III", raw[4:16])
    if version != _DGMM_VERSION:
        raise BadVersionError(f"unsupported DGMM version {version}")
    need = 16 + 8 * (K + 2 * K * D)
    if len(raw) < need:
        raise TruncatedPayloadError("truncated DGMM payload")
    off = 16
    w = np.frombuffer(raw, dtype="<f8", count=K, offset=off).copy()
    off += 8 * K
    mu = np.frombuffer(raw, dtype="<f8", count=K * D, offset=off).reshape(K, D).copy()
    off += 8 * K * D
    sd = np.frombuffer(raw, dtype="<f8", count=K * D, offset=off).reshape(K, D).copy()
    return DiagonalGmm(weights=w, means=mu, stds=sd)
