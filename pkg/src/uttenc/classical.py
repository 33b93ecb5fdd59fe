"""Non-learnable reference encoders and encoding normalization.

GMM supervector, Fisher vector and hard-assignment VLAD map a
variable-length frame sequence onto a fixed-size vector using a frozen
codebook.  They double as mathematical oracles for the learnable layers.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .gmm import DiagonalGmm, KmeansCodebook, posteriors, _sq_dists
from .numcore import as_matrix

_SQRT2 = float(np.sqrt(2.0))


@dataclass(frozen=True)
class EncodedVector:
    """Fixed-length utterance representation plus its layout descriptor.

    The layout string names the encoder, K, D and block order, e.g.
    ``"vlad:K=8:D=32:order=cluster"``.
    """

    values: np.ndarray
    layout: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite encoding")
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.size


def make_layout(kind: str, K: int, D: int, order: str) -> str:
    return f"{kind}:K={K}:D={D}:order={order}"


def layout_field(layout: str, key: str) -> str:
    for part in layout.split(":"):
        if part.startswith(key + "="):
            return part[len(key) + 1:]
    raise ValueError(f"layout has no field {key!r}: {layout}")


def layout_dim(layout: str) -> int:
    """Per-block feature dimension D recorded in the layout string."""
    return int(layout_field(layout, "D"))


def supervector(gmm: DiagonalGmm, frames) -> EncodedVector:
    """Per-component normalized first-order statistics, concatenated.

    Components with near-zero total occupancy contribute a zero block
    (the normalized statistic is undefined there).
    """
    x = as_matrix(frames, "frames")
    if x.shape[0] < 1:
        raise ValueError("empty utterance")
    gamma = posteriors(gmm, x)                     # (L, K)
    nc = gamma.sum(axis=0)                         # (K,)
    fc = gamma.T @ x - nc[:, None] * gmm.means     # (K, D)
    blocks = np.zeros_like(fc)
    live = nc >= 1e-10
    blocks[live] = fc[live] / nc[live, None]
    K, D = gmm.num_components, gmm.dim
    return EncodedVector(blocks.ravel(), make_layout("supervector", K, D, "component"))


def fisher_vector(gmm: DiagonalGmm, frames) -> EncodedVector:
    """Whitened mean/std log-likelihood gradients, mean-pooled over frames.

    Per cluster k the 2D-dimensional block is the concatenation of the
    mean gradient (1/sqrt(a_k)) * gamma * (x - mu_k) / sigma_k and the
    deviation gradient (1/sqrt(2 a_k)) * gamma * ((x - mu_k)^2 / sigma_k^2 - 1),
    averaged over frames; blocks are concatenated cluster-major.  The
    weight gradient is omitted.
    """
    x = as_matrix(frames, "frames")
    L = x.shape[0]
    if L < 1:
        raise ValueError("empty utterance")
    gamma = posteriors(gmm, x)                     # (L, K)
    z = (x[:, None, :] - gmm.means[None, :, :]) / gmm.stds[None, :, :]  # (L,K,D)
    mean_part = np.einsum("lk,lkd->kd", gamma, z) / L
    dev_part = np.einsum("lk,lkd->kd", gamma, z * z - 1.0) / L
    mean_part = mean_part / np.sqrt(gmm.weights)[:, None]
    dev_part = dev_part / np.sqrt(2.0 * gmm.weights)[:, None]
    K, D = gmm.num_components, gmm.dim
    out = np.concatenate([mean_part, dev_part], axis=1).ravel()  # (K, 2D) cluster-major
    return EncodedVector(out, make_layout("fisher", K, D, "cluster(mean,sigma)"))


def vlad(codebook: KmeansCodebook, frames) -> EncodedVector:
    """Sum of residuals to the nearest centroid, one D-block per cluster.

    Distance ties break toward the lowest cluster index; clusters with
    no assigned frame emit a zero block.
    """
    x = as_matrix(frames, "frames")
    if x.shape[0] < 1:
        raise ValueError("empty utterance")
    mu = codebook.centroids
    if x.shape[1] != codebook.dim:
        raise ValueError("dimension mismatch between frames and codebook")
    nearest = _sq_dists(x, mu).argmin(axis=1)      # argmin ties -> lowest index
    K, D = codebook.num_clusters, codebook.dim
    v = np.zeros((K, D))
    for k in range(K):
        mask = nearest == k
        if mask.any():
            v[k] = x[mask].sum(axis=0) - mask.sum() * mu[k]
    return EncodedVector(v.ravel(), make_layout("vlad", K, D, "cluster"))


# --- normalization schemes ----------------------------------------------

SCHEMES = ("none", "l2", "intra_l2_then_l2", "signed_power_then_l2")


def _l2(values: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(values)
    return values if n == 0.0 else values / n


def _l2_vjp(values: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(values)
    if n == 0.0:
        return upstream.copy()
    return upstream / n - values * (values @ upstream) / n ** 3


def normalize_values(values: np.ndarray, scheme: str, block: int,
                     power: float = 0.5) -> np.ndarray:
    """Apply a normalization scheme to a raw encoding.

    ``block`` is the per-block size for intra normalization (the layout's
    D); zero vectors and zero blocks pass through unchanged.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if scheme == "none":
        return v.copy()
    if scheme == "l2":
        return _l2(v).copy()
    if scheme == "intra_l2_then_l2":
        if block < 1 or v.size % block != 0:
            raise ValueError("block size does not divide the encoding length")
        u = v.reshape(-1, block).copy()
        norms = np.linalg.norm(u, axis=1)
        live = norms > 0.0
        u[live] /= norms[live, None]
        return _l2(u.ravel()).copy()
    if scheme == "signed_power_then_l2":
        if power <= 0:
            raise ValueError("power must be > 0")
        w = np.sign(v) * np.abs(v) ** power
        return _l2(w).copy()
    raise ValueError(f"unknown normalization scheme {scheme!r}")


def normalize_values_vjp(values: np.ndarray, upstream: np.ndarray, scheme: str,
                         block: int, power: float = 0.5) -> np.ndarray:
    """Gradient of ``normalize_values`` w.r.t. its input (vector-Jacobian)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    g = np.asarray(upstream, dtype=np.float64).ravel()
    if scheme == "none":
        return g.copy()
    if scheme == "l2":
        return _l2_vjp(v, g)
    if scheme == "intra_l2_then_l2":
        u = v.reshape(-1, block).copy()
        norms = np.linalg.norm(u, axis=1)
        live = norms > 0.0
        u[live] /= norms[live, None]
        gu = _l2_vjp(u.ravel(), g).reshape(-1, block)
        gv = np.empty_like(gu)
        vb = v.reshape(-1, block)
        for i in range(gu.shape[0]):
            gv[i] = _l2_vjp(vb[i], gu[i]) if live[i] else gu[i]
        return gv.ravel()
    if scheme == "signed_power_then_l2":
        w = np.sign(v) * np.abs(v) ** power
        gw = _l2_vjp(w, g)
        safe = np.where(v == 0.0, 1.0, np.abs(v))
        dw = np.where(v == 0.0, 0.0, power * safe ** (power - 1.0))
        return gw * dw
    raise ValueError(f"unknown normalization scheme {scheme!r}")


def normalize_rows(values: np.ndarray, scheme: str, block: int,
                   power: float = 0.5) -> np.ndarray:
    """Batched :func:`normalize_values` over the rows of a (B, n) array."""
    v = np.asarray(values, dtype=np.float64)
    if scheme == "none":
        return v.copy()
    if scheme == "signed_power_then_l2":
        if power <= 0:
            raise ValueError("power must be > 0")
        v = np.sign(v) * np.abs(v) ** power
    elif scheme == "intra_l2_then_l2":
        if block < 1 or v.shape[1] % block != 0:
            raise ValueError("block size does not divide the encoding length")
        u = v.reshape(v.shape[0], -1, block).copy()
        norms = np.linalg.norm(u, axis=2)
        np.divide(u, norms[:, :, None], out=u, where=norms[:, :, None] > 0)
        v = u.reshape(v.shape[0], -1)
    elif scheme != "l2":
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, n, out=v.copy(), where=n > 0)


def normalize_rows_vjp(values: np.ndarray, upstream: np.ndarray, scheme: str,
                       block: int, power: float = 0.5) -> np.ndarray:
    """Batched :func:`normalize_values_vjp` over rows of (B, n) arrays."""
    v = np.asarray(values, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if scheme == "none":
        return g.copy()

    def row_l2_vjp(vals, ups):
        n = np.linalg.norm(vals, axis=-1, keepdims=True)
        dot = (vals * ups).sum(axis=-1, keepdims=True)
        out = np.where(n > 0, ups / np.where(n > 0, n, 1.0)
                       - vals * dot / np.where(n > 0, n ** 3, 1.0), ups)
        return out

    if scheme == "l2":
        return row_l2_vjp(v, g)
    if scheme == "intra_l2_then_l2":
        u = v.reshape(v.shape[0], -1, block).copy()
        norms = np.linalg.norm(u, axis=2)
        np.divide(u, norms[:, :, None], out=u, where=norms[:, :, None] > 0)
        gu = row_l2_vjp(u.reshape(v.shape[0], -1), g)
        return row_l2_vjp(v.reshape(v.shape[0], -1, block),
                          gu.reshape(v.shape[0], -1, block)
                          ).reshape(v.shape[0], -1)
    if scheme == "signed_power_then_l2":
        w = np.sign(v) * np.abs(v) ** power
        gw = row_l2_vjp(w, g)
        safe = np.where(v == 0.0, 1.0, np.abs(v))
        dw = np.where(v == 0.0, 0.0, power * safe ** (power - 1.0))
        return gw * dw
    raise ValueError(f"unknown normalization scheme {scheme!r}")


def normalize_encoding(v: EncodedVector, scheme: str,
                       power: float = 0.5) -> EncodedVector:
    """Scheme-normalized copy of an encoding; layout records the scheme."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    block = layout_dim(v.layout)
    out = normalize_values(v.values, scheme, block, power)
    return EncodedVector(out, v.layout + f":norm={scheme}")


# --- serialization: "EVEC" files ----------------------------------------

_EVEC_MAGIC = b"EVEC"
_EVEC_VERSION = 1


def write_encoding(path, v: EncodedVector) -> None:
    layout = v.layout.encode("utf-8")
    buf = io.BytesIO()
    buf.write(_EVEC_MAGIC)
    buf.write(struct.pack("<II", _EVEC_VERSION, len(layout)))
    buf.write(layout)
    buf.write(struct.pack("<I", v.size))
    buf.write(v.values.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_encoding(path) -> EncodedVector:
    from .dataio import BadMagicError, BadVersionError, TruncatedPayloadError

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _EVEC_MAGIC:
        raise BadMagicError("bad magic: not an EVEC file")
    if len(raw) < 12:
        raise TruncatedPayloadError("truncated EVEC header")
    version, layout_len = struct.unpack("<II", raw[4:12])
    if version != _EVEC_VERSION:
        raise BadVersionError(f"unsupported EVEC version {version}")
    off = 12
    if len(raw) < off + layout_len + 4:
        raise TruncatedPayloadError("truncated EVEC layout")
    layout = raw[off:off + layout_len].decode("utf-8")
    off += layout_len
    (n,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    if len(raw) < off + 8 * n:
        raise TruncatedPayloadError("truncated EVEC payload")
    values = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
    return EncodedVector(values, layout)
