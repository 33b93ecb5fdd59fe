"""Differentiable pipeline pieces with hand-derived backward passes.

Per-frame front-end, the TAP / NetFV / NetVLAD encoding layers, the
fully connected classifier head and softmax cross-entropy.  Forward
passes accept a single (L, D) sequence; the ``*_batch`` variants take a
(B, L, D) stack of equal-length sequences and are what the trainer uses.
Backward passes return gradients w.r.t. parameters and layer input;
every one of them is pinned against central finite differences in the
test suite.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .backend import kernels
from .classical import (EncodedVector, layout_dim, make_layout,
                        normalize_rows, normalize_rows_vjp)
from .numcore import as_matrix

_SQRT2 = float(np.sqrt(2.0))


# --- parameter containers ------------------------------------------------

@dataclass
class NetFvParams:
    """Learnable inverse-scales w (K, D) and offsets b (K, D).

    At canonical (GMM-derived) initialization w = 1/sigma and b = -mu.
    """

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.w.shape != self.b.shape:
            raise ValueError("w and b must both be (K, D)")

    @property
    def clusters(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]


@dataclass
class NetVladParams:
    """Cluster anchors mu (K, D), assignment weights w (K, D), biases b (K,)."""

    mu: np.ndarray
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.mu.ndim != 2 or self.w.shape != self.mu.shape:
            raise ValueError("mu and w must both be (K, D)")
        if self.b.shape != (self.mu.shape[0],):
            raise ValueError("b must be (K,)")

    @property
    def clusters(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


@dataclass
class FrontEndParams:
    """Stack of per-frame affine transforms with an elementwise activation.

    ``weights[i]`` maps (d_in, d_out); the activation is applied after
    every layer ("tanh" or "identity").
    """

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases):
            raise ValueError("mismatched weight/bias stacks")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("inconsistent affine shapes")
        for wa, wb in zip(self.weights, self.weights[1:]):
            if wa.shape[1] != wb.shape[0]:
                raise ValueError("chained dimensions do not match")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


@dataclass
class NetFvGrads:
    w: np.ndarray
    b: np.ndarray
    frames: np.ndarray


@dataclass
class NetVladGrads:
    mu: np.ndarray
    w: np.ndarray
    b: np.ndarray
    frames: np.ndarray


@dataclass
class FrontEndGrads:
    weights: list
    biases: list
    frames: np.ndarray


def _as_batch(frames) -> np.ndarray:
    x = as_matrix(frames, "frames")
    return np.ascontiguousarray(x[None, :, :])


# --- TAP -----------------------------------------------------------------

def tap_forward(frames) -> EncodedVector:
    """Temporal average pooling: per-dimension mean over frames."""
    x = as_matrix(frames, "frames")
    return EncodedVector(x.mean(axis=0), make_layout("tap", 1, x.shape[1], "dimension"))


def tap_backward(frames, upstream: np.ndarray) -> np.ndarray:
    x = as_matrix(frames, "frames")
    g = np.asarray(upstream, dtype=np.float64).ravel()
    if g.shape != (x.shape[1],):
        raise ValueError("upstream shape does not match TAP output")
    return np.tile(g / x.shape[0], (x.shape[0], 1))


# --- NetFV ---------------------------------------------------------------

def netfv_forward_batch(p: NetFvParams, x: np.ndarray) -> np.ndarray:
    if x.ndim != 3 or x.shape[2] != p.dim:
        raise ValueError("frames must be (B, L, D) matching the layer dim")
    if x.shape[1] < 1:
        raise ValueError("empty input")
    return kernels.netfv_forward(np.ascontiguousarray(x), p.w, p.b)


def netfv_forward(p: NetFvParams, frames) -> EncodedVector:
    """Soft-assignment Fisher-style encoding, mean-pooled over frames.

    Output layout: all K mean blocks (cluster-major), then all K
    deviation blocks; length 2*K*D.
    """
    out = netfv_forward_batch(p, _as_batch(frames))[0]
    return EncodedVector(out, make_layout("netfv", p.clusters, p.dim,
                                          "means_then_sigmas"))


def netfv_backward_batch(p: NetFvParams, x: np.ndarray, gout: np.ndarray):
    if gout.shape != (x.shape[0], 2 * p.clusters * p.dim):
        raise ValueError("upstream shape does not match NetFV output")
    return kernels.netfv_backward(np.ascontiguousarray(x), p.w, p.b,
                                  np.ascontiguousarray(gout))


def netfv_backward(p: NetFvParams, frames, upstream) -> NetFvGrads:
    x = _as_batch(frames)
    g = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    gw, gb, gx = netfv_backward_batch(p, x, g)
    return NetFvGrads(w=gw, b=gb, frames=gx[0])


# --- NetVLAD -------------------------------------------------------------

def netvlad_forward_batch(p: NetVladParams, x: np.ndarray,
                          scheme: str = "none", power: float = 0.5) -> np.ndarray:
    if x.ndim != 3 or x.shape[2] != p.dim:
        raise ValueError("frames must be (B, L, D) matching the layer dim")
    if x.shape[1] < 1:
        raise ValueError("empty input")
    raw = kernels.netvlad_forward(np.ascontiguousarray(x), p.mu, p.w, p.b)
    B = x.shape[0]
    flat = raw.reshape(B, -1)
    if scheme == "none":
        return flat
    return normalize_rows(flat, scheme, p.dim, power)


def netvlad_forward(p: NetVladParams, frames, scheme: str = "intra_l2_then_l2",
                    power: float = 0.5) -> EncodedVector:
    """Soft-assignment VLAD followed by the configured normalization."""
    out = netvlad_forward_batch(p, _as_batch(frames), scheme, power)[0]
    layout = make_layout("netvlad", p.clusters, p.dim, "cluster") + f":norm={scheme}"
    return EncodedVector(out, layout)


def netvlad_backward_batch(p: NetVladParams, x: np.ndarray, gout: np.ndarray,
                           scheme: str = "none", power: float = 0.5):
    B = x.shape[0]
    K, D = p.clusters, p.dim
    if gout.shape != (B, K * D):
        raise ValueError("upstream shape does not match NetVLAD output")
    if scheme == "none":
        graw = gout
    else:
        raw = kernels.netvlad_forward(np.ascontiguousarray(x), p.mu, p.w, p.b)
        flat = raw.reshape(B, -1)
        graw = normalize_rows_vjp(flat, gout, scheme, D, power)
    gv = np.ascontiguousarray(graw.reshape(B, K, D))
    return kernels.netvlad_backward(np.ascontiguousarray(x), p.mu, p.w, p.b, gv)


def netvlad_backward(p: NetVladParams, frames, upstream,
                     scheme: str = "intra_l2_then_l2",
                     power: float = 0.5) -> NetVladGrads:
    x = _as_batch(frames)
    g = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    gmu, gw, gb, gx = netvlad_backward_batch(p, x, g, scheme, power)
    return NetVladGrads(mu=gmu, w=gw, b=gb, frames=gx[0])


# --- per-frame front-end -------------------------------------------------

def _activate(h: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(h) if activation == "tanh" else h


def frontend_forward(p: FrontEndParams, frames, return_cache: bool = False):
    """Per-frame affine stack; output has one row per input frame."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ValueError("frames must be (L, D) or (B, L, D)")
    if x.shape[-1] != p.in_dim:
        raise ValueError("frame dimension does not match the front-end")
    cache = [x]
    h = x
    for w, b in zip(p.weights, p.biases):
        h = _activate(h @ w + b, p.activation)
        cache.append(h)
    if return_cache:
        return h, cache
    return h


def frontend_backward(p: FrontEndParams, frames, upstream,
                      cache=None) -> FrontEndGrads:
    """Gradients of the affine stack; recomputes activations if no cache."""
    if cache is None:
        _, cache = frontend_forward(p, frames, return_cache=True)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache[-1].shape:
        raise ValueError("upstream shape does not match front-end output")
    gws, gbs = [], []
    for idx in range(len(p.weights) - 1, -1, -1):
        h_out = cache[idx + 1]
        h_in = cache[idx]
        if p.activation == "tanh":
            g = g * (1.0 - h_out * h_out)
        flat_in = h_in.reshape(-1, h_in.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        gws.append(flat_in.T @ flat_g)
        gbs.append(flat_g.sum(axis=0))
        g = g @ p.weights[idx].T
    return FrontEndGrads(weights=gws[::-1], biases=gbs[::-1], frames=g)


# --- classifier head and loss -------------------------------------------

def classifier_forward(weights: np.ndarray, bias: np.ndarray,
                       encoding: np.ndarray) -> np.ndarray:
    """Affine class scores (pre-activation logits)."""
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    e = np.asarray(encoding, dtype=np.float64)
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ValueError("classifier weights must be (C_out, E), bias (C_out,)")
    if e.shape[-1] != w.shape[1]:
        raise ValueError("encoding length does not match classifier")
    return e @ w.T + b


def classifier_backward(weights: np.ndarray, encoding: np.ndarray, upstream):
    """(grad_weights, grad_bias, grad_encoding) for the affine head."""
    w = np.asarray(weights, dtype=np.float64)
    e = np.atleast_2d(np.asarray(encoding, dtype=np.float64))
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    gw = g.T @ e
    gb = g.sum(axis=0)
    ge = g @ w
    if np.asarray(encoding).ndim == 1:
        ge = ge[0]
    return gw, gb, ge


def softmax_xent(scores, label: int):
    """Cross-entropy of softmax(scores) against a class index.

    Returns (loss, gradient w.r.t. scores); stable for large scores.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not (0 <= label < s.size):
        raise ValueError("label out of range")
    shifted = s - s.max()
    logz = float(np.log(np.exp(shifted).sum()))
    loss = logz - float(shifted[label])
    grad = np.exp(shifted - logz)
    grad[label] -= 1.0
    return loss, grad


def softmax_xent_batch(scores: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch; gradient already divided by B."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    B = s.shape[0]
    shifted = s - s.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float((logz - shifted[np.arange(B), y]).mean())
    grad = np.exp(shifted - logz[:, None])
    grad[np.arange(B), y] -= 1.0
    return loss, grad / B


def log_softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    shifted = s - s.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# --- checkpoint format ("NETP" sections) --------------------------------

_NETP_MAGIC = b"NETP"
_TAG_ARRAY = 0
_TAG_JSON = 1


def write_checkpoint(path, meta: dict, arrays: dict) -> None:
    """Versioned binary checkpoint: a JSON meta section plus named
    float64 array sections, each introduced by the NETP magic."""
    buf = io.BytesIO()

    def section(tag: str, kind: int, payload: bytes, shape=()):
        t = tag.encode("utf-8")
        buf.write(_NETP_MAGIC)
        buf.write(struct.pack("<II", kind, len(t)))
        buf.write(t)
        buf.write(struct.pack("<I", len(shape)))
        for s in shape:
            buf.write(struct.pack("<I", s))
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)

    meta = dict(meta, format_version=1)
    section("meta", _TAG_JSON, json.dumps(meta, sort_keys=True).encode("utf-8"))
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        section(name, _TAG_ARRAY, a.astype("<f8").tobytes(), a.shape)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(path):
    from .dataio import BadMagicError, BadVersionError, TruncatedPayloadError

    with open(path, "rb") as f:
        raw = f.read()
    meta = None
    arrays = {}
    off = 0
    while off < len(raw):
        if raw[off:off + 4] != _NETP_MAGIC:
            raise BadMagicError("bad magic: not a NETP section")
        off += 4
        kind, tlen = struct.unpack("<II", raw[off:off + 8])
        off += 8
        tag = raw[off:off + tlen].decode("utf-8")
        off += tlen
        (ndim,) = struct.unpack("<I", raw[off:off + 4])
        off += 4
        shape = struct.unpack("<" + "I" * ndim, raw[off:off + 4 * ndim])
        off += 4 * ndim
        (plen,) = struct.unpack("<Q", raw[off:off + 8])
        off += 8
        if off + plen > len(raw):
            raise TruncatedPayloadError(f"truncated section {tag!r}")
        payload = raw[off:off + plen]
        off += plen
        if kind == _TAG_JSON:
            meta = json.loads(payload.decode("utf-8"))
        else:
            arrays[tag] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if meta is None:
        raise BadMagicError("checkpoint has no meta section")
    if meta.get("format_version") != 1:
        raise BadVersionError("unsupported checkpoint version")
    return meta, arrays
