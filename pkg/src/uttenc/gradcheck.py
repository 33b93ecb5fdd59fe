"""Central finite-difference verification of every backward pass.

The scalar probe is a fixed random projection of the layer output, so a
whole backward pass is checked by one directional loss.  Relative error
uses the denominator max(1, |analytic|, |numeric|), which degrades to
absolute error where the gradient itself is small.
"""

from __future__ import annotations

import numpy as np

from . import netlayers as nl
from . import train as tr
from .rng import Rng


def central_diff(f, arrays: list, h: float = 1e-5) -> list:
    """Per-coordinate central differences of a scalar function of a list
    of arrays (arrays are modified in place and restored)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic: list, numeric: list) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def _dims(rng: Rng):
    return (int(rng.integers(2, 8)), int(rng.integers(2, 5)),
            int(rng.integers(1, 4)))


def check_netfv(seed: int, h: float = 1e-5) -> float:
    rng = Rng(seed, stream=21)
    L, D, K = _dims(rng)
    x = rng.normal((L, D))
    p = nl.NetFvParams(w=1.0 + 0.3 * rng.normal((K, D)),
                       b=rng.normal((K, D)))
    u = rng.normal(2 * K * D)

    def f():
        return float(u @ nl.netfv_forward(p, x).values)

    g = nl.netfv_backward(p, x, u)
    numeric = central_diff(f, [p.w, p.b, x], h)
    return max_rel_error([g.w, g.b, g.frames], numeric)


def check_netvlad(seed: int, scheme: str = "none", h: float = 1e-5) -> float:
    rng = Rng(seed, stream=22)
    L, D, K = _dims(rng)
    x = rng.normal((L, D))
    p = nl.NetVladParams(mu=rng.normal((K, D)), w=rng.normal((K, D)),
                         b=rng.normal(K))
    u = rng.normal(K * D)

    def f():
        return float(u @ nl.netvlad_forward(p, x, scheme=scheme).values)

    g = nl.netvlad_backward(p, x, u, scheme=scheme)
    numeric = central_diff(f, [p.mu, p.w, p.b, x], h)
    return max_rel_error([g.mu, g.w, g.b, g.frames], numeric)


def check_frontend(seed: int, h: float = 1e-5) -> float:
    rng = Rng(seed, stream=23)
    L = int(rng.integers(2, 8))
    dims = [int(rng.integers(2, 5)) for _ in range(3)]
    x = rng.normal((L, dims[0]))
    p = nl.FrontEndParams(
        weights=[rng.normal((a, b)) / np.sqrt(a) for a, b in zip(dims, dims[1:])],
        biases=[0.1 * rng.normal(b) for b in dims[1:]],
        activation="tanh")
    u = rng.normal((L, dims[-1]))

    def f():
        return float((u * nl.frontend_forward(p, x)).sum())

    g = nl.frontend_backward(p, x, u)
    arrays = p.weights + p.biases + [x]
    numeric = central_diff(f, arrays, h)
    return max_rel_error(g.weights + g.biases + [g.frames], numeric)


def check_classifier(seed: int, h: float = 1e-5) -> float:
    rng = Rng(seed, stream=24)
    e = int(rng.integers(2, 6))
    c = int(rng.integers(2, 5))
    w = rng.normal((c, e))
    b = rng.normal(c)
    enc = rng.normal(e)
    u = rng.normal(c)

    def f():
        return float(u @ nl.classifier_forward(w, b, enc))

    gw, gb, ge = nl.classifier_backward(w, enc, u)
    numeric = central_diff(f, [w, b, enc], h)
    return max_rel_error([gw, gb, ge], numeric)


def check_xent(seed: int, h: float = 1e-6) -> float:
    rng = Rng(seed, stream=25)
    c = int(rng.integers(2, 6))
    scores = rng.normal(c)
    label = int(rng.integers(0, c - 1))

    def f():
        return nl.softmax_xent(scores, label)[0]

    _, grad = nl.softmax_xent(scores, label)
    numeric = central_diff(f, [scores], h)
    return max_rel_error([grad], numeric)


def check_pipeline(seed: int, scheme_for: str = "netvlad",
                   h: float = 1e-5) -> float:
    """Composed front-end -> encoder -> classifier -> cross-entropy."""
    rng = Rng(seed, stream=26)
    encoder = ("tap", "netfv", "netvlad")[seed % 3]
    L, D, K = _dims(rng)
    channels = int(rng.integers(2, 4))
    num_classes = 3
    x = rng.normal((2, L, D))
    labels = np.array([int(rng.integers(0, num_classes - 1)) for _ in range(2)])

    frontend = nl.FrontEndParams(
        weights=[rng.normal((D, 4)) / np.sqrt(D),
                 rng.normal((4, channels)) / 2.0],
        biases=[0.1 * rng.normal(4), 0.1 * rng.normal(channels)],
        activation="tanh")
    if encoder == "netfv":
        enc = nl.NetFvParams(w=1.0 + 0.3 * rng.normal((K, channels)),
                             b=rng.normal((K, channels)))
        scheme = "none"
    elif encoder == "netvlad":
        enc = nl.NetVladParams(mu=rng.normal((K, channels)),
                               w=rng.normal((K, channels)), b=rng.normal(K))
        scheme = "intra_l2_then_l2" if scheme_for == "netvlad" else "none"
    else:
        enc, scheme = None, "none"
    e_len = tr.encoding_length(encoder, K, channels)
    model = tr.Model(frontend=frontend, encoder=encoder, enc=enc,
                     clf_w=rng.normal((num_classes, e_len)) / np.sqrt(e_len),
                     clf_b=0.1 * rng.normal(num_classes), scheme=scheme)

    def f():
        h_out = nl.frontend_forward(model.frontend, x)
        if encoder == "tap":
            enc_out = h_out.mean(axis=1)
        elif encoder == "netfv":
            enc_out = nl.netfv_forward_batch(enc, h_out)
        else:
            enc_out = nl.netvlad_forward_batch(enc, h_out, scheme)
        scores = nl.classifier_forward(model.clf_w, model.clf_b, enc_out)
        return nl.softmax_xent_batch(scores, labels)[0]

    _, grads, _ = tr.loss_and_grads(model, x, labels)
    arrays = [p for _, p in tr.param_items(model)] + [x]
    numeric = central_diff(f, arrays, h)
    gx = _pipeline_input_grad(model, x, labels)
    return max_rel_error(grads + [gx], numeric)


def _pipeline_input_grad(model, x, labels):
    h_out, cache = nl.frontend_forward(model.frontend, x, return_cache=True)
    if model.encoder == "tap":
        enc_out = h_out.mean(axis=1)
    elif model.encoder == "netfv":
        enc_out = nl.netfv_forward_batch(model.enc, h_out)
    else:
        enc_out = nl.netvlad_forward_batch(model.enc, h_out, model.scheme,
                                           model.power)
    scores = nl.classifier_forward(model.clf_w, model.clf_b, enc_out)
    _, gscores = nl.softmax_xent_batch(scores, labels)
    _, _, genc = nl.classifier_backward(model.clf_w, enc_out, gscores)
    if model.encoder == "tap":
        gh = np.repeat(genc[:, None, :] / x.shape[1], x.shape[1], axis=1)
    elif model.encoder == "netfv":
        _, _, gh = nl.netfv_backward_batch(model.enc, h_out, genc)
    else:
        _, _, _, gh = nl.netvlad_backward_batch(model.enc, h_out, genc,
                                                model.scheme, model.power)
    return nl.frontend_backward(model.frontend, x, gh, cache=cache).frames


SUITES = {
    "netfv": lambda seed: check_netfv(seed),
    "netvlad": lambda seed: check_netvlad(seed, "none"),
    "netvlad_intra": lambda seed: check_netvlad(seed, "intra_l2_then_l2"),
    "frontend": check_frontend,
    "classifier": check_classifier,
    "xent": check_xent,
    "pipeline": check_pipeline,
}

TOLERANCES = {
    "netfv": 1e-6,
    "netvlad": 1e-6,
    "netvlad_intra": 1e-6,
    "frontend": 1e-6,
    "classifier": 1e-6,
    "xent": 1e-8,
    "pipeline": 1e-5,
}


def run_suite(name: str, seeds) -> float:
    check = SUITES[name]
    return max(check(seed) for seed in seeds)
