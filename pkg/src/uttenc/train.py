"""Synthetic dataset generation, batch sampling and the SGD training loop.

The trainer composes front-end -> encoding layer -> classifier ->
softmax cross-entropy, trained with momentum SGD (classical update
v <- m*v + g + wd*p; p <- p - lr*v) and a step learning-rate schedule.
Batches use random truncation: one shared length L per batch drawn from
the configured range, per-utterance start index uniform in [0, T-L-1].
Evaluation never truncates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import netlayers as nl
from .classical import normalize_rows, normalize_rows_vjp
from .gmm import DiagonalGmm, gmm_fit_em, kmeans_fit
from .metrics import TrialScores
from .rng import Rng


class DivergenceError(RuntimeError):
    """Raised when a non-finite loss or gradient is encountered."""

    def __init__(self, message, partial_log=None):
        super().__init__(message)
        self.partial_log = partial_log


@dataclass
class SyntheticTaskSpec:
    """Multi-class sequence task: one frame-distribution GMM per class."""

    num_classes: int
    dim: int
    class_gmms: list
    length_range: tuple
    split_counts: dict
    seed: int = 0

    def __post_init__(self):
        if len(self.class_gmms) != self.num_classes:
            raise ValueError("one GMM per class required")
        if self.length_range[0] < 1 or self.length_range[0] > self.length_range[1]:
            raise ValueError("bad length range")
        for g in self.class_gmms:
            if g.dim != self.dim:
                raise ValueError("class GMMs must share the task dimension")


def make_synthetic_task(num_classes: int, dim: int, components_per_class: int,
                        separation: float, length_range, split_counts,
                        seed: int = 0, component_std: float = 1.0,
                        zero_global_mean: bool = False) -> SyntheticTaskSpec:
    """Random task with controlled per-frame overlap.

    Component means are drawn so the RMS pairwise mean distance is about
    ``separation * component_std``.  With ``zero_global_mean`` each class
    distribution is recentered to mean zero, removing the first-order
    (raw frame average) cue entirely.
    """
    rng = Rng(seed, stream=101)
    scale = separation * component_std / np.sqrt(2.0 * dim)
    gmms = []
    for _ in range(num_classes):
        means = rng.normal((components_per_class, dim), std=scale)
        weights = rng.generator.dirichlet(np.full(components_per_class, 2.0))
        weights = np.maximum(weights, 1e-3)
        weights = weights / weights.sum()
        if zero_global_mean:
            means = means - weights @ means
        stds = np.full((components_per_class, dim), float(component_std))
        gmms.append(DiagonalGmm(weights=weights, means=means, stds=stds))
    return SyntheticTaskSpec(num_classes=num_classes, dim=dim, class_gmms=gmms,
                             length_range=tuple(length_range),
                             split_counts=dict(split_counts), seed=seed)


def sample_gmm_sequence(gmm: DiagonalGmm, length: int, rng: Rng) -> np.ndarray:
    comp = rng.choice(gmm.num_components, size=length, p=gmm.weights)
    noise = rng.normal((length, gmm.dim))
    return gmm.means[comp] + gmm.stds[comp] * noise


def generate_dataset(spec: SyntheticTaskSpec, rng: Rng) -> dict:
    """Per split: list of (frames (T, D), label), labels round-robin."""
    t_min, t_max = spec.length_range
    out = {}
    for split_idx, (split, count) in enumerate(sorted(spec.split_counts.items())):
        srng = rng.split(1000 + split_idx)
        utts = []
        for i in range(count):
            label = i % spec.num_classes
            t = int(srng.integers(t_min, t_max))
            utts.append((sample_gmm_sequence(spec.class_gmms[label], t, srng),
                         label))
        out[split] = utts
    return out


def sample_batch(utterances: list, batch_size: int, l_range, rng: Rng):
    """One shared truncation length per batch; uniform start offsets.

    Returns (frames (B, L, D), labels (B,)).  L is drawn uniformly from
    ``l_range`` and clamped down to min(T)-1 over the selected
    utterances when necessary; an utterance strictly shorter than the
    lower bound is an error.
    """
    lo, hi = int(l_range[0]), int(l_range[1])
    if lo < 1 or lo > hi:
        raise ValueError("bad truncation range")
    idx = rng.choice(len(utterances), size=batch_size)
    lengths = [utterances[i][0].shape[0] for i in idx]
    if min(lengths) < lo:
        raise ValueError("utterance too short for the truncation range")
    length = int(rng.integers(lo, hi))
    length = min(length, min(lengths) - 1)
    frames = np.empty((batch_size, length, utterances[idx[0]][0].shape[1]))
    labels = np.empty(batch_size, dtype=np.int64)
    for j, i in enumerate(idx):
        x, label = utterances[i][0], utterances[i][1]
        start = int(rng.integers(0, x.shape[0] - length - 1))
        frames[j] = x[start:start + length]
        labels[j] = label
    return frames, labels


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the momentum-SGD recipe with a
    desk-scale step schedule (the long 90-epoch schedule with drops at
    60/80 is available by overriding epochs/drops)."""

    encoder: str = "tap"                    # tap | netfv | netvlad
    clusters: int = 8
    scheme: str | None = None               # None -> per-encoder default
    power: float = 0.5
    init_mode: str = "from-gmm"             # from-gmm | random
    init_scale: float = 1.0                 # hard-assignment scale s at init

    batch_size: int = 128
    truncation_range: tuple = (200, 1024)
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_epochs: int = 15
    lr_drop_epochs: tuple = (9, 12)
    lr_drop_factor: float = 0.1

    hidden_dims: tuple = (64,)
    channels: int = 32
    activation: str = "tanh"
    smooth_window: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.encoder not in ("tap", "netfv", "netvlad"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.truncation_range[0] > self.truncation_range[1]:
            raise ValueError("bad truncation range")
        for rate in (self.learning_rate, self.momentum + 1e-12,
                     self.weight_decay + 1e-12):
            if rate <= 0:
                raise ValueError("rates must be positive")

    @property
    def resolved_scheme(self) -> str:
        if self.scheme is not None:
            return self.scheme
        return "intra_l2_then_l2" if self.encoder == "netvlad" else "none"


@dataclass
class TrainLog:
    smooth_window: int
    steps: list = field(default_factory=list)
    raw_loss: list = field(default_factory=list)
    smoothed_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    epoch: list = field(default_factory=list)
    epoch_train_accuracy: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)


@dataclass
class Model:
    """Trained pipeline: front-end, encoding layer, classifier head."""

    frontend: nl.FrontEndParams
    encoder: str
    enc: object                 # NetFvParams | NetVladParams | None for tap
    clf_w: np.ndarray
    clf_b: np.ndarray
    scheme: str = "none"
    power: float = 0.5

    @property
    def num_classes(self) -> int:
        return self.clf_w.shape[0]

    def encode_batch(self, x: np.ndarray) -> np.ndarray:
        h = nl.frontend_forward(self.frontend, x)
        if self.encoder == "tap":
            return h.mean(axis=1)
        if self.encoder == "netfv":
            out = nl.netfv_forward_batch(self.enc, h)
            if self.scheme != "none":
                out = normalize_rows(out, self.scheme, self.enc.dim, self.power)
            return out
        return nl.netvlad_forward_batch(self.enc, h, self.scheme, self.power)

    def scores_batch(self, x: np.ndarray) -> np.ndarray:
        return nl.classifier_forward(self.clf_w, self.clf_b, self.encode_batch(x))

    def log_scores(self, frames: np.ndarray) -> np.ndarray:
        """Log-softmax class scores for one variable-length utterance."""
        return nl.log_softmax(self.scores_batch(frames[None, :, :])[0])


def encoding_length(encoder: str, clusters: int, channels: int) -> int:
    if encoder == "tap":
        return channels
    if encoder == "netfv":
        return 2 * clusters * channels
    return clusters * channels


def param_items(model: Model) -> list:
    """Ordered (name, array) pairs of every trainable buffer."""
    items = []
    for i, (w, b) in enumerate(zip(model.frontend.weights, model.frontend.biases)):
        items.append((f"frontend.w{i}", w))
        items.append((f"frontend.b{i}", b))
    if model.encoder == "netfv":
        items.append(("enc.w", model.enc.w))
        items.append(("enc.b", model.enc.b))
    elif model.encoder == "netvlad":
        items.append(("enc.mu", model.enc.mu))
        items.append(("enc.w", model.enc.w))
        items.append(("enc.b", model.enc.b))
    items.append(("clf.w", model.clf_w))
    items.append(("clf.b", model.clf_b))
    return items


def init_model(config: TrainConfig, dim: int, num_classes: int,
               train_utts: list, rng: Rng) -> Model:
    """Build the initial model; "from-gmm" fits a codebook on front-end
    outputs of a sample of training utterances and sets canonical values."""
    init_rng = rng.split(1)
    dims = [dim] + list(config.hidden_dims) + [config.channels]
    weights, biases = [], []
    for d_in, d_out in zip(dims, dims[1:]):
        weights.append(init_rng.normal((d_in, d_out), std=1.0 / np.sqrt(d_in)))
        biases.append(np.zeros(d_out))
    frontend = nl.FrontEndParams(weights=weights, biases=biases,
                                 activation=config.activation)

    c = config.channels
    k = config.clusters
    enc = None
    if config.encoder in ("netfv", "netvlad"):
        if config.init_mode == "from-gmm":
            pool = _sample_frontend_frames(frontend, train_utts, init_rng)
            cb = kmeans_fit(pool, k, init_rng.split(11), max_iters=25)
            if config.encoder == "netfv":
                fit = gmm_fit_em(pool, k, cb, max_iters=10)
                enc = nl.NetFvParams(w=1.0 / fit.gmm.stds, b=-fit.gmm.means)
            else:
                mu = cb.centroids
                s = config.init_scale
                enc = nl.NetVladParams(
                    mu=mu, w=2.0 * s * mu,
                    b=-s * (mu * mu).sum(axis=1))
        elif config.init_mode == "random":
            if config.encoder == "netfv":
                enc = nl.NetFvParams(
                    w=1.0 + 0.1 * init_rng.normal((k, c)),
                    b=0.1 * init_rng.normal((k, c)))
            else:
                mu = 0.5 * init_rng.normal((k, c))
                enc = nl.NetVladParams(mu=mu,
                                       w=init_rng.normal((k, c)) / np.sqrt(c),
                                       b=np.zeros(k))
        else:
            raise ValueError(f"unknown init mode {config.init_mode!r}")

    e = encoding_length(config.encoder, k, c)
    clf_w = init_rng.normal((num_classes, e), std=1.0 / np.sqrt(e))
    clf_b = np.zeros(num_classes)
    return Model(frontend=frontend, encoder=config.encoder, enc=enc,
                 clf_w=clf_w, clf_b=clf_b, scheme=config.resolved_scheme,
                 power=config.power)


def _sample_frontend_frames(frontend, train_utts, rng: Rng,
                            max_utts: int = 64, frames_per_utt: int = 128):
    n = len(train_utts)
    take = min(n, max_utts)
    idx = np.linspace(0, n - 1, take).astype(int)
    chunks = []
    for i in idx:
        x = train_utts[i][0]
        chunks.append(x[:min(x.shape[0], frames_per_utt)])
    pool = np.concatenate(chunks, axis=0)
    return nl.frontend_forward(frontend, pool)


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Step schedule; the rate is multiplied by the drop factor from each
    configured drop epoch onward (epochs are 1-based)."""
    drops = sum(1 for d in config.lr_drop_epochs if epoch >= d)
    return config.learning_rate * config.lr_drop_factor ** drops


def sgd_step(params: list, grads: list, velocity: dict, lr: float,
             momentum: float, weight_decay: float) -> None:
    """Classical momentum update, in place; refuses non-finite gradients."""
    for (name, p), g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"divergence: non-finite gradient in {name}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + g + weight_decay * p
        velocity[name] = v
        p -= lr * v


def loss_and_grads(model: Model, x: np.ndarray, labels: np.ndarray):
    """Mean batch loss and gradients ordered like :func:`param_items`."""
    h, cache = nl.frontend_forward(model.frontend, x, return_cache=True)
    L = x.shape[1]
    if model.encoder == "tap":
        enc_out = h.mean(axis=1)
    elif model.encoder == "netfv":
        enc_out = nl.netfv_forward_batch(model.enc, h)
        if model.scheme != "none":
            raw = enc_out
            enc_out = normalize_rows(raw, model.scheme, model.enc.dim,
                                     model.power)
    else:
        enc_out = nl.netvlad_forward_batch(model.enc, h, model.scheme, model.power)
    scores = nl.classifier_forward(model.clf_w, model.clf_b, enc_out)
    loss, gscores = nl.softmax_xent_batch(scores, labels)

    gclf_w, gclf_b, genc = nl.classifier_backward(model.clf_w, enc_out, gscores)
    enc_grads = []
    if model.encoder == "tap":
        gh = np.repeat(genc[:, None, :] / L, L, axis=1)
    elif model.encoder == "netfv":
        if model.scheme != "none":
            genc = normalize_rows_vjp(raw, genc, model.scheme,
                                      model.enc.dim, model.power)
        gw, gb, gh = nl.netfv_backward_batch(model.enc, h, genc)
        enc_grads = [gw, gb]
    else:
        gmu, gw, gb, gh = nl.netvlad_backward_batch(model.enc, h, genc,
                                                    model.scheme, model.power)
        enc_grads = [gmu, gw, gb]
    fe = nl.frontend_backward(model.frontend, x, gh, cache=cache)

    grads = []
    for gw_i, gb_i in zip(fe.weights, fe.biases):
        grads.extend([gw_i, gb_i])
    grads.extend(enc_grads)
    grads.extend([gclf_w, gclf_b])
    return loss, grads, scores


def train_model(config: TrainConfig, dataset: dict):
    """Train on ``dataset["train"]``; returns (model, TrainLog).

    Deterministic for a fixed config/seed.  A non-finite loss or
    gradient aborts with :class:`DivergenceError` carrying the partial log.
    """
    train_utts = dataset["train"]
    if not train_utts:
        raise ValueError("empty training split")
    dim = train_utts[0][0].shape[1]
    num_classes = 1 + max(utt[1] for utt in train_utts)

    rng = Rng(config.seed)
    model = init_model(config, dim, num_classes, train_utts, rng)
    batch_rng = rng.split(2)

    log = TrainLog(smooth_window=config.smooth_window)
    velocity: dict = {}
    steps_per_epoch = int(np.ceil(len(train_utts) / config.batch_size))
    step = 0
    window: list = []
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            lr = learning_rate_at(config, epoch)
            correct = 0
            seen = 0
            for _ in range(steps_per_epoch):
                x, labels = sample_batch(train_utts, config.batch_size,
                                         config.truncation_range, batch_rng)
                loss, grads, scores = loss_and_grads(model, x, labels)
                if not np.isfinite(loss):
                    raise DivergenceError("divergence: non-finite loss",
                                          partial_log=log)
                sgd_step(param_items(model), grads, velocity, lr,
                         config.momentum, config.weight_decay)
                step += 1
                window.append(loss)
                if len(window) > config.smooth_window:
                    window.pop(0)
                log.steps.append(step)
                log.raw_loss.append(loss)
                log.smoothed_loss.append(float(np.mean(window)))
                log.lr.append(lr)
                log.epoch.append(epoch)
                pred = scores.argmax(axis=1)
                correct += int((pred == labels).sum())
                seen += len(labels)
            log.epoch_train_accuracy.append(correct / seen)
            log.epoch_seconds.append(time.perf_counter() - t0)
    except DivergenceError as err:
        if err.partial_log is None:
            err.partial_log = log
        raise
    return model, log


def score_utterances(model: Model, utterances: list) -> TrialScores:
    """Full-length (no truncation) log-softmax scores for labeled
    utterances given as (frames, label[, id[, bucket]]) tuples."""
    ids, labels, buckets, rows = [], [], [], []
    for i, utt in enumerate(utterances):
        frames, label = utt[0], utt[1]
        uid = utt[2] if len(utt) > 2 else f"utt{i:06d}"
        bucket = utt[3] if len(utt) > 3 else "-"
        rows.append(model.log_scores(np.asarray(frames, dtype=np.float64)))
        ids.append(uid)
        labels.append(label)
        buckets.append(bucket)
    return TrialScores(ids=ids, scores=np.array(rows),
                       labels=np.array(labels), buckets=buckets)


# --- model checkpointing -------------------------------------------------

def save_model(path, model: Model, extra_meta: dict | None = None) -> None:
    meta = {
        "encoder": model.encoder,
        "scheme": model.scheme,
        "power": model.power,
        "activation": model.frontend.activation,
        "num_layers": len(model.frontend.weights),
        "num_classes": model.num_classes,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = dict(param_items(model))
    nl.write_checkpoint(path, meta, arrays)


def load_model(path) -> Model:
    meta, arrays = nl.read_checkpoint(path)
    n_layers = meta["num_layers"]
    frontend = nl.FrontEndParams(
        weights=[arrays[f"frontend.w{i}"] for i in range(n_layers)],
        biases=[arrays[f"frontend.b{i}"] for i in range(n_layers)],
        activation=meta["activation"])
    encoder = meta["encoder"]
    if encoder == "netfv":
        enc = nl.NetFvParams(w=arrays["enc.w"], b=arrays["enc.b"])
    elif encoder == "netvlad":
        enc = nl.NetVladParams(mu=arrays["enc.mu"], w=arrays["enc.w"],
                               b=arrays["enc.b"])
    else:
        enc = None
    return Model(frontend=frontend, encoder=encoder, enc=enc,
                 clf_w=arrays["clf.w"], clf_b=arrays["clf.b"],
                 scheme=meta["scheme"], power=meta["power"])
