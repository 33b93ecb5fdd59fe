"""Command-line surface: data generation, fitting, encoding, training,
evaluation, fusion, gradient checking and train-log export.

Config files are UTF-8 JSON with a ``schema_version`` field; every
command prints the resolved configuration (including the seed) before
doing work.  Exit codes: 0 ok, 2 usage, 3 data error, 4 divergence.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import classical, gmm as gmm_mod, netlayers as nl
from . import dataio, gradcheck as gc, metrics as me, train as tr
from .backend import BACKEND
from .rng import Rng

EXIT_DATA_ERROR = 3
EXIT_DIVERGENCE = 4


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except dataio.UttencDataError as err:
            click.echo(f"data error: {err}", err=True)
            sys.exit(EXIT_DATA_ERROR)
        except tr.DivergenceError as err:
            click.echo(f"divergence: {err}", err=True)
            sys.exit(EXIT_DIVERGENCE)
    return wrapper


def _load_config(path, section: str) -> dict:
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    if cfg.get("schema_version") != 1:
        raise dataio.UttencDataError(
            f"unsupported config schema_version {cfg.get('schema_version')!r}")
    if section not in cfg:
        raise dataio.UttencDataError(f"config missing section {section!r}")
    return cfg[section]


def _echo_config(name: str, resolved: dict) -> None:
    click.echo(f"{name} config: {json.dumps(resolved, sort_keys=True)}")


@click.group()
def main():
    """Sequence encoders and end-to-end training for utterance classification."""


# --- gen-data ------------------------------------------------------------

_TASK_DEFAULTS = dict(num_classes=5, dim=8, components_per_class=4,
                      separation=1.5, component_std=1.0,
                      zero_global_mean=False, length_range=[200, 1200],
                      splits={"train": 200, "test": 100}, seed=0)


@main.command("gen-data")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@_handle_errors
def gen_data(config_path, out_dir):
    """Generate a synthetic task: feature files plus per-split manifests."""
    task = dict(_TASK_DEFAULTS, **_load_config(config_path, "task"))
    buckets = dict({"short_max": 400, "medium_max": 1000})
    with open(config_path, encoding="utf-8") as f:
        buckets.update(json.load(f).get("buckets", {}))
    _echo_config("gen-data", {"task": task, "buckets": buckets})
    click.echo(f"seed: {task['seed']}")

    spec = tr.make_synthetic_task(
        num_classes=task["num_classes"], dim=task["dim"],
        components_per_class=task["components_per_class"],
        separation=task["separation"], length_range=task["length_range"],
        split_counts=task["splits"], seed=task["seed"],
        component_std=task["component_std"],
        zero_global_mean=task["zero_global_mean"])
    data = tr.generate_dataset(spec, Rng(task["seed"]))

    out = Path(out_dir)
    for split, utts in data.items():
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (frames, label) in enumerate(utts):
            name = f"{split}_{i:06d}.fseq"
            dataio.write_feature_file(split_dir / name, frames)
            t = frames.shape[0]
            if t <= buckets["short_max"]:
                bucket = "short"
            elif t <= buckets["medium_max"]:
                bucket = "medium"
            else:
                bucket = "long"
            entries.append(dataio.ManifestEntry(path=f"{split}/{name}",
                                                label=label, frames=t,
                                                bucket=bucket))
        dataio.write_manifest(out / f"{split}.csv", entries)
        click.echo(f"wrote {len(entries)} utterances to {out / f'{split}.csv'}")


# --- fit-gmm -------------------------------------------------------------

@main.command("fit-gmm")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--clusters", "-k", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--max-iters", default=50, show_default=True)
@click.option("--max-frames", default=50000, show_default=True,
              help="Cap on pooled training frames.")
@click.option("--out", "out_path", required=True, type=click.Path())
@_handle_errors
def fit_gmm(manifest, clusters, seed, max_iters, max_frames, out_path):
    """Fit a diagonal GMM codebook on pooled manifest frames."""
    _echo_config("fit-gmm", {"manifest": manifest, "clusters": clusters,
                             "seed": seed, "max_iters": max_iters,
                             "max_frames": max_frames})
    click.echo(f"seed: {seed}")
    utts = dataio.load_utterances(manifest)
    pool = np.concatenate([u[0] for u in utts], axis=0)
    if pool.shape[0] > max_frames:
        stride = int(np.ceil(pool.shape[0] / max_frames))
        pool = pool[::stride]
    rng = Rng(seed, stream=7)
    cb = gmm_mod.kmeans_fit(pool, clusters, rng, max_iters=max_iters)
    fit = gmm_mod.gmm_fit_em(pool, clusters, cb, max_iters=max_iters)
    gmm_mod.write_gmm(out_path, fit.gmm)
    click.echo(f"final log-likelihood: {fit.log_likelihood[-1]:.6f}")
    click.echo(f"wrote {out_path}")


# --- encode --------------------------------------------------------------

@main.command("encode")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--encoder", required=True,
              type=click.Choice(["supervector", "fv", "vlad",
                                 "tap", "netfv", "netvlad"]))
@click.option("--gmm", "gmm_path", type=click.Path(exists=True),
              help="DGMM codebook (classical encoders).")
@click.option("--model", "model_path", type=click.Path(exists=True),
              help="NETP checkpoint (net encoders; optional for tap).")
@click.option("--scheme", default="none", show_default=True,
              type=click.Choice(list(classical.SCHEMES)))
@click.option("--out-dir", required=True, type=click.Path())
@_handle_errors
def encode(manifest, encoder, gmm_path, model_path, scheme, out_dir):
    """Encode every manifest utterance to a fixed-size EVEC file."""
    _echo_config("encode", {"manifest": manifest, "encoder": encoder,
                            "gmm": gmm_path, "model": model_path,
                            "scheme": scheme})
    utts = sorted(dataio.load_utterances(manifest), key=lambda u: u[2])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if encoder in ("supervector", "fv", "vlad"):
        if gmm_path is None:
            raise click.UsageError("--gmm is required for classical encoders")
        model_gmm = gmm_mod.read_gmm(gmm_path)
        codebook = gmm_mod.KmeansCodebook(
            centroids=model_gmm.means,
            counts=np.zeros(model_gmm.num_components, dtype=np.int64))

        def run(frames):
            if encoder == "supervector":
                v = classical.supervector(model_gmm, frames)
            elif encoder == "fv":
                v = classical.fisher_vector(model_gmm, frames)
            else:
                v = classical.vlad(codebook, frames)
            return classical.normalize_encoding(v, scheme)
    else:
        model = tr.load_model(model_path) if model_path else None
        if model is None and encoder != "tap":
            raise click.UsageError("--model is required for net encoders")

        def run(frames):
            if model is None:
                v = nl.tap_forward(frames)
            else:
                h = nl.frontend_forward(model.frontend, frames)
                if encoder == "tap":
                    v = nl.tap_forward(h)
                elif encoder == "netfv":
                    v = nl.netfv_forward(model.enc, h)
                else:
                    return nl.netvlad_forward(model.enc, h, scheme=scheme)
            return classical.normalize_encoding(v, scheme)

    for frames, _, uid, _ in utts:
        classical.write_encoding(out / f"{uid}.evec", run(frames))
    click.echo(f"encoded {len(utts)} utterances to {out}")


# --- train ---------------------------------------------------------------

@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--data-dir", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@_handle_errors
def train_cmd(config_path, data_dir, out_dir):
    """Train the end-to-end model on the train split of a data directory."""
    raw = _load_config(config_path, "train")
    config = tr.TrainConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in raw.items()})
    resolved = dict(vars(config))
    resolved["scheme"] = config.resolved_scheme
    resolved["backend"] = BACKEND
    _echo_config("train", resolved)
    click.echo(f"seed: {config.seed}")

    utts = dataio.load_utterances(Path(data_dir) / "train.csv")
    dataset = {"train": [(u[0], u[1]) for u in utts]}
    model, log = tr.train_model(config, dataset)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr.save_model(out / "model.netp", model, extra_meta={"seed": config.seed})
    dataio.write_trainlog(out / "trainlog.tsv", log)
    click.echo(f"final train accuracy: {log.epoch_train_accuracy[-1]:.6f}")
    click.echo(f"final smoothed loss: {log.smoothed_loss[-1]:.10g}")
    click.echo(f"wrote {out / 'model.netp'} and {out / 'trainlog.tsv'}")


# --- evaluate ------------------------------------------------------------

def _metric_lines(trials: me.TrialScores):
    lines = []
    buckets = sorted(set(trials.buckets)) if trials.buckets else []
    rows = [("all", trials)]
    for b in buckets:
        if b != "-":
            mask = np.array([x == b for x in trials.buckets])
            rows.append((b, trials.subset(mask)))
    for name, t in rows:
        lines.append("%s\taccuracy=%.6f\teer=%.6f\tcavg=%.6f"
                     % (name, me.accuracy(t), me.pooled_eer(t), me.cavg(t)))
    return lines


@main.command("evaluate")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--scores-out", type=click.Path(), help="Write per-trial scores TSV.")
@_handle_errors
def evaluate(model_path, manifest, scores_out):
    """Score a manifest (no truncation) and report accuracy/EER/C_avg
    overall and per duration bucket."""
    _echo_config("evaluate", {"model": model_path, "manifest": manifest})
    model = tr.load_model(model_path)
    utts = sorted(dataio.load_utterances(manifest), key=lambda u: u[2])
    trials = tr.score_utterances(model, utts)
    if scores_out:
        dataio.write_scores(scores_out, trials)
    for line in _metric_lines(trials):
        click.echo(line)


# --- fuse ----------------------------------------------------------------

@main.command("fuse")
@click.argument("score_files", nargs=-1, required=True,
                type=click.Path(exists=True))
@click.option("--weights", help="Comma-separated fusion weights (sum to 1).")
@click.option("--out", "out_path", type=click.Path(), help="Fused scores TSV.")
@_handle_errors
def fuse(score_files, weights, out_path):
    """Score-level fusion of two or more systems' score files."""
    _echo_config("fuse", {"systems": list(score_files), "weights": weights})
    systems = [dataio.read_scores(p) for p in score_files]
    w = None
    if weights:
        w = [float(v) for v in weights.split(",")]
    try:
        fused = me.fuse_scores(systems, w)
    except ValueError as err:
        raise dataio.UttencDataError(str(err))
    if out_path:
        dataio.write_scores(out_path, fused)
    for line in _metric_lines(fused):
        click.echo(line)


# --- gradcheck -----------------------------------------------------------

@main.command("gradcheck")
@click.option("--encoder", "suite", default="all", show_default=True,
              type=click.Choice(["all"] + sorted(gc.SUITES)))
@click.option("--seed", default=0, show_default=True)
@click.option("--num-seeds", default=20, show_default=True)
@_handle_errors
def gradcheck_cmd(suite, seed, num_seeds):
    """Finite-difference verification of the analytic backward passes."""
    _echo_config("gradcheck", {"suite": suite, "seed": seed,
                               "num_seeds": num_seeds, "backend": BACKEND})
    click.echo(f"seed: {seed}")
    names = sorted(gc.SUITES) if suite == "all" else [suite]
    ok = True
    for name in names:
        err = gc.run_suite(name, range(seed, seed + num_seeds))
        tol = gc.TOLERANCES[name]
        status = "ok" if err < tol else "FAIL"
        ok = ok and err < tol
        click.echo(f"{name}\tmax_rel_error={err:.3e}\ttol={tol:.0e}\t{status}")
    sys.exit(0 if ok else 1)


# --- plot-data -----------------------------------------------------------

@main.command("plot-data")
@click.option("--trainlog", required=True, type=click.Path(exists=True))
@click.option("--columns", default="step,smoothed_loss", show_default=True)
@_handle_errors
def plot_data(trainlog, columns):
    """Emit selected train-log columns as TSV for external plotting."""
    wanted = columns.split(",")
    with open(trainlog, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        for col in wanted:
            if col not in header:
                raise dataio.UttencDataError(f"unknown column {col!r}")
        idx = [header.index(c) for c in wanted]
        click.echo("\t".join(wanted))
        for line in f:
            parts = line.rstrip("\n").split("\t")
            click.echo("\t".join(parts[i] for i in idx))


if __name__ == "__main__":
    main()
