"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line.  The three training-study criteria
(ordering, length robustness, fusion) share one module-scoped fixture
that trains TAP, NetFV-K8 and NetVLAD-K8 over four seeds on the same
synthetic five-class task.
"""

import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

import uttenc.netlayers as nl
from uttenc import train as T
from uttenc.classical import fisher_vector, layout_dim, layout_field, vlad
from uttenc.cli import main as cli_main
from uttenc.gmm import DiagonalGmm, KmeansCodebook
from uttenc.gradcheck import SUITES, TOLERANCES, run_suite
from uttenc.metrics import accuracy, cavg, eer, fuse_scores
from uttenc.rng import Rng

SEEDS = (1, 2, 3, 4)
ENCODERS = ("tap", "netfv", "netvlad")


def report(criterion, ok, detail):
    line = f"[{criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    assert ok, line


# --- criterion 1: gradient suite -----------------------------------------

def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst = {name: run_suite(name, range(100)) for name in sorted(SUITES)}
    elapsed = time.perf_counter() - t0
    ok = all(worst[n] < TOLERANCES[n] for n in worst) and elapsed < 120.0
    detail = ", ".join(f"{n}={worst[n]:.1e}" for n in worst)
    report("criterion 1: gradients, 100 seeds", ok,
           f"{detail}; {elapsed:.1f}s")


# --- criterion 2: VLAD hard-assignment limit -----------------------------

def test_criterion_02_vlad_limit():
    worst = 0.0
    for seed in range(50):
        rng = Rng(seed, stream=31)
        K = int(rng.integers(2, 5))
        D = int(rng.integers(2, 6))
        while True:                             # keep centroids well apart
            mu = 4.0 * rng.normal((K, D))
            gaps = np.linalg.norm(mu[:, None] - mu[None, :], axis=2)
            if gaps[~np.eye(K, dtype=bool)].min() > 2.0:
                break
        s = 100.0
        p = nl.NetVladParams(mu=mu, w=2.0 * s * mu,
                             b=-s * (mu * mu).sum(axis=1))
        L = int(rng.integers(5, 40))
        x = mu[rng.choice(K, size=L)] + 0.1 * rng.normal((L, D))
        cb = KmeansCodebook(centroids=mu, counts=np.zeros(K, dtype=np.int64))
        diff = np.abs(nl.netvlad_forward(p, x, scheme="none").values
                      - vlad(cb, x).values).max()
        worst = max(worst, diff)
    report("criterion 2: NetVLAD hard limit vs VLAD", worst < 1e-6,
           f"max abs diff {worst:.2e} over 50 instances")


# --- criterion 3: FV correspondence --------------------------------------

def test_criterion_03_fv_correspondence():
    # Correspondence: equal weights, every component sharing one sigma
    # vector (so the density posterior reduces to the distance softmax),
    # and the 1/sqrt(alpha_k), 1/sqrt(2 alpha_k) prefactors divided out.
    worst = 0.0
    for seed in range(50):
        rng = Rng(seed, stream=32)
        K = int(rng.integers(2, 5))
        D = int(rng.integers(2, 5))
        L = int(rng.integers(3, 20))
        means = 2.0 * rng.normal((K, D))
        sigma = 0.5 + rng.uniform(size=D)
        stds = np.tile(sigma, (K, 1))
        gmm = DiagonalGmm(weights=np.full(K, 1.0 / K), means=means, stds=stds)
        x = rng.normal((L, D), std=1.5)

        net = nl.netfv_forward(nl.NetFvParams(w=1.0 / stds, b=-means), x).values
        classical = fisher_vector(gmm, x).values.reshape(K, 2 * D)
        cls_mean = classical[:, :D] * np.sqrt(1.0 / K)
        cls_dev = classical[:, D:] * np.sqrt(2.0 / K) / np.sqrt(2.0)
        want = np.concatenate([cls_mean.ravel(), cls_dev.ravel()])
        worst = max(worst, float(np.abs(net - want).max()))
    report("criterion 3: NetFV canonical init vs classical FV", worst < 1e-10,
           f"max abs diff {worst:.2e} over 50 instances")


# --- criterion 4: degeneration to TAP ------------------------------------

def test_criterion_04_degeneration():
    from uttenc.backend import get_kernels
    ref = get_kernels("python")
    worst = 0.0
    gamma_exact = True
    for seed in range(20):
        rng = Rng(seed, stream=33)
        L = int(rng.integers(1, 30))
        D = int(rng.integers(2, 6))
        x = rng.normal((L, D))

        p = nl.NetVladParams(mu=np.zeros((1, D)), w=rng.normal((1, D)),
                             b=rng.normal(1))
        out = nl.netvlad_forward(p, x, scheme="none").values
        worst = max(worst, float(np.abs(out - L * nl.tap_forward(x).values).max()))

        # NetFV K = 1: the softmax of a single logit is exactly 1, so the
        # reference kernel must reproduce the same accumulation with the
        # assignment weights replaced by literal ones, bit for bit
        w = 1.0 + 0.3 * rng.normal((1, D))
        b = rng.normal((1, D))
        got = ref.netfv_forward(x[None], w, b)[0]
        z = (x[None] + b[0]) * w[0]
        ones = np.ones((1, L))
        mean_ref = np.einsum("bl,bld->bd", ones, z) / L
        dev_ref = np.einsum("bl,bld->bd", ones, z * z - 1.0) / (L * np.sqrt(2.0))
        gamma_exact = gamma_exact \
            and np.array_equal(got[:D], mean_ref[0]) \
            and np.array_equal(got[D:], dev_ref[0])
        # active backend agrees with the gamma = 1 closed form
        live = nl.netfv_forward(nl.NetFvParams(w=w, b=b), x).values
        worst = max(worst, float(np.abs(live[:D] - mean_ref[0]).max()),
                    float(np.abs(live[D:] - dev_ref[0]).max()))
    ok = worst < 1e-12 and gamma_exact
    report("criterion 4: K=1 degeneration to TAP", ok,
           f"max diff {worst:.2e}; netfv gamma exactly one: {gamma_exact}")


# --- criterion 5: fixed-size contract ------------------------------------

def test_criterion_05_fixed_size():
    rng = Rng(0, stream=34)
    D, K = 3, 2
    fv_p = nl.NetFvParams(w=np.ones((K, D)), b=np.zeros((K, D)))
    vl_p = nl.NetVladParams(mu=rng.normal((K, D)), w=rng.normal((K, D)),
                            b=rng.normal(K))
    sizes = {"tap": set(), "netfv": set(), "netvlad": set()}
    ok = True
    for L in (1, 50, 200, 1024):
        x = rng.normal((L, D))
        for name, enc in (("tap", nl.tap_forward(x)),
                          ("netfv", nl.netfv_forward(fv_p, x)),
                          ("netvlad", nl.netvlad_forward(vl_p, x))):
            sizes[name].add(enc.size)
            k = int(layout_field(enc.layout, "K"))
            d = layout_dim(enc.layout)
            declared = {"tap": d, "netfv": 2 * k * d, "netvlad": k * d}[name]
            ok = ok and enc.size == declared
    ok = ok and all(len(s) == 1 for s in sizes.values())
    report("criterion 5: fixed-size contract", ok,
           f"sizes {sorted((n, s.pop()) for n, s in sizes.items())}")


# --- criteria 6/7/9: shared training study -------------------------------

@pytest.fixture(scope="module")
def study():
    """Train every encoder over four seeds on one synthetic 5-class task."""
    task = T.make_synthetic_task(num_classes=5, dim=8, components_per_class=4,
                                 separation=1.5, length_range=(200, 1200),
                                 split_counts={"train": 2000, "test": 500},
                                 seed=42, zero_global_mean=True)
    data = T.generate_dataset(task, Rng(42))

    def probe_set(length, rng):
        return [(T.sample_gmm_sequence(task.class_gmms[i % 5], length, rng),
                 i % 5) for i in range(200)]

    prng = Rng(42, stream=7)
    probes = {L: probe_set(L, prng.split(L)) for L in (60, 600, 3000)}

    results = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        for enc in ENCODERS:
            cfg = T.TrainConfig(encoder=enc, clusters=8, seed=seed)
            model, log = T.train_model(cfg, data)
            trials = T.score_utterances(model, data["test"])
            results[(seed, enc)] = {
                "accuracy": accuracy(trials),
                "final_smoothed_loss": log.smoothed_loss[-1],
                "cavg": cavg(trials),
                "trials": trials,
                "length_accuracy": {L: accuracy(T.score_utterances(model,
                                                                   probes[L]))
                                    for L in probes},
            }
    results["train_seconds"] = time.perf_counter() - t0
    return results


def test_criterion_06_qualitative_ordering(study):
    good = 0
    lines = []
    for seed in SEEDS:
        tap = study[(seed, "tap")]
        ok = all(study[(seed, enc)]["accuracy"] >= tap["accuracy"]
                 and study[(seed, enc)]["final_smoothed_loss"]
                 <= tap["final_smoothed_loss"]
                 for enc in ("netfv", "netvlad"))
        good += ok
        lines.append(f"seed{seed}:" + "/".join(
            f"{study[(seed, e)]['accuracy']:.3f}" for e in ENCODERS))
    elapsed = study["train_seconds"]
    ok = good >= 3 and elapsed < 900.0
    report("criterion 6: NetFV/NetVLAD >= TAP ordering", ok,
           f"{good}/4 seeds ({'; '.join(lines)}); {elapsed:.0f}s")


def test_criterion_07_length_robustness(study):
    good = 0
    for seed in SEEDS:
        ok = all(np.isfinite(list(study[(seed, enc)]["length_accuracy"]
                                  .values())).all()
                 and study[(seed, enc)]["length_accuracy"][3000]
                 >= study[(seed, enc)]["length_accuracy"][60]
                 for enc in ENCODERS)
        good += ok
    report("criterion 7: long >= short accuracy", good >= 3,
           f"{good}/4 seeds, lengths 60/600/3000 evaluated without error")


def test_criterion_09_fusion(study):
    good = 0
    margins = []
    for seed in SEEDS:
        systems = [study[(seed, enc)]["trials"] for enc in ENCODERS]
        fused_cavg = cavg(fuse_scores(systems, [1 / 3, 1 / 3, 1 / 3]))
        best = min(study[(seed, enc)]["cavg"] for enc in ENCODERS)
        margins.append(fused_cavg - best)
        good += fused_cavg <= best + 0.005
    report("criterion 9: equal-weight fusion", good >= 3,
           f"{good}/4 seeds, fused-minus-best margins "
           + ", ".join(f"{m:+.4f}" for m in margins))


# --- criterion 8: metric hand examples -----------------------------------

def test_criterion_08_metrics():
    hand_eer = eer([3.0, 1.0], [2.0, 0.0])
    sep_eer = eer([3.0, 2.0], [1.0, 0.0])
    ids = [f"u{i}" for i in range(4)]
    from uttenc.metrics import TrialScores
    const = TrialScores(ids=ids, scores=np.zeros((4, 2)),
                        labels=np.array([0, 0, 1, 1]))
    oracle = TrialScores(ids=ids, scores=np.array([[100.0, -100.0],
                                                   [-100.0, 100.0]] * 2),
                         labels=np.array([0, 1, 0, 1]))
    ok = (hand_eer == 0.25 and sep_eer == 0.0
          and cavg(const) == 0.5 and cavg(oracle) == 0.0)

    rng = Rng(0, stream=35)
    tar = rng.normal(40, mean=0.8)
    non = rng.normal(60)
    base = eer(tar, non)
    invariant = True
    for _ in range(20):
        a = float(rng.uniform(0.2, 3.0))
        b = float(rng.normal(1)[0])
        c = float(rng.uniform(0.05, 0.5))
        fn = lambda s: a * np.asarray(s) + b + c * np.tanh(np.asarray(s))
        invariant = invariant and abs(eer(fn(tar), fn(non)) - base) < 1e-12
    ok = ok and invariant
    report("criterion 8: metric hand examples", ok,
           f"eer hand case {hand_eer}, constant-score cavg {cavg(const)}, "
           f"monotone invariance {invariant}")


# --- criterion 10: CLI determinism ---------------------------------------

def test_criterion_10_cli_determinism(tmp_path):
    runner = CliRunner()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "schema_version": 1,
        "task": dict(num_classes=3, dim=3, components_per_class=2,
                     separation=5.0, length_range=[30, 60],
                     splits={"train": 30, "test": 12}, seed=2),
        "train": dict(encoder="netfv", clusters=2, batch_size=8,
                      truncation_range=[15, 25], max_epochs=3,
                      lr_drop_epochs=[2], hidden_dims=[8], channels=6,
                      smooth_window=20, seed=3),
    }))
    data_dir = tmp_path / "data"
    res = runner.invoke(cli_main, ["gen-data", "--config", str(cfg),
                                   "--out-dir", str(data_dir)])
    assert res.exit_code == 0, res.output

    logs, metric_lines, score_bytes = [], [], []
    for name in ("run_a", "run_b"):
        run_dir = tmp_path / name
        res = runner.invoke(cli_main, ["train", "--config", str(cfg),
                                       "--data-dir", str(data_dir),
                                       "--out-dir", str(run_dir)])
        assert res.exit_code == 0, res.output
        logs.append((run_dir / "trainlog.tsv").read_bytes())
        scores = run_dir / "scores.tsv"
        res = runner.invoke(cli_main, ["evaluate", "--model",
                                       str(run_dir / "model.netp"),
                                       "--manifest",
                                       str(data_dir / "test.csv"),
                                       "--scores-out", str(scores)])
        assert res.exit_code == 0, res.output
        metric_lines.append([l for l in res.output.splitlines() if "\t" in l])
        score_bytes.append(scores.read_bytes())

    ok = (logs[0] == logs[1] and metric_lines[0] == metric_lines[1]
          and score_bytes[0] == score_bytes[1])
    report("criterion 10: determinism", ok,
           "byte-identical trainlog, scores and metric lines over two runs")
