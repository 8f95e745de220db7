"""Acceptance checks, one test per criterion.

Each test records a pass/fail line that is printed in the terminal summary.
Criterion 6 trains the full desk-scale benchmark and takes several minutes.
"""

import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from conftest import blob_dataset, record_criterion
from cryoimb import losses
from cryoimb.checkpoint import load_checkpoint, save_checkpoint
from cryoimb.dataset import LabeledDataset, load_dataset, save_dataset
from cryoimb.ensembles import adaboost_train, bagging_train, samme_alpha, weighted_tally
from cryoimb.experiment import PLAIN, ExperimentConfig, run_experiment
from cryoimb.metrics import ConfusionMatrix, g_mean, macro_f1, macro_g_mean, precision_recall
from cryoimb.multipath import MultiPathModel, PathSpec, TrainConfig, build_head, build_path, train_multipath
from cryoimb.sampling import random_oversample, random_undersample, smote
from cryoimb.synthcryo import DatasetManifest, generate_dataset, scaled_counts
from cryoimb.tensor import (
    Activation,
    Conv3D,
    Dense,
    Flatten,
    MaxPool3D,
    Network,
    backward,
    finite_diff_grad,
    init_conv,
    init_dense,
    relative_error,
    softmax,
)

TABLE_COUNTS = [1043, 80, 125, 386]


# --- 1: gradient fidelity ---------------------------------------------------------


def random_net(rng, n_classes):
    C, D = int(rng.integers(1, 3)), int(rng.integers(4, 7))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    ch = int(rng.integers(1, 4))
    layers = [Conv3D(init_conv(rng, C, ch, k, np.float64), stride),
              Activation(str(rng.choice(["relu", "sigmoid"])))]
    extent = (D - k) // stride + 1
    if extent % 2 == 0 and rng.random() < 0.7:
        layers.append(MaxPool3D(2))
        extent //= 2
    hidden = int(rng.integers(2, 6))
    layers += [Flatten(), Dense(init_dense(rng, ch * extent**3, hidden, np.float64)),
               Activation(str(rng.choice(["relu", "sigmoid"]))),
               Dense(init_dense(rng, hidden, n_classes, np.float64))]
    return Network(layers), (C, D, D, D)


def test_criterion_1_gradient_fidelity():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst, seen = 0.0, set()
    for i in range(24):
        n = int(rng.integers(2, 5))
        net, shape = random_net(rng, n)
        x = rng.standard_normal((2,) + shape)
        y = losses.one_hot(rng.integers(0, n, 2), n, np.float64)
        if i % 2:
            alpha = rng.uniform(0.1, 1.0, n)
            loss_fn = lambda p, t, a=alpha: losses.focal_loss(p, t, losses.FocalConfig(2.0, a))  # noqa: E731
            seen.add("focal")
        else:
            loss_fn = losses.cross_entropy
            seen.add("ce")
        seen.update(type(l).__name__ if not isinstance(l, Activation) else l.kind for l in net.layers)
        _, dz = loss_fn(softmax(net.forward(x)), y)
        analytic = backward(net, x, dz)
        numeric = finite_diff_grad(net, x, lambda z: loss_fn(softmax(z), y)[0], 1e-6)
        worst = max(worst, relative_error(analytic, numeric))
    elapsed = time.perf_counter() - start
    covered = {"Conv3D", "MaxPool3D", "Dense", "Flatten", "relu", "sigmoid", "ce", "focal"} <= seen
    ok = worst < 1e-3 and elapsed < 60 and covered
    assert record_criterion("1", ok, f"24 nets, max rel err {worst:.2e}, {elapsed:.1f}s, coverage {covered}")


# --- 2: SMOTE count law and segment geometry --------------------------------------


def brute_neighbours(x, i, k):
    d = sorted((float(np.sum((x[j] - x[i]) ** 2)), j) for j in range(len(x)) if j != i)
    return [j for _, j in d[:k]]


def on_segment(p, a, b):
    d = b - a
    dd = float(d @ d)
    if dd == 0:
        return np.allclose(p, a, atol=1e-9)
    t = float((p - a) @ d) / dd
    return -1e-9 <= t <= 1 + 1e-9 and np.allclose(p, a + t * d, atol=1e-9)


def test_criterion_2_smote():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    bad_counts = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for N in range(100, 600, 100):
            for T in range(2, 21):
                got = len(smote(rng.standard_normal((T, 3)), N, 5, rng))
                if got != N // 100 * T:
                    bad_counts.append((N, T, got))
    off_segment = 0
    for _ in range(100):
        T, dim = int(rng.integers(2, 21)), int(rng.integers(1, 6))
        N, k = int(rng.integers(1, 6)) * 100, int(rng.integers(1, min(5, T - 1) + 1))
        x = rng.standard_normal((T, dim))
        out = smote(x, N, k, rng)
        per = N // 100
        for r, s in enumerate(out):
            i = r // per
            off_segment += not any(on_segment(s, x[i], x[j]) for j in brute_neighbours(x, i, k))
    elapsed = time.perf_counter() - start
    ok = not bad_counts and off_segment == 0 and elapsed < 60
    assert record_criterion("2", ok, f"count mismatches {len(bad_counts)}, off-segment samples "
                                     f"{off_segment}, {elapsed:.1f}s")


# --- 3: random under/oversampling ------------------------------------------------


def test_criterion_3_resampling():
    rng = np.random.default_rng(303)
    labels = np.repeat(np.arange(4), TABLE_COUNTS)
    ds = LabeledDataset(rng.standard_normal((len(labels), 2)), labels, 4)
    under = random_undersample(ds, rng).class_counts().tolist()
    over = random_oversample(ds, rng).class_counts().tolist()
    ok = under == [80] * 4 and over == [1043] * 4
    assert record_criterion("3", ok, f"undersampled {under}, oversampled {over}")


# --- 4: metrics -------------------------------------------------------------------


def brute_macro(m):
    n = len(m)
    f1s, gs = [], []
    for c in range(n):
        tp = m[c][c]
        fn = sum(m[c][j] for j in range(n) if j != c)
        fp = sum(m[i][c] for i in range(n) if i != c)
        tn = sum(m[i][j] for i in range(n) for j in range(n) if i != c and j != c)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
        s = tn / (tn + fp) if tn + fp else 0.0
        gs.append((r * s) ** 0.5)
    return sum(f1s) / n, sum(gs) / n


def test_criterion_4_metrics():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 7))
        m = rng.integers(0, 60, (n, n)) * (rng.random((n, n)) > 0.2)
        cm = ConfusionMatrix(m)
        f, g = brute_macro(m.tolist())
        worst = max(worst, abs(macro_f1(cm) - f), abs(macro_g_mean(cm) - g))
    spot = ConfusionMatrix([[8, 2], [2, 88]])
    p, r = precision_recall(spot, 0)
    gm = g_mean(spot, 0)
    base = np.zeros((4, 4), dtype=int)
    base[:, 0] = TABLE_COUNTS
    baseline = macro_f1(ConfusionMatrix(base))
    ok = (worst <= 1e-12 and abs(p - 0.8) < 1e-3 and abs(r - 0.8) < 1e-3
          and abs(gm - 0.8845) < 1e-3 and abs(baseline - 0.194) < 1e-3)
    assert record_criterion("4", ok, f"max brute-force gap {worst:.1e}; P={p:.4f} R={r:.4f} "
                                     f"G-mean={gm:.4f} majority macro F1={baseline:.4f}")


# --- 5: loss reductions -----------------------------------------------------------


def small_model(rng):
    spec = [["conv", 3, 4], ["relu"], ["pool", 2]]
    specs = [PathSpec(c, spec, 8) for c in range(2)]
    paths = [build_path(s, 8, rng) for s in specs]
    return MultiPathModel(paths, build_head(16, 2, rng, 16), 2, specs, 8, frozen_paths=False)


def test_criterion_5_reductions():
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 7))
        p = softmax(rng.standard_normal((4, k)) * 3)
        y = rng.random((4, k))
        y /= y.sum(axis=1, keepdims=True)
        lf, gf = losses.focal_loss(p, y, losses.FocalConfig(0.0, 1.0))
        lc, gc = losses.cross_entropy(p, y)
        worst = max(worst, abs(lf - lc), float(np.max(np.abs(gf - gc))))
    x1, x2 = rng.standard_normal((2, 8, 8, 8))
    xm, ym = losses.mixup_pair(x1, np.eye(2)[0], x2, np.eye(2)[1], 1.0)
    identity = np.array_equal(xm, x1) and np.array_equal(ym, np.eye(2)[0])

    ds = blob_dataset(rng, [16, 8])
    base = small_model(rng)
    a, b = base.copy(), base.copy()
    cfg = TrainConfig(epochs=3, batch_size=5)
    train_multipath(a, ds, "ce", None, cfg, np.random.default_rng(9))
    train_multipath(b, ds, "focal", losses.MixupConfig(enabled=False), cfg, np.random.default_rng(9),
                    losses.FocalConfig(0.0, 1.0))
    identical = all(np.array_equal(p, q) for p, q in zip(a.all_parameters(), b.all_parameters()))
    ok = worst < 1e-9 and identity and identical
    assert record_criterion("5", ok, f"focal/CE max gap {worst:.1e}; mixup(1) identity {identity}; "
                                     f"training bit-identical {identical}")


# --- 6: desk benchmark ------------------------------------------------------------


def test_criterion_6_desk_benchmark():
    cfg = ExperimentConfig(
        manifest=DatasetManifest(n_per_class=scaled_counts(817), dim=16),
        strategies=[PLAIN, "mixup+focal"],
        seeds=list(range(10)),
        focal_alpha="inverse",
    )
    start = time.perf_counter()
    report = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    f1 = {(r.strategy, r.seed): r.macro_f1 for r in report.rows}
    ce = [f1[(PLAIN, s)] for s in cfg.seeds]
    mf = [f1[("mixup+focal", s)] for s in cfg.seeds]
    baseline = 0.194
    print("seed  CE     mixup+focal")
    for s, a, b in zip(cfg.seeds, ce, mf):
        print(f"{s:>4}  {a:.3f}  {b:.3f}")
    ok_a = all(v >= 0.60 and v > baseline for v in mf)
    wins = sum(b > a for a, b in zip(ce, mf))
    ok_b = wins >= 7
    record_criterion("6a", ok_a, f"mixup+focal macro F1 min {min(mf):.3f} (need >= 0.60), "
                                 f"median {np.median(mf):.3f}")
    record_criterion("6b", ok_b, f"mixup+focal beats CE in {wins}/10 seeds (need >= 7); "
                                 f"median CE {np.median(ce):.3f}; {elapsed:.0f}s on "
                                 f"{report.config['workers'] or 'auto'} workers")
    assert ok_a and ok_b


# --- 7: path counts ---------------------------------------------------------------


def test_criterion_7_path_counts():
    start = time.perf_counter()
    outcomes = {}
    for n, counts in ((2, [60, 20]), (3, [60, 20, 30]), (4, [60, 20, 30, 40])):
        cfg = ExperimentConfig(
            manifest=DatasetManifest(n_per_class=counts, dim=16),
            strategies=[PLAIN, "mixup+focal"],
            seeds=[0],
            train=TrainConfig(epochs=3, path_epochs=2),
            workers=1,
        )
        report = run_experiment(cfg)
        outcomes[n] = all(r.status == "ok" and np.isfinite(r.macro_f1) for r in report.rows)
    elapsed = time.perf_counter() - start
    ok = all(outcomes.values()) and elapsed < 600
    assert record_criterion("7", ok, f"built, trained and evaluated {outcomes}, {elapsed:.0f}s")


# --- 8: determinism and persistence ----------------------------------------------


def test_criterion_8_determinism(tmp_path):
    cfg = ExperimentConfig(
        manifest=DatasetManifest(n_per_class=[40, 12, 16, 24], dim=16),
        strategies=[PLAIN, "smote+boosting", "mixup+focal"],
        seeds=[3],
        train=TrainConfig(epochs=2, path_epochs=1),
        boosting_m=2,
        workers=1,
    )
    runs = [run_experiment(replace(cfg, out_dir=str(tmp_path / f"run{i}"))) for i in range(2)]
    key = lambda rep: [(r.strategy, r.seed, r.macro_f1, r.macro_g_mean, r.status) for r in rep.rows]  # noqa: E731
    same_rows = key(runs[0]) == key(runs[1]) and runs[0].predictions == runs[1].predictions
    ck = sorted((tmp_path / "run0" / "checkpoints").iterdir())
    same_ckpt = all((tmp_path / "run1" / "checkpoints" / f.name).read_bytes() == f.read_bytes() for f in ck)

    ds = generate_dataset(cfg.manifest)
    save_dataset(ds, tmp_path / "d.cetv")
    data_trip = load_dataset(tmp_path / "d.cetv").equals(ds)
    save_checkpoint(load_checkpoint(ck[0]), tmp_path / "again.mpck")
    ckpt_trip = (tmp_path / "again.mpck").read_bytes() == ck[0].read_bytes()
    ok = same_rows and same_ckpt and data_trip and ckpt_trip
    assert record_criterion("8", ok, f"rows/predictions identical {same_rows}, checkpoints identical "
                                     f"{same_ckpt} ({len(ck)} files), dataset round trip {data_trip}, "
                                     f"checkpoint round trip {ckpt_trip}")


# --- 9: ensembles -----------------------------------------------------------------


class NearestMean:
    def __init__(self, ds):
        flat = ds.volumes.reshape(len(ds), -1)
        self.means = np.stack([flat[ds.labels == c].mean(axis=0) if np.any(ds.labels == c)
                               else np.full(flat.shape[1], 1e6) for c in range(ds.n_classes)])

    def predict_probs(self, x):
        d = ((x.reshape(len(x), 1, -1) - self.means[None]) ** 2).sum(axis=-1)
        return np.eye(len(self.means))[d.argmin(axis=1)]


def test_criterion_9_ensembles():
    rng = np.random.default_rng(909)
    labels = rng.integers(0, 3, 90)
    ds = LabeledDataset(labels[:, None] * 1.5 + rng.standard_normal((90, 2)), labels, 3)
    bag = bagging_train(NearestMean, 5, ds, rng)
    sizes_ok = all(len(r) == len(ds) for r in bag.history["replicas"])
    alpha0 = samme_alpha(0.5, 2)
    boost = adaboost_train(NearestMean, 5, ds, 3, rng)
    drift = max(abs(w.sum() - 1.0) for w in boost.history["sample_weights"])
    mismatches = 0
    for _ in range(1000):
        M, n, k = int(rng.integers(1, 8)), int(rng.integers(1, 5)), int(rng.integers(2, 6))
        votes = rng.integers(0, k, (M, n))
        w = rng.random(M)
        tally = weighted_tally(votes, w, k)
        for i in range(n):
            want = [sum(w[m] for m in range(M) if votes[m, i] == c) for c in range(k)]
            mismatches += not np.allclose(tally[i], want, atol=1e-12)
    ok = sizes_ok and alpha0 == 0.0 and drift <= 1e-9 and mismatches == 0
    assert record_criterion("9", ok, f"replica sizes ok {sizes_ok}, alpha(0.5, 2) = {alpha0}, "
                                     f"weight-sum drift {drift:.1e}, vote mismatches {mismatches}/1000")
