"""Acceptance suite: one test per criterion.

Each test records its criterion label and a short detail string; conftest.py
prints a PASS/FAIL line per criterion at the end of the session.
"""

import time

import numpy as np
import pytest
from sklearn.cluster import KMeans

from gradcheck import check_layer, check_network, numeric_grad, rel_error
from test_cli import pipeline
from timeagg.architectures import ALL_KINDS, HyperParams, TrainConfig, build_network, predict, train
from timeagg.artifact import load_model, save_model
from timeagg.cohort import build_grids, fit_stats, grids_to_arrays, prepare_grids, stratified_split
from timeagg.interpret import joint_probabilities, permutation_importance, tsne
from timeagg.metrics import auroc, delong_ci, delong_variance
from timeagg.neuralnet import GRU, LSTM, Conv1D, Dense, TimeDistributedDense, bce_loss, penalty
from timeagg.synthgen import GeneratorConfig, generate_cohort, schema_for
from timeagg.tuner import SearchSpace, run_study, sample_uniform

RECURRENT_TOL = 1e-4
FEEDFORWARD_TOL = 1e-6
INSTANCES = 20


def label(record_property, criterion):
    record_property("criterion", criterion)
    return lambda detail: record_property("detail", detail)


def prepared(cohort, fractions, seed):
    parts = stratified_split(cohort, fractions, seed)
    stats = fit_stats(build_grids(parts[0]), cohort.schema)
    grids = [prepare_grids(build_grids(p), stats, cohort.schema) for p in parts]
    return grids, stats


# ------------------------------------------------------------- 1 gradients

def _layer_cases(rng):
    b, t = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    c, u = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    k = int(rng.integers(1, t + 1))
    gru = GRU(c, u, rng)
    gru.params["bias"] = rng.normal(size=3 * u) * 0.5
    return [
        ("dense", Dense(c, u, rng), rng.normal(size=(b, c)), FEEDFORWARD_TOL),
        ("tdd", TimeDistributedDense(c, u, rng), rng.normal(size=(b, t, c)), FEEDFORWARD_TOL),
        ("conv_valid", Conv1D(c, u, k, "valid", rng), rng.normal(size=(b, t, c)), FEEDFORWARD_TOL),
        ("conv_causal", Conv1D(c, u, k, "causal", rng), rng.normal(size=(b, t, c)), FEEDFORWARD_TOL),
        ("gru", gru, rng.normal(size=(b, t, c)), RECURRENT_TOL),
        ("lstm", LSTM(c, u, rng), rng.normal(size=(b, t, c)), RECURRENT_TOL),
    ]


def _output_error(rng):
    n, c = int(rng.integers(2, 9)), int(rng.integers(2, 5))
    layer, x = Dense(c, 1, rng), rng.normal(size=(n, c))
    y = (rng.random(n) < 0.5).astype(float)

    def loss():
        return bce_loss(layer.forward(x)[:, 0], y)[0]

    _, g = bce_loss(layer.forward(x)[:, 0], y)
    gx = layer.backward(g[:, None])
    grads = {k: v.copy() for k, v in layer.grads.items()}
    errs = [rel_error(gx, numeric_grad(loss, x))]
    errs += [rel_error(grads[k], numeric_grad(loss, p)) for k, p in layer.params.items()]
    return max(errs)


def _penalty_error(rng):
    ws = [rng.normal(size=(int(rng.integers(2, 5)), 3)) for _ in range(3)]
    l1, l2 = 10 ** rng.uniform(-6, -1), 10 ** rng.uniform(-6, -1)
    _, grads = penalty(ws, l1, l2)
    return max(rel_error(g, numeric_grad(lambda: penalty(ws, l1, l2)[0], w))
               for g, w in zip(grads, ws))


def _network_error(rng, kind):
    hp = HyperParams(int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 4)),
                     l1=10 ** rng.uniform(-4, -2), l2=10 ** rng.uniform(-4, -2), conv_kernel=2)
    net = build_network(kind, hp, 3, 3, seed=int(rng.integers(1 << 30)))
    # zero-initialized biases can put a ReLU exactly on its kink
    for layer in net.layers:
        for k in layer.params:
            if layer.params[k].ndim == 1:
                layer.params[k] += rng.normal(size=layer.params[k].shape) * 0.5
    X = rng.normal(size=(4, 3, 3))
    y = np.array([0, 1, 1, 0.0])
    return check_network(net, X, y)


def test_criterion_1_gradients(record_property):
    report = label(record_property, "1 gradient correctness")
    rng = np.random.default_rng(2024)
    worst, start = {}, time.perf_counter()
    for _ in range(INSTANCES):
        for name, layer, x, tol in _layer_cases(rng):
            worst[name] = (max(worst.get(name, (0, tol))[0], check_layer(layer, x, rng)), tol)
        worst["output"] = (max(worst.get("output", (0,))[0], _output_error(rng)), FEEDFORWARD_TOL)
        worst["penalty"] = (max(worst.get("penalty", (0,))[0], _penalty_error(rng)), FEEDFORWARD_TOL)
        kind = ALL_KINDS[_ % len(ALL_KINDS)]
        tol = RECURRENT_TOL if kind.value in ("tdd_gru", "tdd_lstm") else FEEDFORWARD_TOL
        worst[f"net_{kind.value}"] = (max(worst.get(f"net_{kind.value}", (0,))[0],
                                          _network_error(rng, kind)), tol)
    elapsed = time.perf_counter() - start
    bad = {k: e for k, (e, tol) in worst.items() if not e < tol}
    report(f"max rel err {max(e for e, _ in worst.values()):.1e}, "
           f"{len(worst)} checks x {INSTANCES} instances, {elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < 30


# ------------------------------------------------------------- 2 auROC oracle

def brute_auroc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))


def test_criterion_2_auroc_oracle(record_property):
    report = label(record_property, "2 auROC oracle equivalence")
    rng = np.random.default_rng(7)
    start, mismatches, tied = time.perf_counter(), 0, 0
    for _ in range(500):
        n = int(rng.integers(2, 201))
        labels = np.zeros(n, int)
        labels[rng.choice(n, int(rng.integers(1, n)), replace=False)] = 1
        scores = rng.integers(0, int(rng.integers(2, 30)), size=n).astype(float)
        tied += len(np.unique(scores)) < n
        mismatches += auroc(scores, labels) != brute_auroc(scores, labels)
    elapsed = time.perf_counter() - start
    report(f"{mismatches}/500 mismatches, {tied} instances with ties, {elapsed:.1f}s")
    assert mismatches == 0
    assert elapsed < 10


# ------------------------------------------------------------- 3 DeLong

def bootstrap_ci(pos, neg, rng, resamples=10_000):
    """Class-stratified percentile bootstrap, via the pairwise win matrix."""
    win = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    a = rng.multinomial(len(pos), np.full(len(pos), 1 / len(pos)), size=resamples)
    b = rng.multinomial(len(neg), np.full(len(neg), 1 / len(neg)), size=resamples)
    aucs = np.einsum("ri,ri->r", a @ win, b) / (len(pos) * len(neg))
    return np.percentile(aucs, [2.5, 97.5])


def test_criterion_3_delong(record_property):
    report = label(record_property, "3 DeLong validity")
    rng = np.random.default_rng(11)
    start, worst = time.perf_counter(), 0.0
    for i in range(20):
        shift = 0.25 + 0.1 * i
        pos, neg = rng.normal(shift, 1.0, 100), rng.normal(0.0, 1.0, 100)
        scores = np.concatenate([pos, neg])
        labels = np.r_[np.ones(100), np.zeros(100)]
        _, lo, hi = delong_ci(scores, labels)
        blo, bhi = bootstrap_ci(pos, neg, rng)
        worst = max(worst, abs(lo - blo), abs(hi - bhi))
    auc, var = delong_variance(np.r_[np.arange(5.0) + 10, np.arange(5.0)], np.r_[np.ones(5), np.zeros(5)])
    elapsed = time.perf_counter() - start
    report(f"max endpoint gap {worst:.4f}, separated-case variance {var}, {elapsed:.1f}s")
    assert worst <= 0.03
    assert auc == 1.0 and var == 0.0
    assert elapsed < 120


# ------------------------------------------------------------- 4 ordering

ORDER_SEEDS = range(5)
ORDER_TRIALS = 30


@pytest.mark.slow
def test_criterion_4_ordering(record_property):
    report = label(record_property, "4 architecture ordering")
    start = time.perf_counter()
    results = {k.value: [] for k in ALL_KINDS}
    for seed in ORDER_SEEDS:
        cohort = generate_cohort(GeneratorConfig(n_patients=578, signal_strength=0.7, seed=seed))
        (tr, va, te), _ = prepared(cohort, (0.638, 0.161, 0.201), seed)
        assert (len(tr), len(va), len(te)) == (369, 93, 116)
        T, V, E = (grids_to_arrays(g) for g in (tr, va, te))
        for kind in ALL_KINDS:
            cfg = TrainConfig(max_epochs=200)
            objective = lambda p, s, k=kind: float(min(train(
                k, HyperParams(**p), T, V, TrainConfig(cfg.batch_size, cfg.max_epochs, s)
            ).history["val_loss"]))
            best, _ = run_study(objective, SearchSpace.default(kind.is_conv), ORDER_TRIALS, seed)
            model = train(kind, HyperParams(**best.params), T, V,
                          TrainConfig(max_epochs=200, seed=best.seed))
            results[kind.value].append(auroc(predict(model, E[0]), E[1]))
    means = {k: float(np.mean(v)) for k, v in results.items()}
    dense = means["dense"]
    report(", ".join(f"{k}={m:.3f}" for k, m in means.items())
           + f"; gru-dense={means['tdd_gru'] - dense:+.3f}; {time.perf_counter() - start:.0f}s")
    for kind, mean in means.items():
        assert mean >= dense, (kind, means)
    assert means["tdd_gru"] - dense >= 0.02, means


# ------------------------------------------------------------- 5 importance

def test_criterion_5_importance(record_property):
    report = label(record_property, "5 permutation importance sanity")
    start, winners, noise = time.perf_counter(), [], []
    for seed in range(5):
        cohort = generate_cohort(GeneratorConfig(n_patients=600, signal_strength=1.0,
                                                 extra_noise_vars=1, seed=seed))
        (tr, va, te), stats = prepared(cohort, (0.6, 0.2, 0.2), seed)
        model = train("tdd_gru", HyperParams(16, 16, 8, l2=1e-3, dropout=0.1),
                      grids_to_arrays(tr), grids_to_arrays(va), TrainConfig(max_epochs=100, seed=seed),
                      stats, cohort.schema)
        hm = permutation_importance(model, te, tr, rounds=20, seed=seed)
        names = [v.name for v in cohort.schema]
        v, w = np.unravel_index(np.argmin(hm.cells), hm.cells.shape)
        winners.append((names[v], int(w)))
        noise.append(np.abs(hm.cells[names.index("noise0")]).mean())
    elapsed = time.perf_counter() - start
    report(f"most negative cells {sorted(set(winners))}, noise mean |rd| {np.mean(noise):.4f}, "
           f"{elapsed:.0f}s")
    assert all(cell == ("cdai", 2) for cell in winners)
    assert np.mean(noise) < 0.01
    assert elapsed < 600


# ------------------------------------------------------------- 6 t-SNE

def test_criterion_6_tsne(record_property):
    report = label(record_property, "6 t-SNE recovery")
    rng = np.random.default_rng(5)
    centers = rng.normal(size=(3, 8)) * 10
    truth = np.repeat(np.arange(3), 50)
    x = centers[truth] + rng.normal(size=(150, 8))
    start = time.perf_counter()
    P = joint_probabilities(x, 30.0)
    Y = tsne(x, perplexity=30.0, iters=1000, seed=0)
    elapsed = time.perf_counter() - start
    found = KMeans(3, n_init=10, random_state=0).fit_predict(Y)
    purity = sum(np.bincount(truth[found == c]).max() for c in np.unique(found)) / len(truth)
    asym, norm_err = float(np.abs(P - P.T).max()), abs(float(P.sum()) - 1.0)
    report(f"purity {purity:.3f}, max |P-P^T| {asym:.1e}, |sum P - 1| {norm_err:.1e}, {elapsed:.1f}s")
    assert purity >= 0.95
    assert asym <= 1e-9 and norm_err <= 1e-9
    assert elapsed < 60


# ------------------------------------------------------------- 7 determinism

def test_criterion_7_determinism(record_property, tmp_path):
    report = label(record_property, "7 determinism and round trip")
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(a)
    pipeline(b)
    files = sorted(p.name for p in a.iterdir())
    differ = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]

    rng = np.random.default_rng(3)
    X = rng.normal(size=(60, 3, 10))
    y = (X[:, 2, 0] > 0).astype(float)
    probe = rng.normal(size=(40, 3, 10))
    schema = schema_for(GeneratorConfig())
    unequal = []
    for kind in ALL_KINDS:
        model = train(kind, HyperParams(4, 4, 4, 1e-4, 1e-4, 0.2), (X, y), (X, y),
                      TrainConfig(max_epochs=3, seed=1), None, schema)
        save_model(model, tmp_path / f"{kind.value}.json")
        again = load_model(tmp_path / f"{kind.value}.json")
        if predict(model, probe).tobytes() != predict(again, probe).tobytes():
            unequal.append(kind.value)
    report(f"{len(files)} CLI outputs compared, {len(differ)} differ; "
           f"{len(ALL_KINDS) - len(unequal)}/{len(ALL_KINDS)} artifacts bitwise round trip")
    assert files == sorted(p.name for p in b.iterdir())
    assert not differ, differ
    assert not unequal, unequal


# ------------------------------------------------------------- 8 TPE

def dropout_objective(params, seed):
    return (params["dropout"] - 0.3) ** 2


def random_search_best(space, n, rng):
    return min(dropout_objective(sample_uniform(space, rng), 0) for _ in range(n))


def test_criterion_8_tpe(record_property):
    report = label(record_property, "8 TPE efficacy")
    space = SearchSpace.default()
    start, wins = time.perf_counter(), 0
    for r in range(10):
        best, _ = run_study(dropout_objective, space, 50, seed=1000 + r)
        rng = np.random.default_rng(5000 + r)
        median = float(np.median([random_search_best(space, 50, rng) for _ in range(21)]))
        wins += best.objective < median
    elapsed = time.perf_counter() - start
    report(f"{wins}/10 repeats beat the random-search median, {elapsed:.1f}s")
    assert wins >= 8
    assert elapsed < 5
