import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitlwm.backbone import Encoder, ModelConfig
from gaitlwm.probes import (
    ProbeReport,
    auc_roc,
    awgn,
    cross_validate,
    effective_rank,
    fit_probe,
    label_efficiency,
    latent_straightness,
    macro_f1,
    pooled_cv_auc,
    probe_inputs,
    subject_folds,
)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def brute_macro_f1(pred, y, k):
    out = []
    for c in range(k):
        tp = sum(1 for p, t in zip(pred, y) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, y) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, y) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        out.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(out) / k


def blobs(n=200, d=8, sep=6.0, seed=0):
    g = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = g.standard_normal((n, d))
    x[:, 0] += sep * (y - 0.5)
    return x, y


def test_probe_separates_blobs():
    x, y = blobs()
    m = fit_probe(x, y, 2)
    assert (m.predict(x) == y).mean() >= 0.99
    assert np.allclose(m.predict_proba(x).sum(1), 1.0)


def test_probe_duplicate_rows_same_decisions():
    x, y = blobs(seed=1, sep=2.0)
    a = fit_probe(x, y, 2)
    b = fit_probe(np.concatenate([x, x]), np.concatenate([y, y]), 2)
    assert np.array_equal(a.predict(x), b.predict(x))
    assert np.allclose(a.logits(x), b.logits(x), atol=1e-4)


def test_probe_single_class_rejected():
    with pytest.raises(ValueError):
        fit_probe(np.zeros((5, 2)), np.zeros(5, int))


def test_probe_multiclass_deterministic():
    g = np.random.default_rng(0)
    y = np.arange(90) % 3
    x = g.standard_normal((90, 4)) + np.eye(4)[y] * 4
    a, b = fit_probe(x, y, 3), fit_probe(x, y, 3)
    assert np.array_equal(a.weight, b.weight)
    assert (a.predict(x) == y).mean() > 0.95


def test_auc_basics():
    assert auc_roc([0.9, 0.1], [1, 0]) == 1.0
    assert auc_roc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        auc_roc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_counting_on_hand_fixture():
    scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.4, 0.05, 0.9, 0.6, 0.6,
              0.2, 0.7, 0.3, 0.3, 0.55, 0.95, 0.15, 0.5, 0.45, 0.6]
    labels = [0, 1, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1]
    assert auc_roc(scores, labels) == brute_auc(scores, labels)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_brute_force_with_ties(rows):
    scores, labels = zip(*rows)
    if len(set(labels)) < 2:
        return
    assert auc_roc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)
    # strictly monotone transform leaves it unchanged
    assert auc_roc(np.exp(np.array(scores, float)), labels) == pytest.approx(auc_roc(scores, labels), abs=1e-12)


def test_macro_f1():
    assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0
    # class 2 never predicted -> contributes 0
    assert macro_f1([0, 1, 1], [0, 1, 2], 3) == pytest.approx((1 + 2 / 3 + 0) / 3)
    g = np.random.default_rng(0)
    p, y = g.integers(0, 3, 20), g.integers(0, 3, 20)
    assert macro_f1(p, y, 3) == brute_macro_f1(p, y, 3)


def test_effective_rank_fixtures():
    a = np.zeros((5, 4))
    a[0, 0] = a[1, 1] = a[2, 2] = 1.0
    assert effective_rank(a) == pytest.approx(3.0, abs=1e-12)
    u = np.random.default_rng(0).standard_normal((20, 1))
    assert effective_rank(u @ np.ones((1, 6))) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        effective_rank(np.zeros((4, 4)))


def test_effective_rank_matches_svd_oracle():
    x = np.random.default_rng(1).standard_normal((100, 128))
    s = np.linalg.svd(x.astype(np.float64), compute_uv=False)
    p = s / s.sum()
    ref = np.exp(-(p * np.log(p)).sum())
    assert abs(effective_rank(x) - ref) < 1e-6


def test_effective_rank_invariances():
    x = np.random.default_rng(2).standard_normal((30, 10))
    q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((10, 10)))
    assert effective_rank(x @ q) == pytest.approx(effective_rank(x), abs=1e-9)
    assert effective_rank(7.5 * x) == pytest.approx(effective_rank(x), abs=1e-9)


def test_straightness():
    line = np.arange(10)[:, None] * np.ones((1, 4))
    assert latent_straightness(line) == pytest.approx(1.0)
    zigzag = np.array([[0.0, 0], [1, 0]] * 5)
    assert latent_straightness(zigzag) == pytest.approx(-1.0)
    walk = np.cumsum(np.random.default_rng(0).standard_normal((2000, 64)), axis=0)
    assert abs(latent_straightness(walk)) < 0.1
    z = np.random.default_rng(1).standard_normal((20, 5))
    assert latent_straightness(3 * z + 2) == pytest.approx(latent_straightness(z))
    with pytest.raises(ValueError):
        latent_straightness(np.zeros((2, 3)))


def test_straightness_skips_zero_displacements():
    z = np.array([[0.0, 0], [1, 0], [1, 0], [2, 0], [3, 0]])
    assert latent_straightness(z) == pytest.approx(1.0)


def test_awgn():
    g = np.random.default_rng(0)
    w = g.standard_normal((1000, 512, 6)).astype(np.float32) * np.array([1, 2, 3, 0.5, 0.1, 1], np.float32)
    assert np.array_equal(awgn(w, np.inf, g), w)
    noisy = awgn(w, 10.0, np.random.default_rng(1))
    noise = (noisy - w).astype(np.float64)
    snr = 10 * np.log10(w.astype(np.float64).var(axis=1).sum(0) / noise.var(axis=1).sum(0))
    assert np.all(np.abs(snr - 10.0) < 0.5)
    with pytest.raises(ValueError):
        awgn(w[:2], np.nan, g)


def test_subject_folds_disjoint_and_complete():
    subjects = np.repeat(np.arange(12), 4)
    labels = (subjects >= 6).astype(int)
    folds = subject_folds(subjects, labels, "kfold5")
    assert len(folds) == 5
    flat = np.concatenate(folds)
    assert sorted(flat) == list(range(12))
    assert all(len(set(f) & set(g)) == 0 for f, g in itertools.combinations(folds, 2))
    assert len(subject_folds(np.repeat(np.arange(5), 3), np.zeros(15, int), "loocv")) == 5
    with pytest.raises(ValueError):
        subject_folds(subjects, labels, "holdout")


def test_cross_validate_loocv_aggregate_by_hand():
    g = np.random.default_rng(0)
    subjects = np.repeat([0, 1, 2], 10)
    y = np.tile([0, 1], 15)
    x = g.standard_normal((30, 3)) + y[:, None] * 1.5
    rep = cross_validate(x, y, subjects, "loocv")
    assert len(rep.folds) == 3
    manual = []
    for s in range(3):
        te = subjects == s
        m = fit_probe(x[~te], y[~te], 2)
        manual.append(auc_roc(m.predict_proba(x[te])[:, 1], y[te]))
    assert rep.metrics["auc"] == pytest.approx(np.mean(manual))


def test_pooled_auc_on_separable():
    x, y = blobs(n=100)
    subjects = np.arange(100) // 10
    assert pooled_cv_auc(x, y, subjects) > 0.99


def test_label_efficiency():
    x, y = blobs(n=400, sep=3.0)
    curve = label_efficiency(x[:300], y[:300], x[300:], y[300:], fractions=(0.05, 0.2, 0.5, 1.0))
    assert all(len(p.values) == 5 for p in curve)
    assert curve[-1].std == 0.0
    means = [p.mean for p in curve]
    assert all(means[i + 1] >= means[i] - 0.01 for i in range(len(means) - 1))


def test_report_serialisation(tmp_path):
    rep = ProbeReport("kfold5", "cohort", {"auc": 0.9}, [{"auc": 0.8}, {"auc": 1.0}], [0, 0])
    jp, cp = rep.write(tmp_path)
    lines = cp.read_text().splitlines()
    assert lines[0] == "protocol,metric,fold,seed,value"
    assert len(lines) == 4
    assert '"protocol": "kfold5"' in jp.read_text()


def test_probe_interface_exposes_only_pooled_embedding():
    cfg = ModelConfig.tiny()
    out = Encoder(cfg)(torch.randn(2, cfg.seq_len, 6))
    emb = probe_inputs(out)
    assert np.array_equal(emb, out.pooled_embedding.detach().numpy())
    with pytest.raises(TypeError):
        probe_inputs(out.terminal_state_token)
