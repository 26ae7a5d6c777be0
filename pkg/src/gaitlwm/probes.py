"""Frozen-representation evaluation: linear probes, metrics, diagnostics, robustness."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import RngStream

PROTOCOLS = ("kfold5", "loocv")
FRACTIONS = (0.01, 0.05, 0.10, 0.20, 0.50)


@dataclass
class ProbeModel:
    weight: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)
    l2: float = 1e-3
    max_iter: int = 500
    seed: int = 0
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.mean is not None:
            x = (x - self.mean) / self.scale
        return x

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._standardize(x) @ self.weight.T + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _objective(params: np.ndarray, x: np.ndarray, y1h: np.ndarray, l2: float):
    k, d = y1h.shape[1], x.shape[1]
    w, b = params[: k * d].reshape(k, d), params[k * d:]
    z = x @ w.T + b
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - (z * y1h).sum(axis=1)) + 0.5 * l2 * np.sum(w * w))
    p = np.exp(z - lse[:, None])
    g = (p - y1h) / len(x)
    gw = g.T @ x + l2 * w
    gb = g.sum(axis=0)
    return loss, np.concatenate([gw.ravel(), gb])


def fit_probe(embeddings: np.ndarray, labels: np.ndarray, k: int | None = None, l2: float = 1e-3,
              max_iter: int = 500, seed: int = 0, standardize: bool = True, tol: float = 1e-8) -> ProbeModel:
    """Multinomial logistic regression by full-batch gradient descent with backtracking.

    The objective is mean cross-entropy plus ``l2/2 * ||W||^2``, so duplicating
    every row leaves the optimum unchanged. Features are z-scored first.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("embeddings must be (N, d) with one label per row")
    k = int(y.max()) + 1 if k is None else k
    present = np.unique(y)
    if len(present) < 2:
        raise ValueError("probe needs at least two classes present")
    if len(x) < k:
        raise ValueError("need at least as many samples as classes")
    mean = scale = None
    if standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale < 1e-12] = 1.0
        x = (x - mean) / scale
    y1h = np.eye(k)[y]
    d = x.shape[1]
    params = np.zeros(k * d + k)
    loss, grad = _objective(params, x, y1h, l2)
    step = 1.0
    for _ in range(max_iter):
        gg = float(grad @ grad)
        if gg < tol:
            break
        while True:
            cand = params - step * grad
            closs, cgrad = _objective(cand, x, y1h, l2)
            if closs <= loss - 0.5 * step * gg or step < 1e-12:
                break
            step *= 0.5
        if loss - closs < tol * max(1.0, abs(loss)):
            params, loss, grad = cand, closs, cgrad
            break
        params, loss, grad = cand, closs, cgrad
        step *= 2.0
    w, b = params[: k * d].reshape(k, d), params[k * d:]
    return ProbeModel(w, b, l2, max_iter, seed, mean, scale)


# ---------------------------------------------------------------------------
# metrics


def auc_roc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_f1(predictions, labels, k: int) -> float:
    """Unweighted mean of per-class F1; a class with undefined F1 contributes 0."""
    p = np.asarray(predictions).astype(np.int64)
    y = np.asarray(labels).astype(np.int64)
    scores = []
    for c in range(k):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        den = 2 * tp + fp + fn
        scores.append(2 * tp / den if tp > 0 else 0.0)
    return float(np.mean(scores))


def accuracy(predictions, labels) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def effective_rank(activations: np.ndarray) -> float:
    """exp of the Shannon entropy of the normalised singular value distribution."""
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 2:
        raise ValueError("effective rank needs an (N >= 2, d >= 2) matrix")
    s = np.linalg.svd(a, compute_uv=False)
    total = s.sum()
    if total <= 0:
        raise ValueError("effective rank of an all-zero matrix is undefined")
    p = s / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def latent_straightness(latents: np.ndarray) -> float:
    """Mean cosine between consecutive displacements of a (T, d) trajectory."""
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or len(z) < 3:
        raise ValueError("need a (T >= 3, d) trajectory")
    d = np.diff(z, axis=0)
    norms = np.linalg.norm(d, axis=1)
    scale = norms.max()
    ok = norms > 1e-12 * max(scale, 1e-300)
    cos = []
    for t in range(len(d) - 1):
        if ok[t] and ok[t + 1]:
            cos.append(d[t] @ d[t + 1] / (norms[t] * norms[t + 1]))
    return float(np.mean(cos)) if cos else 0.0


def awgn(windows: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise per window and channel at ``snr_db`` (signal power = variance)."""
    x = np.asarray(windows)
    if np.isposinf(snr_db):
        return x.copy()
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    power = x.astype(np.float64).var(axis=-2, keepdims=True)
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return (x + sigma * rng.standard_normal(x.shape)).astype(x.dtype)


# ---------------------------------------------------------------------------
# protocols


@dataclass
class ProbeReport:
    protocol: str
    label: str
    metrics: dict[str, float] = field(default_factory=dict)
    folds: list[dict[str, float]] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def rows(self) -> list[tuple[str, str, str, str, float]]:
        out = [(self.protocol, m, "all", "", v) for m, v in sorted(self.metrics.items())]
        for i, f in enumerate(self.folds):
            seed = self.seeds[i] if i < len(self.seeds) else ""
            out += [(self.protocol, m, str(i), str(seed), v) for m, v in sorted(f.items())]
        return out

    def write(self, out_dir: str | Path, stem: str = "probe") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jp, cp = out / f"{stem}.json", out / f"{stem}.csv"
        jp.write_text(self.to_json())
        with open(cp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["protocol", "metric", "fold", "seed", "value"])
            for row in self.rows():
                w.writerow([*row[:4], repr(float(row[4]))])
        return jp, cp


def evaluate(model: ProbeModel, x: np.ndarray, y: np.ndarray, k: int) -> dict[str, float]:
    pred = model.predict(x)
    out = {"accuracy": accuracy(pred, y), "macro_f1": macro_f1(pred, y, k)}
    if k == 2 and len(np.unique(y)) == 2:
        out["auc"] = auc_roc(model.predict_proba(x)[:, 1], y)
    return out


def subject_folds(subjects: np.ndarray, labels: np.ndarray, protocol: str, seed: int = 0) -> list[np.ndarray]:
    """Test-subject sets per fold.

    ``loocv`` holds out one subject per fold. ``kfold5`` deals subjects into five
    folds, stratified by each subject's majority label.
    """
    subjects = np.asarray(subjects)
    uniq = np.unique(subjects)
    if protocol == "loocv":
        return [np.array([s]) for s in uniq]
    if protocol != "kfold5":
        raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    if len(uniq) < 5:
        raise ValueError("kfold5 needs at least five subjects")
    rng = RngStream(seed, 7).numpy()
    major = {s: np.bincount(np.asarray(labels)[subjects == s]).argmax() for s in uniq}
    folds: list[list] = [[] for _ in range(5)]
    offset = 0
    for c in sorted(set(major.values())):
        members = np.array([s for s in uniq if major[s] == c])
        members = members[rng.permutation(len(members))]
        for i, s in enumerate(members):
            folds[(offset + i) % 5].append(s)
        offset += len(members)
    return [np.array(sorted(f)) for f in folds]


def cross_validate(embeddings: np.ndarray, labels: np.ndarray, subjects: np.ndarray, protocol: str = "kfold5",
                   k: int | None = None, seed: int = 0, label_name: str = "", **hp) -> ProbeReport:
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    subjects = np.asarray(subjects)
    k = int(y.max()) + 1 if k is None else k
    folds = []
    for test_subjects in subject_folds(subjects, y, protocol, seed):
        test = np.isin(subjects, test_subjects)
        train = ~test
        assert not set(subjects[train]) & set(subjects[test]), "subject leakage across folds"
        if len(np.unique(y[train])) < 2 or not test.any():
            continue
        model = fit_probe(x[train], y[train], k, seed=seed, **hp)
        folds.append(evaluate(model, x[test], y[test], k))
    if not folds:
        raise ValueError("no usable folds")
    metrics = {}
    for m in sorted({m for f in folds for m in f}):
        vals = [f[m] for f in folds if m in f]
        metrics[m] = float(np.mean(vals))
    return ProbeReport(protocol, label_name, metrics, folds, [seed] * len(folds),
                       {"embedding": "pooled_embedding"})


def pooled_cv_auc(embeddings, labels, subjects, protocol="kfold5", seed=0, **hp) -> float:
    """AUC over out-of-fold scores pooled across all folds (binary labels)."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    scores = np.zeros(len(y))
    for test_subjects in subject_folds(subjects, y, protocol, seed):
        test = np.isin(subjects, test_subjects)
        model = fit_probe(x[~test], y[~test], 2, seed=seed, **hp)
        scores[test] = model.predict_proba(x[test])[:, 1]
    return auc_roc(scores, y)


def stratified_subsample(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    y = np.asarray(labels)
    idx = []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        n = max(1, int(round(fraction * len(members))))
        idx.append(np.sort(rng.choice(members, size=min(n, len(members)), replace=False)))
    return np.sort(np.concatenate(idx))


@dataclass
class LabelEfficiencyPoint:
    fraction: float
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def label_efficiency(x_train, y_train, x_test, y_test, fractions=FRACTIONS, seeds: int = 5,
                     metric: str = "accuracy", seed: int = 0, **hp) -> list[LabelEfficiencyPoint]:
    """Probe quality against the fraction of training labels kept (fixed test set)."""
    y_train = np.asarray(y_train).astype(np.int64)
    k = int(max(y_train.max(), np.max(y_test))) + 1
    base = RngStream(seed, 11)
    out = []
    for fi, frac in enumerate(fractions):
        vals = []
        for s in range(seeds):
            if frac >= 1.0:
                idx = np.arange(len(y_train))
            else:
                idx = stratified_subsample(y_train, frac, base.child(fi).child(s).numpy())
            model = fit_probe(np.asarray(x_train)[idx], y_train[idx], k, seed=s, **hp)
            vals.append(evaluate(model, x_test, y_test, k)[metric])
        out.append(LabelEfficiencyPoint(float(frac), vals))
    return out


def probe_inputs(encoder_output) -> np.ndarray:
    """The only view of an encoder output a probe may consume: the pooled embedding."""
    emb = getattr(encoder_output, "pooled_embedding", None)
    if emb is None:
        raise TypeError("probes consume EncoderOutput.pooled_embedding only")
    return emb.detach().cpu().numpy() if hasattr(emb, "detach") else np.asarray(emb)
