"""Clustering/classification metrics, K-means, linear probes and PCA projection."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize


@dataclass
class MetricsRecord:
    acc_clu: float
    nmi: float
    ari: float
    acc_cls: float = float("nan")
    f_score: float = float("nan")
    seed: int | None = None
    config_hash: str | None = None
    wall_time: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**d)

    def numeric(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


METRIC_FIELDS = ("acc_clu", "nmi", "ari", "acc_cls", "f_score")


def append_jsonl(path, record: MetricsRecord) -> None:
    with open(path, "a") as fh:
        fh.write(record.to_json() + "\n")


def read_jsonl(path) -> list[MetricsRecord]:
    with open(path) as fh:
        return [MetricsRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def summarize(records: list[MetricsRecord]) -> dict[str, tuple[float, float]]:
    """Mean and (population) standard deviation of each metric over runs."""
    out = {}
    for key in METRIC_FIELDS:
        vals = np.array([getattr(r, key) for r in records], dtype=float)
        out[key] = (float(np.mean(vals)), float(np.std(vals)))
    return out


def write_summary_csv(path, rows: dict[str, list[MetricsRecord]]) -> None:
    """One row per method/setting, columns ``metric`` as "mean ± std" in percent."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *METRIC_FIELDS])
        for name, recs in rows.items():
            s = summarize(recs)
            w.writerow([name, *(f"{100 * s[k][0]:.2f}±{100 * s[k][1]:.2f}" for k in METRIC_FIELDS)])


# ---------------------------------------------------------------------------
# K-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    inertia: float
    centers: np.ndarray
    n_iter: int


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(X, centers, max_iter, tol):
    prev = np.inf
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, centers)
        labels = d.argmin(1)
        point_d = d[np.arange(len(X)), labels]
        inertia = float(point_d.sum())
        new = np.empty_like(centers)
        taken = set()
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(0)
            else:
                # empty cluster: re-seed at the point farthest from its centroid
                order = np.argsort(-point_d)
                far = next(i for i in order if i not in taken)
                taken.add(far)
                new[j] = X[far]
                point_d[far] = 0.0
        centers = new
        if prev - inertia <= tol * max(prev if np.isfinite(prev) else inertia, 1e-300):
            break
        prev = inertia
    d = _sq_dists(X, centers)
    labels = d.argmin(1)
    return labels, float(d[np.arange(len(X)), labels].sum()), centers, it


def kmeans(X: np.ndarray, K: int, seed: int = 0, restarts: int = 10,
           max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by inertia."""
    X = np.asarray(X, dtype=np.float64)
    if K < 1 or len(X) < K:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={len(X)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        labels, inertia, centers, it = _lloyd(X, _kmeanspp(X, K, rng), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, inertia, centers, it)
    return best


# ---------------------------------------------------------------------------
# clustering metrics


def contingency(pred, true) -> np.ndarray:
    """Counts table, rows = predicted clusters, columns = true classes."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError("label arrays differ in length")
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(true, return_inverse=True)
    table = np.zeros((p.max() + 1 if p.size else 0, t.max() + 1 if t.size else 0), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return table


def hungarian_acc(pred, true) -> float:
    table = contingency(pred, true)
    if table.size == 0:
        raise ValueError("empty labelings")
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / table.sum())


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, true) -> float:
    """Mutual information normalised by the geometric mean of the entropies."""
    table = contingency(pred, true)
    if table.size == 0:
        raise ValueError("empty labelings")
    n = table.sum()
    hp, ht = _entropy(table.sum(1)), _entropy(table.sum(0))
    if hp == 0.0 or ht == 0.0:
        # a single cluster on both sides is the same partition
        return 1.0 if hp == ht else 0.0
    pij = table / n
    outer = np.outer(table.sum(1), table.sum(0)) / n ** 2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(np.clip(mi / np.sqrt(hp * ht), 0.0, 1.0))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(pred, true) -> float:
    table = contingency(pred, true)
    if table.size == 0:
        raise ValueError("empty labelings")
    n = table.sum()
    index = _comb2(table).sum()
    a, b = _comb2(table.sum(1)).sum(), _comb2(table.sum(0)).sum()
    expected = a * b / _comb2(n) if n > 1 else 0.0
    max_index = 0.5 * (a + b)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def cluster_metrics(pred, true) -> dict[str, float]:
    return {"acc_clu": hungarian_acc(pred, true), "nmi": nmi(pred, true), "ari": ari(pred, true)}


# ---------------------------------------------------------------------------
# linear probe


class StratificationError(ValueError):
    pass


def stratified_split(labels, test_frac: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_frac * len(idx)))
        if len(idx) - n_test < 1:
            raise StratificationError(f"class {c} has no training instances")
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def macro_f1(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    scores = []
    for c in np.union1d(pred, true):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


@dataclass
class ProbeResult:
    acc_cls: float
    f_score: float
    weights: np.ndarray
    bias: np.ndarray
    classes: np.ndarray


def linear_probe(train_repr, train_labels, test_repr, test_labels, l2: float = 1e-4,
                 max_iter: int = 2000) -> ProbeResult:
    """Multinomial logistic regression on standardised features.

    Minimises mean cross-entropy + (l2/2)·||W||² to convergence with L-BFGS
    and reports test accuracy and macro F1.
    """
    Xtr = np.asarray(train_repr, dtype=np.float64)
    Xte = np.asarray(test_repr, dtype=np.float64)
    ytr, yte = np.asarray(train_labels), np.asarray(test_labels)
    classes = np.unique(ytr)
    if len(classes) < 2:
        raise StratificationError("probe needs at least two classes in the training split")
    missing = np.setdiff1d(np.unique(yte), classes)
    if missing.size:
        raise StratificationError(f"classes {missing.tolist()} absent from the training split")
    mu, sd = Xtr.mean(0), Xtr.std(0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    n, d = Xtr.shape
    k = len(classes)
    Y = (ytr[:, None] == classes[None]).astype(np.float64)

    def objective(theta):
        W = theta[: d * k].reshape(d, k)
        b = theta[d * k:]
        z = Xtr @ W + b
        z -= z.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        loss = -(Y * logp).sum() / n + 0.5 * l2 * (W * W).sum()
        r = (np.exp(logp) - Y) / n
        grad = np.concatenate([(Xtr.T @ r + l2 * W).ravel(), r.sum(0)])
        return loss, grad

    res = minimize(objective, np.zeros(d * k + k), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-8})
    W, b = res.x[: d * k].reshape(d, k), res.x[d * k:]
    pred = classes[np.argmax(Xte @ W + b, axis=1)]
    return ProbeResult(acc_cls=float(np.mean(pred == yte)), f_score=macro_f1(pred, yte),
                       weights=W / sd[:, None], bias=b - (mu / sd) @ W, classes=classes)


def probe_split(repr_, labels, test_frac: float = 0.2, seed: int = 0, **kw) -> ProbeResult:
    tr, te = stratified_split(labels, test_frac, seed)
    repr_, labels = np.asarray(repr_), np.asarray(labels)
    return linear_probe(repr_[tr], labels[tr], repr_[te], labels[te], **kw)


def r2_score(X, Y, test_frac: float = 0.2, seed: int = 0, ridge: float = 1e-3) -> float:
    """Held-out R² of a linear least-squares fit from X to Y (with intercept).

    Features are standardised on the training split and a small ridge
    (``ridge`` · n_train) keeps near-constant columns from blowing up the
    held-out error; constant columns are dropped.
    """
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) != len(Y):
        raise ValueError("X and Y have different row counts")
    perm = np.random.default_rng(seed).permutation(len(X))
    n_te = int(round(test_frac * len(X)))
    te, tr = perm[:n_te], perm[n_te:]
    mu, sd = X[tr].mean(0), X[tr].std(0)
    keep = sd > 1e-12
    Xtr = (X[tr][:, keep] - mu[keep]) / sd[keep]
    Xte = (X[te][:, keep] - mu[keep]) / sd[keep]
    ymu = Y[tr].mean(0)
    gram = Xtr.T @ Xtr + ridge * len(tr) * np.eye(Xtr.shape[1])
    coef = np.linalg.solve(gram, Xtr.T @ (Y[tr] - ymu))
    resid = Y[te] - ymu - Xte @ coef
    total = ((Y[te] - Y[te].mean(0)) ** 2).sum()
    return float(1.0 - (resid ** 2).sum() / total)


# ---------------------------------------------------------------------------
# 2-D projection


@dataclass
class Projection:
    coords: np.ndarray
    explained_ratio: np.ndarray
    components: np.ndarray


def pca_project(X) -> Projection:
    """Top-2 principal components; each component's largest loading is positive."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("pca_project needs an N×d matrix with d >= 2")
    Xc = X - X.mean(0)
    cov = Xc.T @ Xc / max(len(X) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.maximum(evals[order], 0.0), evecs[:, order]
    total = evals.sum()
    if total <= 1e-300:
        warnings.warn("pca_project: input has zero variance", RuntimeWarning, stacklevel=2)
        return Projection(np.zeros((len(X), 2)), np.zeros(2), np.zeros((X.shape[1], 2)))
    comps = evecs[:, :2].copy()
    for j in range(2):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] *= -1
    return Projection(Xc @ comps, evals[:2] / total, comps)


def write_projection_csv(path, proj: Projection, labels=None) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"] + (["label"] if labels is not None else []))
        for i, (x, y) in enumerate(proj.coords):
            w.writerow([repr(float(x)), repr(float(y))] + ([int(labels[i])] if labels is not None else []))
