"""Identifiability metrics, downstream protocols, and plot emission.

Identifiability is scored against ground-truth latents two ways: component-
wise MCC (absolute correlations after an optimal one-to-one Hungarian
assignment) and subspace R-squared (a kernel-ridge regressor from the
estimated block to each true coordinate, scored out of sample, which is
invariant to invertible remixing of the estimate).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from sklearn.kernel_ridge import KernelRidge
from sklearn.linear_model import LogisticRegression

from .errors import DataError


def _abs_correlation_matrix(est: np.ndarray, true: np.ndarray, method: str) -> np.ndarray:
    if method == "pearson":
        combined = np.corrcoef(est.T, true.T)
        corr = combined[: est.shape[1], est.shape[1] :]
    elif method == "spearman":
        res = stats.spearmanr(est, true)
        combined = np.atleast_2d(res.statistic)
        corr = combined[: est.shape[1], est.shape[1] :]
    else:
        raise ValueError(f"unknown correlation method {method!r}")
    # constant columns give nan correlations; defined as 0 for that pair
    return np.nan_to_num(np.abs(corr), nan=0.0)


def mcc(
    est: np.ndarray, true: np.ndarray, method: str = "pearson"
) -> tuple[float, np.ndarray]:
    """Mean matched absolute correlation after optimal assignment.

    Returns the score and the permutation mapping estimated column i to true
    column assignment[i].
    """
    est = np.asarray(est, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if est.ndim != 2 or true.ndim != 2 or est.shape != true.shape:
        raise ValueError(f"expected matching [S, n] arrays, got {est.shape} and {true.shape}")
    if est.shape[0] < est.shape[1]:
        raise ValueError(f"need at least as many samples as dimensions, got shape {est.shape}")
    corr = _abs_correlation_matrix(est, true, method)
    rows, cols = linear_sum_assignment(-corr)
    assignment = np.empty(est.shape[1], dtype=np.int64)
    assignment[rows] = cols
    return float(corr[rows, cols].mean()), assignment


def _median_heuristic_gamma(x: np.ndarray, rng: np.random.Generator) -> float:
    sample = x if x.shape[0] <= 500 else x[rng.choice(x.shape[0], 500, replace=False)]
    dists = cdist(sample, sample)
    med = np.median(dists[np.triu_indices_from(dists, k=1)])
    if med <= 0:
        return 1.0
    return 1.0 / (2.0 * med**2)


def subspace_r2(
    est_block: np.ndarray,
    true_block: np.ndarray,
    alpha: float = 1e-3,
    train_frac: float = 0.7,
    seed: int = 0,
    max_train: int = 2000,
) -> float:
    """Mean out-of-sample R-squared of a kernel-ridge (RBF) fit est -> true.

    Bandwidth by the median heuristic; zero-variance true coordinates are
    excluded with a warning.
    """
    est_block = np.asarray(est_block, dtype=np.float64)
    true_block = np.asarray(true_block, dtype=np.float64)
    if est_block.shape[0] != true_block.shape[0]:
        raise ValueError("sample counts differ")
    n = est_block.shape[0]
    if n < 100:
        raise ValueError(f"need at least 100 samples, got {n}")

    keep = [j for j in range(true_block.shape[1]) if np.std(true_block[:, j]) > 0]
    if len(keep) < true_block.shape[1]:
        warnings.warn("zero-variance true coordinates excluded from subspace R2")
    if not keep:
        raise ValueError("all true coordinates are constant")
    true_block = true_block[:, keep]

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    split = int(round(train_frac * n))
    train_idx, test_idx = perm[:split], perm[split:]
    if len(train_idx) > max_train:
        train_idx = train_idx[:max_train]

    x_tr, x_te = est_block[train_idx], est_block[test_idx]
    gamma = _median_heuristic_gamma(x_tr, rng)
    scores = []
    for j in range(true_block.shape[1]):
        y_tr, y_te = true_block[train_idx, j], true_block[test_idx, j]
        model = KernelRidge(kernel="rbf", alpha=alpha, gamma=gamma)
        model.fit(x_tr, y_tr)
        pred = model.predict(x_te)
        ss_res = float(np.sum((y_te - pred) ** 2))
        ss_tot = float(np.sum((y_te - y_te.mean()) ** 2))
        scores.append(1.0 - ss_res / ss_tot)
    return float(np.mean(scores))


@dataclass
class IdentifiabilityReport:
    mcc_shared: float
    mcc_specific: list[float]
    r2_shared_subspace: float
    method: str
    assignment: list[int]


def identifiability_report(
    est_shared: np.ndarray,
    true_shared: np.ndarray,
    est_specific: list[np.ndarray],
    true_specific: list[np.ndarray],
    method: str = "pearson",
    max_samples: int = 20000,
    seed: int = 0,
) -> IdentifiabilityReport:
    """Flatten [N, T, n] latents over windows and time, subsample, and score."""
    rng = np.random.default_rng(seed)

    def flat(z):
        return np.asarray(z).reshape(-1, z.shape[-1])

    est_s, true_s = flat(est_shared), flat(true_shared)
    if est_s.shape[0] > max_samples:
        idx = rng.choice(est_s.shape[0], max_samples, replace=False)
        est_s, true_s = est_s[idx], true_s[idx]
    else:
        idx = None
    score, assignment = mcc(est_s, true_s, method)
    r2 = subspace_r2(est_s, true_s, seed=seed)
    spec_scores = []
    for est_m, true_m in zip(est_specific, true_specific):
        e, t = flat(est_m), flat(true_m)
        if idx is not None:
            e, t = e[idx], t[idx]
        spec_scores.append(mcc(e, t, method)[0])
    return IdentifiabilityReport(
        mcc_shared=score,
        mcc_specific=spec_scores,
        r2_shared_subspace=r2,
        method=method,
        assignment=[int(a) for a in assignment],
    )


def classification_metrics(pred: np.ndarray, true: np.ndarray) -> tuple[float, float]:
    """(accuracy, macro-F1); per-class F1 is 0 when the class never appears
    correctly, and macro averages over classes present in either argument."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.size == 0 or pred.shape != true.shape:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    classes = np.union1d(pred, true)
    accuracy = float(np.mean(pred == true))
    f1s = []
    for c in classes:
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return accuracy, float(np.mean(f1s))


def knn_eval(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    k: int = 5,
    chunk: int = 512,
) -> tuple[float, float]:
    """Euclidean k-NN majority vote; ties break toward the class whose voting
    neighbors have the smallest summed distance."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if k < 1 or k > train_x.shape[0]:
        raise ValueError(f"k={k} must be in [1, {train_x.shape[0]}]")
    preds = np.empty(test_x.shape[0], dtype=train_y.dtype)
    for start in range(0, test_x.shape[0], chunk):
        block = test_x[start : start + chunk]
        dists = cdist(block, train_x)
        nearest = np.argpartition(dists, k - 1, axis=1)[:, :k]
        for row in range(block.shape[0]):
            idx = nearest[row]
            votes = train_y[idx]
            classes, counts = np.unique(votes, return_counts=True)
            best = counts.max()
            tied = classes[counts == best]
            if len(tied) == 1:
                preds[start + row] = tied[0]
            else:
                sums = [dists[row, idx[votes == c]].sum() for c in tied]
                preds[start + row] = tied[int(np.argmin(sums))]
    return classification_metrics(preds, test_y)


@dataclass
class ProbeReport:
    """Linear-probe metrics for each label ratio."""

    ratios: tuple[float, ...]
    accuracy: list[float]
    macro_f1: list[float]
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "ratios": list(self.ratios),
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "warnings": self.warnings,
        }


DEFAULT_PROBE_RATIOS = (1.0, 0.1, 0.05, 0.01)


def stratified_subsample(
    labels: np.ndarray, ratio: float, rng: np.random.Generator
) -> tuple[np.ndarray, list[str]]:
    """Indices of a per-class subsample keeping >= 1 sample per present class."""
    notes = []
    chosen = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        count = max(1, int(round(ratio * len(idx))))
        if len(idx) == 0:
            notes.append(f"class {c} has no training samples; dropped from training")
            continue
        chosen.append(rng.choice(idx, size=count, replace=False))
    return np.sort(np.concatenate(chosen)), notes


def linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    ratios: tuple[float, ...] = DEFAULT_PROBE_RATIOS,
    seed: int = 0,
) -> ProbeReport:
    """Train one linear layer (multinomial logistic regression) per label
    ratio on a stratified subsample of frozen features; evaluate held out."""
    rng = np.random.default_rng(seed)
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    accs, f1s, notes = [], [], []
    all_classes = np.unique(np.concatenate([train_y, test_y]))
    for ratio in ratios:
        idx, ratio_notes = stratified_subsample(train_y, ratio, rng)
        sub_y = train_y[idx]
        present = np.unique(sub_y)
        missing = np.setdiff1d(all_classes, present)
        if missing.size:
            msg = f"ratio {ratio}: classes {missing.tolist()} absent from training subsample"
            warnings.warn(msg)
            ratio_notes.append(msg)
        clf = LogisticRegression(max_iter=5000, C=1e4)
        clf.fit(train_x[idx], sub_y)
        pred = clf.predict(test_x)
        acc, f1 = classification_metrics(pred, test_y)
        accs.append(acc)
        f1s.append(f1)
        notes.extend(ratio_notes)
    return ProbeReport(ratios=tuple(ratios), accuracy=accs, macro_f1=f1s, warnings=notes)


def pooled_features(z_c: np.ndarray, z_s: list[np.ndarray]) -> np.ndarray:
    """Mean-pool latents over time and concatenate shared + all specific."""
    parts = [np.asarray(z_c).mean(axis=1)]
    parts.extend(np.asarray(z).mean(axis=1) for z in z_s)
    return np.concatenate(parts, axis=1)


def tsne_embed(features: np.ndarray, seed: int = 0, perplexity: float = 30.0) -> np.ndarray:
    """Deterministic 2-D t-SNE embedding of pooled features."""
    from sklearn.manifold import TSNE

    n = features.shape[0]
    perplexity = min(perplexity, max(2.0, (n - 1) / 3.0))
    tsne = TSNE(n_components=2, random_state=seed, init="pca", perplexity=perplexity)
    return tsne.fit_transform(np.asarray(features, dtype=np.float64))


def emit_tsne_plot(
    features: np.ndarray,
    labels: np.ndarray,
    path,
    seed: int = 0,
    perplexity: float = 30.0,
):
    """Write a class-colored 2-D embedding scatter as PNG; returns the path."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise DataError("t-SNE plot needs at least 2 classes")
    embedding = tsne_embed(features, seed=seed, perplexity=perplexity)
    fig, ax = plt.subplots(figsize=(6, 5))
    for c in np.unique(labels):
        mask = labels == c
        ax.scatter(embedding[mask, 0], embedding[mask, 1], s=8, label=str(c))
    ax.legend(title="class", fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
