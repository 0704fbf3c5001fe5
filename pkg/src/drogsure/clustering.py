"""Coefficient fusion, affinity construction, spectral clustering, scoring,
and out-of-sample classification by principal-subspace projection.
"""

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from .errors import DimensionError


@dataclass
class MetricSet:
    acc: float
    ari: float
    nmi: float

    def as_dict(self):
        return {"acc": self.acc, "ari": self.ari, "nmi": self.nmi}


def fuse_coefficients(mats):
    """Sum the per-modality coefficient matrices into one."""
    total = np.zeros_like(np.asarray(mats[0], dtype=np.float64))
    for w in mats:
        if w.shape != total.shape:
            raise DimensionError(
                f"coefficient matrices disagree in shape: {w.shape} vs {total.shape}"
            )
        total = total + w
    return total


def build_affinity(w_total):
    """Symmetric nonnegative affinity |W| + |W|^T with zero diagonal.

    Absolute values keep the weights nonnegative for spectral clustering even
    when fused coefficients carry mixed signs.
    """
    w_total = np.asarray(w_total, dtype=np.float64)
    if w_total.ndim != 2 or w_total.shape[0] != w_total.shape[1]:
        raise DimensionError(f"coefficient matrix must be square, got {w_total.shape}")
    a = np.abs(w_total) + np.abs(w_total).T
    np.fill_diagonal(a, 0.0)
    return a


def spectral_cluster(affinity, n_clusters, seed=0, kmeans_restarts=20):
    """Normalized spectral clustering of a symmetric nonnegative affinity.

    Symmetric-normalized affinity, top-``n_clusters`` eigenvectors, rows
    length-normalized, then k-means with seeded restarts.
    """
    a = np.asarray(affinity, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"affinity must be square, got {a.shape}")
    if n_clusters < 2:
        raise ValueError(f"need at least 2 clusters, got {n_clusters}")
    if not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("affinity must be symmetric")
    if np.any(a < 0):
        raise ValueError("affinity must be nonnegative")
    if not a.any():
        raise ValueError("degenerate affinity: all entries are zero")
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    m = inv_sqrt[:, None] * a * inv_sqrt[None, :]
    _, vecs = np.linalg.eigh(m)
    emb = vecs[:, -n_clusters:]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)
    km = KMeans(n_clusters=n_clusters, n_init=kmeans_restarts, random_state=seed)
    return km.fit_predict(emb).astype(np.int64)


def cluster_accuracy(pred, truth):
    """Best-match accuracy under an optimal label assignment."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.size == 0 or truth.size == 0:
        raise ValueError("empty label arrays")
    if pred.shape != truth.shape:
        raise DimensionError(f"label arrays differ in length: {pred.shape} vs {truth.shape}")
    pl = np.unique(pred)
    tl = np.unique(truth)
    table = np.zeros((pl.size, tl.size))
    for i, p in enumerate(pl):
        for j, t in enumerate(tl):
            table[i, j] = np.sum((pred == p) & (truth == t))
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / pred.size


def ari_nmi(pred, truth):
    """Adjusted Rand index and arithmetic-normalized mutual information."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"label arrays differ in length: {pred.shape} vs {truth.shape}")
    ari = float(adjusted_rand_score(truth, pred))
    if np.unique(truth).size < 2 or np.unique(pred).size < 2:
        warnings.warn("degenerate single-cluster labeling; NMI defined as 0")
        return ari, 0.0
    nmi = float(
        normalized_mutual_info_score(truth, pred, average_method="arithmetic")
    )
    return ari, nmi


def evaluate(pred, truth):
    ari, nmi = ari_nmi(pred, truth)
    return MetricSet(acc=cluster_accuracy(pred, truth), ari=ari, nmi=nmi)


@dataclass
class ClusterSubspaces:
    """Per-(cluster, modality) mean vectors and principal-component bases."""

    means: dict       # (cluster, modality) -> (D,)
    bases: dict       # (cluster, modality) -> (D, d) orthonormal columns
    clusters: tuple
    modalities: int


def _flatten_modality(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1)


def fit_cluster_subspaces(modalities, labels, dim=None, variance=0.90,
                          model=None, use_latent=False):
    """Fit per-cluster principal subspaces, one basis per modality.

    ``dim=None`` keeps, per cluster and modality, the smallest number of
    principal components capturing ``variance`` of the cluster's variance.
    Raw pixels are used unless ``use_latent`` is set with a trained model.
    """
    labels = np.asarray(labels)
    mods = list(getattr(modalities, "modalities", modalities))
    if use_latent:
        if model is None:
            raise ValueError("use_latent requires a trained model")
        mods = [model.encode(t, mods[t]) for t in range(len(mods))]
    flat = [_flatten_modality(m) for m in mods]
    clusters = tuple(int(c) for c in np.unique(labels))
    means, bases = {}, {}
    for p in clusters:
        members = np.nonzero(labels == p)[0]
        if dim is not None and members.size < dim + 1:
            raise ValueError(
                f"cluster {p} has {members.size} members, needs at least {dim + 1}"
            )
        for t, x in enumerate(flat):
            xc = x[members]
            mean = xc.mean(axis=0)
            centered = xc - mean
            # eigenvectors of the covariance via the thin SVD of the centered data
            _, svals, vt = np.linalg.svd(centered, full_matrices=False)
            if dim is None:
                energy = svals ** 2
                total = energy.sum()
                if total <= 0:
                    d_pt = 1
                else:
                    frac = np.cumsum(energy) / total
                    d_pt = int(np.searchsorted(frac, variance) + 1)
                d_pt = min(d_pt, max(members.size - 1, 1))
            else:
                d_pt = dim
            means[(p, t)] = mean
            bases[(p, t)] = vt[:d_pt].T
    return ClusterSubspaces(means=means, bases=bases, clusters=clusters,
                            modalities=len(flat))


def classify(sample, subspaces, available_modalities=None):
    """Assign one multimodal sample to the cluster with the largest summed
    squared projection norm; ties break toward the lowest cluster id.

    ``sample`` is a sequence with one array (any shape) per modality; entries
    for unavailable modalities may be None.
    """
    if available_modalities is None:
        available_modalities = tuple(range(subspaces.modalities))
    avail = tuple(available_modalities)
    if not avail:
        raise ValueError("no modalities available")
    for t in avail:
        if not 0 <= t < subspaces.modalities:
            raise IndexError(f"modality index {t} out of range")
    best_p, best_score = None, -1.0
    for p in subspaces.clusters:
        score = 0.0
        for t in avail:
            x = np.asarray(sample[t], dtype=np.float64).ravel()
            centered = x - subspaces.means[(p, t)]
            score += float(np.sum((subspaces.bases[(p, t)].T @ centered) ** 2))
        if score > best_score:
            best_p, best_score = p, score
    return best_p


def classify_dataset(modalities, subspaces, available_modalities=None):
    """Vectorized :func:`classify` over a full dataset."""
    mods = list(getattr(modalities, "modalities", modalities))
    if available_modalities is None:
        available_modalities = tuple(range(subspaces.modalities))
    avail = tuple(available_modalities)
    if not avail:
        raise ValueError("no modalities available")
    flat = [_flatten_modality(m) for m in mods]
    n = flat[0].shape[0]
    clusters = subspaces.clusters
    scores = np.zeros((n, len(clusters)))
    for j, p in enumerate(clusters):
        for t in avail:
            centered = flat[t] - subspaces.means[(p, t)]
            proj = centered @ subspaces.bases[(p, t)]
            scores[:, j] += np.sum(proj ** 2, axis=1)
    return np.asarray(clusters)[np.argmax(scores, axis=1)]


def export_labels_csv(path, labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label"])
        for i, lab in enumerate(labels):
            writer.writerow([i, int(lab)])


def export_metrics_json(path, metrics):
    payload = metrics.as_dict() if isinstance(metrics, MetricSet) else dict(metrics)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
