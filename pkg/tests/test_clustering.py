"""Fusion, affinity, spectral clustering, metrics, and the subspace classifier."""

import json

import numpy as np
import pytest

import oracles
from drogsure import clustering
from drogsure.errors import DimensionError


def test_fuse_single_and_cancelling():
    gen = np.random.default_rng(0)
    w = gen.standard_normal((5, 5))
    np.testing.assert_array_equal(clustering.fuse_coefficients([w]), w)
    np.testing.assert_allclose(
        clustering.fuse_coefficients([w, -w]), 0.0, atol=1e-15
    )
    mats = [gen.standard_normal((4, 4)) for _ in range(3)]
    np.testing.assert_allclose(
        clustering.fuse_coefficients(mats), mats[0] + mats[1] + mats[2]
    )


def test_affinity_construction():
    w = np.array([[0.0, 0.0, 0.0, 0.0]] * 4)
    w[1][3] = 0.4
    w = np.array(w)
    a = clustering.build_affinity(w)
    assert a[1, 3] == a[3, 1] == 0.4
    sym = np.abs(np.random.default_rng(1).standard_normal((6, 6)))
    sym = (sym + sym.T) / 2
    np.fill_diagonal(sym, 0.0)
    np.testing.assert_allclose(clustering.build_affinity(sym), 2 * sym)
    rand = np.random.default_rng(2).standard_normal((8, 8))
    a = clustering.build_affinity(rand)
    np.testing.assert_array_equal(a, a.T)
    assert np.all(a >= 0)
    np.testing.assert_array_equal(np.diag(a), 0.0)


def _block_affinity(sizes, noise=0.0, seed=0):
    gen = np.random.default_rng(seed)
    labels = np.concatenate([[i] * s for i, s in enumerate(sizes)])
    a = (labels[:, None] == labels[None, :]).astype(float)
    if noise:
        off = noise * gen.random(a.shape)
        off = (off + off.T) / 2
        a = a + off * (labels[:, None] != labels[None, :])
    np.fill_diagonal(a, 0.0)
    return a, labels


def test_spectral_disconnected_blocks_exact():
    a, labels = _block_affinity([5, 7])
    pred = clustering.spectral_cluster(a, 2, seed=0)
    assert clustering.cluster_accuracy(pred, labels) == 1.0


def test_spectral_planted_partition_across_seeds():
    a, labels = _block_affinity([20] * 4, noise=0.05, seed=3)
    for seed in range(10):
        pred = clustering.spectral_cluster(a, 4, seed=seed)
        assert clustering.cluster_accuracy(pred, labels) == 1.0


def test_spectral_duplicate_rows_cluster_together():
    a, labels = _block_affinity([6, 6], noise=0.02, seed=4)
    pred = clustering.spectral_cluster(a, 2, seed=0)
    assert pred[0] == pred[1]  # identical block rows


def test_spectral_permutation_invariance():
    a, labels = _block_affinity([10, 10, 10], noise=0.05, seed=5)
    gen = np.random.default_rng(6)
    perm = gen.permutation(30)
    pred = clustering.spectral_cluster(a, 3, seed=0)
    pred_perm = clustering.spectral_cluster(a[np.ix_(perm, perm)], 3, seed=0)
    # compare partitions after undoing the permutation
    unperm = np.empty_like(pred_perm)
    unperm[perm] = pred_perm
    assert clustering.cluster_accuracy(unperm, pred) == 1.0


def test_spectral_rejects_degenerate():
    with pytest.raises(ValueError, match="zero"):
        clustering.spectral_cluster(np.zeros((6, 6)), 2)
    with pytest.raises(ValueError, match="symmetric"):
        clustering.spectral_cluster(np.triu(np.ones((5, 5)), 1), 2)


def test_accuracy_permutation_and_hand_case():
    truth = np.array([0, 0, 1, 1])
    assert clustering.cluster_accuracy(truth, truth) == 1.0
    assert clustering.cluster_accuracy(1 - truth, truth) == 1.0
    pred = np.array([0, 1, 0, 1])
    assert clustering.cluster_accuracy(pred, truth) == 0.5
    assert clustering.cluster_accuracy(pred, truth) == oracles.accuracy_ref(pred, truth)
    assert clustering.cluster_accuracy(truth, pred) == clustering.cluster_accuracy(pred, truth)
    with pytest.raises(ValueError):
        clustering.cluster_accuracy([], [])


def test_ari_nmi_values():
    truth = np.array([0, 0, 1, 1])
    ari, nmi = clustering.ari_nmi(truth, truth)
    assert ari == 1.0 and nmi == 1.0
    pred = np.array([0, 1, 0, 1])
    ari, _ = clustering.ari_nmi(pred, truth)
    assert abs(ari - oracles.ari_ref(pred, truth)) < 1e-12
    gen = np.random.default_rng(7)
    big_truth = gen.integers(0, 4, size=1000)
    big_pred = gen.integers(0, 4, size=1000)
    ari, _ = clustering.ari_nmi(big_pred, big_truth)
    assert abs(ari) < 0.1


def test_ari_matches_oracle_on_random_labelings():
    gen = np.random.default_rng(8)
    for _ in range(20):
        truth = gen.integers(0, 3, size=30)
        pred = gen.integers(0, 4, size=30)
        ari, _ = clustering.ari_nmi(pred, truth)
        assert abs(ari - oracles.ari_ref(pred, truth)) < 1e-10


def test_degenerate_truth_flags_nmi_zero():
    with pytest.warns(UserWarning, match="degenerate"):
        ari, nmi = clustering.ari_nmi(np.array([0, 1, 0]), np.array([2, 2, 2]))
    assert nmi == 0.0


def _planted_clusters(gen, clusters=3, per=12, dim=2, ambient=25, modalities=2):
    # mutually orthogonal cluster subspaces per modality, zero-mean clusters
    data, labels = [[] for _ in range(modalities)], []
    bases = {}
    for t in range(modalities):
        q = np.linalg.qr(gen.standard_normal((ambient, clusters * dim)))[0]
        for p in range(clusters):
            bases[(p, t)] = q[:, p * dim : (p + 1) * dim]
    def shell(d):
        v = gen.standard_normal(d)
        return v / np.linalg.norm(v) * gen.uniform(1.0, 2.0)

    for p in range(clusters):
        for _ in range(per):
            for t in range(modalities):
                data[t].append(bases[(p, t)] @ shell(dim))
            labels.append(p)
    return [np.asarray(d) for d in data], np.asarray(labels), bases


def test_fit_subspaces_closure_and_orthonormality():
    gen = np.random.default_rng(9)
    data, labels, _ = _planted_clusters(gen)
    subs = clustering.fit_cluster_subspaces(data, labels, dim=2)
    for key, basis in subs.bases.items():
        np.testing.assert_allclose(basis.T @ basis, np.eye(2), atol=1e-10)
    # training points reconstruct through their own subspace
    for p in subs.clusters:
        members = np.nonzero(labels == p)[0]
        x = data[0][members] - subs.means[(p, 0)]
        proj = x @ subs.bases[(p, 0)] @ subs.bases[(p, 0)].T
        np.testing.assert_allclose(proj, x, atol=1e-8)


def test_fit_subspaces_collinear_line():
    direction = np.array([1.0, 2.0, -1.0])
    points = np.outer(np.linspace(-2, 2, 9), direction)
    labels = np.zeros(9, dtype=int)
    subs = clustering.fit_cluster_subspaces([points], labels, dim=1)
    basis = subs.bases[(0, 0)][:, 0]
    cos = abs(basis @ direction / np.linalg.norm(direction))
    assert abs(cos - 1.0) < 1e-10


def test_fit_subspaces_matches_eigendecomposition():
    gen = np.random.default_rng(10)
    x = gen.standard_normal((30, 8))
    labels = np.zeros(30, dtype=int)
    subs = clustering.fit_cluster_subspaces([x], labels, dim=3)
    centered = x - x.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered / 30)
    top = evecs[:, ::-1][:, :3]
    got = subs.bases[(0, 0)]
    for j in range(3):
        cos = abs(got[:, j] @ top[:, j])
        assert abs(cos - 1.0) < 1e-8


def test_fit_subspaces_small_cluster_named_error():
    x = np.random.default_rng(11).standard_normal((5, 6))
    labels = np.array([0, 0, 0, 0, 1])
    with pytest.raises(ValueError, match="cluster 1"):
        clustering.fit_cluster_subspaces([x], labels, dim=2)


def test_classify_training_point_and_span_point():
    gen = np.random.default_rng(12)
    data, labels, bases = _planted_clusters(gen)
    subs = clustering.fit_cluster_subspaces(data, labels, dim=2)
    idx = 5
    sample = [data[t][idx] for t in range(2)]
    assert clustering.classify(sample, subs) == labels[idx]
    # a fresh point in cluster 2's span (after centering), single modality
    coeff = gen.standard_normal(2)
    coeff *= 1.5 / np.linalg.norm(coeff)
    fresh = subs.means[(2, 0)] + bases[(2, 0)] @ coeff
    assert clustering.classify([fresh, None], subs, available_modalities=(0,)) == 2


def test_classify_modality_index_errors():
    gen = np.random.default_rng(13)
    data, labels, _ = _planted_clusters(gen)
    subs = clustering.fit_cluster_subspaces(data, labels, dim=2)
    with pytest.raises(IndexError):
        clustering.classify([data[0][0], data[1][0]], subs, available_modalities=(5,))
    with pytest.raises(ValueError):
        clustering.classify([data[0][0], data[1][0]], subs, available_modalities=())


def test_classify_dataset_matches_scalar_classify():
    gen = np.random.default_rng(14)
    data, labels, _ = _planted_clusters(gen, per=8)
    subs = clustering.fit_cluster_subspaces(data, labels, dim=2)
    batch = clustering.classify_dataset(data, subs, available_modalities=(0, 1))
    for i in range(len(labels)):
        single = clustering.classify([data[0][i], data[1][i]], subs)
        assert batch[i] == single


def test_exports(tmp_path):
    labels = np.array([0, 1, 1, 0])
    clustering.export_labels_csv(tmp_path / "labels.csv", labels)
    text = (tmp_path / "labels.csv").read_text().strip().splitlines()
    assert text[0] == "sample_id,label"
    assert len(text) == 5
    metrics = clustering.MetricSet(acc=1.0, ari=0.5, nmi=0.25)
    clustering.export_metrics_json(tmp_path / "metrics.json", metrics)
    loaded = json.loads((tmp_path / "metrics.json").read_text())
    assert loaded == {"acc": 1.0, "ari": 0.5, "nmi": 0.25}
