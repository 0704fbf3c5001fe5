"""Proximal operators against scalar oracles; solver behavior on planted data."""

import numpy as np
import pytest

import oracles
from drogsure import admm, clustering
from drogsure.errors import DimensionError


def _planted_two_subspaces(seed=0, n_per=20, ambient=20, dim=3, modalities=1,
                           noise=0.0):
    """Unit-norm samples from two mutually orthogonal subspaces, block ordered."""
    gen = np.random.default_rng(seed)
    q = np.linalg.qr(gen.standard_normal((ambient, 2 * dim)))[0]
    bases = [q[:, :dim], q[:, dim:]]
    latents = []
    for _ in range(modalities):
        blocks = []
        for basis in bases:
            coeff = gen.standard_normal((n_per, dim))
            x = coeff @ basis.T
            if noise:
                x = x + noise * gen.standard_normal(x.shape)
            x /= np.linalg.norm(x, axis=1, keepdims=True)
            blocks.append(x)
        latents.append(np.concatenate(blocks))
    labels = np.repeat([0, 1], n_per)
    return latents, labels


def test_prox_group_identity_at_zero_threshold():
    gen = np.random.default_rng(0)
    mats = [gen.standard_normal((5, 5)) for _ in range(3)]
    for w in mats:
        np.fill_diagonal(w, 0.0)
    out = admm.prox_group(mats, 0.0)
    for a, b in zip(out, mats):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_prox_group_hand_case_and_full_shrinkage():
    w1 = np.zeros((3, 3))
    w2 = np.zeros((3, 3))
    w1[0, 1], w2[0, 1] = 3.0, 4.0
    out = admm.prox_group([w1, w2], 2.5)
    assert abs(out[0][0, 1] - 1.5) < 1e-12
    assert abs(out[1][0, 1] - 2.0) < 1e-12
    out = admm.prox_group([w1, w2], 5.0)
    np.testing.assert_array_equal(out[0], 0.0)
    np.testing.assert_array_equal(out[1], 0.0)


def test_prox_group_matches_scalar_oracle_and_nonexpansive():
    gen = np.random.default_rng(1)
    for _ in range(25):
        mats = [gen.standard_normal((6, 6)) for _ in range(3)]
        beta = float(gen.random() * 2)
        got = admm.prox_group(mats, beta)
        want = oracles.prox_group_ref(mats, beta)
        for a, b in zip(got, want):
            np.testing.assert_allclose(a, b, atol=1e-12)
        before = np.sqrt(sum(w ** 2 for w in mats))
        after = np.sqrt(sum(w ** 2 for w in got))
        np.fill_diagonal(before, 0.0)
        assert np.all(after <= before + 1e-12)


def test_shrink_l1_cases_and_oracle():
    assert abs(admm.shrink_l1(np.array([[0.7]]), 0.2)[0, 0] - 0.5) < 1e-15
    assert admm.shrink_l1(np.array([[0.15]]), 0.2)[0, 0] == 0.0
    assert admm.shrink_l1(np.array([[-0.15]]), 0.2)[0, 0] == 0.0
    gen = np.random.default_rng(2)
    for _ in range(25):
        b = gen.standard_normal((5, 7))
        tau = float(gen.random())
        np.testing.assert_allclose(
            admm.shrink_l1(b, tau), oracles.shrink_l1_ref(b, tau), atol=1e-12
        )


def test_penalty_growth_is_exact_geometric():
    latents, _ = _planted_two_subspaces(n_per=10, modalities=2)
    cfg = admm.AdmmConfig(max_iters=15, tol=0.0, growth=1.05, mu0=1.0)
    state = admm.admm_init(latents, cfg)
    for k in range(1, 16):
        admm.admm_iterate(state)
        assert state.mu == pytest.approx(1.05 ** k, rel=1e-12)


def test_eta1_respects_spectral_bound():
    latents, _ = _planted_two_subspaces(modalities=2, seed=3)
    cfg = admm.AdmmConfig()
    state = admm.admm_init(latents, cfg)
    for lp in state.latents:
        true_norm = np.linalg.norm(lp, ord=2) ** 2
        assert state.eta1 >= true_norm * (1 - 1e-8)


def test_infinite_tol_runs_zero_iterations():
    latents, _ = _planted_two_subspaces(n_per=8)
    report = admm.admm_run(latents, admm.AdmmConfig(tol=np.inf))
    assert report.iterations == 0
    assert report.residuals.size == 0
    assert report.converged


def test_huge_rho_collapses_to_zero():
    latents, _ = _planted_two_subspaces(n_per=8)
    report = admm.admm_run(latents, admm.AdmmConfig(rho=1e9, max_iters=5, tol=0.0))
    assert max(np.abs(w).max() for w in report.coeffs) == 0.0


def test_mismatched_sample_counts_rejected():
    gen = np.random.default_rng(4)
    with pytest.raises(DimensionError, match="sample count"):
        admm.admm_init(
            [gen.random((8, 3)), gen.random((9, 3))], admm.AdmmConfig()
        )


def _block_mass(w, labels):
    inside = np.abs(w)[labels[:, None] == labels[None, :]].sum()
    return inside / max(np.abs(w).sum(), 1e-300)


def test_planted_recovery_and_clustering():
    latents, labels = _planted_two_subspaces(seed=5)
    report = admm.admm_run(latents, admm.AdmmConfig())
    w = report.coeffs[0]
    assert _block_mass(w, labels) >= 0.95
    affinity = clustering.build_affinity(w)
    pred = clustering.spectral_cluster(affinity, 2, seed=0)
    assert clustering.cluster_accuracy(pred, labels) == 1.0
    # residual settles after the transient: non-increasing up to the sub-percent
    # bounce the growing penalty multiplier causes, with clear net decay
    tail = report.residuals[10:]
    assert np.all(np.diff(tail) <= 0.05 * tail[:-1])
    assert tail[-1] < 1e-3 * tail[0]


def test_t1_reduces_commutator_correction_to_noop():
    latents, _ = _planted_two_subspaces(seed=6, n_per=10)
    r_base = admm.admm_run(latents, admm.AdmmConfig(max_iters=40, lambda_comm=0.0, tol=0.0))
    r_comm = admm.admm_run(latents, admm.AdmmConfig(max_iters=40, lambda_comm=5.0, tol=0.0))
    for a, b in zip(r_base.coeffs, r_comm.coeffs):
        np.testing.assert_array_equal(a, b)


def test_doubling_eta1_still_converges_close():
    latents, labels = _planted_two_subspaces(seed=7)
    base = admm.admm_run(latents, admm.AdmmConfig())
    state = admm.admm_init(latents, admm.AdmmConfig())
    doubled = admm.admm_run(latents, admm.AdmmConfig(eta1=2.0 * state.eta1))
    assert base.converged and doubled.converged
    r1, r2 = base.residuals[-1], doubled.residuals[-1]
    assert abs(r2 - r1) <= 0.1 * max(r1, r2)
    assert _block_mass(doubled.coeffs[0], labels) >= 0.95


def test_symmetric_commutator_penalty_nonincreasing():
    # symmetric planted data (identical latents per modality): the Jacobi
    # sweep preserves exchangeability, so the coefficient matrices stay equal
    # and the commutator penalty never rises
    from drogsure.objectives import commutator_penalty

    hits = 0
    trials = 20
    for seed in range(trials):
        latents, _ = _planted_two_subspaces(seed=2000 + seed, n_per=12)
        pair = [latents[0], latents[0].copy()]
        cfg = admm.AdmmConfig(max_iters=40, tol=0.0)
        state = admm.admm_init(pair, cfg)
        trace = [commutator_penalty(state.coeffs)]
        for _ in range(cfg.max_iters):
            admm.admm_iterate(state)
            trace.append(commutator_penalty(state.coeffs))
        if np.all(np.diff(trace) <= 1e-12):
            hits += 1
    assert hits >= 0.9 * trials


def test_near_symmetric_multimodal_stays_finite_at_default_coupling():
    latents, labels = _planted_two_subspaces(seed=31, modalities=2)
    report = admm.admm_run(latents, admm.AdmmConfig(max_iters=120, tol=0.0))
    for w in report.coeffs:
        assert np.all(np.isfinite(w))
        assert _block_mass(w, labels) >= 0.95
