"""Corruption operators, perturbation bound reports, scenario plumbing."""

import numpy as np
import pytest

from drogsure import dataio, robustness


@pytest.fixture()
def small_dataset():
    learning, _ = dataio.gen_synthetic(
        dataio.SyntheticSpec(clusters=2, per_cluster=8, side=6, modalities=2,
                             shared_dim=2, private_dim=1, noise_sigma=0.01, seed=21),
        seed=21,
    )
    return learning


def test_shuffle_moves_pixels_preserves_multisets(small_dataset):
    out = robustness.shuffle_pixels(small_dataset, 0, seed=3)
    assert not np.array_equal(out.modalities[0], small_dataset.modalities[0])
    np.testing.assert_array_equal(out.modalities[1], small_dataset.modalities[1])
    for before, after in zip(small_dataset.modalities[0], out.modalities[0]):
        np.testing.assert_array_equal(np.sort(before.ravel()), np.sort(after.ravel()))
    # one permutation shared by all images
    flat_in = small_dataset.modalities[0].reshape(small_dataset.n, -1)
    flat_out = out.modalities[0].reshape(small_dataset.n, -1)
    perm = np.argmax(flat_out[0][:, None] == flat_in[0][None, :], axis=1)
    np.testing.assert_allclose(flat_out, flat_in[:, perm])


def test_shuffle_deterministic(small_dataset):
    a = robustness.shuffle_pixels(small_dataset, 0, seed=5)
    b = robustness.shuffle_pixels(small_dataset, 0, seed=5)
    np.testing.assert_array_equal(a.modalities[0], b.modalities[0])
    assert not np.array_equal(
        robustness.shuffle_pixels(small_dataset, 0, seed=6).modalities[0],
        a.modalities[0],
    )


def test_gaussian_snr_variance_calibration():
    gen = np.random.default_rng(22)
    ds = dataio.ModalityDataset([gen.random((40, 60, 60))], None, "learning")
    power = float(np.mean(ds.modalities[0] ** 2))
    out = robustness.add_gaussian_snr(ds, 0, snr_db=10.0, seed=1)
    noise = out.modalities[0] - ds.modalities[0]
    target = power / 10.0
    assert abs(np.var(noise) - target) / target < 0.05
    out2 = robustness.add_gaussian_snr(ds, 0, snr_db=10.0, seed=2)
    noise2 = out2.modalities[0] - ds.modalities[0]
    assert not np.array_equal(noise, noise2)
    assert abs(np.var(noise2) - target) / target < 0.05


def test_gaussian_snr_infinite_is_identity(small_dataset):
    out = robustness.add_gaussian_snr(small_dataset, 1, snr_db=np.inf, seed=0)
    np.testing.assert_array_equal(out.modalities[1], small_dataset.modalities[1])


def test_gaussian_snr_zero_power_rejected():
    ds = dataio.ModalityDataset([np.zeros((4, 3, 3))], None, "learning")
    with pytest.raises(ValueError, match="zero signal power"):
        robustness.add_gaussian_snr(ds, 0, snr_db=10.0, seed=0)


def test_corruption_signal_component_preserved(small_dataset):
    scen = dataio.Scenario(kind="gaussian_snr", target_modalities=(0,),
                           snr_db=5.0, phase="test", seeds=(0,))
    out = robustness.apply_corruption(small_dataset, scen, seed=4)
    residual = out.modalities[0] - small_dataset.modalities[0]
    assert abs(np.mean(residual)) < 0.05  # zero-mean noise only


def _planted_affinity(n=60, clusters=3, seed=0):
    gen = np.random.default_rng(seed)
    labels = np.repeat(np.arange(clusters), n // clusters)
    a = (labels[:, None] == labels[None, :]).astype(float)
    a += 0.02 * gen.random((n, n))
    a = (a + a.T) / 2
    np.fill_diagonal(a, 0.0)
    return a


def test_perturbation_report_identity_case():
    a = _planted_affinity()
    rep = robustness.perturbation_report(a, a.copy(), 3)
    assert rep.frob_distance == 0.0
    assert rep.max_entry_delta == 0.0
    assert rep.n_eps_holds and rep.eq_projector_holds
    assert rep.projector_distance < 1e-10


def test_perturbation_report_two_entry_hand_case():
    a = _planted_affinity()
    at = a.copy()
    at[2, 7] += 0.2
    at[7, 2] += 0.2
    rep = robustness.perturbation_report(a, at, 3)
    assert abs(rep.frob_distance - 0.2 * np.sqrt(2)) < 1e-12
    assert abs(rep.max_entry_delta - 0.2) < 1e-12
    assert rep.n_eps_holds
    assert rep.bound_n_eps == pytest.approx(60 * 0.2)


def test_perturbation_sweep_bounds_hold():
    a = _planted_affinity()
    gen = np.random.default_rng(23)
    for _ in range(20):
        scale = 10.0 ** gen.uniform(-4, -1)
        noise = scale * gen.standard_normal(a.shape)
        noise = (noise + noise.T) / 2
        np.fill_diagonal(noise, 0.0)
        rep = robustness.perturbation_report(a, a + noise, 3)
        assert rep.n_eps_holds
        assert not rep.gap_degenerate
        assert rep.eq_projector_holds


def test_perturbation_degenerate_gap_flagged():
    # identity-like affinity: all eigenvalues equal -> zero gap
    a = np.ones((8, 8)) - np.eye(8)
    rep = robustness.perturbation_report(a, a + 1e-3, 2)
    assert rep.gap_degenerate
    assert rep.eq_projector_holds is None


def _mini_runner():
    spec = dataio.SyntheticSpec(clusters=2, per_cluster=10, side=6, modalities=2,
                                shared_dim=2, private_dim=1, noise_sigma=0.01, seed=30)
    learning, validation = dataio.gen_synthetic(spec, seed=30)
    configs = {
        v: dataio.fixture_model_config(
            v, modalities=2, image_h=6, image_w=6,
            encoder_layers=((3, 3), (2, 1), (2, 1)),
            pretrain_epochs=30, finetune_epochs=60,
        )
        for v in ("drogsure", "dmsc")
    }
    runner = robustness.PipelineRunner(learning, validation, configs, 2,
                                       subspace_dim=3)
    return learning, validation, configs, runner


def test_none_scenario_equals_clean_run():
    learning, validation, configs, runner = _mini_runner()
    scen = dataio.Scenario(kind="none", seeds=(0,))
    rows = robustness.run_scenario(learning, validation, configs, scen, 2,
                                   runner=runner)
    for row in rows:
        assert row["acc_drop"] == 0.0
    phases = {(r["variant"], r["phase"]) for r in rows}
    assert len(phases) == 4


def test_subset_sweep_row_counts():
    learning, validation, configs, runner = _mini_runner()
    rows = []
    for size in (1, 2):
        scen = dataio.Scenario(kind="none", subset_size=size, seeds=(0,))
        rows.extend(robustness.run_scenario(learning, validation, configs, scen,
                                            2, runner=runner))
    val_rows = [r for r in rows if r["phase"] == "validation"]
    # 2 variants x (2 singleton subsets + 1 pair subset)
    assert len(val_rows) == 6
    avail = sorted({r["modalities_available"] for r in val_rows})
    assert avail == ["0", "0+1", "1"]


def test_experiment_csv_and_json_deterministic(tmp_path):
    learning, validation, configs, runner = _mini_runner()
    scen = dataio.Scenario(kind="gaussian_snr", target_modalities=(1,),
                           snr_db=15.0, phase="test", seeds=(0, 1))
    rows = robustness.run_scenario(learning, validation, configs, scen, 2,
                                   runner=runner)
    robustness.write_experiment_csv(tmp_path / "a.csv", rows)
    robustness.write_experiment_json(tmp_path / "a.json", rows)
    rows2 = robustness.run_scenario(learning, validation, configs, scen, 2,
                                    runner=_mini_runner()[3])
    robustness.write_experiment_csv(tmp_path / "b.csv", rows2)
    robustness.write_experiment_json(tmp_path / "b.json", rows2)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_resilience_comparison_validates_inputs():
    learning, validation, configs, runner = _mini_runner()
    scen = dataio.Scenario(kind="shuffle", target_modalities=(0,), phase="train",
                           seeds=(0,))
    with pytest.raises(Exception, match="seeds"):
        robustness.resilience_comparison(learning, validation, configs, scen,
                                         runner=runner)
    only_one = {"drogsure": configs["drogsure"]}
    scen3 = dataio.Scenario(kind="shuffle", target_modalities=(0,), phase="train",
                            seeds=(0, 1, 2))
    with pytest.raises(Exception, match="variants"):
        robustness.resilience_comparison(learning, validation, only_one, scen3,
                                         runner=runner)


def test_corrupting_all_modalities_is_flagged_no_claim():
    learning, validation, configs, runner = _mini_runner()
    scen = dataio.Scenario(kind="shuffle", target_modalities=(0, 1), phase="train",
                           seeds=(0, 1, 2))
    rep = robustness.resilience_comparison(learning, validation, configs, scen,
                                           runner=runner)
    assert rep["ordering"]["all_modalities_corrupted"] is True
    assert "mean_learning_drop" in rep["variants"]["drogsure"]
    assert "mean_sq_affinity_perturbation" in rep["variants"]["dmsc"]
