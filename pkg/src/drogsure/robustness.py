"""Corruption operators, scenario experiment drivers, and empirical checks of
the affinity perturbation bounds.

A scenario corrupts chosen modalities either before training ("train" phase)
or only in the validation data handed to the classifier ("test" phase), and
restricts which modalities the classifier may use.  Runs are cached per
(variant, seed, corruption) so sweeps can share trained models.
"""

import csv
import itertools
import json
from dataclasses import dataclass, replace

import numpy as np

from . import clustering, networks
from .dataio import ModalityDataset, Scenario
from .errors import ConfigError, DimensionError


def shuffle_pixels(dataset, modality, seed):
    """Apply one seeded pixel permutation to every image of a modality.

    A single fixed permutation relabels pixel coordinates, which preserves the
    sample geometry while destroying the spatial structure convolutional
    encoders rely on.
    """
    out = dataset.copy()
    h, w = out.shape
    perm = np.random.default_rng(seed).permutation(h * w)
    mod = out.modalities[modality]
    out.modalities[modality] = mod.reshape(out.n, h * w)[:, perm].reshape(out.n, h, w)
    return out


def add_gaussian_snr(dataset, modality, snr_db, seed):
    """Add zero-mean white Gaussian noise at the requested SNR (dB).

    The noise variance is ``mean(x^2) / 10**(snr_db / 10)``; an infinite
    ``snr_db`` returns the data unchanged.
    """
    out = dataset.copy()
    if np.isposinf(snr_db):
        return out
    if not np.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    mod = out.modalities[modality]
    power = float(np.mean(np.square(mod)))
    if power == 0.0:
        raise ValueError(f"modality {modality} has zero signal power")
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    out.modalities[modality] = mod + sigma * rng.standard_normal(mod.shape)
    return out


def apply_corruption(dataset, scenario, seed):
    """Corrupt every target modality of the scenario on a copy of the data."""
    out = dataset
    for k, t in enumerate(scenario.target_modalities):
        if scenario.kind == "shuffle":
            out = shuffle_pixels(out, t, seed + 104729 * k)
        elif scenario.kind == "gaussian_snr":
            out = add_gaussian_snr(out, t, scenario.snr_db, seed + 104729 * k)
    return out if out is not dataset else dataset.copy()


# --------------------------------------------------------- perturbation bounds


@dataclass
class PerturbationReport:
    frob_distance: float
    max_entry_delta: float
    bound_n_eps: float
    n_eps_holds: bool
    spectral_gap: float
    projector_distance: float
    bound_rhs: float
    eq_projector_holds: bool
    gap_degenerate: bool

    def as_dict(self):
        return {
            "frob_distance": self.frob_distance,
            "max_entry_delta": self.max_entry_delta,
            "bound_n_eps": self.bound_n_eps,
            "n_eps_holds": self.n_eps_holds,
            "spectral_gap": self.spectral_gap,
            "projector_distance": self.projector_distance,
            "bound_rhs": self.bound_rhs,
            "eq_projector_holds": self.eq_projector_holds,
            "gap_degenerate": self.gap_degenerate,
        }


def _rank_projector(a, rank):
    vals, vecs = np.linalg.eigh(a)
    top = vecs[:, -rank:]      # eigh returns ascending eigenvalues
    return top @ top.T, vals[::-1]


def perturbation_report(a_clean, a_perturbed, n_clusters, gap_floor=1e-8):
    """Measure an affinity perturbation against the two bound inequalities.

    Checks ``||A - A~||_F <= n * max|delta|`` and the Davis-Kahan-type bound
    ``||P - P~||_F <= sqrt(2)/gap * ||A - A~||_F`` on the rank-``n_clusters``
    spectral projectors, where ``gap`` is the clean affinity's spectral gap
    between eigenvalues ``n_clusters`` and ``n_clusters + 1``.
    """
    a = np.asarray(a_clean, dtype=np.float64)
    at = np.asarray(a_perturbed, dtype=np.float64)
    if a.shape != at.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(
            f"affinities must be square with equal shape, got {a.shape} and {at.shape}"
        )
    if n_clusters < 2 or n_clusters >= a.shape[0]:
        raise ValueError(f"n_clusters must lie in [2, n), got {n_clusters}")
    delta = at - a
    frob = float(np.linalg.norm(delta))
    eps_hat = float(np.max(np.abs(delta)))
    bound = a.shape[0] * eps_hat
    proj_a, vals = _rank_projector(a, n_clusters)
    proj_at, _ = _rank_projector(at, n_clusters)
    gap = float(abs(vals[n_clusters - 1] - vals[n_clusters]))
    proj_dist = float(np.linalg.norm(proj_a - proj_at))
    degenerate = gap <= gap_floor
    rhs = float("inf") if degenerate else np.sqrt(2.0) / gap * frob
    return PerturbationReport(
        frob_distance=frob,
        max_entry_delta=eps_hat,
        bound_n_eps=bound,
        n_eps_holds=bool(frob <= bound),
        spectral_gap=gap,
        projector_distance=proj_dist,
        bound_rhs=rhs,
        eq_projector_holds=None if degenerate else bool(proj_dist <= rhs),
        gap_degenerate=degenerate,
    )


# ------------------------------------------------------------ pipeline runner


@dataclass
class RunOutput:
    model: object
    affinity: np.ndarray
    normalized_affinity: np.ndarray
    train_labels: np.ndarray
    learn_metrics: clustering.MetricSet
    subspaces: clustering.ClusterSubspaces
    loss_trace: np.ndarray


class PipelineRunner:
    """Trains, clusters and classifies; caches runs per (variant, seed, corruption)."""

    def __init__(self, learning, validation, configs, n_clusters, subspace_dim=None):
        self.learning = learning
        self.validation = validation
        self.configs = dict(configs)
        self.n_clusters = n_clusters
        self.subspace_dim = subspace_dim
        self._cache = {}

    def _fit(self, variant, seed, train_data):
        cfg = replace(self.configs[variant], seed=seed)
        model = networks.build_model(cfg, train_data.n)
        result = networks.train(model, train_data)
        if cfg.variant == "drogsure":
            w_total = clustering.fuse_coefficients(model.coeff_matrices())
            normalized = unit_scale_fused_affinity(model.coeff_matrices())
        else:
            w_total = model.params["se.coeff"]
            normalized = _unit_scale(clustering.build_affinity(w_total))
        affinity = clustering.build_affinity(w_total)
        labels = clustering.spectral_cluster(affinity, self.n_clusters, seed=seed)
        metrics = clustering.evaluate(labels, train_data.labels)
        try:
            subspaces = clustering.fit_cluster_subspaces(
                train_data, labels, dim=self.subspace_dim
            )
        except ValueError:
            # a degraded labeling can leave a cluster smaller than the requested
            # dimension; fall back to variance-based dimensions per cluster
            subspaces = clustering.fit_cluster_subspaces(train_data, labels)
        return RunOutput(model, affinity, normalized, labels, metrics, subspaces,
                         result.loss_trace)

    def run(self, variant, seed, scenario=None):
        """Clean run, or a run with train-phase corruption applied."""
        corrupt_train = (
            scenario is not None
            and scenario.kind != "none"
            and scenario.phase == "train"
        )
        key = (variant, seed, scenario.name if corrupt_train else None)
        if key not in self._cache:
            data = (
                apply_corruption(self.learning, scenario, seed)
                if corrupt_train
                else self.learning
            )
            self._cache[key] = self._fit(variant, seed, data)
        return self._cache[key]

    def validation_metrics(self, run, scenario=None, seed=0, available=None):
        data = self.validation
        if scenario is not None and scenario.kind != "none" and scenario.phase == "test":
            data = apply_corruption(data, scenario, seed)
        pred = clustering.classify_dataset(data, run.subspaces, available)
        return clustering.evaluate(pred, data.labels)


def _available_sets(scenario, n_modalities):
    if scenario.subset_size is not None:
        return [
            tuple(c)
            for c in itertools.combinations(range(n_modalities), scenario.subset_size)
        ]
    if scenario.available_modalities is not None:
        return [scenario.available_modalities]
    return [tuple(range(n_modalities))]


def run_scenario(learning, validation, configs, scenario, n_clusters, runner=None):
    """Execute one scenario for every variant and seed.

    Returns flat result rows: per (variant, seed) one learning-split row and
    one validation row per available-modality subset.  ``acc_drop`` compares
    against the same variant/seed's clean, all-modality run.
    """
    runner = runner or PipelineRunner(learning, validation, configs, n_clusters)
    t_count = len(learning.modalities)
    rows = []
    for variant in sorted(configs):
        for seed in scenario.seeds:
            clean = runner.run(variant, seed)
            clean_val = runner.validation_metrics(clean)
            run = runner.run(variant, seed, scenario)
            rows.append({
                "scenario": scenario.name,
                "variant": variant,
                "seed": seed,
                "phase": "learning",
                "modalities_available": "all",
                "acc": run.learn_metrics.acc,
                "ari": run.learn_metrics.ari,
                "nmi": run.learn_metrics.nmi,
                "acc_drop": clean.learn_metrics.acc - run.learn_metrics.acc,
            })
            for avail in _available_sets(scenario, t_count):
                metrics = runner.validation_metrics(
                    run, scenario, seed=seed, available=avail
                )
                rows.append({
                    "scenario": scenario.name,
                    "variant": variant,
                    "seed": seed,
                    "phase": "validation",
                    "modalities_available": "+".join(map(str, avail)),
                    "acc": metrics.acc,
                    "ari": metrics.ari,
                    "nmi": metrics.nmi,
                    "acc_drop": clean_val.acc - metrics.acc,
                })
    return rows


def summarize_rows(rows):
    """Mean metrics per (scenario, variant, phase) over seeds and subsets."""
    groups = {}
    for row in rows:
        key = (row["scenario"], row["variant"], row["phase"])
        groups.setdefault(key, []).append(row)
    summary = []
    for (scen, variant, phase), grp in sorted(groups.items()):
        summary.append({
            "scenario": scen,
            "variant": variant,
            "phase": phase,
            "runs": len(grp),
            "mean_acc": float(np.mean([r["acc"] for r in grp])),
            "mean_ari": float(np.mean([r["ari"] for r in grp])),
            "mean_nmi": float(np.mean([r["nmi"] for r in grp])),
            "mean_acc_drop": float(np.mean([r["acc_drop"] for r in grp])),
        })
    return summary


EXPERIMENT_COLUMNS = (
    "scenario", "variant", "seed", "phase", "modalities_available",
    "acc", "ari", "nmi", "acc_drop",
)


def write_experiment_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EXPERIMENT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in EXPERIMENT_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".12g")
    return v


def write_experiment_json(path, rows):
    nested = {}
    for row in rows:
        nested.setdefault(row["scenario"], {}).setdefault(
            row["variant"], {}
        ).setdefault(str(row["seed"]), []).append(
            {k: row[k] for k in EXPERIMENT_COLUMNS if k not in ("scenario", "variant", "seed")}
        )
    payload = {"rows": nested, "summary": summarize_rows(rows)}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


# -------------------------------------------------------- resilience ordering


def _unit_scale(a):
    peak = np.max(np.abs(a))
    return a / peak if peak > 0 else a


def unit_scale_fused_affinity(coeffs):
    """Fused affinity with entries normalized into [0, 1].

    Each per-modality affinity is scaled to unit maximum entry and the scaled
    constituents are averaged, so every modality contributes an equal 1/T
    share and a perturbation confined to one modality can move an entry by at
    most 1/T.  This realizes the unit-entry setting the perturbation analysis
    assumes and puts both coefficient paths on one comparable scale.
    """
    parts = [_unit_scale(clustering.build_affinity(w)) for w in coeffs]
    return sum(parts) / len(parts)


def resilience_comparison(learning, validation, configs, scenario, runner=None):
    """Compare per-variant degradation under one corruption.

    For each variant: mean clean/corrupted learning accuracy and their drop,
    plus the mean squared peak-normalized affinity perturbation (the fused
    multi-matrix path's perturbation vs the shared-matrix path's).
    """
    if len(configs) < 2:
        raise ConfigError("resilience comparison needs at least 2 variants")
    if len(scenario.seeds) < 3:
        raise ConfigError("resilience comparison needs at least 3 seeds")
    runner = runner or PipelineRunner(
        learning, validation, configs, len(np.unique(learning.labels))
    )
    report = {"scenario": scenario.name, "seeds": list(scenario.seeds), "variants": {}}
    for variant in sorted(configs):
        drops_l, drops_v, msq = [], [], []
        for seed in scenario.seeds:
            clean = runner.run(variant, seed)
            corrupt = runner.run(variant, seed, scenario)
            drops_l.append(clean.learn_metrics.acc - corrupt.learn_metrics.acc)
            clean_v = runner.validation_metrics(clean)
            corrupt_v = runner.validation_metrics(corrupt, scenario, seed=seed)
            drops_v.append(clean_v.acc - corrupt_v.acc)
            delta = corrupt.normalized_affinity - clean.normalized_affinity
            msq.append(float(np.max(np.abs(delta))) ** 2)
        report["variants"][variant] = {
            "mean_learning_drop": float(np.mean(drops_l)),
            "mean_validation_drop": float(np.mean(drops_v)),
            "mean_sq_affinity_perturbation": float(np.mean(msq)),
        }
    variants = report["variants"]
    if "drogsure" in variants and "dmsc" in variants:
        whole = scenario.kind != "none" and len(scenario.target_modalities) >= len(
            learning.modalities
        )
        report["ordering"] = {
            "all_modalities_corrupted": whole,
            "drop_ordering_holds": bool(
                variants["drogsure"]["mean_learning_drop"]
                <= variants["dmsc"]["mean_learning_drop"]
            ),
            "perturbation_ordering_holds": bool(
                variants["drogsure"]["mean_sq_affinity_perturbation"]
                < variants["dmsc"]["mean_sq_affinity_perturbation"]
            ),
        }
    return report
