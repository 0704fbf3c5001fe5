"""Command-line entry point.

Subcommands: gen, train, cluster, experiment, bounds, gradcheck.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric
failure.  Every command writes its artifacts under --out together with a
run_manifest.json recording a hash of the effective configuration; outputs
are byte-reproducible for identical inputs and seeds.
"""

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, admm, clustering, dataio, networks, objectives, robustness
from . import numerics
from .errors import ConfigError, DataFormatError, DimensionError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _config_hash(payload):
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dataset_fingerprint(directory):
    """Content identity of a dataset split (path independent)."""
    if directory is None:
        return None
    manifest = json.loads((Path(directory) / dataio.MANIFEST_NAME).read_text())
    return manifest["checksums"]


def _config_fingerprint(run_cfg):
    """Run configuration with dataset paths replaced by content checksums."""
    payload = run_cfg.to_dict()
    payload["dataset"] = {
        "learning": _dataset_fingerprint(run_cfg.learning_dir),
        "validation": _dataset_fingerprint(run_cfg.validation_dir),
    }
    return payload


def _write_manifest(out_dir, command, payload, outputs):
    manifest = {
        "command": command,
        "config_hash": _config_hash(payload),
        "package_version": __version__,
        "kernel_backend": __import__("drogsure._kernels", fromlist=["BACKEND"]).BACKEND,
        "formats": {
            "checkpoint": networks.CHECKPOINT_VERSION,
            "dataset_manifest": dataio.MANIFEST_VERSION,
        },
        "outputs": sorted(outputs),
    }
    with open(Path(out_dir) / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _effective_seed(args, config_seed=0):
    return args.seed if args.seed is not None else config_seed


# ------------------------------------------------------------------------ gen


def _cmd_gen(args):
    out = _out_dir(args)
    if args.preset == "fixture":
        spec = dataio.FIXTURE_SPEC
    else:
        spec = dataio.SyntheticSpec(
            clusters=args.clusters,
            per_cluster=args.per_cluster,
            side=args.side,
            modalities=args.modalities,
            shared_dim=args.shared_dim,
            private_dim=args.private_dim,
            noise_sigma=args.sigma,
            smoothness=args.smoothness,
        )
    seed = _effective_seed(args)
    learning, validation = dataio.gen_synthetic(spec, seed=seed)
    dataio.save_dataset(learning, out / "learning")
    dataio.save_dataset(validation, out / "validation")
    payload = {"spec": vars(spec).copy(), "seed": seed}
    _write_manifest(out, "gen", payload, ["learning", "validation"])
    print(
        f"gen: wrote {learning.n}+{validation.n} samples, "
        f"{len(learning.modalities)} modalities -> {out}"
    )
    return 0


# ---------------------------------------------------------------------- train


def _read_trace(path):
    rows = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["epoch"]), float(row["loss"])))
    return rows


def _write_trace(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in rows:
            writer.writerow([epoch, format(loss, ".17g")])


def _cmd_train(args):
    out = _out_dir(args)
    run_cfg = dataio.load_config(args.config)
    seed = _effective_seed(args, run_cfg.seed)
    model_cfg = replace(run_cfg.model, seed=seed)
    learning = dataio.load_dataset(run_cfg.learning_dir)

    prior_rows = []
    optimizers = None
    skip_pretrain = False
    if args.resume:
        model, optimizers, epochs = networks.load_checkpoint(args.resume)
        if model.config.variant != model_cfg.variant:
            raise ConfigError(
                f"checkpoint variant {model.config.variant!r} does not match "
                f"config variant {model_cfg.variant!r}"
            )
        skip_pretrain = True
        old_trace = Path(args.resume).parent / "loss_trace.csv"
        if old_trace.exists():
            prior_rows = _read_trace(old_trace)
    else:
        model = networks.build_model(model_cfg, learning.n)
        epochs = {"pretrain": 0, "finetune": 0}

    result = networks.train(
        model, learning, config=model_cfg, optimizers=optimizers,
        skip_pretrain=skip_pretrain,
    )
    start = len(prior_rows)
    rows = prior_rows + [
        (start + i, float(v)) for i, v in enumerate(result.loss_trace)
    ]
    _write_trace(out / "loss_trace.csv", rows)
    epochs_done = {
        "pretrain": epochs.get("pretrain", 0) + result.pretrain_epochs,
        "finetune": epochs.get("finetune", 0) + result.finetune_epochs,
    }
    networks.save_checkpoint(
        model, out / "checkpoint.bin", optimizers=result.optimizers,
        epochs_completed=epochs_done,
    )
    payload = {
        "config": _config_fingerprint(run_cfg),
        "seed": seed,
        "resume": _file_hash(args.resume) if args.resume else None,
    }
    _write_manifest(out, "train", payload, ["checkpoint.bin", "loss_trace.csv"])
    final = result.loss_trace[-1] if len(result.loss_trace) else float("nan")
    print(
        f"train: {model_cfg.variant}, {len(result.loss_trace)} epochs, "
        f"final loss {final:.6g} -> {out / 'checkpoint.bin'}"
    )
    for note in result.warnings:
        print(f"train: warning: {note}")
    return 0


# -------------------------------------------------------------------- cluster


def _cmd_cluster(args):
    out = _out_dir(args)
    model, _, _ = networks.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.dataset)
    if dataset.n != model.n:
        raise DimensionError(
            f"dataset has {dataset.n} samples but the checkpoint was trained "
            f"on {model.n}; cluster the training split"
        )
    if model.config.variant == "drogsure":
        w_total = clustering.fuse_coefficients(model.coeff_matrices())
    else:
        w_total = model.params["se.coeff"]
    affinity = clustering.build_affinity(w_total)
    seed = _effective_seed(args, model.config.seed)
    labels = clustering.spectral_cluster(affinity, args.clusters, seed=seed)
    clustering.export_labels_csv(out / "labels.csv", labels)
    if dataset.labels is not None:
        metrics = clustering.evaluate(labels, dataset.labels)
        clustering.export_metrics_json(out / "metrics.json", metrics)
        summary = f"acc={metrics.acc:.4f} ari={metrics.ari:.4f} nmi={metrics.nmi:.4f}"
    else:
        clustering.export_metrics_json(
            out / "metrics.json", {"acc": None, "ari": None, "nmi": None}
        )
        summary = "no ground-truth labels"
    payload = {
        "checkpoint": _file_hash(args.checkpoint),
        "dataset": _dataset_fingerprint(args.dataset),
        "clusters": args.clusters,
        "seed": seed,
    }
    _write_manifest(out, "cluster", payload, ["labels.csv", "metrics.json"])
    print(f"cluster: {args.clusters} clusters over {dataset.n} samples, {summary}")
    return 0


# ----------------------------------------------------------------- experiment


def _experiment_rows(run_cfg, learning, validation, seed_offset):
    variants = {run_cfg.model.variant: run_cfg.model}
    if "dmsc" not in variants:
        variants["dmsc"] = replace(run_cfg.model, variant="dmsc")
    runner = robustness.PipelineRunner(
        learning, validation, variants, run_cfg.clusters
    )
    rows = []
    for scenario in run_cfg.scenarios:
        shifted = replace(
            scenario, seeds=tuple(s + seed_offset for s in scenario.seeds),
            name=scenario.name,
        )
        rows.extend(
            robustness.run_scenario(
                learning, validation, variants, shifted, run_cfg.clusters,
                runner=runner,
            )
        )
    return rows


def _cmd_experiment(args):
    out = _out_dir(args)
    run_cfg = dataio.load_config(args.config)
    seed_offset = _effective_seed(args, run_cfg.seed)
    learning = dataio.load_dataset(run_cfg.learning_dir)
    validation = (
        dataio.load_dataset(run_cfg.validation_dir)
        if run_cfg.validation_dir
        else None
    )
    if not run_cfg.scenarios:
        _write_manifest(out, "experiment", {"config": _config_fingerprint(run_cfg)}, [])
        print("experiment: no scenarios configured; nothing to do")
        return 0
    if validation is None:
        raise ConfigError("experiment scenarios need a validation dataset")

    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        partials = [
            replace(run_cfg, scenarios=[s]) for s in run_cfg.scenarios
        ]
        rows = []
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for part in pool.map(
                _experiment_rows_star,
                [(p, learning, validation, seed_offset) for p in partials],
            ):
                rows.extend(part)
    else:
        rows = _experiment_rows(run_cfg, learning, validation, seed_offset)

    rows.sort(key=lambda r: (r["scenario"], r["variant"], r["seed"],
                             r["phase"], r["modalities_available"]))
    robustness.write_experiment_csv(out / "report.csv", rows)
    robustness.write_experiment_json(out / "report.json", rows)
    payload = {"config": _config_fingerprint(run_cfg), "seed": seed_offset}
    _write_manifest(out, "experiment", payload, ["report.csv", "report.json"])
    print(f"experiment: {len(run_cfg.scenarios)} scenarios, {len(rows)} rows -> {out}")
    return 0


def _experiment_rows_star(packed):
    return _experiment_rows(*packed)


# --------------------------------------------------------------------- bounds


def _planted_affinity(n, n_clusters, rng):
    labels = np.repeat(np.arange(n_clusters), n // n_clusters)
    a = (labels[:, None] == labels[None, :]).astype(np.float64)
    a += 0.02 * rng.random((n, n))
    a = (a + a.T) / 2.0
    np.fill_diagonal(a, 0.0)
    return a


def _cmd_bounds(args):
    out = _out_dir(args)
    reports = []
    if args.sweep:
        rng = np.random.default_rng(_effective_seed(args))
        a = _planted_affinity(args.size, args.clusters, rng)
        for _ in range(args.sweep):
            magnitude = 10.0 ** rng.uniform(-4, -1)
            noise = magnitude * rng.standard_normal(a.shape)
            noise = (noise + noise.T) / 2.0
            np.fill_diagonal(noise, 0.0)
            reports.append(
                robustness.perturbation_report(a, a + noise, args.clusters)
            )
    else:
        if not (args.clean and args.perturbed):
            raise _UsageError("bounds needs --clean and --perturbed, or --sweep N")
        a = np.load(args.clean)
        at = np.load(args.perturbed)
        reports.append(robustness.perturbation_report(a, at, args.clusters))

    payload = {
        "clean": _file_hash(args.clean) if args.clean else None,
        "perturbed": _file_hash(args.perturbed) if args.perturbed else None,
        "sweep": args.sweep,
        "size": args.size,
        "clusters": args.clusters,
        "seed": _effective_seed(args),
    }
    result = {
        "reports": [r.as_dict() for r in reports],
        "all_n_eps_hold": all(r.n_eps_holds for r in reports),
        "all_projector_hold": all(
            r.eq_projector_holds for r in reports if not r.gap_degenerate
        ),
        "degenerate_gaps": sum(1 for r in reports if r.gap_degenerate),
    }
    with open(out / "bounds_report.json", "w") as fh:
        json.dump(result, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_manifest(out, "bounds", payload, ["bounds_report.json"])
    print(
        f"bounds: {len(reports)} case(s), entry bound "
        f"{'holds' if result['all_n_eps_hold'] else 'VIOLATED'}, projector bound "
        f"{'holds' if result['all_projector_hold'] else 'VIOLATED'}"
        + (f", {result['degenerate_gaps']} degenerate gap(s)" if result["degenerate_gaps"] else "")
    )
    return 0


# ------------------------------------------------------------------ gradcheck


def _min_relu_margin(model, mods):
    """Smallest |pre-activation| over every relu layer of the current model."""
    cfg = model.config
    margin = np.inf
    enc_caches = [
        model.encode_cached(t, np.asarray(mods[t])[..., None])
        for t in range(cfg.modalities)
    ]
    for c in enc_caches:
        margin = min(margin, min(np.min(np.abs(p)) for p in c.preacts))
    maps = [c.output for c in enc_caches]
    if cfg.variant == "concat":
        stacked = np.concatenate(maps, axis=3)
        flat = stacked.reshape(stacked.shape[0], -1)
        se_maps = [(model.params["se.coeff"].T @ flat).reshape(stacked.shape)] * cfg.modalities
    else:
        coeffs = model.coeff_matrices()
        se_maps = []
        for t in range(cfg.modalities):
            w = coeffs[t] if cfg.variant == "drogsure" else coeffs[0]
            lat = maps[t].reshape(maps[t].shape[0], -1)
            se_maps.append(model._latent_map(w.T @ lat))
    for t in range(cfg.modalities):
        dc = model.decode_cached(t, se_maps[t])
        for p in dc.preacts[:-1]:  # final layer is identity: no kink
            margin = min(margin, np.min(np.abs(p)))
    return margin


def gradcheck_model(model, dataset, tolerance=1e-4, inject_bug=False, h=1e-6):
    """Compare analytic gradients against central differences, per block.

    The model is first moved to a generic point: coefficient matrices are
    randomized away from the l1/group kinks and small bias jitter is retried
    until every relu pre-activation clears the difference stencil, so the
    central-difference oracle never straddles a nondifferentiable point.
    """
    mods = list(getattr(dataset, "modalities", dataset))
    rng = np.random.default_rng(12345)
    for name in model.se_block_names():
        w = 0.05 + 0.1 * rng.random((model.n, model.n))
        w *= np.where(rng.random((model.n, model.n)) < 0.5, -1.0, 1.0)
        np.fill_diagonal(w, 0.0)
        model.params[name] = w
    bias_names = [n for n in model.params if n.endswith(".bias")]
    saved = {n: model.params[n].copy() for n in bias_names}
    for attempt in range(100):
        jitter = np.random.default_rng(1000 + attempt)
        for n in bias_names:
            model.params[n] = saved[n] + 0.05 * jitter.standard_normal(saved[n].shape)
        if _min_relu_margin(model, mods) > 30.0 * h:
            break
    else:
        raise RuntimeError("could not find a kink-free gradcheck point")
    analytic = objectives.backprop(model, mods)
    if inject_bug:
        first = next(iter(analytic))
        analytic[first] = analytic[first] + 1e-2

    def loss_of(params):
        saved = model.params
        model.params = {**saved, **params}
        try:
            return objectives.model_loss(model, mods).total
        finally:
            model.params = saved

    results = []
    for name in model.params:
        numeric = numerics.finite_diff_grad(
            lambda p, _n=name: loss_of(p), {name: model.params[name].copy()}, h=h
        )[name]
        denom = max(np.linalg.norm(numeric), 1e-12)
        rel = float(np.linalg.norm(analytic[name] - numeric) / denom)
        results.append({"block": name, "relative_error": rel, "ok": rel <= tolerance})
    return results


def _toy_dataset_and_config(variant, seed=0):
    rng = np.random.default_rng(seed)
    mods = [rng.random((4, 6, 6)) for _ in range(2)]
    cfg = networks.ModelConfig(
        variant=variant,
        modalities=2,
        encoder_layers=((3, 3), (2, 3)),
        image_h=6,
        image_w=6,
        gamma=1.0,
        rho=0.05,
        mu=2.0,
        lambda_group=0.5,
        lambda_comm=0.5,
        pretrain_epochs=0,
        finetune_epochs=0,
        seed=seed,
    )
    return mods, cfg


def _cmd_gradcheck(args):
    out = _out_dir(args)
    seed = _effective_seed(args)
    all_results = {}
    ok = True
    for variant in networks.VARIANTS:
        mods, cfg = _toy_dataset_and_config(variant, seed)
        model = networks.build_model(cfg, 4)
        results = gradcheck_model(model, mods, inject_bug=args.inject_bug)
        all_results[variant] = results
        for row in results:
            status = "ok" if row["ok"] else "FAIL"
            print(
                f"gradcheck: {variant:9s} {row['block']:22s} "
                f"rel_err={row['relative_error']:.3e} {status}"
            )
            ok = ok and row["ok"]
    with open(out / "gradcheck_report.json", "w") as fh:
        json.dump(all_results, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_manifest(out, "gradcheck", {"seed": seed, "inject_bug": args.inject_bug},
                    ["gradcheck_report.json"])
    print(f"gradcheck: {'all blocks ok' if ok else 'FAILURES detected'}")
    return 0 if ok else 2


# ----------------------------------------------------------------------- main


def _build_parser():
    parser = _Parser(prog="drogsure", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--seed", type=int, default=None,
                       help="override the configuration seed")
        return p

    p = add("gen", help="write a synthetic multimodal dataset")
    p.add_argument("--preset", choices=["fixture"], default=None)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--per-cluster", type=int, default=40)
    p.add_argument("--side", type=int, default=8)
    p.add_argument("--modalities", type=int, default=3)
    p.add_argument("--shared-dim", type=int, default=3)
    p.add_argument("--private-dim", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--smoothness", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = add("train", help="train a variant; writes checkpoint + loss trace")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = add("cluster", help="fuse coefficients, cluster, score")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cluster)

    p = add("experiment", help="run configured corruption scenarios")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_experiment)

    p = add("bounds", help="affinity perturbation bound report")
    p.add_argument("--clean", default=None, help=".npy clean affinity")
    p.add_argument("--perturbed", default=None, help=".npy perturbed affinity")
    p.add_argument("--sweep", type=int, default=0,
                   help="generate this many random perturbations instead")
    p.add_argument("--size", type=int, default=60)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bounds)

    p = add("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime/numeric failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
