"""Scratch calibration runs for the synthetic fixture (not shipped API)."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from drogsure import clustering, dataio, networks


def run(variant, seed, cfg, learning, validation, verbose=True):
    t0 = time.time()
    model = networks.build_model(cfg if cfg.seed == seed else
                                 __import__("dataclasses").replace(cfg, seed=seed),
                                 learning.n)
    res = networks.train(model, learning)
    if variant == "drogsure":
        w = clustering.fuse_coefficients(model.coeff_matrices())
    else:
        w = model.params["se.coeff"]
    aff = clustering.build_affinity(w)
    labels = clustering.spectral_cluster(aff, 4, seed=seed)
    m = clustering.evaluate(labels, learning.labels)
    subs = clustering.fit_cluster_subspaces(learning, labels)
    pred = clustering.classify_dataset(validation, subs)
    mv = clustering.evaluate(pred, validation.labels)
    dt = time.time() - t0
    if verbose:
        print(
            f"  {variant} seed={seed}: L acc={m.acc:.3f} ari={m.ari:.3f} "
            f"nmi={m.nmi:.3f} | V acc={mv.acc:.3f} | loss {res.loss_trace[-1]:.4f} "
            f"| {dt:.1f}s | warn={len(res.warnings)}"
        )
    return m, mv, dt


if __name__ == "__main__":
    import argparse
    from dataclasses import replace

    ap = argparse.ArgumentParser()
    ap.add_argument("--variant", default="drogsure")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--mu", type=float, default=20.0)
    ap.add_argument("--gamma", type=float, default=1.0)
    ap.add_argument("--rho", type=float, default=1e-3)
    ap.add_argument("--lg", type=float, default=1.0)
    ap.add_argument("--lc", type=float, default=1.0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--pre", type=int, default=150)
    ap.add_argument("--fine", type=int, default=400)
    ap.add_argument("--enc", default="6/3,6/3,3/1")
    args = ap.parse_args()

    enc = tuple(tuple(int(v) for v in part.split("/")) for part in args.enc.split(","))
    learning, validation = dataio.gen_synthetic(dataio.FIXTURE_SPEC, seed=99)
    cfg = networks.ModelConfig(
        variant=args.variant, modalities=3, encoder_layers=enc,
        image_h=8, image_w=8, gamma=args.gamma, rho=args.rho, mu=args.mu,
        lambda_group=args.lg, lambda_comm=args.lc,
        pretrain_epochs=args.pre, finetune_epochs=args.fine,
        learning_rate=args.lr, seed=0,
    )
    print(f"variant={args.variant} enc={enc} mu={args.mu} gamma={args.gamma} "
          f"rho={args.rho} lg={args.lg} lc={args.lc} pre={args.pre} fine={args.fine}")
    accs = []
    for seed in args.seeds:
        m, mv, dt = run(args.variant, seed, replace(cfg, seed=seed), learning, validation)
        accs.append((m.acc, mv.acc))
    print("mean L acc:", np.mean([a for a, _ in accs]),
          "mean V acc:", np.mean([b for _, b in accs]))
