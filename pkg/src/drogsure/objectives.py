"""Loss terms for the three model variants and their analytic gradients.

All gradients here are hand-derived; :func:`drogsure.numerics.finite_diff_grad`
is the independent check.  Subgradient conventions: 0 at zero entries of the
l1 term, 0 at zero cross-modality groups of the group term, 0 at the origin of
the Frobenius regularizer, and the zero branch of relu at its kink.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import DimensionError, NumericError


@dataclass
class LossBreakdown:
    """Raw (unweighted) loss terms plus the weighted total."""

    commutator_term: float
    group_term: float
    recon_term: float
    l1_term: float
    selfexpr_term: float
    total: float

    def as_dict(self):
        return {
            "commutator_term": self.commutator_term,
            "group_term": self.group_term,
            "recon_term": self.recon_term,
            "l1_term": self.l1_term,
            "selfexpr_term": self.selfexpr_term,
            "total": self.total,
        }


def _assemble(cfg, comm, group, recon, l1, selfexpr):
    terms = {
        "commutator": comm,
        "group": group,
        "reconstruction": recon,
        "l1": l1,
        "self-expression": selfexpr,
    }
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite {name} term")
    total = (
        cfg.lambda_comm * comm
        + cfg.lambda_group * group
        + 0.5 * cfg.gamma * recon
        + cfg.rho * l1
        + 0.5 * cfg.mu * selfexpr
    )
    return LossBreakdown(comm, group, recon, l1, selfexpr, total)


def _img(x):
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 3 else x


def _frob_sq(a):
    return float(np.sum(np.square(a)))


# ----------------------------------------------------------- coefficient terms


def group_l12_norm(mats):
    """Sum over matrix positions of the euclidean norm across modalities."""
    stack = np.stack([np.asarray(w, dtype=np.float64) for w in mats])
    return float(np.sum(np.sqrt(np.sum(np.square(stack), axis=0))))


def group_l12_grad(mats):
    """Per-matrix subgradient of :func:`group_l12_norm`; 0 at zero groups."""
    stack = np.stack([np.asarray(w, dtype=np.float64) for w in mats])
    g = np.sqrt(np.sum(np.square(stack), axis=0))
    out = np.zeros_like(stack)
    np.divide(stack, g, out=out, where=g > 0.0)
    return [out[t] for t in range(len(mats))]


def commutator(w1, w2):
    """w1 @ w2 - w2 @ w1."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.shape != w2.shape or w1.ndim != 2 or w1.shape[0] != w1.shape[1]:
        raise DimensionError(
            f"commutator needs two square matrices of equal shape, got "
            f"{w1.shape} and {w2.shape}"
        )
    return w1 @ w2 - w2 @ w1


def commutator_penalty(mats):
    """Squared Frobenius norms of all ordered-pair commutators."""
    total = 0.0
    for t1 in range(len(mats)):
        for t2 in range(len(mats)):
            if t1 != t2:
                total += _frob_sq(commutator(mats[t1], mats[t2]))
    return float(total)


def commutator_penalty_grad(mats, t):
    """Gradient of :func:`commutator_penalty` w.r.t. matrix ``t``.

    Both ordered pairs (t, m) and (m, t) contribute the same term, hence the
    factor 4.
    """
    wt = np.asarray(mats[t], dtype=np.float64)
    grad = np.zeros_like(wt)
    for m in range(len(mats)):
        if m == t:
            continue
        wm = np.asarray(mats[m], dtype=np.float64)
        c = wt @ wm - wm @ wt
        grad += 4.0 * (c @ wm.T - wm.T @ c)
    return grad


# ------------------------------------------------------------------ the losses


def drogsure_loss(cache, coeffs, dataset, cfg):
    """Group + commutator + reconstruction + l1 + per-modality self-expression."""
    mods = [_img(m) for m in getattr(dataset, "modalities", dataset)]
    recon = sum(_frob_sq(x - xr) for x, xr in zip(mods, cache.recons))
    selfexpr = sum(
        _frob_sq(l - w.T @ l) for l, w in zip(cache.latents, coeffs)
    )
    l1 = sum(float(np.sum(np.abs(w))) for w in coeffs)
    return _assemble(
        cfg,
        commutator_penalty(coeffs),
        group_l12_norm(coeffs),
        recon,
        l1,
        selfexpr,
    )


def dmsc_loss(cache, coeff, dataset, cfg):
    """Shared-coefficient baseline: Frobenius regularizer (carried in the
    group slot) + reconstruction + shared self-expression."""
    mods = [_img(m) for m in getattr(dataset, "modalities", dataset)]
    recon = sum(_frob_sq(x - xr) for x, xr in zip(mods, cache.recons))
    selfexpr = sum(_frob_sq(l - coeff.T @ l) for l in cache.latents)
    frob = float(np.linalg.norm(coeff))
    return _assemble(cfg, 0.0, frob, recon, 0.0, selfexpr)


def concat_loss(cache, coeff, dataset, cfg):
    """Concatenated-code variant: l1 + reconstruction + stacked self-expression."""
    mods = [_img(m) for m in getattr(dataset, "modalities", dataset)]
    recon = sum(_frob_sq(x - xr) for x, xr in zip(mods, cache.recons))
    n_code = cache.stacked_code
    selfexpr = _frob_sq(n_code - coeff.T @ n_code)
    l1 = float(np.sum(np.abs(coeff)))
    return _assemble(cfg, 0.0, 0.0, recon, l1, selfexpr)


def model_loss(model, dataset, cfg=None):
    """Variant-dispatched loss of the model on the dataset."""
    cfg = cfg or model.config
    cache = model.forward(dataset)
    if cfg.variant == "drogsure":
        return drogsure_loss(cache, model.coeff_matrices(), dataset, cfg)
    if cfg.variant == "dmsc":
        return dmsc_loss(cache, model.params["se.coeff"], dataset, cfg)
    return concat_loss(cache, model.params["se.coeff"], dataset, cfg)


def pretrain_loss(model, dataset, cfg=None):
    """Reconstruction objective with the self-expressive layer bypassed."""
    cfg = cfg or model.config
    mods = [_img(m) for m in getattr(dataset, "modalities", dataset)]
    enc_out = [model.encode_cached(t, mods[t]).output for t in range(cfg.modalities)]
    if cfg.variant == "concat":
        stacked = np.concatenate(enc_out, axis=3)
        recon = sum(
            _frob_sq(mods[t] - model.decode(t, stacked))
            for t in range(cfg.modalities)
        )
    else:
        recon = sum(
            _frob_sq(mods[t] - model.decode(t, enc_out[t]))
            for t in range(cfg.modalities)
        )
    if not np.isfinite(recon):
        raise NumericError("non-finite reconstruction term")
    return 0.5 * cfg.gamma * recon


# ------------------------------------------------------------------- backward


def _decoder_backward(model, t, dec_cache, g_out):
    """Weight grads of decoder ``t`` plus the grad w.r.t. its input map."""
    specs = model.decoder_specs()
    grads = {}
    g = g_out
    for j in reversed(range(len(specs))):
        act = "identity" if j == len(specs) - 1 else "relu"
        g = g * numerics.activation_grad(dec_cache.preacts[j], act)
        kern = model.params[f"dec{t}.conv{j}.kernel"]
        u = dec_cache.inputs[j]
        grads[f"dec{t}.conv{j}.bias"] = g.sum(axis=(0, 1, 2))
        grads[f"dec{t}.conv{j}.kernel"] = numerics.conv2d_kernel_grad(
            g, u, kern.shape[0]
        )
        g = numerics.conv2d(
            g, kern, np.zeros(kern.shape[3]), activation="identity"
        )
    return grads, g


def _encoder_backward(model, t, enc_cache, g_latent_map):
    grads = {}
    g = g_latent_map
    for i in reversed(range(len(model.config.encoder_layers))):
        g = g * numerics.activation_grad(enc_cache.preacts[i], "relu")
        kern = model.params[f"enc{t}.conv{i}.kernel"]
        a_prev = enc_cache.inputs[i]
        grads[f"enc{t}.conv{i}.kernel"] = numerics.conv2d_kernel_grad(
            a_prev, g, kern.shape[0]
        )
        grads[f"enc{t}.conv{i}.bias"] = g.sum(axis=(0, 1, 2))
        g = numerics.conv2d_input_grad(g, kern, (a_prev.shape[1], a_prev.shape[2]))
    return grads


def _branch_pieces(model, mods, t, coeff):
    """Forward pass of branch ``t`` through the given coefficient matrix."""
    x = _img(mods[t])
    enc_cache = model.encode_cached(t, x)
    latent = enc_cache.output.reshape(x.shape[0], -1)
    se = coeff.T @ latent
    dec_cache = model.decode_cached(t, model._latent_map(se))
    return x, enc_cache, latent, se, dec_cache


def _se_residual(latent, se):
    return latent - se


def _drogsure_grads(model, mods, t, want):
    cfg = model.config
    coeffs = model.coeff_matrices()
    w = coeffs[t]
    x, enc_cache, latent, se, dec_cache = _branch_pieces(model, mods, t, w)
    g_out = cfg.gamma * (dec_cache.output - x)
    dec_grads, g_se_map = _decoder_backward(model, t, dec_cache, g_out)
    grads = {}
    if "dec" in want:
        grads.update(dec_grads)
    g_se = g_se_map.reshape(latent.shape)
    resid = _se_residual(latent, se)
    if "se" in want:
        gw = latent @ g_se.T
        gw -= cfg.mu * (latent @ resid.T)
        gw += cfg.rho * np.sign(w)
        gw += cfg.lambda_group * group_l12_grad(coeffs)[t]
        if cfg.lambda_comm and len(coeffs) > 1:
            gw += cfg.lambda_comm * commutator_penalty_grad(coeffs, t)
        grads[f"se{t}.coeff"] = gw
    if "enc" in want:
        g_latent = w @ g_se + cfg.mu * (resid - w @ resid)
        grads.update(
            _encoder_backward(model, t, enc_cache, g_latent.reshape(enc_cache.output.shape))
        )
    return grads


def _dmsc_grads(model, mods, want, t):
    cfg = model.config
    w = model.params["se.coeff"]
    grads = {}
    if want <= {"se"}:
        branches = range(cfg.modalities)
    else:
        branches = [t]
    gw = np.zeros_like(w) if "se" in want else None
    for m in branches:
        x, enc_cache, latent, se, dec_cache = _branch_pieces(model, mods, m, w)
        g_out = cfg.gamma * (dec_cache.output - x)
        dec_grads, g_se_map = _decoder_backward(model, m, dec_cache, g_out)
        g_se = g_se_map.reshape(latent.shape)
        resid = _se_residual(latent, se)
        if "dec" in want and m == t:
            grads.update(dec_grads)
        if "se" in want:
            gw += latent @ g_se.T
            gw -= cfg.mu * (latent @ resid.T)
        if "enc" in want and m == t:
            g_latent = w @ g_se + cfg.mu * (resid - w @ resid)
            grads.update(
                _encoder_backward(
                    model, m, enc_cache, g_latent.reshape(enc_cache.output.shape)
                )
            )
    if "se" in want:
        norm = np.linalg.norm(w)
        if norm > 0.0:
            gw += cfg.lambda_group * (w / norm)
        grads["se.coeff"] = gw
    return grads


def _concat_grads(model, mods):
    """Full-model gradient for the concat variant (everything is coupled)."""
    cfg = model.config
    imgs = [_img(m) for m in mods]
    enc_caches = [model.encode_cached(t, imgs[t]) for t in range(cfg.modalities)]
    maps = [c.output for c in enc_caches]
    stacked_map = np.concatenate(maps, axis=3)
    stacked = stacked_map.reshape(stacked_map.shape[0], -1)
    w = model.params["se.coeff"]
    se = w.T @ stacked
    se_map = se.reshape(stacked_map.shape)

    grads = {}
    g_se_map = np.zeros_like(se_map)
    for t in range(cfg.modalities):
        dec_cache = model.decode_cached(t, se_map)
        g_out = cfg.gamma * (dec_cache.output - imgs[t])
        dec_grads, g_in = _decoder_backward(model, t, dec_cache, g_out)
        grads.update(dec_grads)
        g_se_map += g_in
    g_se = g_se_map.reshape(stacked.shape)
    resid = stacked - se
    gw = stacked @ g_se.T
    gw -= cfg.mu * (stacked @ resid.T)
    gw += cfg.rho * np.sign(w)
    grads["se.coeff"] = gw

    g_stacked = w @ g_se + cfg.mu * (resid - w @ resid)
    g_map = g_stacked.reshape(stacked_map.shape)
    offsets = np.cumsum([0] + [m.shape[3] for m in maps])
    for t in range(cfg.modalities):
        g_t = np.ascontiguousarray(g_map[..., offsets[t] : offsets[t + 1]])
        grads.update(_encoder_backward(model, t, enc_caches[t], g_t))
    return grads


def block_backprop(model, dataset, kind, t):
    """Gradient of the full objective restricted to one parameter block.

    ``kind`` is "enc", "se" or "dec"; other blocks are held fixed, and the
    forward quantities are recomputed from the current parameters.
    """
    mods = list(getattr(dataset, "modalities", dataset))
    variant = model.config.variant
    if variant == "drogsure":
        return _drogsure_grads(model, mods, t, {kind})
    if variant == "dmsc":
        return _dmsc_grads(model, mods, {kind}, t)
    full = _concat_grads(model, mods)
    if kind == "se":
        names = model.se_block(t)
    elif kind == "enc":
        names = model.encoder_block(t)
    else:
        names = model.decoder_block(t)
    return {n: full[n] for n in names}


def backprop(model, dataset):
    """Analytic gradient of the variant's objective for every parameter block."""
    mods = list(getattr(dataset, "modalities", dataset))
    variant = model.config.variant
    grads = {}
    if variant == "drogsure":
        for t in range(model.config.modalities):
            grads.update(_drogsure_grads(model, mods, t, {"enc", "se", "dec"}))
    elif variant == "dmsc":
        for t in range(model.config.modalities):
            grads.update(_dmsc_grads(model, mods, {"enc", "dec"}, t))
        grads.update(_dmsc_grads(model, mods, {"se"}, 0))
    else:
        grads.update(_concat_grads(model, mods))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for block {name!r}")
    return grads


def _pretrain_branch_grads(model, mods, t, want):
    x = _img(mods[t])
    cfg = model.config
    enc_cache = model.encode_cached(t, x)
    dec_cache = model.decode_cached(t, enc_cache.output)
    g_out = cfg.gamma * (dec_cache.output - x)
    dec_grads, g_in = _decoder_backward(model, t, dec_cache, g_out)
    grads = {}
    if "dec" in want:
        grads.update(dec_grads)
    if "enc" in want:
        grads.update(_encoder_backward(model, t, enc_cache, g_in))
    return grads


def _pretrain_concat_grads(model, mods):
    cfg = model.config
    imgs = [_img(m) for m in mods]
    enc_caches = [model.encode_cached(t, imgs[t]) for t in range(cfg.modalities)]
    maps = [c.output for c in enc_caches]
    stacked_map = np.concatenate(maps, axis=3)
    grads = {}
    g_stacked = np.zeros_like(stacked_map)
    for t in range(cfg.modalities):
        dec_cache = model.decode_cached(t, stacked_map)
        g_out = cfg.gamma * (dec_cache.output - imgs[t])
        dec_grads, g_in = _decoder_backward(model, t, dec_cache, g_out)
        grads.update(dec_grads)
        g_stacked += g_in
    offsets = np.cumsum([0] + [m.shape[3] for m in maps])
    for t in range(cfg.modalities):
        g_t = np.ascontiguousarray(g_stacked[..., offsets[t] : offsets[t + 1]])
        grads.update(_encoder_backward(model, t, enc_caches[t], g_t))
    return grads


def pretrain_block_backprop(model, dataset, kind, t):
    """Reconstruction-only gradient for one encoder or decoder block."""
    mods = list(getattr(dataset, "modalities", dataset))
    if model.config.variant == "concat":
        full = _pretrain_concat_grads(model, mods)
        names = model.encoder_block(t) if kind == "enc" else model.decoder_block(t)
        return {n: full[n] for n in names}
    return _pretrain_branch_grads(model, mods, t, {kind})
