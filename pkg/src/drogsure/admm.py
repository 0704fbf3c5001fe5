"""Linearized-ADMM solver for the group-sparse commuting coefficient matrices.

Operates on fixed latent features (raw data treated as identity-encoder
features, or encoder outputs of a trained network).  Each iteration applies,
per modality: the linearized data half-step with the commutator-gradient
correction, the group proximal operator, entrywise l1 shrinkage, diagonal
re-zeroing, the multiplier update, and penalty growth.  Modality updates are
Jacobi style: every commutator gradient is evaluated at the previous iterate.

Feature refinement (the optional latent update between coefficient sweeps)
moves the latents outside anything a decoder could reconstruct, so it is off
by default.
"""

from dataclasses import dataclass, field

import numpy as np

from . import objectives
from .errors import DimensionError, DivergenceError


@dataclass
class AdmmConfig:
    rho: float = 1.0
    lambda_comm: float = 1.0
    mu0: float = 1.0
    growth: float = 1.05
    max_iters: int = 500
    tol: float = 1e-6
    eta1: float = None          # default: 1.01 * max_t spectral_sq_norm(L_t)
    feature_refinement: bool = False
    warm_start_ridge: float = 1e-3

    def __post_init__(self):
        if self.growth <= 1.0:
            raise ValueError(f"growth must exceed 1, got {self.growth}")
        if self.mu0 <= 0 or self.rho < 0:
            raise ValueError("mu0 must be positive and rho nonnegative")


@dataclass
class AdmmState:
    coeffs: list                 # per modality, (n, n), zero diagonal
    multipliers: list            # per modality, (d_t, n)
    latents: list                # per modality, (d_t, n): codes as columns
    mu: float
    growth: float
    eta1: float
    rho: float
    lambda_comm: float
    iteration: int = 0
    feature_refinement: bool = False
    grams: list = field(default=None, repr=False)

    def residuals(self):
        """Per-modality relative self-expression residuals."""
        out = []
        for lp, w in zip(self.latents, self.coeffs):
            out.append(np.linalg.norm(lp @ w - lp) / np.linalg.norm(lp))
        return out


@dataclass
class AdmmReport:
    iterations: int
    residuals: np.ndarray        # max-over-modalities relative residual per iteration
    coeffs: list
    converged: bool
    eta1: float


def prox_group(mats, beta):
    """Vector soft threshold across modalities at each matrix position.

    Positions whose cross-modality magnitude is below ``beta`` vanish; others
    shrink radially.  Diagonals are re-zeroed.
    """
    if beta < 0:
        raise ValueError(f"threshold must be nonnegative, got {beta}")
    stack = np.stack([np.asarray(w, dtype=np.float64) for w in mats])
    g = np.sqrt(np.sum(np.square(stack), axis=0))
    scale = np.zeros_like(g)
    np.divide(np.maximum(g - beta, 0.0), g, out=scale, where=g > 0.0)
    out = [stack[t] * scale for t in range(len(mats))]
    for w in out:
        np.fill_diagonal(w, 0.0)
    return out


def shrink_l1(mat, tau):
    """Entrywise soft threshold sign(b) * max(|b| - tau, 0)."""
    if tau < 0:
        raise ValueError(f"threshold must be nonnegative, got {tau}")
    mat = np.asarray(mat, dtype=np.float64)
    return np.sign(mat) * np.maximum(np.abs(mat) - tau, 0.0)


def spectral_sq_norm(latent, iters=200, tol=1e-12):
    """Power-iteration estimate of the squared spectral norm of a code matrix."""
    latent = np.asarray(latent, dtype=np.float64)
    gram = latent @ latent.T if latent.shape[0] <= latent.shape[1] else latent.T @ latent
    v = np.ones(gram.shape[0]) / np.sqrt(gram.shape[0])
    lam = 0.0
    for _ in range(iters):
        gv = gram @ v
        norm = np.linalg.norm(gv)
        if norm == 0.0:
            return 0.0
        v = gv / norm
        new_lam = float(v @ gram @ v)
        if abs(new_lam - lam) <= tol * max(abs(new_lam), 1.0):
            return new_lam
        lam = new_lam
    return lam


def admm_init(latents, config):
    """Warm-started state: ridge-regression coefficients, zero multipliers."""
    rows = {l.shape[0] for l in latents}
    if len(rows) != 1:
        raise DimensionError(f"latent matrices disagree on sample count: {sorted(rows)}")
    n = rows.pop()
    lps = [np.ascontiguousarray(np.asarray(l, dtype=np.float64).T) for l in latents]
    coeffs = []
    for lp in lps:
        gram = lp.T @ lp
        w = np.linalg.solve(gram + config.warm_start_ridge * np.eye(n), gram)
        np.fill_diagonal(w, 0.0)
        coeffs.append(w)
    eta1 = config.eta1
    if eta1 is None:
        eta1 = 1.01 * max(spectral_sq_norm(lp) for lp in lps)
    state = AdmmState(
        coeffs=coeffs,
        multipliers=[np.zeros_like(lp) for lp in lps],
        latents=lps,
        mu=config.mu0,
        growth=config.growth,
        eta1=eta1,
        rho=config.rho,
        lambda_comm=config.lambda_comm,
        feature_refinement=config.feature_refinement,
    )
    if not config.feature_refinement:
        state.grams = [lp.T @ lp for lp in lps]
    return state


def admm_iterate(state):
    """One full sweep; returns the mutated state."""
    mu, eta1 = state.mu, state.eta1
    step = 1.0 / (mu * eta1)
    thresh = state.rho * step
    prev = [w.copy() for w in state.coeffs]

    half = []
    for t, (lp, y, w) in enumerate(zip(state.latents, state.multipliers, prev)):
        gram = state.grams[t] if state.grams is not None else lp.T @ lp
        what = np.eye(w.shape[0]) - w
        v = w + (gram @ what - lp.T @ y / mu) / eta1
        if state.lambda_comm and len(prev) > 1:
            v -= state.lambda_comm * step * objectives.commutator_penalty_grad(prev, t)
        half.append(v)

    new = prox_group(half, thresh)
    new = [shrink_l1(w, thresh) for w in new]
    for w in new:
        np.fill_diagonal(w, 0.0)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(
                f"non-finite coefficient iterate at iteration {state.iteration + 1}"
            )
    state.coeffs = new

    if state.feature_refinement:
        for t, (lp, y, w) in enumerate(zip(state.latents, state.multipliers, new)):
            what = np.eye(w.shape[0]) - w
            state.latents[t] = lp + mu * (lp @ what - y / mu) @ what.T

    for t, (lp, y, w) in enumerate(zip(state.latents, state.multipliers, new)):
        state.multipliers[t] = y + mu * (lp @ w - lp)

    state.mu = mu * state.growth
    state.iteration += 1
    return state


def admm_run(latents, config=None):
    """Iterate until the worst relative residual clears ``tol`` or the
    iteration budget runs out."""
    cfg = config or AdmmConfig()
    state = admm_init(latents, cfg)
    trace = []
    converged = max(state.residuals()) < cfg.tol
    while not converged and state.iteration < cfg.max_iters:
        admm_iterate(state)
        trace.append(max(state.residuals()))
        converged = trace[-1] < cfg.tol
    return AdmmReport(
        iterations=state.iteration,
        residuals=np.asarray(trace),
        coeffs=state.coeffs,
        converged=converged,
        eta1=state.eta1,
    )
