"""Expectation propagation for the clustered spike-and-slab model.

The likelihood enters exactly as a Gaussian term. The spike-and-slab prior
and the Bernoulli cluster prior are fused into one site per cluster. That
site has a per-UE scalar precision, shared by all M antennas, and a complex
shift for every antenna. Because the slab covariance is isotropic and the
antennas are i.i.d., all per-antenna moments coincide. Matching therefore
reduces to scalar moments per UE, with the evidence raised to the power M.

Public arrays follow the M x N orientation of ``X``. Internally the solver
works with ``Z = X^T`` (N x M): every antenna is one column of a
multiple-measurement-vector problem, and all columns share the posterior
covariance.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.linalg import blas
from scipy.special import expit

from juice.errors import DegenerateCavity, SingularInput
from juice.priors import SLAB_VAR_FLOOR


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 50
    damping: float = 0.7
    tol: float = 1e-6
    detection_threshold: float = 1.0
    update_slab_vars: bool = True
    slab_var_init: float = 1.0
    eps: float = 0.1
    # site variance floor, relative to the UE's slab variance
    min_site_var: float = 1e-8
    slab_update_start: int = 2
    # "block": full L x L precision per cluster; "diagonal": one scalar per UE
    site_form: str = "block"
    # damped sequential updates keep the global precision positive definite
    # without clipping; clipping biases the fixed point
    clip_negative_sites: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.detection_threshold > 0:
            raise ValueError("detection_threshold must be positive")
        if not self.slab_var_init > 0:
            raise ValueError("slab_var_init must be positive")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if not self.min_site_var > 0:
            raise ValueError("min_site_var must be positive")
        if self.site_form not in ("block", "diagonal"):
            raise ValueError(f"unknown site_form {self.site_form!r}")


@dataclass(frozen=True)
class GaussianSite:
    """Natural parameters of a Gaussian site.

    ``precision`` is either a full Hermitian N x N matrix (likelihood term)
    or a real vector of per-UE precisions (prior sites); ``shift`` is the
    M x N (or M x L) linear coefficient.
    """

    precision: np.ndarray
    shift: np.ndarray


@dataclass
class PosteriorSummary:
    means: np.ndarray
    variances: np.ndarray
    cluster_probs: np.ndarray
    slab_vars: np.ndarray
    iterations: int
    converged: bool
    skipped_updates: int = 0
    history: list = field(default_factory=list, repr=False)


def likelihood_site(Y, Phi, noise_var):
    """Exact Gaussian term of ``p(Y | X)``: precision ``Phi^H Phi / s2``, shift ``(Phi^H Y / s2)^T``."""
    if not noise_var > 0:
        raise SingularInput(f"noise variance must be positive, got {noise_var}")
    Phi = np.asarray(Phi)
    Y = np.asarray(Y)
    precision = (Phi.conj().T @ Phi) / noise_var
    shift = ((Phi.conj().T @ Y) / noise_var).T
    return GaussianSite(precision=precision, shift=shift)


def _log_prior_odds(eps):
    with np.errstate(divide="ignore"):
        return np.log(eps) - np.log1p(-eps)


def _herm(P):
    return 0.5 * (P + P.conj().T)


def _cluster_site(cav_prec, cav_shift, g, eps, damping, prev_prec, prev_shift,
                  min_site_var, diagonal, clip=False):
    """Site update in natural parameters for one cluster (internal layout L x M).

    Raises ``DegenerateCavity`` when the slab-tilted distribution is not
    normalizable.
    """
    L, M = cav_shift.shape
    sg = np.sqrt(g)
    # K = I + G^1/2 Pc G^1/2 stays well conditioned for tiny slab variances,
    # and is positive definite exactly when the slab tilt is normalizable
    K = _herm(np.eye(L) + sg[:, None] * cav_prec * sg[None, :])
    try:
        Kc = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        raise DegenerateCavity("slab-tilted distribution is not normalizable") from None
    logdet_K = 2.0 * np.sum(np.log(np.real(np.diag(Kc))))
    t = np.linalg.solve(Kc, sg[:, None] * cav_shift)
    a = sg[:, None] * np.linalg.solve(Kc.conj().T, t)            # slab posterior mean
    Kinv_half = np.linalg.solve(Kc, np.diag(sg).astype(complex))
    P = _herm(Kinv_half.conj().T @ Kinv_half)                    # slab posterior covariance
    log_ratio = -M * logdet_K + np.sum(np.abs(t) ** 2)
    r = float(expit(_log_prior_odds(eps) + log_ratio))

    cap = 1.0 / (min_site_var * np.max(g))
    W = P + (1.0 - r) * (a @ a.conj().T) / M
    if diagonal:
        W = np.diag(np.real(np.diag(W)))
    W = _herm(W)
    if r > 0:
        Winv = np.linalg.inv(W)
        lam_new = _herm(Winv / r - cav_prec)
        nu_new = Winv @ a - cav_shift
        # Gershgorin bound; the eigendecomposition is rarely needed
        off = np.sum(np.abs(lam_new), axis=1) - np.abs(np.diag(lam_new))
        if np.max(np.real(np.diag(lam_new)) + off) > cap:
            w, U = np.linalg.eigh(lam_new)
            if w[-1] > cap:
                # cap the precision but keep the site mean along capped directions
                ratio = np.where(w > cap, cap / np.where(w > 0, w, 1.0), 1.0)
                lam_new = _herm((U * np.minimum(w, cap)) @ U.conj().T)
                nu_new = U @ (ratio[:, None] * (U.conj().T @ nu_new))
    else:
        lam_new = cap * np.eye(L)
        nu_new = np.zeros_like(cav_shift)

    lam = _herm(damping * lam_new + (1.0 - damping) * prev_prec)
    nu = damping * nu_new + (1.0 - damping) * prev_shift
    if clip:
        w, U = np.linalg.eigh(lam)
        if w[0] < 0:
            # negative directions become vacuous
            keep = w >= 0
            lam = _herm((U * np.where(keep, w, 0.0)) @ U.conj().T)
            nu = U @ (keep[:, None] * (U.conj().T @ nu))
    return lam, nu, r, a, np.real(np.diag(P))


def _scalar_site(pc, h, g, eps, damping, prev_lam, prev_nu, min_site_var, clip=False):
    """``_cluster_site`` for a single-UE cluster; ``pc``, ``g`` and the precisions are real."""
    M = h.shape[0]
    k = 1.0 + g * pc
    if not k > 0:
        raise DegenerateCavity("slab-tilted distribution is not normalizable")
    a = h * (g / k)
    P = g / k
    a2 = float(np.real(np.vdot(a, a)))
    r = float(expit(_log_prior_odds(eps) - M * math.log(k) + a2 * k / g))
    cap = 1.0 / (min_site_var * g)
    if r > 0:
        W = P + (1.0 - r) * a2 / M
        lam_new = 1.0 / (r * W) - pc
        nu_new = a / W - h
        if lam_new > cap:
            nu_new = nu_new * (cap / lam_new)
            lam_new = cap
    else:
        lam_new = cap
        nu_new = np.zeros_like(h)
    lam = damping * lam_new + (1.0 - damping) * prev_lam
    nu = damping * nu_new + (1.0 - damping) * prev_nu
    if clip and lam < 0:
        lam, nu = 0.0, np.zeros_like(h)
    return lam, nu, r, a, P


def spike_slab_site_update(cavity_means, cavity_vars, slab_vars, eps, damping=1.0,
                           previous=None, min_site_var=1e-8, clip=False):
    """Moment-match one cluster's spike-and-slab factor against its cavity.

    The tilted distribution is the cavity times a two-component mixture. In
    the spike component every column of the cluster is zero. In the slab
    component each column has a Gaussian prior with its slab variance. The
    slab responsibility follows from the closed-form evidence ratio of the
    two components. The mixture is then collapsed onto a Gaussian with the
    same first and second moments.

    Parameters
    ----------
    cavity_means : complex array, M x L
    cavity_vars : real array of length L, or L x L Hermitian matrix
        Per-UE cavity variances (independent cavities, diagonal site) or the
        joint per-antenna cavity covariance of the cluster (block site).
    slab_vars : real array, length L
    eps : float
        Prior probability that the cluster is active.
    damping : float
        Weight of the new site in the natural-parameter convex combination.
    previous : GaussianSite, optional
        Current site of the cluster; vacuous if omitted.
    min_site_var : float
        Site variances are floored at ``min_site_var * max(slab_vars)``.
    clip : bool
        Make negative-precision directions of the damped site vacuous.

    Returns
    -------
    site : GaussianSite
        Damped site: precision (length L, or L x L in block form) and shift
        (M x L).
    activity_prob : float
        Slab weight of the tilted distribution, i.e. the cluster activity
        probability.
    """
    m = np.asarray(cavity_means, dtype=complex)
    if m.ndim == 1:
        m = m[:, None]
    L = m.shape[1]
    S = np.asarray(cavity_vars)
    diagonal = S.ndim == 1
    g = np.maximum(np.asarray(slab_vars, dtype=float), SLAB_VAR_FLOOR)
    if diagonal:
        if np.any(~(S > 0)) or not np.all(np.isfinite(S)):
            raise DegenerateCavity(f"cavity variances must be positive, got {S}")
        cav_prec = np.diag(1.0 / S).astype(complex)
    else:
        if np.any(~(np.linalg.eigvalsh(_herm(S)) > 0)):
            raise DegenerateCavity("cavity covariance is not positive definite")
        cav_prec = _herm(np.linalg.inv(S))
    cav_shift = cav_prec @ m.T

    if previous is None:
        prev_prec = np.zeros((L, L), dtype=complex)
        prev_shift = np.zeros((L, m.shape[0]), dtype=complex)
    else:
        prev_prec = np.asarray(previous.precision)
        prev_prec = np.diag(prev_prec).astype(complex) if prev_prec.ndim == 1 else prev_prec
        prev_shift = np.asarray(previous.shift).T
    lam, nu, r, _, _ = _cluster_site(cav_prec, cav_shift, g, eps, damping, prev_prec, prev_shift,
                               min_site_var, diagonal, clip)
    precision = np.real(np.diag(lam)).copy() if diagonal else lam
    return GaussianSite(precision=precision, shift=nu.T), r


def update_slab_vars(summary, floor=SLAB_VAR_FLOOR):
    """EM point update ``max(floor, (||mu_i||^2 + M v_i) / M)`` of every slab variance."""
    mu = np.asarray(summary.means)
    M = mu.shape[0]
    energy = np.sum(np.abs(mu) ** 2, axis=0)
    return np.maximum(floor, (energy + M * np.asarray(summary.variances)) / M)


def _posterior(A, B, members, blocks, nu):
    """Covariance (Fortran order) and mean of the global Gaussian: likelihood plus all cluster sites."""
    P = A.copy()
    for C, lam in zip(members, blocks):
        P[np.ix_(C, C)] += lam
    # unit-diagonal scaling before factoring; site precisions span many decades
    d = 1.0 / np.sqrt(np.real(np.diag(P)))
    Ps = _herm(P * d[:, None] * d[None, :])
    try:
        Li = np.linalg.inv(np.linalg.cholesky(Ps))
        Sigma = (Li.conj().T @ Li) * d[:, None] * d[None, :]
    except np.linalg.LinAlgError:
        Sigma = np.linalg.pinv(Ps, hermitian=True) * d[:, None] * d[None, :]
    Sigma = np.asfortranarray(_herm(Sigma))
    return Sigma, Sigma @ (B + nu)


def _refine_single(Sigma, mu, nu, blocks, l, i, g, config):
    """Refine a one-UE cluster and fold it into ``Sigma`` and ``mu`` in place."""
    s = float(np.real(Sigma[i, i]))
    if not s > 0:
        raise DegenerateCavity("non-positive marginal variance")
    lam_old = float(np.real(blocks[l][0, 0]))
    pc = 1.0 / s - lam_old
    h = mu[i] / s - nu[i]
    lam, nu_i, r, a, P = _scalar_site(pc, h, g, config.eps, config.damping, lam_old, nu[i],
                                      config.min_site_var, config.clip_negative_sites)
    d_lam = lam - lam_old
    d_nu = nu_i - nu[i]
    blocks[l][0, 0] = lam
    nu[i] = nu_i
    u = Sigma[:, i].copy()
    k = d_lam / (1.0 + d_lam * s)
    mu += np.outer(u, d_nu - k * (mu[i] + s * d_nu))
    blas.zgerc(-k, u, u, a=Sigma, overwrite_a=True)
    return r, a, P


def _refine_block(Sigma, mu, nu, blocks, l, C, g, config, diagonal):
    """Refine a multi-UE cluster and fold it in with a rank-L Woodbury update."""
    S_CC = _herm(Sigma[np.ix_(C, C)])
    try:
        Si = np.linalg.inv(np.linalg.cholesky(S_CC))
    except np.linalg.LinAlgError:
        raise DegenerateCavity("marginal covariance is not positive definite") from None
    S_inv = _herm(Si.conj().T @ Si)
    cav_prec = _herm(S_inv - blocks[l])
    if diagonal:
        cav_prec = np.diag(np.real(np.diag(cav_prec))).astype(complex)
    cav_shift = S_inv @ mu[C] - nu[C]
    lam, nu_C, r, a, P = _cluster_site(cav_prec, cav_shift, g, config.eps, config.damping,
                                       blocks[l], nu[C], config.min_site_var, diagonal,
                                       config.clip_negative_sites)
    d_lam = lam - blocks[l]
    d_nu = nu_C - nu[C]
    blocks[l] = lam
    nu[C] = nu_C
    U = np.asfortranarray(Sigma[:, C])
    K = np.linalg.solve(np.eye(len(C)) + d_lam @ S_CC, d_lam)
    mu += U @ (d_nu - K @ (mu[C] + S_CC @ d_nu))
    blas.zgemm(-1.0, U, K @ U.conj().T, beta=1.0, c=Sigma, overwrite_c=True)
    return r, a, P


def ep_infer(Y, Phi, noise_var, cmap, config=None, slab_vars=None):
    """Approximate the posterior of ``X`` and the cluster indicators by EP.

    Clusters are refined one at a time in ascending order. Each refinement
    is folded into the global Gaussian by an in-place rank-L update, and the
    global moments are refactored from scratch after every sweep.

    Parameters
    ----------
    Y : complex array, tau_p x M
    Phi : complex array, tau_p x N
    noise_var : float
    cmap : ClusterMap
    config : SolverConfig, optional
    slab_vars : array, optional
        Initial slab variances (held fixed when ``config.update_slab_vars``
        is false). Defaults to ``config.slab_var_init`` for every UE.

    Returns
    -------
    PosteriorSummary
    """
    config = config or SolverConfig()
    Y = np.asarray(Y, dtype=complex)
    Phi = np.asarray(Phi, dtype=complex)
    N = Phi.shape[1]
    M = Y.shape[1]
    if Phi.shape[0] != Y.shape[0] or N != cmap.n_ues:
        raise ValueError(f"shape mismatch: Y {Y.shape}, Phi {Phi.shape}, {cmap.n_ues} UEs")
    diagonal = config.site_form == "diagonal"
    labels = cmap.labels

    lik = likelihood_site(Y, Phi, noise_var)
    A = lik.precision
    B = lik.shift.T
    if slab_vars is None:
        gbar = np.full(N, float(config.slab_var_init))
    else:
        gbar = np.maximum(np.asarray(slab_vars, dtype=float).copy(), SLAB_VAR_FLOOR)

    # sites start at the moment-matched prior (variance eps * slab_var), which
    # keeps the global Gaussian proper even when tau_p < N
    members = cmap.members
    prior_var = max(float(config.eps), 1e-6) * gbar
    blocks = [np.diag(1.0 / prior_var[C]).astype(complex) for C in members]
    nu = np.zeros((N, M), dtype=complex)
    probs = np.full(cmap.n_clusters, float(config.eps))
    slab_mu = np.zeros((N, M), dtype=complex)
    slab_v = gbar.copy()
    Sigma, mu = _posterior(A, B, members, blocks, nu)

    skipped = 0
    converged = False
    history = []
    it = 0
    for it in range(1, config.max_iters + 1):
        mu_prev = mu.copy()
        for l, C in enumerate(members):
            try:
                if len(C) == 1:
                    i = int(C[0])
                    out = _refine_single(Sigma, mu, nu, blocks, l, i, gbar[i], config)
                else:
                    out = _refine_block(Sigma, mu, nu, blocks, l, C, gbar[C], config, diagonal)
            except (DegenerateCavity, np.linalg.LinAlgError):
                skipped += 1
                continue
            probs[l], slab_mu[C], slab_v[C] = out

        Sigma, mu = _posterior(A, B, members, blocks, nu)
        if config.update_slab_vars and it > config.slab_update_start:
            # M-step on slab-conditional moments, only where the slab is switched on
            slab_moments = PosteriorSummary(slab_mu.T, slab_v, probs, gbar, it, False)
            gbar = np.where(probs[labels] > 0.5, update_slab_vars(slab_moments), gbar)

        scale = max(np.linalg.norm(mu), np.finfo(float).tiny)
        change = np.linalg.norm(mu - mu_prev) / scale
        history.append(change)
        warming_up = config.update_slab_vars and it <= config.slab_update_start
        if change < config.tol and not warming_up:
            converged = True
            break

    return PosteriorSummary(
        means=mu.T.copy(),
        variances=np.maximum(np.real(np.diag(Sigma)), 0.0),
        cluster_probs=np.clip(probs, 0.0, 1.0),
        slab_vars=np.maximum(gbar, SLAB_VAR_FLOOR),
        iterations=it,
        converged=converged,
        skipped_updates=skipped,
        history=history,
    )


def detect_support(summary, cmap, threshold, noise_var):
    """UEs whose cluster is more likely active than not and whose mean energy
    per antenna exceeds ``threshold * noise_var``."""
    mu = np.asarray(summary.means)
    M = mu.shape[0]
    energy = np.sum(np.abs(mu) ** 2, axis=0) / M
    cluster_on = np.asarray(summary.cluster_probs)[cmap.labels] > 0.5
    return frozenset(np.flatnonzero(cluster_on & (energy > threshold * noise_var)).tolist())
