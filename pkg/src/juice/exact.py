"""Exact posterior by enumerating every cluster-activity configuration.

Given the cluster indicators and the slab variances the model is linear
Gaussian. Columns of inactive clusters are removed, and each configuration
then has a closed-form evidence and posterior mean. This is only feasible
for a handful of clusters and serves as ground truth for the EP solver.
"""

from dataclasses import dataclass
import itertools

import numpy as np
from scipy.special import logsumexp

from juice.errors import SingularInput, TooLarge

MAX_CLUSTERS = 12


@dataclass(frozen=True)
class ExactPosterior:
    means: np.ndarray
    cluster_probs: np.ndarray
    log_evidence: float
    config_weights: np.ndarray


def _gaussian_branch(Y, Phi_S, g_S, noise_var):
    """Log evidence and posterior mean (|S| x M) for one active set."""
    tau_p, M = Y.shape
    Sy = noise_var * np.eye(tau_p, dtype=complex)
    if g_S.size:
        Sy = Sy + (Phi_S * g_S) @ Phi_S.conj().T
    Lc = np.linalg.cholesky(Sy)
    W = np.linalg.solve(Lc, Y)
    logdet = 2.0 * np.sum(np.log(np.real(np.diag(Lc))))
    log_ev = -M * tau_p * np.log(np.pi) - M * logdet - np.sum(np.abs(W) ** 2)
    if not g_S.size:
        return log_ev, np.zeros((0, M), dtype=complex)
    Sy_inv_Y = np.linalg.solve(Lc.conj().T, W)
    return log_ev, g_S[:, None] * (Phi_S.conj().T @ Sy_inv_Y)


def enumerate_posterior(Y, Phi, noise_var, slab_vars, eps, cmap):
    """Mixture-of-Gaussians posterior over all ``2**n_clusters`` configurations.

    ``eps`` may be 0 or 1; configurations with zero prior mass are dropped.
    """
    if cmap.n_clusters > MAX_CLUSTERS:
        raise TooLarge(f"{cmap.n_clusters} clusters exceed the enumeration limit of {MAX_CLUSTERS}")
    if not noise_var > 0:
        raise SingularInput("noise variance must be positive")
    Y = np.asarray(Y, dtype=complex)
    Phi = np.asarray(Phi, dtype=complex)
    g = np.asarray(slab_vars, dtype=float)
    M = Y.shape[1]
    n_c = cmap.n_clusters

    configs = np.array(list(itertools.product((0, 1), repeat=n_c)), dtype=np.int8)
    with np.errstate(divide="ignore"):
        log_on, log_off = np.log(eps), np.log1p(-eps)
    log_w = np.empty(len(configs))
    branch_means = []
    for k, c in enumerate(configs):
        n_on = int(c.sum())
        log_prior = n_on * log_on + (n_c - n_on) * log_off if 0 < eps < 1 else (
            0.0 if (eps == 1 and n_on == n_c) or (eps == 0 and n_on == 0) else -np.inf)
        if not np.isfinite(log_prior):
            log_w[k] = -np.inf
            branch_means.append(None)
            continue
        S = np.concatenate([cmap.members[l] for l in range(n_c) if c[l]] or [np.zeros(0, int)])
        log_ev, mean_S = _gaussian_branch(Y, Phi[:, S], g[S], noise_var)
        log_w[k] = log_prior + log_ev
        branch_means.append((S, mean_S))

    log_z = logsumexp(log_w)
    w = np.exp(log_w - log_z)
    Z = np.zeros((cmap.n_ues, M), dtype=complex)
    for wk, bm in zip(w, branch_means):
        if bm is not None and wk > 0:
            Z[bm[0]] += wk * bm[1]
    probs = np.clip(w @ configs, 0.0, 1.0)
    return ExactPosterior(means=Z.T, cluster_probs=probs, log_evidence=float(log_z), config_weights=w)
