"""Reference estimators: genie-aided MMSE, M-SBL and reweighted l2,1 (IRLS)."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BaselineConfig:
    max_iters: int = 500
    tol: float = 1e-6
    reg_epsilon: float = 1e-3
    # penalty and thresholds from `juice calibrate` on the default experiment;
    # the harness multiplies lam by the noise variance
    lam: float = 10.0
    prune_threshold: float = 1e-6
    msbl_threshold: float = 2.0
    irw_threshold: float = 1.4

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        for name in ("tol", "reg_epsilon", "prune_threshold", "msbl_threshold", "irw_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")


def oracle_mmse(Y, Phi, true_support, path_gains, noise_var):
    """Linear MMSE estimate of ``X`` (M x N) given the true support and path gains."""
    Y = np.asarray(Y, dtype=complex)
    Phi = np.asarray(Phi, dtype=complex)
    S = np.array(sorted(true_support), dtype=int)
    X = np.zeros((Y.shape[1], Phi.shape[1]), dtype=complex)
    if S.size == 0:
        return X
    Phi_S = Phi[:, S]
    beta_S = np.asarray(path_gains, dtype=float)[S]
    G = Phi_S.conj().T @ Phi_S + np.diag(noise_var / beta_S)
    X[:, S] = np.linalg.solve(G, Phi_S.conj().T @ Y).T
    return X


def msbl_em_step(Y, Phi, noise_var, gamma):
    """One EM step of M-SBL.

    Returns the updated hyperparameters, the posterior mean (N x M) under the
    *input* ``gamma``, and the log marginal likelihood of ``gamma`` (up to an
    additive constant).
    """
    tau_p, M = Y.shape
    Sy = noise_var * np.eye(tau_p, dtype=complex) + (Phi * gamma) @ Phi.conj().T
    Lc = np.linalg.cholesky(Sy)
    W = np.linalg.solve(Lc, Y)
    V = np.linalg.solve(Lc, Phi)
    loglik = -M * 2.0 * np.sum(np.log(np.real(np.diag(Lc)))) - np.sum(np.abs(W) ** 2)
    mu = gamma[:, None] * (V.conj().T @ W)
    post_var = gamma - gamma ** 2 * np.sum(np.abs(V) ** 2, axis=0)
    new_gamma = np.sum(np.abs(mu) ** 2, axis=1) / M + np.maximum(post_var, 0.0)
    return new_gamma, mu, float(loglik)


def msbl(Y, Phi, noise_var, config=None, info=None):
    """Multiple-measurement-vector sparse Bayesian learning (EM updates).

    Returns ``(means, gammas)``, with means shaped M x N. Pass a dict as
    ``info`` to receive ``iterations``, ``converged`` and the per-iteration
    log-likelihood trace under ``loglik``.
    """
    config = config or BaselineConfig()
    Y = np.asarray(Y, dtype=complex)
    Phi = np.asarray(Phi, dtype=complex)
    M = Y.shape[1]
    gamma = np.sum(np.abs(Phi.conj().T @ Y) ** 2, axis=1) / M
    if not np.any(gamma > 0):
        gamma = np.full(Phi.shape[1], noise_var)
    trace = []
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        new_gamma, _, ll = msbl_em_step(Y, Phi, noise_var, gamma)
        trace.append(ll)
        delta = np.max(np.abs(new_gamma - gamma))
        gamma = new_gamma
        if delta <= config.tol * max(np.max(gamma), np.finfo(float).tiny):
            converged = True
            break

    gamma = np.where(gamma < config.prune_threshold * np.max(gamma), 0.0, gamma)
    _, mu, _ = msbl_em_step(Y, Phi, noise_var, gamma)
    if info is not None:
        info.update(iterations=it, converged=converged, loglik=trace)
    return mu.T, gamma


def irw_objective(Y, Phi, Z, lam, reg_epsilon):
    """Data fit plus the log-sum group penalty that the reweighting majorizes."""
    s = np.sqrt(np.sum(np.abs(Z) ** 2, axis=1) + reg_epsilon ** 2)
    return float(np.sum(np.abs(Y - Phi @ Z) ** 2) + lam * np.sum(np.log(s + reg_epsilon)))


def irw_l21(Y, Phi, lam, config=None, info=None):
    """Iteratively reweighted l2,1 minimization as reweighted ridge regression.

    Each outer iteration refreshes the group weights
    ``w_i = 1 / (||x_i||_eps + reg_epsilon)`` and solves the quadratic
    majorizer of ``lam * w_i * ||x_i||_eps`` in closed form. Here
    ``||x||_eps = sqrt(||x||^2 + reg_epsilon^2)`` smooths the norm at zero.
    This is a majorization-minimization scheme, so ``irw_objective`` never
    increases.
    """
    config = config or BaselineConfig()
    Y = np.asarray(Y, dtype=complex)
    Phi = np.asarray(Phi, dtype=complex)
    tau_p = Phi.shape[0]
    Z = np.linalg.lstsq(Phi, Y, rcond=None)[0]
    if lam == 0:
        if info is not None:
            info.update(iterations=0, converged=True, objective=[])
        return Z.T

    eps = config.reg_epsilon
    trace = [irw_objective(Y, Phi, Z, lam, eps)]
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        s = np.sqrt(np.sum(np.abs(Z) ** 2, axis=1) + eps ** 2)
        w = 1.0 / (s + eps)
        d_inv = 2.0 * s / (lam * w)
        # (Phi^H Phi + D)^{-1} Phi^H Y = D^{-1} Phi^H (I + Phi D^{-1} Phi^H)^{-1} Y
        G = np.eye(tau_p, dtype=complex) + (Phi * d_inv) @ Phi.conj().T
        Z_new = d_inv[:, None] * (Phi.conj().T @ np.linalg.solve(G, Y))
        change = np.linalg.norm(Z_new - Z) / max(np.linalg.norm(Z_new), np.finfo(float).tiny)
        Z = Z_new
        trace.append(irw_objective(Y, Phi, Z, lam, eps))
        if change < config.tol:
            converged = True
            break
    if info is not None:
        info.update(iterations=it, converged=converged, objective=trace)
    return Z.T
