"""Log-density primitives of the clustered spike-and-slab prior."""

from dataclasses import dataclass

import numpy as np

from juice.errors import NonPositiveVariance
from juice.model import ClusterMap

SLAB_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class PriorParams:
    slab_vars: np.ndarray
    cluster_activation_prob: float
    cluster_map: ClusterMap

    def __post_init__(self):
        g = np.maximum(np.asarray(self.slab_vars, dtype=float), SLAB_VAR_FLOOR)
        if g.shape != (self.cluster_map.n_ues,):
            raise ValueError(f"expected {self.cluster_map.n_ues} slab variances, got {g.shape}")
        if not 0.0 < self.cluster_activation_prob < 1.0:
            raise ValueError("cluster activation probability must lie in (0, 1)")
        g.setflags(write=False)
        object.__setattr__(self, "slab_vars", g)


def slab_log_density(x, slab_var):
    """log CN(x; 0, slab_var I_M) for a length-M complex vector."""
    if not slab_var > 0:
        raise NonPositiveVariance(f"slab variance must be positive, got {slab_var}")
    x = np.atleast_1d(np.asarray(x))
    M = x.shape[0]
    return -M * np.log(np.pi * slab_var) - np.sum(np.abs(x) ** 2, axis=0) / slab_var


def cluster_log_pmf(c, eps):
    if c not in (0, 1):
        raise ValueError(f"cluster indicator must be 0 or 1, got {c}")
    return float(np.log(eps) if c == 1 else np.log1p(-eps))


def cluster_prior_log_density(X_cluster, c, slab_vars):
    """Log prior of one cluster's M x L block given its indicator.

    The spike is a point mass: an inactive cluster scores 0 at the origin
    and ``-inf`` anywhere else.
    """
    X_cluster = np.asarray(X_cluster)
    slab_vars = np.asarray(slab_vars, dtype=float)
    if X_cluster.ndim == 1:
        X_cluster = X_cluster[:, None]
    if X_cluster.shape[1] != slab_vars.size:
        raise ValueError("one slab variance per cluster column required")
    if c == 0:
        return 0.0 if not np.any(X_cluster) else -np.inf
    return float(sum(slab_log_density(X_cluster[:, j], g) for j, g in enumerate(slab_vars)))
