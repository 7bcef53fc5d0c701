"""Synthetic uplink scenarios: clusters, activity, pilots, channels and the
received pilot signal ``Y = Phi X^T + W``.

UE and cluster indices are zero-based throughout.
"""

from dataclasses import dataclass

import numpy as np

from juice.errors import BadCount, NonDivisible


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


def crandn(rng, shape, var=1.0):
    """Circularly-symmetric complex Gaussian samples with per-entry variance ``var``."""
    scale = np.sqrt(np.asarray(var, dtype=float) / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass(frozen=True)
class ClusterMap:
    n_ues: int
    n_clusters: int
    members: tuple

    @property
    def cluster_size(self):
        return self.n_ues // self.n_clusters

    @property
    def labels(self):
        """Cluster index of every UE."""
        out = np.empty(self.n_ues, dtype=int)
        for l, idx in enumerate(self.members):
            out[idx] = l
        return out


@dataclass(frozen=True)
class ActivityPattern:
    cluster_indicators: np.ndarray
    ue_indicators: np.ndarray

    @property
    def support(self):
        return frozenset(np.flatnonzero(self.ue_indicators).tolist())


@dataclass(frozen=True)
class SystemRealization:
    pilots: np.ndarray
    channels: np.ndarray
    path_gains: np.ndarray
    activity: ActivityPattern
    effective_channels: np.ndarray
    received: np.ndarray
    noise_var: float


def build_cluster_map(n_ues, n_clusters):
    """Split UEs ``0..n_ues-1`` into ``n_clusters`` contiguous blocks of equal size."""
    if n_clusters < 1 or n_ues < 1:
        raise NonDivisible(f"need positive sizes, got n_ues={n_ues}, n_clusters={n_clusters}")
    if n_ues % n_clusters:
        raise NonDivisible(f"{n_clusters} clusters do not divide {n_ues} UEs")
    size = n_ues // n_clusters
    members = tuple(_frozen(np.arange(l * size, (l + 1) * size)) for l in range(n_clusters))
    return ClusterMap(n_ues=n_ues, n_clusters=n_clusters, members=members)


def sample_activity(cmap, k_active, l_c, mode="exact", rng=None):
    """Draw a clustered activity pattern.

    ``k_active`` clusters are picked uniformly without replacement. Each of
    them gets exactly ``l_c`` active UEs (``mode="exact"``) or a count drawn
    uniformly from ``1..l_c`` (``mode="uniform"``).
    """
    rng = np.random.default_rng(rng)
    if k_active < 0 or k_active > cmap.n_clusters:
        raise BadCount(f"k_active={k_active} outside [0, {cmap.n_clusters}]")
    if l_c < 1 or l_c > cmap.cluster_size:
        raise BadCount(f"l_c={l_c} outside [1, {cmap.cluster_size}]")
    if mode not in ("exact", "uniform"):
        raise ValueError(f"unknown activity mode {mode!r}")

    c = np.zeros(cmap.n_clusters, dtype=np.int8)
    gamma = np.zeros(cmap.n_ues, dtype=np.int8)
    active = rng.choice(cmap.n_clusters, size=k_active, replace=False)
    for l in np.sort(active):
        c[l] = 1
        count = l_c if mode == "exact" else int(rng.integers(1, l_c + 1))
        chosen = rng.choice(cmap.members[l], size=count, replace=False)
        gamma[chosen] = 1
    return ActivityPattern(_frozen(c), _frozen(gamma))


def generate_pilots(tau_p, n_ues, rng=None, orthonormal=False):
    """Unit-norm complex Gaussian pilots, one column per UE.

    With ``orthonormal=True`` (requires ``tau_p >= n_ues``) the columns are
    orthonormalized by a QR factorization instead.
    """
    if tau_p < 1 or n_ues < 1:
        raise ValueError("tau_p and n_ues must be positive")
    rng = np.random.default_rng(rng)
    G = crandn(rng, (tau_p, n_ues))
    if orthonormal:
        if tau_p < n_ues:
            raise ValueError(f"cannot orthonormalize {n_ues} pilots of length {tau_p}")
        Q, R = np.linalg.qr(G)
        # fix the phase ambiguity of QR so the draw stays a Haar sample
        d = np.diag(R)
        return Q * (d / np.abs(d))
    return G / np.linalg.norm(G, axis=0)


def sample_channels(path_gains, n_antennas, rng=None):
    """Rayleigh channels: column ``i`` is CN(0, beta_i I_M)."""
    beta = np.asarray(path_gains, dtype=float)
    if np.any(beta < 0):
        raise ValueError("path gains must be nonnegative")
    rng = np.random.default_rng(rng)
    return crandn(rng, (n_antennas, beta.size), beta)


def sample_path_gains(n_ues, rng=None, model="unit", db_range=(-10.0, 0.0)):
    """Large-scale gains: all ones (``"unit"``) or log-uniform over ``db_range`` dB."""
    if model == "unit":
        return np.ones(n_ues)
    if model == "log_uniform":
        rng = np.random.default_rng(rng)
        return 10.0 ** (rng.uniform(db_range[0], db_range[1], size=n_ues) / 10.0)
    raise ValueError(f"unknown path gain model {model!r}")


def effective_channel(activity, channels):
    gamma = np.asarray(getattr(activity, "ue_indicators", activity))
    H = np.asarray(channels)
    if H.shape[1] != gamma.size:
        raise ValueError(f"channels have {H.shape[1]} columns, activity has {gamma.size} UEs")
    return H * gamma.astype(H.real.dtype)


def synthesize_received(pilots, effective_channels, noise_var, rng=None):
    """``Y = Phi X^T + W`` with W i.i.d. CN(0, noise_var)."""
    Phi = np.asarray(pilots)
    X = np.asarray(effective_channels)
    if Phi.shape[1] != X.shape[1]:
        raise ValueError(f"pilots cover {Phi.shape[1]} UEs, channels {X.shape[1]}")
    if noise_var < 0:
        raise ValueError("noise_var must be nonnegative")
    Y = Phi @ X.T
    if noise_var > 0:
        rng = np.random.default_rng(rng)
        Y = Y + crandn(rng, Y.shape, noise_var)
    return Y


def draw_realization(cmap, n_antennas, tau_p, k_active, l_c, noise_var, rng=None,
                     mode="exact", path_gain_model="unit", orthonormal_pilots=False):
    """One complete system draw. All randomness comes from ``rng``."""
    rng = np.random.default_rng(rng)
    activity = sample_activity(cmap, k_active, l_c, mode=mode, rng=rng)
    pilots = generate_pilots(tau_p, cmap.n_ues, rng=rng, orthonormal=orthonormal_pilots)
    beta = sample_path_gains(cmap.n_ues, rng=rng, model=path_gain_model)
    H = sample_channels(beta, n_antennas, rng=rng)
    X = effective_channel(activity, H)
    Y = synthesize_received(pilots, X, noise_var, rng=rng)
    return SystemRealization(
        pilots=_frozen(pilots),
        channels=_frozen(H),
        path_gains=_frozen(beta),
        activity=activity,
        effective_channels=_frozen(X),
        received=_frozen(Y),
        noise_var=float(noise_var),
    )
