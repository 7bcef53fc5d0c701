"""Joint user identification and channel estimation (JUICE) for grant-free
MTC uplinks with clustered device activity.

The core estimator is an expectation-propagation solver over a structured
spike-and-slab prior; baselines, an exact enumeration oracle and a Monte
Carlo harness are included.
"""

from juice.errors import (
    BadCount,
    ConfigError,
    DegenerateCavity,
    JuiceError,
    NonDivisible,
    NonPositiveVariance,
    SingularInput,
    TooLarge,
    ZeroTruth,
)
from juice.model import (
    ActivityPattern,
    ClusterMap,
    SystemRealization,
    build_cluster_map,
    draw_realization,
    effective_channel,
    generate_pilots,
    sample_activity,
    sample_channels,
    synthesize_received,
)
from juice.priors import (
    PriorParams,
    cluster_log_pmf,
    cluster_prior_log_density,
    slab_log_density,
)
from juice.ep import (
    GaussianSite,
    PosteriorSummary,
    SolverConfig,
    detect_support,
    ep_infer,
    likelihood_site,
    spike_slab_site_update,
    update_slab_vars,
)
from juice.exact import ExactPosterior, enumerate_posterior
from juice.baselines import BaselineConfig, irw_l21, msbl, oracle_mmse

__version__ = "0.1.0"
