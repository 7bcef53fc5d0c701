"""Property-based invariants across modules."""

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from juice import (
    BaselineConfig,
    SolverConfig,
    build_cluster_map,
    draw_realization,
    enumerate_posterior,
    ep_infer,
    irw_l21,
    msbl,
    sample_activity,
    slab_log_density,
)
from juice.harness import ExperimentConfig, ResultRecord, export_results, load_results, run_experiment

seeds = st.integers(0, 2 ** 32 - 1)


@st.composite
def partitions(draw):
    n_c = draw(st.integers(1, 12))
    return n_c * draw(st.integers(1, 12)), n_c


@st.composite
def small_instances(draw, max_clusters=4):
    n_c = draw(st.integers(2, max_clusters))
    size = draw(st.integers(1, 3))
    n = n_c * size
    m = draw(st.integers(1, 3))
    tau = draw(st.integers(max(2, n // 2), n + 2))
    k = draw(st.integers(1, n_c - 1))
    rng = np.random.default_rng(draw(seeds))
    cmap = build_cluster_map(n, n_c)
    return cmap, draw_realization(cmap, m, tau, k, size, 0.1, rng), k / n_c


@given(partitions())
def test_partition_covers_every_ue_once(p):
    n, n_c = p
    cmap = build_cluster_map(n, n_c)
    allm = np.concatenate(cmap.members)
    assert sorted(allm.tolist()) == list(range(n))
    assert {len(c) for c in cmap.members} == {n // n_c}


@given(partitions(), st.data(), seeds, st.sampled_from(["exact", "uniform"]))
def test_activity_consistency(p, data, seed, mode):
    n, n_c = p
    cmap = build_cluster_map(n, n_c)
    k = data.draw(st.integers(0, n_c))
    lc = data.draw(st.integers(1, n // n_c))
    act = sample_activity(cmap, k, lc, mode, np.random.default_rng(seed))
    assert act.cluster_indicators.sum() == k
    for l, C in enumerate(cmap.members):
        on = act.ue_indicators[C].sum()
        if act.cluster_indicators[l]:
            assert 1 <= on <= lc and (mode == "uniform" or on == lc)
        else:
            assert on == 0


@given(st.floats(0.05, 20.0), st.integers(1, 2))
def test_slab_normalization_quadrature(g, m):
    # radial quadrature in R^{2M}: surface area of the unit sphere times r^{2M-1}
    r = np.linspace(0, 12 * np.sqrt(g), 20001)
    area = 2 * np.pi if m == 1 else 2 * np.pi ** 2
    x = np.zeros((m, r.size))
    x[0] = r
    f = area * r ** (2 * m - 1) * np.exp(slab_log_density(x, g))
    assert abs(np.trapezoid(f, r) - 1.0) < 1e-6


@given(small_instances(max_clusters=6), seeds)
def test_msbl_loglik_nondecreasing(inst, _):
    cmap, real, _ = inst
    info = {}
    msbl(real.received, real.pilots, 0.1, BaselineConfig(max_iters=100), info=info)
    ll = np.asarray(info["loglik"])
    assert np.all(np.diff(ll) >= -1e-10 * np.maximum(np.abs(ll[1:]), 1.0))


@given(small_instances(max_clusters=6), st.floats(0.01, 5.0), st.floats(1e-3, 1e-1))
def test_irls_objective_nonincreasing(inst, lam, reg):
    cmap, real, _ = inst
    info = {}
    irw_l21(real.received, real.pilots, lam, BaselineConfig(reg_epsilon=reg, max_iters=100), info=info)
    obj = np.asarray(info["objective"])
    assert np.all(np.diff(obj) <= 1e-9 * np.maximum(np.abs(obj[:-1]), 1.0))


FIXED = SolverConfig(update_slab_vars=False, tol=1e-12, max_iters=400)


@given(small_instances(), st.randoms(use_true_random=False))
def test_ep_cluster_permutation_equivariance(inst, rnd):
    cmap, real, eps = inst
    order = list(range(cmap.n_clusters))
    rnd.shuffle(order)
    cols = np.concatenate([cmap.members[l] for l in order])
    cfg = SolverConfig(eps=eps, update_slab_vars=False, tol=1e-12, max_iters=400)
    a = ep_infer(real.received, real.pilots, 0.1, cmap, cfg)
    b = ep_infer(real.received, real.pilots[:, cols], 0.1, cmap, cfg)
    if a.converged and b.converged:
        np.testing.assert_allclose(b.cluster_probs, a.cluster_probs[order], atol=1e-6)
        np.testing.assert_allclose(b.means, a.means[:, cols], atol=1e-6 * max(1.0, np.abs(a.means).max()))


@given(small_instances(), st.floats(1e-2, 1e2))
def test_ep_scale_equivariance(inst, alpha):
    cmap, real, eps = inst
    cfg = SolverConfig(eps=eps, update_slab_vars=False, tol=1e-12, max_iters=400)
    g = np.linspace(0.5, 1.5, cmap.n_ues)
    a = ep_infer(real.received, real.pilots, 0.1, cmap, cfg, slab_vars=g)
    b = ep_infer(alpha * real.received, real.pilots, alpha ** 2 * 0.1, cmap, cfg, slab_vars=alpha ** 2 * g)
    np.testing.assert_allclose(b.cluster_probs, a.cluster_probs, atol=1e-8)
    np.testing.assert_allclose(b.means, alpha * a.means, atol=1e-8 * alpha * max(1.0, np.abs(a.means).max()))


@given(small_instances(), st.floats(1e-2, 1e2))
def test_exact_scale_equivariance(inst, alpha):
    cmap, real, eps = inst
    g = np.ones(cmap.n_ues)
    a = enumerate_posterior(real.received, real.pilots, 0.1, g, eps, cmap)
    b = enumerate_posterior(alpha * real.received, real.pilots, alpha ** 2 * 0.1, alpha ** 2 * g, eps, cmap)
    np.testing.assert_allclose(b.cluster_probs, a.cluster_probs, atol=1e-10)
    np.testing.assert_allclose(b.means, alpha * a.means, atol=1e-10 * alpha * max(1.0, np.abs(a.means).max()))


records = st.builds(
    ResultRecord,
    trial_index=st.integers(0, 10 ** 6),
    sweep_name=st.sampled_from(["snr_db", "pilot_len", "noise_var"]),
    sweep_value=st.floats(-1e6, 1e6, allow_nan=False),
    estimator_name=st.sampled_from(["ep", "ep_uncoupled", "oracle_mmse", "msbl", "irw_l21"]),
    nmse=st.floats(0, 1e300, allow_nan=False),
    srr=st.floats(0, 1),
    iterations=st.integers(0, 10 ** 6),
    wall_time_seconds=st.floats(0, 1e6, allow_nan=False),
    converged=st.booleans(),
)


@given(st.lists(records, max_size=20), st.sampled_from(["csv", "json"]))
def test_export_round_trip(tmp_path_factory, recs, fmt):
    path = tmp_path_factory.mktemp("rt") / f"r.{fmt}"
    export_results(recs, path, fmt)
    back = load_results(path)
    key = lambda r: (r.sweep_name, r.sweep_value, r.trial_index, r.estimator_name)
    assert back == sorted(recs, key=key)
    assert [r.wall_time_seconds for r in back] == [r.wall_time_seconds for r in sorted(recs, key=key)]


@given(seeds)
def test_seeded_realizations_are_identical(seed):
    cmap = build_cluster_map(24, 6)
    a = draw_realization(cmap, 3, 10, 2, 3, 0.1, np.random.default_rng(seed))
    b = draw_realization(cmap, 3, 10, 2, 3, 0.1, np.random.default_rng(seed))
    for f in ("pilots", "channels", "path_gains", "effective_channels", "received"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert np.array_equal(a.activity.ue_indicators, b.activity.ue_indicators)


@given(small_instances())
def test_ep_is_deterministic(inst):
    cmap, real, eps = inst
    a = ep_infer(real.received, real.pilots, 0.1, cmap, SolverConfig(eps=eps))
    b = ep_infer(real.received, real.pilots, 0.1, cmap, SolverConfig(eps=eps))
    assert np.array_equal(a.means, b.means) and np.array_equal(a.cluster_probs, b.cluster_probs)


@given(st.integers(0, 2 ** 64 - 1))
def test_experiment_is_pure_function_of_config(seed):
    cfg = ExperimentConfig(n_ues=12, n_clusters=4, n_antennas=2, pilot_len=6, k_active_clusters=1,
                           l_c=2, n_trials=2, master_seed=seed)
    assert run_experiment(cfg) == run_experiment(cfg)
