"""Command-line interface: ``juice run | oracle | calibrate``."""

import argparse
from dataclasses import replace
import json
import sys

import numpy as np

from juice.ep import SolverConfig, ep_infer
from juice.errors import JuiceError
from juice.exact import enumerate_posterior
from juice.harness import (
    ExperimentConfig,
    calibrate,
    export_results,
    export_summary,
    load_config,
    run_experiment,
    summarize,
)
from juice.model import build_cluster_map, draw_realization


def _experiment_config(path, seed=None):
    cfg = load_config(path) if path else ExperimentConfig()
    return cfg if seed is None else replace(cfg, master_seed=seed)


def _print_summary(summary, out):
    head = f"{'sweep':>18} {'estimator':>13} {'med NMSE dB':>12} {'mean SRR':>9} {'med SRR':>8} {'conv':>5}"
    print(head, file=out)
    for s in summary:
        print(f"{s['sweep_name'] + '=' + format(s['sweep_value'], 'g'):>18} {s['estimator']:>13} "
              f"{s['median_nmse_db']:12.3f} {s['mean_srr']:9.4f} {s['median_srr']:8.4f} "
              f"{s['converged_rate']:5.2f}", file=out)


def cmd_run(args):
    cfg = _experiment_config(args.config, args.seed)
    records = run_experiment(cfg, workers=args.threads)
    out = args.out or f"results.{args.format}"
    export_results(records, out, args.format, config=cfg)
    summary = summarize(records)
    if args.summary:
        export_summary(summary, args.summary)
    _print_summary(summary, sys.stdout)
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_oracle(args):
    if args.n_ues % args.n_clusters:
        raise JuiceError(f"{args.n_clusters} clusters do not divide {args.n_ues} UEs")
    cmap = build_cluster_map(args.n_ues, args.n_clusters)
    s2 = 10.0 ** (-args.snr_db / 10.0)
    real = draw_realization(cmap, args.antennas, args.pilot_len, args.k_active, args.l_c, s2,
                            np.random.default_rng(args.seed))
    eps = args.k_active / args.n_clusters
    g = np.ones(args.n_ues)
    exact = enumerate_posterior(real.received, real.pilots, s2, g, eps, cmap)
    ep = ep_infer(real.received, real.pilots, s2, cmap,
                  SolverConfig(eps=eps, update_slab_vars=False, tol=1e-8, max_iters=200),
                  slab_vars=g)
    truth = real.activity.cluster_indicators
    print(f"{'cluster':>7} {'true':>5} {'exact':>9} {'ep':>9}")
    for l in range(cmap.n_clusters):
        print(f"{l:7d} {int(truth[l]):5d} {exact.cluster_probs[l]:9.5f} {ep.cluster_probs[l]:9.5f}")
    rel = np.linalg.norm(ep.means - exact.means) / max(np.linalg.norm(exact.means), 1e-300)
    print(f"max |prob diff| {np.max(np.abs(ep.cluster_probs - exact.cluster_probs)):.3e}, "
          f"relative mean error {rel:.3e}, log evidence {exact.log_evidence:.6f}, "
          f"EP iterations {ep.iterations} (converged: {ep.converged})")
    return 0


def cmd_calibrate(args):
    cfg = _experiment_config(args.config)
    report = calibrate(cfg, n_trials=args.trials, seed=args.seed, workers=args.threads)
    chosen = {
        "solver_detection_threshold": report["ep"]["threshold"],
        "uncoupled_threshold": report["ep_uncoupled"]["threshold"],
        "baseline_msbl_threshold": report["msbl"]["threshold"],
        "baseline_irw_threshold": report["irw_l21"]["threshold"],
        "baseline_lam": report["lam"],
    }
    for key, value in chosen.items():
        print(f"{key} = {value}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"chosen": chosen, "report": report}, fh, indent=1)
            fh.write("\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="juice", description="Clustered-activity JUICE simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte Carlo experiment")
    run.add_argument("config", nargs="?", help="flat TOML experiment file (defaults if omitted)")
    run.add_argument("--out", help="results file (default results.<format>)")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--seed", type=int, help="override master_seed")
    run.add_argument("--threads", type=int, default=1, help="worker processes (1 = serial)")
    run.add_argument("--summary", help="also write per-estimator aggregates as CSV")
    run.set_defaults(func=cmd_run)

    orc = sub.add_parser("oracle", help="compare EP with exact enumeration on a tiny instance")
    orc.add_argument("--n-ues", type=int, default=8)
    orc.add_argument("--n-clusters", type=int, default=4)
    orc.add_argument("--antennas", type=int, default=2)
    orc.add_argument("--pilot-len", type=int, default=8)
    orc.add_argument("--k-active", type=int, default=1)
    orc.add_argument("--l-c", type=int, default=2)
    orc.add_argument("--snr-db", type=float, default=10.0)
    orc.add_argument("--seed", type=int, default=0)
    orc.set_defaults(func=cmd_oracle)

    cal = sub.add_parser("calibrate", help="grid-search detection thresholds and the IRW penalty")
    cal.add_argument("config", nargs="?", help="flat TOML experiment file (defaults if omitted)")
    cal.add_argument("--trials", type=int, default=200)
    cal.add_argument("--seed", type=int, help="validation seed (default master_seed + 1)")
    cal.add_argument("--threads", type=int, default=1)
    cal.add_argument("--out", help="write the full report as JSON")
    cal.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (JuiceError, ValueError, OSError) as exc:
        print(f"juice {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
