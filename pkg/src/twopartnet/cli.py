"""Command-line pipeline: metrics, fit, report, predict, simulate, gof, threshold, demo.

Every subcommand is rerunnable: outputs are pure functions of the inputs,
flags, and seed, and no subcommand mutates its inputs.  Exit status 0 marks
success; argparse usage errors exit 2, malformed data exits 3, and
non-convergence or separation exits 4.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import archive as archive_mod
from .dyaddesign import (
    ModelSpec,
    SpecError,
    build_design,
    build_dyad_table,
    center_covariates,
)
from .graphmetrics import metric_suite
from .inference import (
    apply_threshold_mask,
    classify_group_difference,
    dyad_threshold_test,
    explain_report,
)
from .mixedfit import (
    PQL_MAX_OUTER,
    PQL_TOL,
    ConvergenceError,
    SeparationError,
    TwoPartFit,
    drop_zero_variance,
    fit_presence,
    fit_strength,
    fit_two_part,
    set_threads,
)
from .netdata import DataError, load_study
from .predictsim import gof_compare, predict_curve, simulate_networks
from .synth import generate_synthetic_study, load_dyad_csv

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n")


def _fmt_p(p: float) -> str:
    return "<0.0001" if p < 1e-4 else f"{p:.4f}"


def _study_metrics(study, louvain_seed: int, leverage_degree: str):
    out = {}
    for net in study.networks:
        out[net.subject_id] = metric_suite(
            net, louvain_seed=louvain_seed, leverage_degree=leverage_degree
        )
    return out


def _load_table_for(args) -> tuple[pd.DataFrame, int]:
    """Raw dyad table from either a saved table or the study files."""
    if getattr(args, "table", None):
        table = load_dyad_csv(args.table)
        return table, int(table["node_k"].max()) + 1
    if not (args.networks_dir and args.atlas and args.subjects):
        raise DataError("provide --table or all of --networks-dir/--atlas/--subjects")
    study = load_study(args.networks_dir, args.atlas, args.subjects,
                       weak_cutoff=args.weak_cutoff)
    metrics = _study_metrics(study, args.louvain_seed, args.leverage_degree)
    table = build_dyad_table(study.networks, metrics, study.covariates, study.distances)
    return table, study.n_nodes


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_metrics(args) -> int:
    study = load_study(args.networks_dir, args.atlas, args.subjects,
                       weak_cutoff=args.weak_cutoff)
    out = Path(args.out)
    nodal_records = []
    network_records = []
    for net in study.networks:
        nodal, netm = metric_suite(net, louvain_seed=args.louvain_seed,
                                   leverage_degree=args.leverage_degree)
        for v in range(net.n):
            nodal_records.append(
                {"subject_id": net.subject_id, "node": v,
                 "label": study.atlas.labels[v],
                 "clustering": nodal.clustering[v],
                 "efficiency": nodal.efficiency[v],
                 "degree": nodal.degree[v],
                 "leverage": nodal.leverage[v]}
            )
        network_records.append(
            {"subject_id": net.subject_id, "C": netm.clustering,
             "E_glob": netm.efficiency, "L": netm.path_length,
             "K": netm.degree, "l": netm.leverage, "Q": netm.modularity,
             "infinite_path_pairs": netm.infinite_path_pairs}
        )
    _write_csv(pd.DataFrame.from_records(nodal_records), out / "nodal_metrics.csv")
    net_df = pd.DataFrame.from_records(network_records)
    _write_csv(net_df, out / "network_metrics.csv")
    summary = []
    for col in ("C", "E_glob", "L", "K", "l", "Q"):
        vals = net_df[col].to_numpy(dtype=float)
        se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
        summary.append({"metric": col, "mean": vals.mean(), "se": se,
                        "mean_se": f"{vals.mean():.3f} ({se:.3f})"})
    _write_csv(pd.DataFrame.from_records(summary), out / "summary.csv")
    print(f"metrics: {len(study.networks)} subjects x {study.n_nodes} nodes "
          f"-> {out}/nodal_metrics.csv, network_metrics.csv, summary.csv")
    return EXIT_OK


def _reduce_and_refit(full: TwoPartFit, table: pd.DataFrame, n_nodes: int):
    spec = full.spec
    spec_r = drop_zero_variance(full.presence, spec)
    spec_s = drop_zero_variance(full.strength, spec)
    presence = full.presence
    strength = full.strength
    if spec_r.to_dict() != spec.to_dict():
        presence = fit_presence(table, spec_r, n_nodes)
    if spec_s.to_dict() != spec.to_dict():
        strength = fit_strength(table, spec_s, n_nodes)
    reduced = TwoPartFit(presence=presence, strength=strength, spec=spec,
                         centering=full.centering, n_nodes=n_nodes)
    return reduced, {"presence": spec_r, "strength": spec_s}


def cmd_fit(args) -> int:
    t0 = time.time()
    if args.threads:
        set_threads(args.threads)
    spec = ModelSpec.from_file(args.spec) if args.spec else ModelSpec()
    raw, n_nodes = _load_table_for(args)
    table, centering = center_covariates(raw)
    full = fit_two_part(table, spec, n_nodes, centering=centering,
                        pql_tol=args.pql_tol, pql_max_outer=args.pql_max_outer)
    if args.no_reduce:
        reduced, reduced_specs = full, {"presence": spec, "strength": spec}
    else:
        reduced, reduced_specs = _reduce_and_refit(full, table, n_nodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arch = archive_mod.FitArchive(
        full=full, reduced=reduced, reduced_specs=reduced_specs,
        louvain_seed=args.louvain_seed, leverage_degree=args.leverage_degree,
    )
    archive_mod.save_archive(out / "archive.json", arch)
    _write_csv(table, out / "table.csv")
    if args.dump_design:
        design = build_design(table, spec, n_nodes)
        lines = ["[fixed-effect columns]"] + list(design.x_names)
        lines += ["", "[random-effect columns]"] + list(design.z_names)
        lines += ["", "[variance parameters]"] + list(design.vc_names)
        lines += ["", f"q = {design.q} columns, "
                      f"{len(design.vc_names)} variance parameters"]
        (out / "design_headers.txt").write_text("\n".join(lines) + "\n")
        (out / "centering.json").write_text(
            json.dumps(centering.to_dict(), indent=2, sort_keys=True) + "\n")
    n_bound_r = int(full.presence.vc.at_bound.sum())
    n_bound_s = int(full.strength.vc.at_bound.sum())
    print(f"fit: {len(table)} dyad rows, presence fraction "
          f"{table['R'].mean():.3f}")
    print(f"  presence: {len(full.presence.beta)} fixed effects, "
          f"{len(full.presence.vc.tau)} variance components "
          f"({n_bound_r} at bound), {full.presence.outer_iterations} outer iterations")
    print(f"  strength: {full.strength.n_rows} rows, "
          f"{len(full.strength.vc.tau)} variance components ({n_bound_s} at bound), "
          f"sigma2 = {full.strength.vc.sigma2:.5f}")
    print(f"  wrote {out}/archive.json, table.csv ({time.time() - t0:.1f}s)")
    return EXIT_OK


def cmd_report(args) -> int:
    arch = archive_mod.load_archive(Path(args.fit) / "archive.json")
    fit = arch.full if args.model == "full" else arch.reduced
    report = explain_report(fit, coi_label=args.coi_label)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = pd.DataFrame(
        {
            "Parameter": [r.label for r in report.rows],
            "Estimate": [f"{r.estimate:.4f}" for r in report.rows],
            "SE": [f"{r.se:.4f}" for r in report.rows],
            "P-value": [_fmt_p(r.p_value) for r in report.rows],
        }
    )
    _write_csv(rows, out / "report.csv")
    classification = classify_group_difference(report, alpha=args.alpha)
    lines = [f"alpha = {args.alpha}"]
    for part in ("presence", "strength"):
        lines.append(f"{part}: {classification[part]}")
    lines += report.notes
    (out / "classification.txt").write_text("\n".join(lines) + "\n")
    interp = [f"{r.label}: {r.interpretation}" for r in report.rows]
    (out / "interpretations.txt").write_text("\n".join(interp) + "\n")
    print(f"report: {len(report.rows)} parameters -> {out}/report.csv")
    for part in ("presence", "strength"):
        print(f"  {part}: {classification[part]}")
    return EXIT_OK


def _parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, n = text.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError:
        raise DataError(f"bad grid {text!r}; expected lo:hi:n")


def cmd_predict(args) -> int:
    arch = archive_mod.load_archive(Path(args.fit) / "archive.json")
    fit = arch.full
    grid = _parse_grid(args.grid)
    levels = [int(g) for g in args.group_levels.split(",")]
    dyad = None
    if args.dyad:
        j, k = (int(v) for v in args.dyad.split(","))
        dyad = (j, k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scales = ("probability", "strength") if args.scale == "both" else (args.scale,)
    for scale in scales:
        curve = predict_curve(fit, args.vary, grid, group_levels=levels,
                              scale=scale, dyad=dyad)
        _write_csv(curve.to_frame(), out / f"predict_{scale}.csv")
        for w in curve.warnings:
            print(f"  warning: {w}")
        if args.plot:
            _plot_curve(curve, out / f"predict_{scale}.png")
    print(f"predict: {args.vary} over {len(grid)} grid points, groups {levels} -> {out}")
    return EXIT_OK


def _plot_curve(curve, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for level, cols in curve.groups.items():
        ax.plot(curve.grid, cols["point"], label=f"group {level}")
        ax.fill_between(curve.grid, cols["lo"], cols["hi"], alpha=0.25)
    ax.set_xlabel(curve.vary)
    ax.set_ylabel("connection probability" if curve.scale == "probability"
                  else "connection strength")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_simulate(args) -> int:
    if args.threads:
        set_threads(args.threads)
    fit_dir = Path(args.fit)
    arch = archive_mod.load_archive(fit_dir / "archive.json")
    table = pd.read_csv(fit_dir / "table.csv")
    table["subject_id"] = table["subject_id"].astype(str)
    ensemble = simulate_networks(
        arch.full, table, n_sims=args.n_sims, seed=args.seed,
        source=args.source, use_blups=args.use_blups,
        louvain_seed=arch.louvain_seed, leverage_degree=arch.leverage_degree,
    )
    out = Path(args.out)
    nets_dir = out / "networks"
    nets_dir.mkdir(parents=True, exist_ok=True)
    for net in ensemble.networks:
        np.savetxt(nets_dir / f"{net.subject_id}.csv", net.weights,
                   delimiter=",", fmt="%.17g")
    metric_records = [
        {"network": net.subject_id, "C": m.clustering, "E_glob": m.efficiency,
         "L": m.path_length, "K": m.degree, "l": m.leverage, "Q": m.modularity}
        for net, m in zip(ensemble.networks, ensemble.metrics)
    ]
    _write_csv(pd.DataFrame.from_records(metric_records), out / "metrics.csv")
    manifest = {
        "seed": ensemble.seed, "n_sims": ensemble.n_sims,
        "settings": ensemble.settings,
        "rejection_fallbacks": ensemble.rejection_fallbacks,
        "networks": [net.subject_id for net in ensemble.networks],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"simulate: {ensemble.n_sims} networks (source {args.source}) -> {nets_dir}")
    if ensemble.rejection_fallbacks:
        print(f"  note: {ensemble.rejection_fallbacks} strength draws hit the "
              "rejection cap and were set to the smallest positive weight")
    return EXIT_OK


def cmd_gof(args) -> int:
    fit_dir = Path(args.fit)
    arch = archive_mod.load_archive(fit_dir / "archive.json")
    table = pd.read_csv(fit_dir / "table.csv")
    table["subject_id"] = table["subject_id"].astype(str)
    study = load_study(args.networks_dir, args.atlas, args.subjects,
                       weak_cutoff=args.weak_cutoff)
    ensemble = simulate_networks(
        arch.full, table, n_sims=args.n_sims, seed=args.seed, source=args.source,
        louvain_seed=arch.louvain_seed, leverage_degree=arch.leverage_degree,
    )
    gof = gof_compare(study.networks, ensemble, louvain_seed=arch.louvain_seed,
                      leverage_degree=arch.leverage_degree)
    out = Path(args.out)
    _write_csv(gof.to_frame(), out / "gof.csv")
    print(f"gof: observed n={gof.n_observed} vs simulated n={gof.n_simulated} -> {out}/gof.csv")
    for label, om, ose, sm, sse in gof.rows:
        print(f"  {label}: observed {om:.3f} ({ose:.3f})  simulated {sm:.3f} ({sse:.3f})")
    return EXIT_OK


def cmd_threshold(args) -> int:
    fit_dir = Path(args.fit)
    arch = archive_mod.load_archive(fit_dir / "archive.json")
    table = pd.read_csv(fit_dir / "table.csv")
    table["subject_id"] = table["subject_id"].astype(str)
    n_nodes = arch.full.n_nodes
    if args.all_dyads:
        ju, ku = np.triu_indices(n_nodes, k=1)
        dyads = list(zip(ju.tolist(), ku.tolist()))
    else:
        if not args.dyads:
            raise DataError("provide --dyads <csv> or --all-dyads")
        ddf = pd.read_csv(args.dyads)
        if not {"node_j", "node_k"} <= set(ddf.columns):
            raise DataError(f"{args.dyads}: need columns node_j,node_k")
        dyads = list(zip(ddf["node_j"].astype(int), ddf["node_k"].astype(int)))
    report = dyad_threshold_test(
        table, arch.reduced_specs["strength"], dyads,
        per_group=args.per_group, correction=args.correction, alpha=args.alpha,
        n_nodes=n_nodes, centering=arch.full.centering,
    )
    out = Path(args.out)
    _write_csv(report.table, out / "threshold.csv")
    candidates = report.removal_candidates()
    n_testable = int(report.table["testable"].sum())
    print(f"threshold: {len(dyads)} dyads tested ({n_testable} testable), "
          f"{len(candidates)} removal candidates at alpha={args.alpha} "
          f"({args.correction}) -> {out}/threshold.csv")
    if args.mask_out:
        if args.weak_cutoff is None:
            raise DataError("masking requires --weak-cutoff (no default is endorsed)")
        study = load_study(args.networks_dir, args.atlas, args.subjects)
        masked = apply_threshold_mask(study.networks, candidates, args.weak_cutoff)
        mask_dir = Path(args.mask_out)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for net in masked:
            np.savetxt(mask_dir / f"{net.subject_id}.csv", net.weights,
                       delimiter=",", fmt="%.17g")
        print(f"  masked networks (weak cutoff {args.weak_cutoff}) -> {mask_dir}")
    return EXIT_OK


def cmd_demo(args) -> int:
    from .synth import StudyTruth

    out = Path(args.out)
    if args.threads:
        set_threads(args.threads)
    t0 = time.time()
    print(f"demo: generating synthetic study ({args.n_subjects} subjects x "
          f"{args.n_nodes} nodes, seed {args.seed})")
    study_dir = out / "study"
    truth = StudyTruth.from_file(args.truth) if args.truth else None
    generate_synthetic_study(study_dir, args.n_subjects, args.n_nodes,
                             truth=truth, seed=args.seed)
    common = ["--networks-dir", str(study_dir / "networks"),
              "--atlas", str(study_dir / "atlas.csv"),
              "--subjects", str(study_dir / "subjects.csv")]
    steps = [
        ["metrics", *common, "--out", str(out / "metrics")],
        ["fit", *common, "--spec", str(study_dir / "spec.json"),
         "--out", str(out / "fit")],
        ["report", "--fit", str(out / "fit"), "--out", str(out / "report")],
        ["predict", "--fit", str(out / "fit"), "--vary", "k_diff",
         "--grid", "0:8:25", "--out", str(out / "predict")],
        ["simulate", "--fit", str(out / "fit"), "--n-sims", str(args.n_sims),
         "--seed", str(args.seed), "--out", str(out / "simulate")],
        ["gof", "--fit", str(out / "fit"), *common, "--n-sims", str(args.n_sims),
         "--seed", str(args.seed), "--out", str(out / "gof")],
        ["threshold", "--fit", str(out / "fit"), "--dyads",
         str(_demo_dyads_file(out, args.n_nodes)), "--out", str(out / "threshold")],
    ]
    for step in steps:
        print(f"\n== twopartnet {step[0]}")
        status = run_command(step)
        if status != EXIT_OK:
            return status
    print(f"\ndemo complete in {time.time() - t0:.1f}s; outputs under {out}")
    return EXIT_OK


def _demo_dyads_file(out: Path, n_nodes: int) -> Path:
    ju, ku = np.triu_indices(n_nodes, k=1)
    df = pd.DataFrame({"node_j": ju[:10], "node_k": ku[:10]})
    path = out / "threshold_dyads.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(df, path)
    return path


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_study_flags(p, required=True):
    p.add_argument("--networks-dir", required=required)
    p.add_argument("--atlas", required=required)
    p.add_argument("--subjects", required=required)
    p.add_argument("--weak-cutoff", type=float, default=None,
                   help="optional absolute weight cutoff applied at load")


def _add_metric_flags(p):
    p.add_argument("--louvain-seed", type=int, default=0)
    p.add_argument("--leverage-degree", choices=("weighted", "binary"),
                   default="weighted")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twopartnet",
        description="Two-part mixed-effects modeling of weighted brain networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("metrics", help="per-subject nodal and network metrics")
    _add_study_flags(p)
    _add_metric_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("fit", help="fit the two-part mixed model")
    _add_study_flags(p, required=False)
    _add_metric_flags(p)
    p.add_argument("--table", help="fit from a saved dyad table instead of study files")
    p.add_argument("--spec", required=True, help="model spec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--dump-design", action="store_true")
    p.add_argument("--no-reduce", action="store_true",
                   help="skip the zero-variance pruning refit")
    p.add_argument("--pql-tol", type=float, default=PQL_TOL,
                   help="outer relative parameter tolerance for the presence fit")
    p.add_argument("--pql-max-outer", type=int, default=PQL_MAX_OUTER)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="parameter estimates, SEs, p-values")
    p.add_argument("--fit", required=True, help="fit output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--coi-label", default="age")
    p.add_argument("--model", choices=("reduced", "full"), default="reduced")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("predict", help="prediction curves with 95%% bounds")
    p.add_argument("--fit", required=True)
    p.add_argument("--vary", required=True)
    p.add_argument("--grid", required=True, help="lo:hi:n in raw covariate units")
    p.add_argument("--group-levels", default="0,1")
    p.add_argument("--scale", choices=("both", "probability", "strength"),
                   default="both")
    p.add_argument("--dyad", help="j,k for a concrete node pair")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="simulate networks from the fitted model")
    p.add_argument("--fit", required=True)
    p.add_argument("--n-sims", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--source", default="cycle",
                   help="cycle | subject:<id> | group-mean:<level>")
    p.add_argument("--use-blups", action="store_true")
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gof", help="observed vs simulated metric table")
    p.add_argument("--fit", required=True)
    _add_study_flags(p)
    p.add_argument("--n-sims", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--source", default="cycle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gof)

    p = sub.add_parser("threshold", help="group-informed dyad thresholding")
    p.add_argument("--fit", required=True)
    p.add_argument("--dyads", help="CSV with node_j,node_k columns")
    p.add_argument("--all-dyads", action="store_true")
    p.add_argument("--per-group", action="store_true")
    p.add_argument("--correction", choices=("fdr", "bonferroni"), default="fdr")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--weak-cutoff", type=float, default=None)
    p.add_argument("--mask-out", help="write masked per-subject networks here")
    p.add_argument("--networks-dir")
    p.add_argument("--atlas")
    p.add_argument("--subjects")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("demo", help="generate a synthetic study and run the pipeline")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-subjects", type=int, default=20)
    p.add_argument("--n-nodes", type=int, default=30)
    p.add_argument("--n-sims", type=int, default=20)
    p.add_argument("--truth", help="JSON file with true parameters for the generator")
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=cmd_demo)

    return parser


def run_command(argv) -> int:
    """Run one subcommand; returns a process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (DataError, SpecError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, SeparationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
