"""Command-line entry point: ``cleverscore <command> [options]``.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import attacks, experiment, oracle
from .attacks import AttackConfig
from .clever import theoretical_lower_bound
from .experiment import ManifestError, RunManifest
from .fixtures import STANDARD_RECIPES, DatasetFormatError, FixtureBuildError, build_fixture
from .net import ModelFormatError, ShapeError, forward
from .sampling import Ball, NumericError, SampleConfig, p_label

log = logging.getLogger("cleverscore")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
INPUT_ERRORS = (ManifestError, oracle.EnumerationBudgetError, ModelFormatError, DatasetFormatError, ShapeError, FileNotFoundError)


def _parse_p_list(text: str) -> list[str]:
    return [t for t in text.replace(" ", "").split(",") if t]


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("run options")
    g.add_argument("--manifest", help="JSON or YAML manifest; flags below override it")
    g.add_argument("--model", help="model JSON file")
    g.add_argument("--data", help="dataset CSV file (features then label)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--p", action="append", choices=["1", "2", "inf"],
                   help="norm order; repeat for several (default: 2 and inf)")
    g.add_argument("--radius", type=float, help="sampling radius R (default 5)")
    g.add_argument("--nb", type=int, help="number of batches N_b (default 500)")
    g.add_argument("--ns", type=int, help="samples per batch N_s (default 1024)")
    g.add_argument("--targets", choices=["top2", "random", "least", "all", "untargeted"],
                   help="target policy (default: all)")
    g.add_argument("--instances", type=int, help="first N correctly classified instances")
    g.add_argument("--input-box", type=float, nargs=2, metavar=("LO", "HI"),
                   help="clamp attack iterates to this per-coordinate box")
    g.add_argument("-v", "--verbose", action="store_true")


def build_manifest(args: argparse.Namespace) -> RunManifest:
    manifest = RunManifest.load(args.manifest) if args.manifest else RunManifest()
    updates = {}
    if args.model:
        updates["model_path"] = args.model
    if args.data:
        updates["dataset_path"] = args.data
    if args.out:
        updates["output_dir"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.workers is not None:
        updates["workers"] = args.workers
    if args.p:
        updates["p_list"] = args.p
    if args.radius is not None:
        updates["ball_radius"] = args.radius
    if args.instances is not None:
        updates["instances"] = args.instances
    if args.targets:
        updates["targets"] = ["top2", "random", "least"] if args.targets == "all" else [args.targets]
    if args.nb is not None or args.ns is not None:
        s = manifest.sampling
        try:
            updates["sampling"] = SampleConfig(args.nb or s.n_batches, args.ns or s.n_per_batch, s.seed)
        except ValueError as exc:
            raise ManifestError(str(exc)) from None
    if args.input_box:
        base = manifest.attack or AttackConfig()
        updates["attack"] = replace(base, input_box=tuple(args.input_box))
    try:
        return replace(manifest, **updates)
    except ValueError as exc:
        raise ManifestError(str(exc)) from None


def attack_config(manifest: RunManifest) -> AttackConfig:
    """The manifest's attack settings, defaulting the input box from the model provenance."""
    cfg = manifest.attack or AttackConfig()
    if cfg.input_box is None:
        box = experiment.provenance_input_box(manifest.model_path)
        if box is not None:
            log.info("attack input box %s taken from model provenance", box)
            cfg = replace(cfg, input_box=box)
    return cfg


def _outdir(manifest: RunManifest) -> Path:
    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(out: Path, rows, manifest: RunManifest, stem: str = "results") -> None:
    (out / f"{stem}.csv").write_text(experiment.rows_to_csv(rows))
    (out / f"{stem}.json").write_text(experiment.rows_to_json(rows, manifest))


def _write_tsv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([experiment._fmt(v) for v in row])


def _write_dicts(path: Path, records: list[dict]) -> None:
    columns = []
    for rec in records:
        columns.extend(k for k in rec if k not in columns)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            writer.writerow([experiment._fmt(rec.get(c)) for c in columns])


def cmd_score(args) -> int:
    from .plotting import plot_scores

    manifest = build_manifest(args)
    if manifest.attack is not None:
        manifest = replace(manifest, attack=attack_config(manifest))
    net, data = experiment.load_inputs(manifest)
    rows = experiment.run_rows(manifest, net, data)
    out = _outdir(manifest)
    _write_rows(out, rows, manifest)
    triples = [(r.instance_id, f"clever[p={r.p},{r.target_kind}]", r.clever_value) for r in rows]
    _write_tsv(out / "plot_data.tsv", ["x", "series", "y"], triples)
    if not args.no_plots and rows:
        plot_scores(triples, out / "scores.png")
    log.info("wrote %d rows to %s", len(rows), out)
    return EXIT_NUMERIC if experiment.has_numeric_failure(rows) else EXIT_OK


def cmd_compare(args) -> int:
    from .plotting import plot_comparison

    manifest = build_manifest(args)
    manifest = replace(manifest, attack=attack_config(manifest), slope=True,
                       oracle=not args.no_oracle)
    net, data = experiment.load_inputs(manifest)
    rows = experiment.run_rows(manifest, net, data)
    out = _outdir(manifest)
    _write_rows(out, rows, manifest)
    summary = experiment.comparison_summary(rows)
    summary["manifest_hash"] = manifest.digest()
    summary["slope_pairing"] = "independent uniform pairs per batch"
    (out / "comparison.json").write_text(json.dumps(summary, indent=1))
    _write_dicts(out / "comparison.csv", summary["groups"])
    triples = experiment.plot_rows(rows)
    _write_tsv(out / "plot_data.tsv", ["x", "series", "y"], triples)
    if not args.no_plots and rows:
        plot_comparison(triples, out)
    fv = summary["fraction_valid"]
    print(f"fraction_valid={'no successful attacks' if fv is None else f'{fv:.4f}'} "
          f"violations={summary['violations']} successful_attacks={summary['successful_attacks']}")
    return EXIT_NUMERIC if experiment.has_numeric_failure(rows) else EXIT_OK


def cmd_sweep(args) -> int:
    from .plotting import plot_sweep

    manifest = build_manifest(args)
    nb_list = [int(v) for v in args.nb_list.split(",") if v]
    if not nb_list:
        raise ManifestError("--nb-list must name at least one value")
    net, data = experiment.load_inputs(manifest)
    table, timing = experiment.sweep_samples(manifest, net, data, nb_list)
    out = _outdir(manifest)
    _write_dicts(out / "sweep.csv", table)
    _write_dicts(out / "sweep_timing.csv", timing)
    (out / "sweep.json").write_text(json.dumps({"scores": table, "timing": timing,
                                                 "manifest_hash": manifest.digest()}, indent=1))
    if not args.no_plots and table:
        plot_sweep(table, nb_list, out / "sweep.png")
    return EXIT_OK


def cmd_fit_diagnostics(args) -> int:
    from .plotting import plot_fit_histograms

    manifest = build_manifest(args)
    net, data = experiment.load_inputs(manifest)
    rows = experiment.run_rows(manifest, net, data)
    out = _outdir(manifest)
    _write_rows(out, rows, manifest)
    summary = experiment.fit_percentage(rows)
    summary["manifest_hash"] = manifest.digest()
    cells = experiment.diagnostics_cells(manifest, net, data, args.hist_cells)
    hist_rows = []
    for k, cell in enumerate(cells):
        for v in cell["samples"]:
            hist_rows.append((k, "sample", float(v), ""))
    _write_tsv(out / "fit_histograms.tsv", ["cell", "kind", "x", "y"], hist_rows)
    summary["histogram_cells"] = [
        {"cell": k, "instance_id": c["instance_id"], "target_kind": c["target_kind"], "p": c["p"],
         "location": c["fit"].params.location, "scale": c["fit"].params.scale,
         "shape": c["fit"].params.shape, "ks_D": c["fit"].ks_statistic, "ks_pvalue": c["fit"].ks_pvalue}
        for k, c in enumerate(cells)
    ]
    (out / "fit_diagnostics.json").write_text(json.dumps(summary, indent=1))
    if not args.no_plots and cells:
        plot_fit_histograms(cells, out / "fit_histograms.png")
    pct = summary["percentage"]
    print(f"ks_pass_percentage={'n/a' if pct is None else f'{pct:.1f}'} cells={summary['cells']} "
          f"degenerate={summary['degenerate']}")
    return EXIT_OK


def cmd_attack(args) -> int:
    manifest = build_manifest(args)
    cfg = attack_config(manifest)
    net, data = experiment.load_inputs(manifest)
    records = []
    for i, label, c in experiment.select_instances(net, data, manifest.instances):
        unit = experiment.WorkUnit(net, data.features[i], i, label, c, manifest)
        for kind in manifest.targets:
            j = experiment._resolve_target(unit, kind)
            for method, fn in (("ifgsm", attacks.ifgsm_best_eps), ("margin_l2", attacks.margin_descent_l2)):
                o = fn(net, unit.x0, c, j, cfg)
                records.append({"instance_id": i, "target_kind": kind, "target_j": j, "method": method,
                                "success": o.success, "eps": o.eps, "lambda": o.lam,
                                "distortion_l2": o.distortion_l2, "distortion_linf": o.distortion_linf})
    out = _outdir(manifest)
    _write_dicts(out / "attacks.csv", records)
    return EXIT_OK


def cmd_oracle(args) -> int:
    manifest = build_manifest(args)
    net, data = experiment.load_inputs(manifest)
    try:
        oracle._one_hidden_relu(net)
    except oracle.UnsupportedArchitectureError as exc:
        raise ManifestError(str(exc)) from None
    records = []
    for i, label, c in experiment.select_instances(net, data, manifest.instances):
        unit = experiment.WorkUnit(net, data.features[i], i, label, c, manifest)
        for kind in manifest.targets:
            j = experiment._resolve_target(unit, kind)
            if j is None:
                continue
            for p in manifest.p_list:
                ball = Ball(unit.x0, manifest.ball_radius, p)
                exact = oracle.exact_local_cross_lipschitz(net, unit.x0, c, j, ball)
                dense = oracle.dense_sampling_lipschitz(net, unit.x0, c, j, ball, args.n_dense,
                                                        experiment.derive_seed(manifest.seed, i, 3, j))
                logits = forward(net, unit.x0)
                g0 = float(logits[c] - logits[j])
                records.append({
                    "instance_id": i, "target_kind": kind, "target_j": j, "p": p_label(p),
                    "exact_lipschitz": exact.value, "certified": exact.certified,
                    "dense_lipschitz": dense.value,
                    "certified_bound": theoretical_lower_bound(max(g0, 0.0), exact.value,
                                                                          manifest.ball_radius),
                    "region_bound_M": oracle.region_bound(net.input_dim, net.layers[0].out_dim),
                })
    out = _outdir(manifest)
    _write_dicts(out / "oracle.csv", records)
    return EXIT_OK


def cmd_build_fixtures(args) -> int:
    names = args.recipes or sorted(STANDARD_RECIPES)
    out = Path(args.out or "fixtures")
    for name in names:
        if name not in STANDARD_RECIPES:
            raise ManifestError(f"unknown recipe {name!r}; known: {sorted(STANDARD_RECIPES)}")
        _, prov = build_fixture(STANDARD_RECIPES[name], out)
        print(f"{name}: train_accuracy={prov['train_accuracy']:.4f} recipe_hash={prov['recipe_hash'][:12]}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cleverscore", description="CLEVER robustness scores and baselines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="compute CLEVER scores")
    _common(p)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compare", help="scores vs SLOPE, exact oracle and attacks")
    _common(p)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--no-oracle", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-samples", help="scores for several numbers of batches")
    _common(p)
    p.add_argument("--nb-list", default="50,100,250,500")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit-diagnostics", help="K-S goodness of fit summary")
    _common(p)
    p.add_argument("--hist-cells", type=int, default=3)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_fit_diagnostics)

    p = sub.add_parser("attack", help="run I-FGSM and the l2 margin attack")
    _common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("oracle", help="exact local Lipschitz constants (one hidden ReLU layer)")
    _common(p)
    p.add_argument("--n-dense", type=int, default=100_000)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("build-fixtures", help="train the standard fixture networks")
    p.add_argument("--out")
    p.add_argument("--recipes", nargs="*")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_build_fixtures)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FixtureBuildError as exc:
        print(f"fixture error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
