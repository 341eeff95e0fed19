"""Command-line interface.

Subcommands: phantom-gen, split, train, predict, eval, crossval, sweep,
pose-report, week-report, heatmap, baseline-compare, verify-tables.
Global flags: --seed, --jobs, --out.  Exit codes: 0 success, 2 validation
failure, 1 IO/config error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import reports
from .errors import SonobrainError
from .harness import (
    DEFAULT_THRESHOLDS,
    ExperimentConfig,
    FoldSplit,
    _load_case,
    compare_baseline,
    crossval_grid,
    evaluate,
    evaluate_sweep,
    load_manifest,
    load_split,
    make_dataset,
    predict_probability,
    save_split,
    split_folds,
    train,
)
from .metrics import threshold_mask
from .network import NetworkSpec, load_checkpoint, save_checkpoint
from .volume import Grid, save_volume

RUN_CONVENTIONS = """\
conventions:
  euler angles: intrinsic Z-Y-X, degrees; beta in [-90, 90]
  hausdorff: symmetric, surface voxels (face-connectivity), mm
  dice: both-empty = 1.0, single-empty = 0.0
  symmetry: right half mirrored onto left in canonical pose; odd mid-slab excluded
  training: batch size 1 unless stated, Adam lr 1e-3, soft Dice loss,
            validation every 50 steps, early stop after 1 stale round
  preprocessing: min-max intensity normalization, trilinear resample to n^3
  aggregates: mean and sample std (ddof=1); counts disclosed per metric
"""


def _write_run_info(out: Path, command: str, detail: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_info.txt").write_text(f"command: {command}\n{detail}{RUN_CONVENTIONS}")


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Master RNG seed.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Worker count; 1 = fully reproducible.")
@click.option("--out", type=str, default="out", show_default=True, help="Output directory.")
@click.pass_context
def main(ctx, seed, jobs, out):
    """Volumetric brain-extraction experiments on synthetic phantoms."""
    ctx.obj = {"seed": seed, "jobs": max(1, jobs), "out": Path(out)}


def _records(dataset: str):
    return load_manifest(Path(dataset) / "manifest.csv")


def _resolve_ids(records, splits: str | None, subset: str, fold: int) -> list[str]:
    if subset == "all" or splits is None:
        return [r.case_id for r in records]
    split = load_split(Path(splits))
    if subset == "holdout":
        return split.holdout
    if subset in ("train", "val"):
        if fold >= len(split.folds):
            raise ValueError(f"fold {fold} out of range ({len(split.folds)} folds)")
        return split.folds[fold][0 if subset == "train" else 1]
    raise ValueError(f"unknown subset {subset!r}")


def _parse_spec(text: str) -> tuple[str, NetworkSpec]:
    label, _, quad = text.rpartition("=")
    parts = [int(v) for v in quad.split(",")]
    if len(parts) != 4:
        raise ValueError(f"spec must be [label=]n,l,k,f, got {text!r}")
    spec = NetworkSpec(*parts)
    return (label or f"n{spec.n}l{spec.l}k{spec.k}f{spec.f}", spec)


_dataset_opt = click.option("--dataset", type=str, required=True, help="Dataset directory with manifest.csv.")
_model_opt = click.option("--model", type=str, required=True, help="Checkpoint file (NNCK1).")
_splits_opt = click.option("--splits", type=str, default=None, help="Split file from the split command.")
_subset_opt = click.option(
    "--subset",
    type=click.Choice(["all", "holdout", "train", "val"]),
    default="all",
    show_default=True,
)
_fold_opt = click.option("--fold", type=int, default=0, show_default=True)
_threshold_opt = click.option("--threshold", type=float, default=0.5, show_default=True)


@main.command("phantom-gen")
@click.option("--count", type=int, required=True)
@click.option("--ga-min", type=int, default=14, show_default=True)
@click.option("--ga-max", type=int, default=30, show_default=True)
@click.option("--grid-size", type=int, default=32, show_default=True)
@click.option("--spacing", type=float, default=4.0, show_default=True)
@click.option("--noise", type=float, default=0.5, show_default=True)
@click.option("--occlusion", type=float, default=0.5, show_default=True)
@click.option("--max-rotation", type=float, default=60.0, show_default=True)
@click.option("--max-translation", type=float, default=4.0, show_default=True)
@click.option("--scale-min", type=float, default=0.9, show_default=True)
@click.option("--scale-max", type=float, default=1.1, show_default=True)
@click.pass_obj
def phantom_gen(obj, count, ga_min, ga_max, grid_size, spacing, noise, occlusion,
                max_rotation, max_translation, scale_min, scale_max):
    """Generate a phantom dataset with ground-truth masks and pose records."""
    out = obj["out"]
    try:
        records = make_dataset(
            count,
            (ga_min, ga_max),
            out,
            seed=obj["seed"],
            grid=Grid((grid_size,) * 3, (spacing,) * 3),
            noise_level=noise,
            occlusion_strength=occlusion,
            max_rotation_deg=max_rotation,
            max_translation_mm=max_translation,
            scale_range=(scale_min, scale_max),
            jobs=obj["jobs"],
        )
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "phantom-gen", f"count: {count}\nseed: {obj['seed']}\n")
    click.echo(f"wrote {len(records)} cases to {out}")


@main.command("split")
@_dataset_opt
@click.option("--folds", type=int, default=3, show_default=True)
@click.option("--train-size", type=int, required=True)
@click.option("--val-size", type=int, required=True)
@click.pass_obj
def split_cmd(obj, dataset, folds, train_size, val_size):
    """Partition a dataset into seeded train/val folds plus a hold-out set."""
    out = obj["out"]
    try:
        records = _records(dataset)
        split = split_folds(records, folds, train_size, val_size, seed=obj["seed"])
        out.mkdir(parents=True, exist_ok=True)
        save_split(split, out / "splits.csv")
        header = ["t", "p", "df", "n_holdout", "n_pool"]
        if split.age_ttest is not None:
            row = [
                reports.fmt(split.age_ttest.t),
                reports.fmt(split.age_ttest.p),
                reports.fmt(split.age_ttest.df),
                str(len(split.holdout)),
                str(train_size + val_size),
            ]
        else:
            row = ["", "", "", str(len(split.holdout)), str(train_size + val_size)]
        reports.write_csv(out / "split_stats.csv", header, [row])
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "split")
    if split.age_ttest is not None:
        click.echo(
            f"holdout vs training pool age t-test: t={split.age_ttest.t:.3f} "
            f"p={split.age_ttest.p:.3f}"
        )
    click.echo(f"wrote {out / 'splits.csv'}")


@main.command("train")
@_dataset_opt
@_splits_opt
@_fold_opt
@click.option("--n", type=int, default=32, show_default=True)
@click.option("--l", type=int, default=3, show_default=True)
@click.option("--k", type=int, default=3, show_default=True)
@click.option("--f", type=int, default=4, show_default=True)
@click.option("--train-size", type=int, default=120, show_default=True)
@click.option("--val-size", type=int, default=30, show_default=True)
@click.option("--max-steps", type=int, default=800, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--batch-size", type=int, default=1, show_default=True)
@click.option("--val-every", type=int, default=50, show_default=True)
@click.option("--patience", type=int, default=1, show_default=True)
@click.pass_obj
def train_cmd(obj, dataset, splits, fold, n, l, k, f, train_size, val_size,
              max_steps, lr, batch_size, val_every, patience):
    """Train a network and save the best-validation checkpoint."""
    out = obj["out"]
    try:
        records = _records(dataset)
        spec = NetworkSpec(n=n, l=l, k=k, f=f)
        if splits is not None:
            fs = load_split(Path(splits))
            if fold >= len(fs.folds):
                raise ValueError(f"fold {fold} out of range")
            train_ids, val_ids = fs.folds[fold]
        else:
            fs = split_folds(records, 2, train_size, val_size, seed=obj["seed"])
            train_ids, val_ids = fs.folds[0]
        config = ExperimentConfig(
            dataset_dir=Path(dataset),
            out_dir=out,
            spec=spec,
            max_steps=max_steps,
            batch_size=batch_size,
            seed=obj["seed"],
            lr=lr,
            val_every=val_every,
            patience=patience,
        )
        result = train(config, records, list(train_ids), list(val_ids))
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.network, out / "model.nnck1")
        reports.write_csv(
            out / "loss_curve.csv",
            ["step", "dice_loss"],
            [[str(s), reports.fmt(v)] for s, v in result.loss_curve],
        )
        reports.write_csv(
            out / "val_curve.csv",
            ["step", "val_dsc"],
            [[str(s), reports.fmt(v)] for s, v in result.val_curve],
        )
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "train", f"spec: n={n} l={l} k={k} f={f}\nseed: {obj['seed']}\n")
    click.echo(
        f"trained {result.network.step} steps, best val DSC "
        f"{result.best_val_dsc:.4f}; saved {out / 'model.nnck1'}"
    )


@main.command("predict")
@_dataset_opt
@_model_opt
@_splits_opt
@_subset_opt
@_fold_opt
@click.option("--threshold", type=float, default=None, help="Also write binary masks at this threshold.")
@click.pass_obj
def predict_cmd(obj, dataset, model, splits, subset, fold, threshold):
    """Write probability volumes (and optional masks) for dataset cases."""
    out = obj["out"]
    try:
        records = _records(dataset)
        ids = _resolve_ids(records, splits, subset, fold)
        net = load_checkpoint(model)
        by_id = {r.case_id: r for r in records}
        out.mkdir(parents=True, exist_ok=True)
        for cid in ids:
            vol, _ = _load_case(Path(dataset), by_id[cid])
            prob = predict_probability(net, vol)
            save_volume(prob, out / f"{cid}_prob.volb1")
            if threshold is not None:
                save_volume(threshold_mask(prob, threshold), out / f"{cid}_pred.volb1")
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "predict")
    click.echo(f"wrote predictions for {len(ids)} cases to {out}")


def _eval_common(obj, dataset, model, splits, subset, fold):
    records = _records(dataset)
    ids = _resolve_ids(records, splits, subset, fold)
    net = load_checkpoint(model)
    config = ExperimentConfig(dataset_dir=Path(dataset), out_dir=obj["out"], spec=net.spec)
    return records, ids, net, config


@main.command("eval")
@_dataset_opt
@_model_opt
@_splits_opt
@_subset_opt
@_fold_opt
@_threshold_opt
@click.pass_obj
def eval_cmd(obj, dataset, model, splits, subset, fold, threshold):
    """Evaluate a checkpoint: per-case metrics plus aggregate summary."""
    out = obj["out"]
    try:
        records, ids, net, config = _eval_common(obj, dataset, model, splits, subset, fold)
        result = evaluate(net, config, records, ids, threshold, jobs=obj["jobs"])
        header, rows = reports.case_table(result.cases)
        out.mkdir(parents=True, exist_ok=True)
        reports.write_csv(out / "cases.csv", header, rows)
        agg_header, agg_rows = reports.aggregate_rows(
            header, rows, reports.threshold_key(header), ["threshold"]
        )
        reports.write_csv(out / "summary.csv", agg_header, agg_rows)
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "eval", f"threshold: {threshold}\nsubset: {subset}\n")
    agg = result.aggregate()
    click.echo(
        f"{len(result.cases)} cases: ED {agg['ed_mm'][0]} HD {agg['hd_mm'][0]} "
        f"DSC {agg['dsc'][0]} SC {agg['sc'][0]}"
    )


@main.command("crossval")
@_dataset_opt
@click.option("--specs", type=str, required=True,
              help="Semicolon-separated [label=]n,l,k,f entries.")
@click.option("--folds", type=int, default=3, show_default=True)
@click.option("--train-size", type=int, required=True)
@click.option("--val-size", type=int, required=True)
@click.option("--max-steps", type=int, default=300, show_default=True)
@_threshold_opt
@click.pass_obj
def crossval_cmd(obj, dataset, specs, folds, train_size, val_size, max_steps, threshold):
    """Cross-validate a grid of network specs and rank them."""
    out = obj["out"]
    try:
        records = _records(dataset)
        grid = [_parse_spec(s) for s in specs.split(";") if s.strip()]
        split = split_folds(records, folds, train_size, val_size, seed=obj["seed"])
        config = ExperimentConfig(
            dataset_dir=Path(dataset),
            out_dir=out,
            folds=folds,
            train_size=train_size,
            val_size=val_size,
            max_steps=max_steps,
            seed=obj["seed"],
        )
        ranked = crossval_grid(grid, config, records, split, threshold)
        out.mkdir(parents=True, exist_ok=True)
        labels, foldcol, all_reports = [], [], []
        for label, _, _, fold_results in ranked:
            for fi, fr in enumerate(fold_results):
                for rep in fr.cases:
                    labels.append(label)
                    foldcol.append(str(fi))
                    all_reports.append(rep)
        header, rows = reports.case_table(
            all_reports, prefix={"label": labels, "fold": foldcol}
        )
        reports.write_csv(out / "crossval_cases.csv", header, rows)
        agg_header, agg_rows = reports.crossval_table(ranked)
        reports.write_csv(out / "crossval.csv", agg_header, agg_rows)
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "crossval", f"specs: {specs}\nfolds: {folds}\n")
    click.echo(f"ranked {len(ranked)} specs; best: {ranked[0][0]}")


@main.command("sweep")
@_dataset_opt
@_model_opt
@_splits_opt
@_subset_opt
@_fold_opt
@click.option("--thresholds", type=str, default="0,0.25,0.5,0.75,1", show_default=True)
@click.pass_obj
def sweep_cmd(obj, dataset, model, splits, subset, fold, thresholds):
    """Evaluate one checkpoint across prediction thresholds."""
    out = obj["out"]
    try:
        tvals = tuple(float(v) for v in thresholds.split(","))
        records, ids, net, config = _eval_common(obj, dataset, model, splits, subset, fold)
        results = evaluate_sweep(net, config, records, ids, tvals)
        all_reports = []
        for t in tvals:
            all_reports.extend(results[t].cases)
        header, rows = reports.case_table(all_reports)
        out.mkdir(parents=True, exist_ok=True)
        reports.write_csv(out / "sweep_cases.csv", header, rows)
        agg_header, agg_rows = reports.aggregate_rows(
            header,
            rows,
            reports.threshold_key(header),
            ["threshold"],
            group_order=[(reports.fmt(t),) for t in tvals],
        )
        reports.write_csv(out / "sweep.csv", agg_header, agg_rows)
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "sweep", f"thresholds: {thresholds}\n")
    click.echo(f"swept {len(tvals)} thresholds over {len(ids)} cases")


@main.command("pose-report")
@click.option("--cases", type=str, required=True, help="Per-case CSV from eval.")
@click.pass_obj
def pose_report_cmd(obj, cases):
    """Correlate Euler angles with DSC (plus scatter data)."""
    out = obj["out"]
    try:
        header, rows = reports.read_csv(Path(cases))
        cols = {c: header.index(c) for c in ("case_id", "alpha", "beta", "gamma", "dsc")}
        scatter_rows = [
            [r[cols["case_id"]], r[cols["alpha"]], r[cols["beta"]], r[cols["gamma"]], r[cols["dsc"]]]
            for r in rows
        ]
        scatter_header = ["case_id", "alpha", "beta", "gamma", "dsc"]
        pose_header, pose_rows = reports.pose_table(scatter_header, scatter_rows)
        out.mkdir(parents=True, exist_ok=True)
        reports.write_csv(out / "pose_scatter.csv", scatter_header, scatter_rows)
        reports.write_csv(out / "pose.csv", pose_header, pose_rows)
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "pose-report")
    for row in pose_rows:
        click.echo(f"r_{row[0]} = {row[1]}")


@main.command("week-report")
@click.option("--cases", type=str, required=True, help="Per-case CSV from eval.")
@click.pass_obj
def week_report_cmd(obj, cases):
    """Aggregate metrics per integer gestational week."""
    out = obj["out"]
    try:
        header, rows = reports.read_csv(Path(cases))
        weeks = sorted({int(float(r[header.index("ga_weeks")])) for r in rows})
        agg_header, agg_rows = reports.aggregate_rows(
            header,
            rows,
            reports.week_key(header),
            ["week"],
            group_order=[(str(w),) for w in weeks],
        )
        out.mkdir(parents=True, exist_ok=True)
        reports.write_csv(out / "week.csv", agg_header, agg_rows)
        if (Path(cases).resolve()) != (out / "cases.csv").resolve():
            import shutil

            shutil.copyfile(cases, out / "cases.csv")
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "week-report")
    click.echo(f"wrote per-week table for {len(agg_rows)} weeks")


@main.command("heatmap")
@_dataset_opt
@_model_opt
@_splits_opt
@_subset_opt
@_fold_opt
@_threshold_opt
@click.pass_obj
def heatmap_cmd(obj, dataset, model, splits, subset, fold, threshold):
    """Export per-week false-positive / false-negative rate maps."""
    out = obj["out"]
    try:
        records, ids, net, config = _eval_common(obj, dataset, model, splits, subset, fold)
        by_id = {r.case_id: r for r in records}
        grouped: dict[int, list] = {}
        for cid in ids:
            record = by_id[cid]
            vol, truth = _load_case(Path(dataset), record)
            pred = threshold_mask(predict_probability(net, vol), threshold)
            grouped.setdefault(int(record.ga_weeks), []).append(
                (pred, truth, record.pose)
            )
        written = reports.write_heatmaps(grouped, out)
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "heatmap", f"threshold: {threshold}\n")
    click.echo(f"wrote {len(written)} heatmap files to {out}")


@main.command("baseline-compare")
@_dataset_opt
@_model_opt
@_splits_opt
@_subset_opt
@_fold_opt
@_threshold_opt
@click.pass_obj
def baseline_compare_cmd(obj, dataset, model, splits, subset, fold, threshold):
    """Compare the network against the ellipsoid pipeline on the same cases."""
    out = obj["out"]
    try:
        records, ids, net, config = _eval_common(obj, dataset, model, splits, subset, fold)
        results = compare_baseline(net, config, records, ids, threshold)
        methods, all_reports = [], []
        for method in ("network", "ellipsoid"):
            for rep in results[method].cases:
                methods.append(method)
                all_reports.append(rep)
        header, rows = reports.case_table(all_reports, prefix={"method": methods})
        out.mkdir(parents=True, exist_ok=True)
        reports.write_csv(out / "compare_cases.csv", header, rows)
        agg_header, agg_rows = reports.aggregate_rows(
            header,
            rows,
            lambda row: (row[0],),
            ["method"],
            group_order=[("network",), ("ellipsoid",)],
        )
        reports.write_csv(out / "compare.csv", agg_header, agg_rows)
    except (SonobrainError, ValueError, OSError) as exc:
        _fail(str(exc), 1)
    _write_run_info(out, "baseline-compare", f"threshold: {threshold}\n")
    for row in agg_rows:
        click.echo(f"{row[0]}: DSC {row[8]} SC {row[10]}")


@main.command("verify-tables")
@click.option("--dir", "directory", type=str, default=None,
              help="Directory holding the report tables (default: --out).")
@click.pass_obj
def verify_tables_cmd(obj, directory):
    """Check that every aggregate table matches its per-case source."""
    target = Path(directory) if directory else obj["out"]
    if not target.exists():
        _fail(f"no such directory: {target}", 1)
    problems = reports.verify_tables(target)
    if problems:
        for p in problems:
            click.echo(f"MISMATCH {p}", err=True)
        sys.exit(2)
    click.echo(f"all tables in {target} verified")


if __name__ == "__main__":
    main()
