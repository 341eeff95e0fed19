"""CSV report tables, heatmap export, and aggregate verification.

Every aggregate table is computed from the *formatted* per-case rows, so
``verify_tables`` can re-parse the per-case CSV, redo the aggregation, and
demand exact string equality.  Floats are serialized with ``repr``, which
round-trips float64 exactly.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ConstantSeriesError, IoFailureError
from .metrics import CSV_HEADER, MetricsReport, aggregate_fpfn, pearson_r, write_pgm
from .network import NetworkSpec, param_count
from .volume import save_volume

METRIC_NAMES = ("ed", "hd", "dsc", "sc")
AGG_SUFFIX = [
    "n",
    "ed_n",
    "ed_mean",
    "ed_std",
    "hd_n",
    "hd_mean",
    "hd_std",
    "dsc_mean",
    "dsc_std",
    "sc_mean",
    "sc_std",
]


def fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise IoFailureError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def case_table(reports: list[MetricsReport], prefix: dict[str, list[str]] | None = None):
    """Per-case rows; ``prefix`` maps extra leading column names to values
    aligned with the reports (e.g. crossval's spec label and fold)."""
    prefix = prefix or {}
    header = list(prefix.keys()) + CSV_HEADER
    rows = []
    for i, rep in enumerate(reports):
        rows.append([prefix[k][i] for k in prefix] + rep.csv_row())
    return header, rows


def _mean_std_cells(values: list[float]) -> tuple[str, str, str]:
    if not values:
        return "0", "", ""
    arr = np.asarray(values, dtype=np.float64)
    std = arr.std(ddof=1) if arr.size >= 2 else 0.0
    return str(arr.size), repr(float(arr.mean())), repr(float(std))


def aggregate_rows(
    case_header: list[str],
    case_rows: list[list[str]],
    key_fn,
    key_header: list[str],
    group_order: list[tuple] | None = None,
) -> tuple[list[str], list[list[str]]]:
    """Group formatted case rows and emit mean/std/count per metric.

    ``key_fn(row) -> tuple of display strings``; distance cells that are
    blank (empty predictions) are skipped and disclosed via the per-metric
    count columns.
    """
    idx = {name: case_header.index(col) for name, col in
           zip(METRIC_NAMES, ("ed_mm", "hd_mm", "dsc", "sc"))}
    groups: dict[tuple, list[list[str]]] = {}
    for row in case_rows:
        groups.setdefault(key_fn(row), []).append(row)
    order = group_order if group_order is not None else sorted(groups)
    out = []
    for key in order:
        rows = groups.get(key, [])
        if not rows:
            continue
        cells = list(key) + [str(len(rows))]
        for name in ("ed", "hd"):
            vals = [float(r[idx[name]]) for r in rows if r[idx[name]] != ""]
            n, mean, std = _mean_std_cells(vals)
            cells.extend([n, mean, std])
        for name in ("dsc", "sc"):
            vals = [float(r[idx[name]]) for r in rows if r[idx[name]] != ""]
            _, mean, std = _mean_std_cells(vals)
            cells.extend([mean, std])
        out.append(cells)
    return key_header + AGG_SUFFIX, out


def threshold_key(case_header: list[str]):
    t_idx = case_header.index("threshold")
    return lambda row: (row[t_idx],)


def week_key(case_header: list[str]):
    ga_idx = case_header.index("ga_weeks")
    return lambda row: (str(int(float(row[ga_idx]))),)


def pose_table(case_header: list[str], case_rows: list[list[str]]):
    """Pearson r of each Euler angle against DSC; 'n/a' when DSC variance
    is zero.  Returns (header, rows) plus the scatter table passthrough."""
    cols = {c: case_header.index(c) for c in ("alpha", "beta", "gamma", "dsc")}
    dsc_vals = [float(r[cols["dsc"]]) for r in case_rows]
    out_rows = []
    for angle in ("alpha", "beta", "gamma"):
        avals = [float(r[cols[angle]]) for r in case_rows]
        try:
            r = fmt(pearson_r(avals, dsc_vals))
        except ConstantSeriesError:
            r = "n/a"
        out_rows.append([angle, r, str(len(case_rows))])
    return ["angle", "pearson_r", "n"], out_rows


def scatter_table(reports: list[MetricsReport]):
    header = ["case_id", "alpha", "beta", "gamma", "dsc"]
    rows = [
        [r.case_id, fmt(r.euler[0]), fmt(r.euler[1]), fmt(r.euler[2]), fmt(r.dsc)]
        for r in reports
    ]
    return header, rows


def crossval_table(ranked_rows) -> tuple[list[str], list[list[str]]]:
    """Table rows for ranked (label, spec, pooled, per-fold) entries."""
    header = ["label", "n", "l", "k", "f", "params"] + AGG_SUFFIX
    out = []
    for label, spec, pooled, _ in ranked_rows:
        agg = pooled.aggregate()
        cells = [
            label,
            str(spec.n),
            str(spec.l),
            str(spec.k),
            str(spec.f),
            str(param_count(spec)),
            str(len(pooled.cases)),
        ]
        for name in ("ed_mm", "hd_mm"):
            mean, std, n = agg[name]
            cells.extend([str(n), fmt(mean), fmt(std)])
        for name in ("dsc", "sc"):
            mean, std, n = agg[name]
            cells.extend([fmt(mean), fmt(std)])
        out.append(cells)
    return header, out


def write_heatmaps(grouped_cases: dict[int, list], outdir: Path) -> list[Path]:
    """Per-week FP/FN rate volumes (VOLB1) and mid-plane slices (PGM P5).

    ``grouped_cases`` maps integer week to (pred, truth, align) triples.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for week in sorted(grouped_cases):
        fpfn = aggregate_fpfn(grouped_cases[week])
        for tag, vol in (("fp", fpfn.fp), ("fn", fpfn.fn)):
            vol_path = outdir / f"week{week:02d}_{tag}.volb1"
            save_volume(vol, vol_path)
            written.append(vol_path)
            d, h, w = vol.dims
            slices = {
                "z": vol.data[d // 2],
                "y": vol.data[:, h // 2],
                "x": vol.data[:, :, w // 2],
            }
            for plane, img in slices.items():
                pgm_path = outdir / f"week{week:02d}_{tag}_{plane}.pgm"
                write_pgm(pgm_path, img)
                written.append(pgm_path)
    return written


# ---------------------------------------------------------------------------
# verification


def _recompute_and_compare(
    agg_path: Path,
    case_path: Path,
    key_fn_builder,
    key_width: int,
) -> list[str]:
    problems = []
    agg_header, agg_rows = read_csv(agg_path)
    case_header, case_rows = read_csv(case_path)
    key_fn = key_fn_builder(case_header)
    order = [tuple(r[:key_width]) for r in agg_rows]
    _, expected = aggregate_rows(
        case_header, case_rows, key_fn, agg_header[:key_width], group_order=order
    )
    if len(expected) != len(agg_rows):
        problems.append(f"{agg_path.name}: {len(agg_rows)} rows, recomputed {len(expected)}")
        return problems
    for got, want in zip(agg_rows, expected):
        if got[key_width:] != want[key_width:]:
            problems.append(
                f"{agg_path.name}: row {got[:key_width]} does not match recomputation"
            )
    return problems


def verify_tables(out_dir: Path) -> list[str]:
    """Recompute every aggregate table in ``out_dir`` from its per-case CSV;
    returns a list of mismatch descriptions (empty = all verified)."""
    out_dir = Path(out_dir)
    problems: list[str] = []
    pairs = [
        ("summary.csv", "cases.csv", threshold_key, 1),
        ("sweep.csv", "sweep_cases.csv", threshold_key, 1),
        ("week.csv", "cases.csv", week_key, 1),
        (
            "compare.csv",
            "compare_cases.csv",
            lambda header: (lambda row: (row[header.index("method")],)),
            1,
        ),
    ]
    for agg_name, case_name, key_builder, width in pairs:
        agg_path = out_dir / agg_name
        case_path = out_dir / case_name
        if agg_path.exists() and case_path.exists():
            problems.extend(_recompute_and_compare(agg_path, case_path, key_builder, width))
        elif agg_path.exists():
            problems.append(f"{agg_name}: per-case file {case_name} is missing")

    cv_path = out_dir / "crossval.csv"
    cv_cases = out_dir / "crossval_cases.csv"
    if cv_path.exists() and cv_cases.exists():
        agg_header, agg_rows = read_csv(cv_path)
        case_header, case_rows = read_csv(cv_cases)
        label_idx = case_header.index("label")
        order = [(r[0],) for r in agg_rows]
        _, expected = aggregate_rows(
            case_header,
            case_rows,
            lambda row: (row[label_idx],),
            ["label"],
            group_order=order,
        )
        for got, want in zip(agg_rows, expected):
            if got[6:] != want[1:]:
                problems.append(f"crossval.csv: row {got[0]} does not match recomputation")
            try:
                spec = NetworkSpec(int(got[1]), int(got[2]), int(got[3]), int(got[4]))
                if int(got[5]) != param_count(spec):
                    problems.append(f"crossval.csv: row {got[0]} param count mismatch")
            except Exception:
                problems.append(f"crossval.csv: row {got[0]} has an invalid spec")
    elif cv_path.exists():
        problems.append("crossval.csv: per-case file crossval_cases.csv is missing")

    pose_path = out_dir / "pose.csv"
    scatter_path = out_dir / "pose_scatter.csv"
    if pose_path.exists() and scatter_path.exists():
        _, pose_rows = read_csv(pose_path)
        sc_header, sc_rows = read_csv(scatter_path)
        _, expected_rows = pose_table(sc_header, sc_rows)
        if pose_rows != expected_rows:
            problems.append("pose.csv: correlations do not match recomputation")
    elif pose_path.exists():
        problems.append("pose.csv: per-case file pose_scatter.csv is missing")

    return problems
