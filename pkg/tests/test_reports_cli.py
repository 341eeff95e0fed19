import csv
import subprocess
import sys

import numpy as np
import pytest

from sonobrain import reports
from sonobrain.metrics import MetricsReport
from sonobrain.volume import load_volume


def run_cli(*args, expect=0):
    proc = subprocess.run(
        [sys.executable, "-m", "sonobrain.cli", *[str(a) for a in args]],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == expect, (proc.returncode, proc.stdout, proc.stderr)
    return proc


def read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny end-to-end run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    out = root / "out"
    run_cli("--seed", 3, "--out", ds, "phantom-gen", "--count", 20,
            "--ga-min", 16, "--ga-max", 26, "--grid-size", 16, "--spacing", 7.0)
    run_cli("--seed", 3, "--out", out, "split", "--dataset", ds,
            "--folds", 2, "--train-size", 12, "--val-size", 4)
    run_cli("--seed", 3, "--out", out, "train", "--dataset", ds,
            "--splits", out / "splits.csv", "--fold", 0,
            "--n", 16, "--l", 2, "--k", 3, "--f", 4, "--max-steps", 150)
    run_cli("--seed", 3, "--out", out, "eval", "--dataset", ds,
            "--model", out / "model.nnck1", "--splits", out / "splits.csv",
            "--subset", "holdout")
    return ds, out


class TestPipelineOutputs:
    def test_eval_tables_exist_and_verify(self, pipeline):
        ds, out = pipeline
        header, rows = read_rows(out / "cases.csv")
        assert header[:2] == ["case_id", "ga_weeks"]
        assert len(rows) == 4  # holdout size
        run_cli("--out", out, "verify-tables")

    def test_summary_recomputable(self, pipeline):
        _, out = pipeline
        header, rows = read_rows(out / "cases.csv")
        agg_header, agg_rows = read_rows(out / "summary.csv")
        dscs = [float(r[header.index("dsc")]) for r in rows]
        assert agg_rows[0][agg_header.index("dsc_mean")] == repr(float(np.mean(dscs)))

    def test_sweep_pose_week_compare_heatmap(self, pipeline):
        ds, out = pipeline
        run_cli("--seed", 3, "--out", out, "sweep", "--dataset", ds,
                "--model", out / "model.nnck1", "--splits", out / "splits.csv",
                "--subset", "holdout")
        run_cli("--seed", 3, "--out", out, "pose-report", "--cases", out / "cases.csv")
        run_cli("--seed", 3, "--out", out, "week-report", "--cases", out / "cases.csv")
        run_cli("--seed", 3, "--out", out, "baseline-compare", "--dataset", ds,
                "--model", out / "model.nnck1", "--splits", out / "splits.csv",
                "--subset", "holdout")
        run_cli("--seed", 3, "--out", out, "heatmap", "--dataset", ds,
                "--model", out / "model.nnck1", "--splits", out / "splits.csv",
                "--subset", "holdout")
        for name in ("sweep.csv", "sweep_cases.csv", "pose.csv", "pose_scatter.csv",
                     "week.csv", "compare.csv", "compare_cases.csv"):
            assert (out / name).exists(), name
        pgms = list(out.glob("week*_fp_z.pgm"))
        vols = list(out.glob("week*_fp.volb1"))
        assert pgms and vols
        assert load_volume(vols[0]).data.dtype == np.float32
        assert pgms[0].read_bytes().startswith(b"P5\n")
        run_cli("--out", out, "verify-tables")

    def test_sweep_thresholds_ordered_rows(self, pipeline):
        _, out = pipeline
        header, rows = read_rows(out / "sweep.csv")
        assert [r[0] for r in rows] == ["0.0", "0.25", "0.5", "0.75", "1.0"]

    def test_predict_writes_volumes(self, pipeline):
        ds, out = pipeline
        pred_dir = out / "preds"
        run_cli("--seed", 3, "--out", pred_dir, "predict", "--dataset", ds,
                "--model", out / "model.nnck1", "--splits", out / "splits.csv",
                "--subset", "holdout", "--threshold", 0.5)
        probs = sorted(pred_dir.glob("*_prob.volb1"))
        preds = sorted(pred_dir.glob("*_pred.volb1"))
        assert len(probs) == 4 and len(preds) == 4
        p = load_volume(probs[0])
        assert p.data.min() >= 0.0 and p.data.max() <= 1.0


class TestDeterminism:
    def test_eval_byte_identical_across_runs(self, pipeline, tmp_path):
        ds, out = pipeline
        rerun = tmp_path / "rerun"
        run_cli("--seed", 3, "--jobs", 1, "--out", rerun, "eval", "--dataset", ds,
                "--model", out / "model.nnck1", "--splits", out / "splits.csv",
                "--subset", "holdout")
        assert (rerun / "cases.csv").read_bytes() == (out / "cases.csv").read_bytes()
        assert (rerun / "summary.csv").read_bytes() == (out / "summary.csv").read_bytes()

    def test_phantom_gen_byte_identical(self, pipeline, tmp_path):
        ds, _ = pipeline
        again = tmp_path / "ds2"
        run_cli("--seed", 3, "--out", again, "phantom-gen", "--count", 20,
                "--ga-min", 16, "--ga-max", 26, "--grid-size", 16, "--spacing", 7.0)
        a = (ds / "case_0007.volb1").read_bytes()
        b = (again / "case_0007.volb1").read_bytes()
        assert a == b
        assert (ds / "manifest.csv").read_bytes() == (again / "manifest.csv").read_bytes()


class TestExitCodes:
    def test_missing_dataset_is_config_error(self, tmp_path):
        run_cli("--out", tmp_path, "split", "--dataset", tmp_path / "nope",
                "--folds", 2, "--train-size", 1, "--val-size", 1, expect=1)

    def test_verify_missing_dir(self, tmp_path):
        run_cli("verify-tables", "--dir", tmp_path / "absent", expect=1)

    def test_verify_detects_tampering(self, pipeline, tmp_path):
        _, out = pipeline
        tampered = tmp_path / "tampered"
        tampered.mkdir()
        for name in ("cases.csv", "summary.csv"):
            (tampered / name).write_bytes((out / name).read_bytes())
        header, rows = read_rows(tampered / "summary.csv")
        rows[0][header.index("dsc_mean")] = "0.123"
        with open(tampered / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        proc = run_cli("verify-tables", "--dir", tampered, expect=2)
        assert "MISMATCH" in proc.stderr

    def test_insufficient_cases_is_config_error(self, pipeline):
        ds, out = pipeline
        run_cli("--out", out, "split", "--dataset", ds,
                "--folds", 2, "--train-size", 100, "--val-size", 100, expect=1)


class TestReportHelpers:
    def _reports(self):
        reps = []
        for i, (d, s) in enumerate([(0.9, 0.95), (0.8, 0.85), (0.7, 0.75)]):
            reps.append(
                MetricsReport(
                    case_id=f"c{i}",
                    ga_weeks=20.0 + i,
                    euler=(float(i), -float(i), 2.0 * i),
                    threshold=0.5,
                    ed_mm=0.5 * i,
                    hd_mm=2.0 * i,
                    dsc=d,
                    sc=s,
                )
            )
        return reps

    def test_aggregate_rows_counts_and_values(self):
        header, rows = reports.case_table(self._reports())
        agg_header, agg_rows = reports.aggregate_rows(
            header, rows, reports.threshold_key(header), ["threshold"]
        )
        assert agg_rows[0][agg_header.index("n")] == "3"
        assert agg_rows[0][agg_header.index("dsc_mean")] == repr(float(np.mean([0.9, 0.8, 0.7])))
        assert agg_rows[0][agg_header.index("ed_std")] == repr(float(np.std([0.0, 0.5, 1.0], ddof=1)))

    def test_pose_table_constant_dsc_is_na(self):
        reps = self._reports()
        for r in reps:
            r.dsc = 0.9
        header, rows = reports.case_table(reps)
        scatter_header = ["case_id", "alpha", "beta", "gamma", "dsc"]
        scatter_rows = [
            [r[header.index(c)] for c in scatter_header] for r in rows
        ]
        _, pose_rows = reports.pose_table(scatter_header, scatter_rows)
        assert all(row[1] == "n/a" for row in pose_rows)

    def test_fmt_round_trips(self):
        for v in (0.1, 1 / 3, 1e-17, 123456.789):
            assert float(reports.fmt(v)) == v
