"""Experiment orchestration: dataset generation, fold splits, training,
and per-case evaluation.

Conventions fixed here (and stamped into report headers): batch size 1,
validation every 50 steps with an early-stopping patience of one
validation round, inputs min-max normalized, and scans resampled from
their native grid to the network's n^3 input by trilinear interpolation
(identity at desk scale, where phantoms are generated at n^3 directly).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import InsufficientCasesError, IoFailureError, ShapeMismatchError
from .metrics import (
    MetricsReport,
    SymmetryResult,
    WelchResult,
    dsc,
    centroid_ed,
    hausdorff,
    symmetry_coefficient,
    threshold_mask,
    welch_t,
)
from .network import Network, NetworkSpec, build_network, save_checkpoint
from .phantom import PhantomSpec, generate_phantom, sample_pose
from .transforms import SimilarityTransform
from .volume import Grid, Mask, Volume, load_mask, load_volume, normalize_intensity, resample_isotropic, save_volume

DEFAULT_THRESHOLDS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class ExperimentConfig:
    """Knobs for one training/evaluation run."""

    dataset_dir: Path
    out_dir: Path
    spec: NetworkSpec = NetworkSpec(32, 3, 3, 4)
    folds: int = 3
    train_size: int = 120
    val_size: int = 30
    test_size: int = 50
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    max_steps: int = 800
    batch_size: int = 1
    seed: int = 0
    lr: float = 1e-3
    val_every: int = 50
    patience: int = 1

    def __post_init__(self) -> None:
        self.dataset_dir = Path(self.dataset_dir)
        self.out_dir = Path(self.out_dir)
        if any(not (0.0 <= t <= 1.0) for t in self.thresholds):
            raise ValueError(f"thresholds must lie in [0, 1], got {self.thresholds}")
        if self.folds < 2:
            raise ValueError("cross-validation needs folds >= 2")
        if min(self.train_size, self.val_size, self.test_size) < 0:
            raise ValueError("sizes must be nonnegative")
        if self.max_steps < 1 or self.batch_size < 1:
            raise ValueError("max_steps and batch_size must be positive")


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class CaseRecord:
    """One dataset case: identity, age, pose, artifact knobs, file paths."""

    case_id: str
    ga_weeks: float
    euler: tuple[float, float, float]
    scale: float
    translation: tuple[float, float, float]
    noise_level: float
    occlusion_strength: float
    seed: int
    volume_path: str
    mask_path: str

    @property
    def pose(self) -> SimilarityTransform:
        return SimilarityTransform(
            euler=self.euler, scale=self.scale, translation=self.translation
        )


MANIFEST_HEADER = [
    "case_id",
    "ga_weeks",
    "alpha",
    "beta",
    "gamma",
    "scale",
    "tx",
    "ty",
    "tz",
    "noise_level",
    "occlusion_strength",
    "seed",
    "volume",
    "mask",
]


def save_manifest(records: list[CaseRecord], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.case_id,
                    repr(r.ga_weeks),
                    repr(r.euler[0]),
                    repr(r.euler[1]),
                    repr(r.euler[2]),
                    repr(r.scale),
                    repr(r.translation[0]),
                    repr(r.translation[1]),
                    repr(r.translation[2]),
                    repr(r.noise_level),
                    repr(r.occlusion_strength),
                    str(r.seed),
                    r.volume_path,
                    r.mask_path,
                ]
            )


def load_manifest(path: Path) -> list[CaseRecord]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailureError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or rows[0] != MANIFEST_HEADER:
        raise IoFailureError(f"{path}: not a dataset manifest")
    records = []
    for row in rows[1:]:
        records.append(
            CaseRecord(
                case_id=row[0],
                ga_weeks=float(row[1]),
                euler=(float(row[2]), float(row[3]), float(row[4])),
                scale=float(row[5]),
                translation=(float(row[6]), float(row[7]), float(row[8])),
                noise_level=float(row[9]),
                occlusion_strength=float(row[10]),
                seed=int(row[11]),
                volume_path=row[12],
                mask_path=row[13],
            )
        )
    return records


def write_pose_record(record: CaseRecord, path: Path) -> None:
    """Flat key=value sidecar mirroring the manifest row."""
    a, b, g = record.euler
    tx, ty, tz = record.translation
    text = (
        f"ga_weeks={record.ga_weeks!r}\n"
        f"euler={a!r},{b!r},{g!r}\n"
        f"scale={record.scale!r}\n"
        f"translation={tx!r},{ty!r},{tz!r}\n"
        f"noise_level={record.noise_level!r}\n"
        f"occlusion_strength={record.occlusion_strength!r}\n"
        f"seed={record.seed}\n"
    )
    Path(path).write_text(text)


def read_pose_record(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def make_dataset(
    count: int,
    ga_range: tuple[int, int],
    outdir: Path,
    seed: int = 0,
    grid: Grid = Grid((32, 32, 32), (4.0, 4.0, 4.0)),
    noise_level: float = 0.5,
    occlusion_strength: float = 0.5,
    max_rotation_deg: float = 60.0,
    max_translation_mm: float = 4.0,
    scale_range: tuple[float, float] = (0.9, 1.1),
    jobs: int = 1,
) -> list[CaseRecord]:
    """Generate ``count`` phantom cases, cycling integer gestational weeks
    uniformly over ``ga_range``; writes volumes, masks, pose sidecars, and
    manifest.csv into ``outdir``.  Bit-reproducible for a fixed seed."""
    if count < 1:
        raise ValueError("count must be positive")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lo, hi = int(ga_range[0]), int(ga_range[1])
    if hi < lo:
        raise ValueError(f"bad ga range {ga_range}")
    master = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        ga = float(lo + i % (hi - lo + 1))
        pose = sample_pose(
            master,
            max_rotation_deg=max_rotation_deg,
            max_translation_mm=max_translation_mm,
            scale_range=scale_range,
        )
        case_seed = int(master.integers(2**62))
        specs.append(
            PhantomSpec(
                ga_weeks=ga,
                pose=pose,
                noise_level=noise_level,
                occlusion_strength=occlusion_strength,
                seed=case_seed,
            )
        )

    def render(i: int) -> CaseRecord:
        spec = specs[i]
        case_id = f"case_{i:04d}"
        vol, truth, pose = generate_phantom(spec, grid)
        vol_name = f"{case_id}.volb1"
        mask_name = f"{case_id}_mask.volb1"
        save_volume(vol, outdir / vol_name)
        save_volume(truth, outdir / mask_name)
        record = CaseRecord(
            case_id=case_id,
            ga_weeks=spec.ga_weeks,
            euler=tuple(float(v) for v in pose.euler),
            scale=float(pose.scale),
            translation=tuple(float(v) for v in pose.translation),
            noise_level=spec.noise_level,
            occlusion_strength=spec.occlusion_strength,
            seed=spec.seed,
            volume_path=vol_name,
            mask_path=mask_name,
        )
        write_pose_record(record, outdir / f"{case_id}.pose")
        return record

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(render, range(count)))
    else:
        records = [render(i) for i in range(count)]
    save_manifest(records, outdir / "manifest.csv")
    return records


# ---------------------------------------------------------------------------
# fold protocol


@dataclass
class FoldSplit:
    """Seeded train/val partitions plus a disjoint hold-out subset."""

    folds: list[tuple[list[str], list[str]]]
    holdout: list[str]
    age_ttest: WelchResult | None

    def all_training_ids(self) -> set[str]:
        ids: set[str] = set()
        for train_ids, val_ids in self.folds:
            ids.update(train_ids)
            ids.update(val_ids)
        return ids


def split_folds(
    records: list[CaseRecord], folds: int, train: int, val: int, seed: int = 0
) -> FoldSplit:
    """Partition cases into ``folds`` seeded (train, val) splits of a fixed
    pool; whatever is left over becomes the hold-out set, never touched by
    any fold.  Reports a Welch t-test between hold-out and pool ages."""
    if train + val > len(records):
        raise InsufficientCasesError(
            f"need {train}+{val} cases, manifest has {len(records)}"
        )
    ids = [r.case_id for r in records]
    ages = {r.case_id: r.ga_weeks for r in records}
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(folds + 1)
    base = np.random.default_rng(children[0]).permutation(len(ids))
    pool = [ids[i] for i in base[: train + val]]
    holdout = sorted(ids[i] for i in base[train + val :])
    fold_list = []
    for f in range(folds):
        order = np.random.default_rng(children[f + 1]).permutation(len(pool))
        shuffled = [pool[i] for i in order]
        fold_list.append((sorted(shuffled[:train]), sorted(shuffled[train : train + val])))
    ttest: WelchResult | None = None
    if holdout and len(holdout) >= 2 and len(pool) >= 2:
        try:
            ttest = welch_t([ages[c] for c in holdout], [ages[c] for c in pool])
        except Exception:
            ttest = None
    return FoldSplit(folds=fold_list, holdout=holdout, age_ttest=ttest)


def save_split(split: FoldSplit, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "role"])
        for f, (train_ids, val_ids) in enumerate(split.folds):
            for c in train_ids:
                writer.writerow([c, f"train_{f}"])
            for c in val_ids:
                writer.writerow([c, f"val_{f}"])
        for c in split.holdout:
            writer.writerow([c, "holdout"])


def load_split(path: Path) -> FoldSplit:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["case_id", "role"]:
        raise IoFailureError(f"{path}: not a split file")
    by_role: dict[str, list[str]] = {}
    for case_id, role in rows[1:]:
        by_role.setdefault(role, []).append(case_id)
    n_folds = sum(1 for role in by_role if role.startswith("train_"))
    folds = [
        (sorted(by_role.get(f"train_{f}", [])), sorted(by_role.get(f"val_{f}", [])))
        for f in range(n_folds)
    ]
    return FoldSplit(folds=folds, holdout=sorted(by_role.get("holdout", [])), age_ttest=None)


# ---------------------------------------------------------------------------
# preprocessing


def _load_case(dataset_dir: Path, record: CaseRecord) -> tuple[Volume, Mask]:
    vol = load_volume(dataset_dir / record.volume_path)
    mask = load_mask(dataset_dir / record.mask_path)
    return vol, mask


def prepare_input(vol: Volume, n: int) -> np.ndarray:
    """Normalize and resample a scan to the network's n^3 input grid."""
    v = normalize_intensity(vol)
    d, h, w = v.dims
    if (d, h, w) != (n, n, n):
        if not (d == h == w) or len(set(v.spacing)) != 1:
            raise ShapeMismatchError(
                "network input resampling expects cubic volumes with isotropic spacing"
            )
        v = resample_isotropic(v, v.spacing[0] * d / n)
        if v.dims != (n, n, n):
            raise ShapeMismatchError(f"resampled to {v.dims}, expected {(n,) * 3}")
    return v.data.astype(np.float32)[None, None]


def prepare_target(mask: Mask, n: int) -> np.ndarray:
    d, h, w = mask.dims
    if (d, h, w) == (n, n, n):
        return mask.data.astype(np.float32)[None, None]
    as_vol = Volume(mask.data.astype(np.float32), mask.spacing, mask.origin)
    res = resample_isotropic(as_vol, mask.spacing[0] * d / n)
    return (res.data >= 0.5).astype(np.float32)[None, None]


def probability_volume(net_output: np.ndarray, like: Volume, n: int) -> Volume:
    """Carry an n^3 probability map back onto the scan's native grid."""
    d, h, w = like.dims
    prob = np.clip(net_output[0, 0], 0.0, 1.0).astype(np.float32)
    if (d, h, w) == (n, n, n):
        return Volume(prob, like.spacing, like.origin)
    coarse_spacing = like.spacing[0] * d / n
    coarse = Volume(prob, (coarse_spacing,) * 3, like.origin)
    fine = resample_isotropic(coarse, like.spacing[0])
    if fine.dims != (d, h, w):
        raise ShapeMismatchError(f"upsampled to {fine.dims}, expected {(d, h, w)}")
    return Volume(np.clip(fine.data, 0.0, 1.0).astype(np.float32), like.spacing, like.origin)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    network: Network
    loss_curve: list[tuple[int, float]]
    val_curve: list[tuple[int, float]]
    best_val_dsc: float
    stopped_early: bool


def train_arrays(
    spec: NetworkSpec,
    train_inputs: list[np.ndarray],
    train_targets: list[np.ndarray],
    val_inputs: list[np.ndarray] | None = None,
    val_targets: list[np.ndarray] | None = None,
    seed: int = 0,
    lr: float = 1e-3,
    max_steps: int = 800,
    batch_size: int = 1,
    val_every: int = 50,
    patience: int = 1,
    val_threshold: float = 0.5,
) -> TrainResult:
    """Core training loop over preprocessed (1, 1, n, n, n) arrays.

    Iterates cases in seeded shuffled order with soft Dice loss and Adam;
    validates by mean Dice of thresholded predictions every ``val_every``
    steps and stops once a validation round fails to improve the best,
    restoring the best-validation parameters.
    """
    net = build_network(spec, seed)
    state = ad.AdamState.create(net.param_vector().size, lr=lr)
    rng = np.random.default_rng(seed)
    order: list[int] = []
    loss_curve: list[tuple[int, float]] = []
    val_curve: list[tuple[int, float]] = []
    best = -1.0
    best_snapshot = None
    stopped_early = False
    has_val = bool(val_inputs)

    def validate() -> float:
        scores = []
        with ad.no_grad():
            for xv, tv in zip(val_inputs, val_targets):
                out = net.forward(ad.Tensor(xv), mode="eval").values
                pred = out[0, 0] >= val_threshold
                truth = tv[0, 0] >= 0.5
                inter = float(np.logical_and(pred, truth).sum())
                total = float(pred.sum()) + float(truth.sum())
                scores.append(1.0 if total == 0 else 2.0 * inter / total)
        return float(np.mean(scores))

    def snapshot():
        return (
            net.param_vector().copy(),
            {k: rs.copy() for k, rs in net.running.items()},
            net.step,
        )

    step = 0
    rounds_since_best = 0
    while step < max_steps:
        while len(order) < batch_size:
            order.extend(rng.permutation(len(train_inputs)).tolist())
        take, order = order[:batch_size], order[batch_size:]
        xv = np.concatenate([train_inputs[i] for i in take], axis=0)
        tv = np.concatenate([train_targets[i] for i in take], axis=0)
        net.zero_grad()
        out = net.forward(ad.Tensor(xv), mode="train")
        loss = ad.soft_dice_loss(out, ad.Tensor(tv))
        ad.backward(loss)
        params, state = ad.adam_step(net.param_vector(), net.grad_vector(), state)
        net.set_param_vector(params)
        step += 1
        net.step = step
        loss_curve.append((step, float(loss.values)))
        if has_val and (step % val_every == 0 or step == max_steps):
            score = validate()
            val_curve.append((step, score))
            if score > best:
                best = score
                best_snapshot = snapshot()
                rounds_since_best = 0
            else:
                rounds_since_best += 1
                if rounds_since_best >= patience:
                    stopped_early = True
                    break
    if best_snapshot is not None:
        vec, running, at_step = best_snapshot
        net.set_param_vector(vec)
        net.running = running
        net.step = at_step
    return TrainResult(
        network=net,
        loss_curve=loss_curve,
        val_curve=val_curve,
        best_val_dsc=best,
        stopped_early=stopped_early,
    )


def train(
    config: ExperimentConfig,
    records: list[CaseRecord],
    train_ids: list[str],
    val_ids: list[str],
) -> TrainResult:
    """Config-driven training over dataset cases; saves nothing by itself."""
    by_id = {r.case_id: r for r in records}
    n = config.spec.n

    def load_pairs(ids):
        xs, ts = [], []
        for cid in ids:
            vol, mask = _load_case(config.dataset_dir, by_id[cid])
            xs.append(prepare_input(vol, n))
            ts.append(prepare_target(mask, n))
        return xs, ts

    train_x, train_t = load_pairs(train_ids)
    val_x, val_t = load_pairs(val_ids)
    return train_arrays(
        config.spec,
        train_x,
        train_t,
        val_x,
        val_t,
        seed=config.seed,
        lr=config.lr,
        max_steps=config.max_steps,
        batch_size=config.batch_size,
        val_every=config.val_every,
        patience=config.patience,
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class FoldResult:
    """Per-case reports plus on-demand aggregates (mean, std, count)."""

    cases: list[MetricsReport] = field(default_factory=list)

    def aggregate(self) -> dict[str, tuple[float | None, float | None, int]]:
        out: dict[str, tuple[float | None, float | None, int]] = {}
        for name in ("ed_mm", "hd_mm", "dsc", "sc"):
            vals = [getattr(c, name) for c in self.cases if getattr(c, name) is not None]
            if vals:
                arr = np.asarray(vals, dtype=np.float64)
                std = float(arr.std(ddof=1)) if arr.size >= 2 else 0.0
                out[name] = (float(arr.mean()), std, int(arr.size))
            else:
                out[name] = (None, None, 0)
        return out


def predict_probability(net: Network, vol: Volume) -> Volume:
    """Eval-mode forward pass of one scan, on the scan's native grid."""
    x = prepare_input(vol, net.spec.n)
    with ad.no_grad():
        out = net.forward(ad.Tensor(x), mode="eval").values
    return probability_volume(out, vol, net.spec.n)


def evaluate_case(
    net: Network,
    record: CaseRecord,
    vol: Volume,
    truth: Mask,
    threshold: float,
    prob: Volume | None = None,
) -> MetricsReport:
    if prob is None:
        prob = predict_probability(net, vol)
    pred = threshold_mask(prob, threshold)
    return score_prediction(record, pred, truth, threshold)


def score_prediction(
    record: CaseRecord, pred: Mask, truth: Mask, threshold: float
) -> MetricsReport:
    """Four measures of one prediction; an empty prediction yields missing
    distances, zero overlap/symmetry, and the empty flag."""
    if pred.data.max(initial=0) == 0:
        return MetricsReport(
            case_id=record.case_id,
            ga_weeks=record.ga_weeks,
            euler=record.euler,
            threshold=threshold,
            ed_mm=None,
            hd_mm=None,
            dsc=0.0,
            sc=0.0,
            empty_prediction=True,
        )
    sc: SymmetryResult = symmetry_coefficient(pred, record.pose)
    return MetricsReport(
        case_id=record.case_id,
        ga_weeks=record.ga_weeks,
        euler=record.euler,
        threshold=threshold,
        ed_mm=centroid_ed(pred, truth),
        hd_mm=hausdorff(pred, truth),
        dsc=dsc(pred, truth),
        sc=sc.value,
        empty_prediction=False,
    )


def evaluate(
    net: Network,
    config: ExperimentConfig,
    records: list[CaseRecord],
    ids: list[str],
    threshold: float = 0.5,
    jobs: int = 1,
) -> FoldResult:
    """Evaluate a trained network over dataset cases at one threshold."""
    by_id = {r.case_id: r for r in records}

    def one(cid: str) -> MetricsReport:
        record = by_id[cid]
        vol, truth = _load_case(config.dataset_dir, record)
        return evaluate_case(net, record, vol, truth, threshold)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cases = list(pool.map(one, ids))
    else:
        cases = [one(cid) for cid in ids]
    return FoldResult(cases=cases)


def evaluate_sweep(
    net: Network,
    config: ExperimentConfig,
    records: list[CaseRecord],
    ids: list[str],
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
) -> dict[float, FoldResult]:
    """Threshold sweep sharing one forward pass per case."""
    by_id = {r.case_id: r for r in records}
    results = {t: FoldResult() for t in thresholds}
    for cid in ids:
        record = by_id[cid]
        vol, truth = _load_case(config.dataset_dir, record)
        prob = predict_probability(net, vol)
        for t in thresholds:
            results[t].cases.append(
                evaluate_case(net, record, vol, truth, t, prob=prob)
            )
    return results


def crossval_grid(
    specs: list[tuple[str, NetworkSpec]],
    config: ExperimentConfig,
    records: list[CaseRecord],
    split: FoldSplit,
    threshold: float = 0.5,
) -> list[tuple[str, NetworkSpec, FoldResult, list[FoldResult]]]:
    """Train and evaluate every spec on every fold.

    Returns, per spec, the pooled result over all fold validation cases
    plus the per-fold results; rows are ranked by mean Dice (descending),
    tie-broken by lower Hausdorff then lower centroid distance.
    """
    rows = []
    for label, spec in specs:
        fold_results = []
        pooled = FoldResult()
        for train_ids, val_ids in split.folds:
            cfg = replace(config, spec=spec)
            result = train(cfg, records, train_ids, val_ids)
            fr = evaluate(result.network, cfg, records, val_ids, threshold)
            fold_results.append(fr)
            pooled.cases.extend(fr.cases)
        rows.append((label, spec, pooled, fold_results))

    def rank_key(row):
        agg = row[2].aggregate()
        dsc_m = agg["dsc"][0] if agg["dsc"][0] is not None else -1.0
        hd_m = agg["hd_mm"][0] if agg["hd_mm"][0] is not None else float("inf")
        ed_m = agg["ed_mm"][0] if agg["ed_mm"][0] is not None else float("inf")
        return (-dsc_m, hd_m, ed_m)

    rows.sort(key=rank_key)
    return rows


def compare_baseline(
    net: Network,
    config: ExperimentConfig,
    records: list[CaseRecord],
    ids: list[str],
    threshold: float = 0.5,
) -> dict[str, FoldResult]:
    """Evaluate the network and the moment-fit ellipsoid pipeline on the
    same cases and probability maps."""
    from .ellipsoid import fit_ellipsoid, rasterize_ellipsoid

    by_id = {r.case_id: r for r in records}
    results = {"network": FoldResult(), "ellipsoid": FoldResult()}
    for cid in ids:
        record = by_id[cid]
        vol, truth = _load_case(config.dataset_dir, record)
        prob = predict_probability(net, vol)
        pred_net = threshold_mask(prob, threshold)
        results["network"].cases.append(
            score_prediction(record, pred_net, truth, threshold)
        )
        ell = fit_ellipsoid(prob)
        pred_ell = rasterize_ellipsoid(ell, vol.grid)
        results["ellipsoid"].cases.append(
            score_prediction(record, pred_ell, truth, threshold)
        )
    return results
