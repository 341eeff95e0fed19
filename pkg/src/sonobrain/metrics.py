"""Evaluation measures for binary segmentations.

Four per-case measures: centroid Euclidean distance (ED, mm), symmetric
Hausdorff distance over surface voxels (HD, mm), Dice similarity (DSC),
and a symmetry coefficient (SC): the Dice between a prediction's mirrored
right half and its left half after alignment to canonical pose.  Plus
Pearson correlation, Welch's t-test, and cohort false-positive /
false-negative rate maps.

Per-case CSV rows follow the fixed header
``case_id,ga_weeks,alpha,beta,gamma,threshold,ed_mm,hd_mm,dsc,sc``; a
blank ed/hd cell flags a case whose thresholded prediction was empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure
from scipy.special import stdtr

from .errors import (
    ConstantSeriesError,
    DegenerateSeriesError,
    EmptyListError,
    EmptyMaskError,
    LengthMismatchError,
    ShapeMismatchError,
)
from .transforms import SimilarityTransform, apply_similarity
from .volume import Mask, Volume

THRESHOLD_ONE_SLACK = 1e-6


def threshold_mask(prob: Volume, t: float) -> Mask:
    """Binarize a probability volume: voxel = 1 iff p >= t.

    t = 1 is softened to p >= 1 - 1e-6 so saturated sigmoid outputs
    survive; t = 0 yields the all-ones mask.
    """
    p = prob.data
    if float(p.min()) < 0.0 or float(p.max()) > 1.0:
        raise ShapeMismatchError("probability volume must lie in [0, 1]")
    cut = 1.0 - THRESHOLD_ONE_SLACK if t >= 1.0 else float(t)
    return Mask((p >= cut).astype(np.uint8), prob.spacing, prob.origin)


def _require_nonempty_pair(a: Mask, b: Mask) -> None:
    if not a.same_geometry(b):
        raise ShapeMismatchError("masks must share dims, spacing, and origin")
    if a.data.max(initial=0) == 0 or b.data.max(initial=0) == 0:
        raise EmptyMaskError("metric requires nonempty masks")


def _world_centroid(m: Mask) -> np.ndarray:
    zi, yi, xi = np.nonzero(m.data)
    sx, sy, sz = m.spacing
    ox, oy, oz = m.origin
    return np.array(
        [ox + xi.mean() * sx, oy + yi.mean() * sy, oz + zi.mean() * sz]
    )


def centroid_ed(a: Mask, b: Mask) -> float:
    """Euclidean distance in mm between world-coordinate centers of mass."""
    _require_nonempty_pair(a, b)
    return float(np.linalg.norm(_world_centroid(a) - _world_centroid(b)))


def surface_voxels(m: Mask) -> np.ndarray:
    """Boolean map of mask voxels with at least one face-neighbor outside
    the mask (voxels on the array boundary count as exposed)."""
    data = m.data.astype(bool)
    struct = generate_binary_structure(3, 1)
    return data & ~binary_erosion(data, struct, border_value=0)


def _directed_hausdorff(surf_a: np.ndarray, surf_b: np.ndarray, spacing_zyx) -> float:
    # feature transform gives, per voxel, the nearest surface-b voxel; the
    # final distance is evaluated with the same explicit formula a brute
    # force would use, so the two agree bit for bit
    idx = distance_transform_edt(
        ~surf_b, sampling=spacing_zyx, return_distances=False, return_indices=True
    )
    za, ya, xa = np.nonzero(surf_a)
    nz = idx[0, za, ya, xa].astype(np.float64)
    ny = idx[1, za, ya, xa].astype(np.float64)
    nx = idx[2, za, ya, xa].astype(np.float64)
    sz, sy, sx = spacing_zyx
    d2 = (
        ((za - nz) * sz) ** 2
        + ((ya - ny) * sy) ** 2
        + ((xa - nx) * sx) ** 2
    )
    return float(np.sqrt(d2.max()))


def hausdorff(a: Mask, b: Mask) -> float:
    """Symmetric Hausdorff distance in mm over surface-voxel centers."""
    _require_nonempty_pair(a, b)
    sx, sy, sz = a.spacing
    spacing_zyx = (sz, sy, sx)
    surf_a = surface_voxels(a)
    surf_b = surface_voxels(b)
    return max(
        _directed_hausdorff(surf_a, surf_b, spacing_zyx),
        _directed_hausdorff(surf_b, surf_a, spacing_zyx),
    )


def dsc(a: Mask, b: Mask) -> float:
    """Dice overlap 2|A∩B| / (|A| + |B|); defined as 1 when both are empty."""
    if not a.same_geometry(b):
        raise ShapeMismatchError("masks must share dims, spacing, and origin")
    na = int(a.data.sum())
    nb = int(b.data.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a.data, b.data).sum())
    return 2.0 * inter / (na + nb)


class SymmetryResult(NamedTuple):
    value: float
    empty_half: bool = False


def symmetry_coefficient(pred: Mask, align: SimilarityTransform) -> SymmetryResult:
    """Dice between the mirrored right half and the left half in canonical pose.

    ``align`` maps the scan pose into canonical coordinates where the
    mid-sagittal plane is the grid's mid-x plane.  With odd x extent the
    central slab belongs to neither half.  If either half is empty the
    value is 0 with the empty_half flag set.
    """
    if pred.data.max(initial=0) == 0:
        raise EmptyMaskError("symmetry coefficient requires a nonempty prediction")
    aligned = apply_similarity(pred, align).data.astype(bool)
    w = aligned.shape[2]
    left = aligned[:, :, : w // 2]
    right = aligned[:, :, w - (w // 2) :]
    mirrored = right[:, :, ::-1]
    n_left = int(left.sum())
    n_right = int(mirrored.sum())
    if n_left == 0 or n_right == 0:
        return SymmetryResult(0.0, empty_half=True)
    inter = int(np.logical_and(left, mirrored).sum())
    return SymmetryResult(2.0 * inter / (n_left + n_right), empty_half=False)


def pearson_r(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size:
        raise LengthMismatchError(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise LengthMismatchError("correlation needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise ConstantSeriesError("correlation undefined for a constant series")
    return float((dx * dy).sum() / (sx * sy))


class WelchResult(NamedTuple):
    t: float
    p: float
    df: float


def welch_t(x, y) -> WelchResult:
    """Welch's unequal-variance t statistic with a two-sided p-value.

    The p-value comes from the t-distribution CDF with Welch-Satterthwaite
    degrees of freedom (regularized incomplete beta under the hood).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise DegenerateSeriesError("each series needs at least 2 points")
    vx = float(x.var(ddof=1))
    vy = float(y.var(ddof=1))
    if vx <= 0.0 or vy <= 0.0:
        raise DegenerateSeriesError("each series needs positive variance")
    nx, ny = x.size, y.size
    se2x, se2y = vx / nx, vy / ny
    t = (float(x.mean()) - float(y.mean())) / np.sqrt(se2x + se2y)
    df = (se2x + se2y) ** 2 / (se2x**2 / (nx - 1) + se2y**2 / (ny - 1))
    p = 2.0 * float(stdtr(df, -abs(t)))
    return WelchResult(float(t), p, float(df))


# ---------------------------------------------------------------------------
# cohort aggregation


@dataclass
class FpFnMap:
    """Per-voxel false-positive / false-negative rates in canonical pose."""

    fp: Volume
    fn: Volume
    count: int


def aggregate_fpfn(
    cases: list[tuple[Mask, Mask, SimilarityTransform]],
) -> FpFnMap:
    """Accumulate FP (pred and not truth) / FN (truth and not pred) indicator
    maps in canonical coordinates and normalize by the number of cases."""
    if not cases:
        raise EmptyListError("aggregate_fpfn needs at least one case")
    fp_acc = None
    fn_acc = None
    geometry = None
    for pred, truth, align in cases:
        p = apply_similarity(pred, align).data.astype(bool)
        t = apply_similarity(truth, align).data.astype(bool)
        if fp_acc is None:
            fp_acc = np.zeros(p.shape, dtype=np.float64)
            fn_acc = np.zeros(p.shape, dtype=np.float64)
            geometry = pred
        fp_acc += p & ~t
        fn_acc += t & ~p
    n = len(cases)
    fp = Volume((fp_acc / n).astype(np.float32), geometry.spacing, geometry.origin)
    fn = Volume((fn_acc / n).astype(np.float32), geometry.spacing, geometry.origin)
    return FpFnMap(fp=fp, fn=fn, count=n)


# ---------------------------------------------------------------------------
# per-case report rows

CSV_HEADER = [
    "case_id",
    "ga_weeks",
    "alpha",
    "beta",
    "gamma",
    "threshold",
    "ed_mm",
    "hd_mm",
    "dsc",
    "sc",
]


@dataclass
class MetricsReport:
    """One evaluated case; ed/hd are None when the prediction was empty."""

    case_id: str
    ga_weeks: float
    euler: tuple[float, float, float]
    threshold: float
    ed_mm: float | None
    hd_mm: float | None
    dsc: float
    sc: float
    empty_prediction: bool = False

    def csv_row(self) -> list[str]:
        def num(v: float | None) -> str:
            return "" if v is None else repr(float(v))

        return [
            self.case_id,
            repr(float(self.ga_weeks)),
            repr(float(self.euler[0])),
            repr(float(self.euler[1])),
            repr(float(self.euler[2])),
            repr(float(self.threshold)),
            num(self.ed_mm),
            num(self.hd_mm),
            num(self.dsc),
            num(self.sc),
        ]


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2D array of rates in [0, 1] as binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatchError(f"PGM export needs a 2D array, got {img.shape}")
    gray = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())
