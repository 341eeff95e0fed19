"""Synthetic atlas masks and ultrasound-like phantom volumes.

The atlas surrogate is a parametric brain-like shape in canonical pose:
an ellipsoid (two sagittally mirrored half-ellipsoids) plus a cerebellar
lobe bulging out behind and below, exactly mirror-symmetric about the
grid's mid-x plane.  The occipitofrontal diameter runs along y and is
anchored at 62 mm for gestational week 22, growing monotonically with age.

Phantoms render a truth mask into scan pose and dress it with a bright
skull shell, mid-intensity interior, multiplicative speckle, proximal-half
attenuation, reverberation arcs, and background clutter; artifact
amplitudes scale with their knobs so a zero-noise, zero-occlusion phantom
is clean and symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, generate_binary_structure

from .errors import GaOutOfRangeError, OutOfFieldError
from .transforms import SimilarityTransform, apply_similarity, invert_similarity
from .volume import Grid, Mask, Volume

GA_MIN_WEEKS = 14.0
GA_MAX_WEEKS = 31.0
OFD_MM_AT_22W = 62.0

# proportions of the canonical brain, in units of the half-OFD
LATERAL_RATIO = 0.78  # x semi-axis
VERTICAL_RATIO = 0.70  # z semi-axis
LOBE_CENTER = (0.0, -0.72, -0.52)  # (x, y, z), on the mid-sagittal plane
LOBE_RADII = (0.30, 0.22, 0.20)

INTERIOR_LEVEL = 0.35
SHELL_LEVEL = 0.90
SHELL_THICKNESS_VOX = 2


def growth_factor(ga_weeks: float) -> float:
    """Monotone size multiplier with value 1 at 22 weeks."""
    return 1.0 + 0.045 * (float(ga_weeks) - 22.0)


def occipitofrontal_diameter_mm(ga_weeks: float) -> float:
    return OFD_MM_AT_22W * growth_factor(ga_weeks)


def _check_ga(ga_weeks: float) -> None:
    if not (GA_MIN_WEEKS <= float(ga_weeks) <= GA_MAX_WEEKS):
        raise GaOutOfRangeError(
            f"gestational age {ga_weeks} outside [{GA_MIN_WEEKS}, {GA_MAX_WEEKS}] weeks"
        )


def make_atlas_mask(ga_weeks: float, grid: Grid) -> Mask:
    """Deterministic canonical-pose brain mask for one gestational age."""
    _check_ga(ga_weeks)
    half = occipitofrontal_diameter_mm(ga_weeks) / 2.0
    cx, cy, cz = grid.world_center
    d, h, w = grid.dims
    sx, sy, sz = grid.spacing
    ox, oy, oz = grid.origin
    # |dx| keeps the evaluation exactly mirror-symmetric about the mid-x plane
    dx = np.abs(ox + np.arange(w) * sx - cx)
    dy = oy + np.arange(h) * sy - cy
    dz = oz + np.arange(d) * sz - cz
    dzg, dyg, dxg = np.meshgrid(dz, dy, dx, indexing="ij")
    rx, ry, rz = LATERAL_RATIO * half, half, VERTICAL_RATIO * half
    main = (dxg / rx) ** 2 + (dyg / ry) ** 2 + (dzg / rz) ** 2 <= 1.0
    lx, ly, lz = (half * v for v in LOBE_CENTER)
    lrx, lry, lrz = (half * v for v in LOBE_RADII)
    lobe = (
        (dxg - lx) ** 2 / lrx**2 + (dyg - ly) ** 2 / lry**2 + (dzg - lz) ** 2 / lrz**2
        <= 1.0
    )
    return Mask((main | lobe).astype(np.uint8), grid.spacing, grid.origin)


def annotate_scan(atlas: Mask, align: SimilarityTransform, out_grid: Grid | None = None) -> Mask:
    """Ground-truth annotation in scan coordinates.

    ``align`` is the transform that would map the scan into canonical
    pose; the annotation is the atlas carried back by its inverse.
    """
    return apply_similarity(atlas, invert_similarity(align), out_grid)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one phantom: age, pose, artifact strengths, RNG seed."""

    ga_weeks: float
    pose: SimilarityTransform = SimilarityTransform()
    noise_level: float = 0.5
    occlusion_strength: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        _check_ga(self.ga_weeks)
        if not (0.0 <= self.noise_level <= 1.0):
            raise ValueError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if not (0.0 <= self.occlusion_strength <= 1.0):
            raise ValueError(
                f"occlusion_strength must be in [0, 1], got {self.occlusion_strength}"
            )


def sample_pose(
    rng: np.random.Generator,
    max_rotation_deg: float = 60.0,
    max_translation_mm: float = 4.0,
    scale_range: tuple[float, float] = (0.9, 1.1),
) -> SimilarityTransform:
    """Random scan pose: uniform Euler angles, scale, and translation."""
    angles = rng.uniform(-max_rotation_deg, max_rotation_deg, size=3)
    scale = rng.uniform(*scale_range)
    trans = rng.uniform(-max_translation_mm, max_translation_mm, size=3)
    return SimilarityTransform(euler=tuple(angles), scale=float(scale), translation=tuple(trans))


def generate_phantom(spec: PhantomSpec, grid: Grid) -> tuple[Volume, Mask, SimilarityTransform]:
    """Render one phantom: (scan volume, truth mask, scan-to-canonical pose).

    Deterministic per spec; raises OutOfFieldError if the posed brain
    touches the grid boundary (which would invalidate surface metrics).
    """
    atlas = make_atlas_mask(spec.ga_weeks, grid)
    truth = annotate_scan(atlas, spec.pose)
    tdata = truth.data.astype(bool)
    if not tdata.any():
        raise OutOfFieldError("posed brain left the field of view entirely")
    if (
        tdata[0].any()
        or tdata[-1].any()
        or tdata[:, 0].any()
        or tdata[:, -1].any()
        or tdata[:, :, 0].any()
        or tdata[:, :, -1].any()
    ):
        raise OutOfFieldError("posed brain touches the grid boundary")

    rng = np.random.default_rng(spec.seed)
    d, h, w = grid.dims
    struct = generate_binary_structure(3, 1)
    dilated = binary_dilation(tdata, struct, iterations=SHELL_THICKNESS_VOX)
    shell = dilated & ~tdata

    vol = np.zeros(grid.dims, dtype=np.float64)
    vol[tdata] = INTERIOR_LEVEL
    vol[shell] = SHELL_LEVEL

    zc = float(np.mean(np.nonzero(tdata)[0]))
    keep_out = binary_dilation(dilated, struct, iterations=2)

    # reverberation arcs: thin spherical shell fragments proximal to the probe
    zi, yi, xi = np.indices(grid.dims).astype(np.float64)
    yc = float(np.mean(np.nonzero(tdata)[1]))
    xc = float(np.mean(np.nonzero(tdata)[2]))
    brain_rad = float(
        np.max(
            np.sqrt(
                (np.nonzero(tdata)[0] - zc) ** 2
                + (np.nonzero(tdata)[1] - yc) ** 2
                + (np.nonzero(tdata)[2] - xc) ** 2
            )
        )
    )
    for _ in range(int(rng.integers(1, 4))):
        cz = zc + rng.uniform(0.2, 0.6) * brain_rad
        radius = brain_rad * rng.uniform(1.15, 1.45)
        thick = rng.uniform(1.0, 2.0)
        rr = np.sqrt((zi - cz) ** 2 + (yi - yc) ** 2 + (xi - xc) ** 2)
        arc = (np.abs(rr - radius) < thick) & (zi < zc) & ~keep_out
        vol[arc] += 0.5 * spec.noise_level

    # background clutter blobs away from the skull
    for _ in range(int(rng.integers(2, 6))):
        bz, by, bx = rng.uniform(0, d), rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(1.5, 4.0)
        blob = np.exp(
            -((zi - bz) ** 2 + (yi - by) ** 2 + (xi - bx) ** 2) / (2 * sigma**2)
        )
        blob[keep_out] = 0.0
        vol += 0.3 * spec.noise_level * blob

    # multiplicative speckle
    if spec.noise_level > 0:
        speckle = rng.uniform(-1.0, 1.0, size=grid.dims)
        vol *= 1.0 + 0.5 * spec.noise_level * speckle

    # proximal-half attenuation about the brain's center plane (probe at low z)
    if spec.occlusion_strength > 0:
        vol[zi < zc] *= 1.0 - spec.occlusion_strength

    np.clip(vol, 0.0, 1.0, out=vol)
    return Volume(vol.astype(np.float32), grid.spacing, grid.origin), truth, spec.pose
