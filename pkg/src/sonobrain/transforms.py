"""Similarity-transform geometry: rotation + isotropic scale + translation.

Rotations are parameterized by intrinsic Z-Y-X Euler angles in degrees
(``R = Rz(alpha) @ Ry(beta) @ Rx(gamma)``).  A transform acts on world
points as ``T(x) = s * R * (x - c) + c + t`` where ``c`` is the rotation
center (the world center of the volume being resampled); the parameter
algebra of compose/invert is independent of ``c`` as long as both sides
share it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import InvalidTransformError, NotARotationError
from .volume import Grid, Mask, Volume


def rotation_from_euler(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X Euler angles in degrees."""
    a, b, g = np.deg2rad([alpha, beta, gamma])
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    return np.array(
        [
            [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
            [sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg],
            [-sb, cb * sg, cb * cg],
        ]
    )


class EulerAngles(NamedTuple):
    alpha: float
    beta: float
    gamma: float
    gimbal_locked: bool = False


GIMBAL_COS_EPS = 1e-7


def euler_from_rotation(r: np.ndarray) -> EulerAngles:
    """Intrinsic Z-Y-X decomposition with beta in [-90, 90] degrees.

    At gimbal lock (|cos beta| < 1e-7) gamma is set to 0, the remaining
    freedom is folded into alpha, and the result is flagged.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise NotARotationError(f"expected a 3x3 matrix, got shape {r.shape}")
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
        raise NotARotationError("matrix is not orthonormal with determinant +1")
    sb = float(np.clip(-r[2, 0], -1.0, 1.0))
    cb = float(np.hypot(r[2, 1], r[2, 2]))
    if cb < GIMBAL_COS_EPS:
        beta = 90.0 if sb > 0 else -90.0
        if sb > 0:
            alpha = np.degrees(np.arctan2(r[1, 2], r[1, 1]))
        else:
            alpha = np.degrees(np.arctan2(-r[1, 2], r[1, 1]))
        return EulerAngles(float(alpha), beta, 0.0, gimbal_locked=True)
    alpha = np.degrees(np.arctan2(r[1, 0], r[0, 0]))
    beta = np.degrees(np.arctan2(sb, cb))
    gamma = np.degrees(np.arctan2(r[2, 1], r[2, 2]))
    return EulerAngles(float(alpha), float(beta), float(gamma), gimbal_locked=False)


@dataclass(frozen=True)
class SimilarityTransform:
    """Euler angles (degrees), isotropic scale, translation (mm)."""

    euler: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise InvalidTransformError(f"scale must be positive, got {self.scale}")
        if not all(np.isfinite(v) for v in (*self.euler, *self.translation)):
            raise InvalidTransformError("euler angles and translation must be finite")

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_euler(*self.euler)

    def apply_to_points(self, points: np.ndarray, center=(0.0, 0.0, 0.0)) -> np.ndarray:
        """Act on world points (..., 3): s * R * (p - c) + c + t."""
        c = np.asarray(center, dtype=np.float64)
        p = np.asarray(points, dtype=np.float64)
        rot = self.scale * self.rotation
        return (p - c) @ rot.T + c + np.asarray(self.translation)


IDENTITY = SimilarityTransform()


def invert_similarity(t: SimilarityTransform) -> SimilarityTransform:
    """Two-sided inverse under the shared-center action."""
    rinv = t.rotation.T
    s = 1.0 / t.scale
    tr = -s * (rinv @ np.asarray(t.translation))
    e = euler_from_rotation(rinv)
    return SimilarityTransform(
        euler=(e.alpha, e.beta, e.gamma), scale=s, translation=tuple(tr)
    )


def compose_similarity(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """Composite acting as b-then-a on world points."""
    rot = a.rotation @ b.rotation
    s = a.scale * b.scale
    tr = a.scale * (a.rotation @ np.asarray(b.translation)) + np.asarray(a.translation)
    e = euler_from_rotation(rot)
    return SimilarityTransform(
        euler=(e.alpha, e.beta, e.gamma), scale=s, translation=tuple(tr)
    )


def apply_similarity(m: Volume, t: SimilarityTransform, out_grid: Grid | None = None):
    """Resample a volume (trilinear) or mask (nearest) under the transform.

    Each output voxel pulls the input value at the inverse-mapped world
    position; rotation is about the output grid's world center and
    out-of-field samples are 0.  Returns the same kind as the input.
    """
    is_mask = isinstance(m, Mask)
    grid = out_grid if out_grid is not None else m.grid
    center = grid.world_center
    d, h, w = grid.dims
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    idx = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=-1)
    world = grid.index_to_world(idx)
    src_world = invert_similarity(t).apply_to_points(world, center=center)
    src_idx = m.grid.world_to_index(src_world)
    coords = [src_idx[:, 0], src_idx[:, 1], src_idx[:, 2]]
    if is_mask:
        out = map_coordinates(m.data, coords, order=0, mode="constant", cval=0)
        return Mask(out.reshape(d, h, w), grid.spacing, grid.origin)
    out = map_coordinates(
        m.data.astype(np.float32), coords, order=1, mode="constant", cval=0.0
    ).astype(np.float32)
    return Volume(out.reshape(d, h, w), grid.spacing, grid.origin)
