"""Moment-based ellipsoid approximation of a probability mask.

The fit is closed form: the center is the probability-weighted centroid,
the orientation comes from the eigenvectors of the weighted second-moment
matrix, and each radius is sqrt(5) times the square root of the matching
eigenvalue (the second moment of a uniform solid ellipsoid along a
semi-axis ``a`` is ``a^2 / 5``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ZeroMassError
from .transforms import euler_from_rotation, rotation_from_euler
from .volume import Grid, Mask, Volume

DEGENERATE_EIGENVALUE_RATIO = 1e-9


@dataclass(frozen=True)
class Ellipsoid:
    """Center (x, y, z) mm, semi-axis radii (descending) mm, orientation."""

    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    euler: tuple[float, float, float]
    degenerate: bool = False

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_euler(*self.euler)

    def to_record(self) -> str:
        """Flat key=value text serialization."""
        cx, cy, cz = self.center
        ra, rb, rc = self.radii
        ea, eb, eg = self.euler
        lines = [
            f"center={cx!r},{cy!r},{cz!r}",
            f"radii={ra!r},{rb!r},{rc!r}",
            f"euler={ea!r},{eb!r},{eg!r}",
            f"degenerate={int(self.degenerate)}",
        ]
        return "\n".join(lines) + "\n"


def _world_points(grid: Grid) -> np.ndarray:
    d, h, w = grid.dims
    sx, sy, sz = grid.spacing
    ox, oy, oz = grid.origin
    zi, yi, xi = np.indices((d, h, w)).astype(np.float64)
    pts = np.stack(
        [ox + xi.ravel() * sx, oy + yi.ravel() * sy, oz + zi.ravel() * sz], axis=-1
    )
    return pts


def fit_ellipsoid(prob: Volume) -> Ellipsoid:
    """Fit by weighted moments; raises ZeroMassError on an all-zero volume.

    Near-degenerate moment matrices (eigenvalue ratio < 1e-9) set the
    ``degenerate`` flag and floor every radius at one voxel.
    """
    weights = prob.data.astype(np.float64).ravel()
    mass = float(weights.sum())
    if mass <= 0.0:
        raise ZeroMassError("cannot fit an ellipsoid to zero probability mass")
    pts = _world_points(prob.grid)
    center = (weights @ pts) / mass
    diff = pts - center
    moments = (diff * weights[:, None]).T @ diff / mass
    eigvals, eigvecs = np.linalg.eigh(moments)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    if np.linalg.det(eigvecs) < 0:
        eigvecs[:, 2] = -eigvecs[:, 2]
    degenerate = bool(eigvals[0] <= 0.0 or eigvals[2] / eigvals[0] < DEGENERATE_EIGENVALUE_RATIO)
    radii = np.sqrt(5.0 * np.clip(eigvals, 0.0, None))
    if degenerate:
        radii = np.maximum(radii, max(prob.spacing))
    e = euler_from_rotation(eigvecs)
    return Ellipsoid(
        center=tuple(float(v) for v in center),
        radii=tuple(float(v) for v in radii),
        euler=(e.alpha, e.beta, e.gamma),
        degenerate=degenerate,
    )


def rasterize_ellipsoid(e: Ellipsoid, grid: Grid) -> Mask:
    """Voxel = 1 iff its world center lies inside the ellipsoid."""
    pts = _world_points(grid)
    local = (pts - np.asarray(e.center)) @ e.rotation  # R^T from the right
    scaled = local / np.asarray(e.radii)
    inside = (scaled * scaled).sum(axis=-1) <= 1.0
    return Mask(inside.reshape(grid.dims).astype(np.uint8), grid.spacing, grid.origin)
