"""Independent reference implementations used as test oracles.

These deliberately avoid the code paths they validate: convolution by
explicit tap loops, Hausdorff by all-pairs distances, the t-distribution
tail by numeric quadrature.
"""

from __future__ import annotations

import numpy as np

from sonobrain.metrics import surface_voxels
from sonobrain.volume import Mask


def conv3d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 3D convolution by explicit shift-and-add."""
    co, ci, k, _, _ = w.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    nb, _, d, h, ww = x.shape
    out = np.zeros((nb, co, d, h, ww), dtype=np.float64)
    for o in range(co):
        for c in range(ci):
            for dz in range(k):
                for dy in range(k):
                    for dx in range(k):
                        out[:, o] += w[o, c, dz, dy, dx] * xp[
                            :, c, dz : dz + d, dy : dy + h, dx : dx + ww
                        ]
    return out + b[None, :, None, None, None]


def hausdorff_brute(a: Mask, b: Mask) -> float:
    """O(n^2) all-pairs symmetric Hausdorff over surface voxel centers."""
    sx, sy, sz = a.spacing
    pa = np.argwhere(surface_voxels(a)).astype(np.float64)
    pb = np.argwhere(surface_voxels(b)).astype(np.float64)

    def directed(p: np.ndarray, q: np.ndarray) -> float:
        worst = 0.0
        for v in p:
            d2 = (
                ((v[0] - q[:, 0]) * sz) ** 2
                + ((v[1] - q[:, 1]) * sy) ** 2
                + ((v[2] - q[:, 2]) * sx) ** 2
            )
            worst = max(worst, float(np.sqrt(d2.min())))
        return worst

    return max(directed(pa, pb), directed(pb, pa))


def student_t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability by trapezoidal quadrature of the density."""
    from math import lgamma

    def pdf(x: np.ndarray) -> np.ndarray:
        logc = lgamma((df + 1) / 2.0) - lgamma(df / 2.0) - 0.5 * np.log(df * np.pi)
        return np.exp(logc - (df + 1) / 2.0 * np.log1p(x * x / df))

    hi = abs(t) + 400.0  # far past any meaningful mass
    xs = np.linspace(abs(t), hi, 400_001)
    return float(2.0 * np.trapezoid(pdf(xs), xs))


def central_difference(fn, arr: np.ndarray, idx: tuple, step: float = 1e-5) -> float:
    """Central finite difference of a scalar function at one coordinate."""
    orig = arr[idx]
    arr[idx] = orig + step
    up = fn()
    arr[idx] = orig - step
    down = fn()
    arr[idx] = orig
    return (up - down) / (2.0 * step)
