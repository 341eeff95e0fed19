import numpy as np
import pytest

from sonobrain.ellipsoid import Ellipsoid, fit_ellipsoid, rasterize_ellipsoid
from sonobrain.errors import ZeroMassError
from sonobrain.metrics import dsc
from sonobrain.volume import Grid, Mask, Volume

GRID = Grid((60, 60, 60), (1.0, 1.0, 1.0))


def solid_ellipsoid(grid, radii, center=None):
    c = grid.world_center if center is None else np.asarray(center)
    zi, yi, xi = np.indices(grid.dims).astype(float)
    sx, sy, sz = grid.spacing
    ox, oy, oz = grid.origin
    x = ox + xi * sx
    y = oy + yi * sy
    z = oz + zi * sz
    inside = (
        ((x - c[0]) / radii[0]) ** 2
        + ((y - c[1]) / radii[1]) ** 2
        + ((z - c[2]) / radii[2]) ** 2
        <= 1.0
    )
    return inside


class TestFit:
    def test_recovers_axis_aligned_radii_within_5_percent(self):
        inside = solid_ellipsoid(GRID, (20, 15, 10))
        e = fit_ellipsoid(Volume(inside.astype(np.float32), GRID.spacing))
        for got, want in zip(e.radii, (20, 15, 10)):
            assert abs(got - want) / want < 0.05
        assert not e.degenerate

    def test_ball_is_isotropic(self):
        inside = solid_ellipsoid(GRID, (9, 9, 9))
        e = fit_ellipsoid(Volume(inside.astype(np.float32), GRID.spacing))
        assert max(e.radii) / min(e.radii) < 1.02
        r = e.rotation
        assert np.abs(r @ r.T - np.eye(3)).max() < 1e-9

    def test_recovers_center(self):
        inside = solid_ellipsoid(GRID, (12, 9, 7), center=(25.0, 33.0, 28.0))
        e = fit_ellipsoid(Volume(inside.astype(np.float32), GRID.spacing))
        assert np.abs(np.asarray(e.center) - (25.0, 33.0, 28.0)).max() < 0.5

    def test_single_voxel_degenerate(self):
        data = np.zeros((8, 8, 8), np.float32)
        data[4, 4, 4] = 1.0
        e = fit_ellipsoid(Volume(data, (1.5, 1.5, 1.5)))
        assert e.degenerate
        assert min(e.radii) >= 1.5  # floored at one voxel

    def test_zero_mass_raises(self):
        with pytest.raises(ZeroMassError):
            fit_ellipsoid(Volume(np.zeros((4, 4, 4), np.float32)))

    def test_weighted_by_probability(self):
        # doubling all weights must not change the fit
        inside = solid_ellipsoid(GRID, (14, 11, 8)).astype(np.float32)
        a = fit_ellipsoid(Volume(0.4 * inside, GRID.spacing))
        b = fit_ellipsoid(Volume(0.8 * inside, GRID.spacing))
        assert np.allclose(a.radii, b.radii)
        assert np.allclose(a.center, b.center)


class TestRasterize:
    def test_tiny_ellipsoid_between_centers_is_empty(self):
        e = Ellipsoid(center=(2.5, 2.5, 2.5), radii=(0.3, 0.3, 0.3), euler=(0, 0, 0))
        out = rasterize_ellipsoid(e, Grid((6, 6, 6), (1.0, 1.0, 1.0)))
        assert out.data.sum() == 0

    def test_ball_volume_within_5_percent(self):
        # center on a voxel center so discretization error stays small
        e = Ellipsoid(center=(30.0, 30.0, 30.0), radii=(5.0, 5.0, 5.0), euler=(0, 0, 0))
        out = rasterize_ellipsoid(e, GRID)
        analytic = 4.0 / 3.0 * np.pi * 125
        assert abs(out.data.sum() - analytic) / analytic < 0.05

    def test_fit_then_rasterize_dsc(self):
        inside = solid_ellipsoid(GRID, (18, 13, 9))
        vol = Volume(inside.astype(np.float32), GRID.spacing)
        e = fit_ellipsoid(vol)
        out = rasterize_ellipsoid(e, GRID)
        assert dsc(out, Mask(inside.astype(np.uint8), GRID.spacing)) >= 0.95


class TestConsistencyAndEquivariance:
    def test_fit_rasterize_fit_contraction(self):
        inside = solid_ellipsoid(GRID, (16, 12, 9))
        first = fit_ellipsoid(Volume(inside.astype(np.float32), GRID.spacing))
        second = fit_ellipsoid(
            Volume(
                rasterize_ellipsoid(first, GRID).data.astype(np.float32), GRID.spacing
            )
        )
        for a, b in zip(first.radii, second.radii):
            assert abs(a - b) / a < 0.01
        assert np.abs(np.asarray(first.center) - second.center).max() < 0.1

    def test_lattice_rotation_equivariance_exact(self):
        # generic tilted blob with no voxel near the rasterization boundary
        rng = np.random.default_rng(0)
        zi, yi, xi = np.indices(GRID.dims).astype(float)
        c = GRID.world_center
        u = (xi - c[0]) / 17 + 0.35 * (yi - c[1]) / 13
        v = (yi - c[1]) / 13 - 0.2 * (zi - c[2]) / 9
        w = (zi - c[2]) / 9 + 0.1 * (xi - c[0]) / 17
        field = u * u + v * v + w * w
        inside = field <= 1.0
        assert np.abs(field[inside] - 1.0).min() > 1e-6  # no boundary-sitting voxels
        vol = inside.astype(np.float32)

        def rot_z(data):
            n = data.shape[2]
            zz, yy, xx = np.indices(data.shape)
            return data[zz, n - 1 - xx, yy]

        direct = rasterize_ellipsoid(fit_ellipsoid(Volume(rot_z(vol), GRID.spacing)), GRID)
        indirect = rot_z(
            rasterize_ellipsoid(fit_ellipsoid(Volume(vol, GRID.spacing)), GRID).data
        )
        assert np.array_equal(direct.data, indirect)

    def test_record_serialization(self):
        e = Ellipsoid(center=(1.0, 2.0, 3.0), radii=(4.0, 5.0, 6.0), euler=(7.0, 8.0, 9.0))
        text = e.to_record()
        assert "center=1.0,2.0,3.0" in text
        assert "radii=4.0,5.0,6.0" in text
        assert "euler=7.0,8.0,9.0" in text
