import numpy as np
import pytest

from momshoot.errors import (ConvergenceError, GeometryMismatchError,
                             InvalidInputError)
from momshoot.fields import (CLAMP, PERIODIC, DeformationMap, GridGeometry,
                             ScalarField, VectorField, gradient, identity_map,
                             interpolate, invert_map, jacobian_determinant,
                             mesh_coordinates, warp)


def geom2(n=8, boundary=PERIODIC):
    return GridGeometry((n, n), boundary=boundary)


class TestGeometry:
    def test_rejects_tiny_axes(self):
        with pytest.raises(InvalidInputError):
            GridGeometry((2, 8))

    def test_rejects_1d_and_4d(self):
        with pytest.raises(InvalidInputError):
            GridGeometry((8,))
        with pytest.raises(InvalidInputError):
            GridGeometry((4, 4, 4, 4))

    def test_rejects_bad_spacing(self):
        with pytest.raises(InvalidInputError):
            GridGeometry((8, 8), spacing=(1.0, 0.0))

    def test_defaults(self):
        g = GridGeometry((8, 10))
        assert g.spacing == (1.0, 1.0)
        assert g.boundary == PERIODIC
        assert g.node_count == 80


class TestFieldInvariants:
    def test_scalar_shape_checked(self):
        with pytest.raises(InvalidInputError):
            ScalarField(geom2(), np.zeros((8, 9)))

    def test_nonfinite_rejected(self):
        vals = np.zeros((8, 8))
        vals[3, 3] = np.nan
        with pytest.raises(InvalidInputError):
            ScalarField(geom2(), vals)

    def test_vector_component_count(self):
        with pytest.raises(InvalidInputError):
            VectorField(geom2(), np.zeros((3, 8, 8)))

    def test_identity_map_is_zero_displacement(self):
        m = identity_map(geom2())
        assert m.is_identity


class TestInterpolate:
    def test_constant_reproduced(self):
        f = ScalarField(geom2(), np.full((8, 8), 3.25))
        assert interpolate(f, (2.7, 4.1)) == pytest.approx(3.25)

    def test_linear_ramp_reproduced(self):
        # f(i, j) = i on a clamp grid: multilinear is exact on linear fields
        g = geom2(boundary=CLAMP)
        ramp = np.broadcast_to(np.arange(8.0)[:, None], (8, 8)).copy()
        f = ScalarField(g, ramp)
        assert interpolate(f, (2.5, 3.0)) == pytest.approx(2.5)

    def test_matches_bilinear_oracle(self):
        # independent 4-neighbour weighted sum
        rng = np.random.default_rng(3)
        vals = rng.random((8, 8))
        f = ScalarField(geom2(), vals)
        x, y = 3.25, 5.75
        i, j = int(x), int(y)
        fx, fy = x - i, y - j
        expected = (vals[i, j] * (1 - fx) * (1 - fy)
                    + vals[i + 1, j] * fx * (1 - fy)
                    + vals[i, j + 1] * (1 - fx) * fy
                    + vals[i + 1, j + 1] * fx * fy)
        assert interpolate(f, (x, y)) == pytest.approx(expected, abs=1e-14)

    def test_periodic_wrap(self):
        rng = np.random.default_rng(4)
        vals = rng.random((8, 8))
        f = ScalarField(geom2(), vals)
        assert interpolate(f, (-1.0, 2.0)) == pytest.approx(vals[7, 2])

    def test_nonfinite_point_rejected(self):
        f = ScalarField(geom2(), np.zeros((8, 8)))
        with pytest.raises(InvalidInputError):
            interpolate(f, (np.nan, 0.0))

    def test_vector_field_interpolation(self):
        v = VectorField(geom2(), np.stack([np.full((8, 8), 1.5),
                                           np.full((8, 8), -2.0)]))
        out = interpolate(v, (3.3, 4.4))
        assert np.allclose(out, [1.5, -2.0])


class TestWarp:
    def test_identity_exact(self):
        rng = np.random.default_rng(0)
        img = ScalarField(geom2(), rng.random((8, 8)))
        out = warp(img, identity_map(geom2()))
        assert np.array_equal(out.values, img.values)

    def test_constant_image_unchanged(self):
        img = ScalarField(geom2(), np.full((8, 8), 0.7))
        disp = VectorField(geom2(), np.random.default_rng(1).random((2, 8, 8)))
        out = warp(img, DeformationMap(geom2(), disp))
        assert np.allclose(out.values, 0.7)

    def test_impulse_translation(self):
        # map(x) = x + (2, 0) relocates the impulse by (-2, 0) in the output
        vals = np.zeros((8, 8))
        vals[4, 4] = 1.0
        img = ScalarField(geom2(), vals)
        disp = np.zeros((2, 8, 8))
        disp[0] = 2.0
        out = warp(img, DeformationMap(geom2(), VectorField(geom2(), disp)))
        expected = np.zeros((8, 8))
        expected[2, 4] = 1.0
        assert np.allclose(out.values, expected)

    def test_geometry_mismatch(self):
        img = ScalarField(geom2(8), np.zeros((8, 8)))
        with pytest.raises(GeometryMismatchError):
            warp(img, identity_map(geom2(16)))


class TestGradient:
    def test_constant_is_zero(self):
        f = ScalarField(geom2(), np.full((8, 8), 5.0))
        assert np.allclose(gradient(f).values, 0.0)

    def test_linear_ramp_exact_interior(self):
        g = geom2(boundary=CLAMP)
        f = ScalarField(g, 2.0 * np.broadcast_to(
            np.arange(8.0)[:, None], (8, 8)).copy())
        grad = gradient(f)
        assert np.allclose(grad.values[0], 2.0)
        assert np.allclose(grad.values[1], 0.0)

    def test_matches_stencil_oracle(self):
        rng = np.random.default_rng(5)
        vals = rng.random((8, 8))
        f = ScalarField(geom2(), vals)
        grad = gradient(f).values
        # brute-force periodic central-difference loop
        for i in range(8):
            for j in range(8):
                gx = (vals[(i + 1) % 8, j] - vals[(i - 1) % 8, j]) / 2.0
                gy = (vals[i, (j + 1) % 8] - vals[i, (j - 1) % 8]) / 2.0
                assert grad[0, i, j] == pytest.approx(gx, abs=1e-15)
                assert grad[1, i, j] == pytest.approx(gy, abs=1e-15)

    def test_spacing_scales_gradient(self):
        g = GridGeometry((8, 8), spacing=(2.0, 2.0))
        rng = np.random.default_rng(6)
        vals = rng.random((8, 8))
        g1 = gradient(ScalarField(geom2(), vals)).values
        g2 = gradient(ScalarField(g, vals)).values
        assert np.allclose(g2, g1 / 2.0)


class TestJacobianDeterminant:
    def test_identity_is_one(self):
        det = jacobian_determinant(identity_map(geom2()))
        assert np.array_equal(det.values, np.ones((8, 8)))

    def test_uniform_scaling(self):
        # map(x) = 2x, i.e. u(x) = x, on a clamp grid: det = 2^d interior
        g = geom2(boundary=CLAMP)
        u = mesh_coordinates(g)
        det = jacobian_determinant(DeformationMap(g, VectorField(g, u)))
        assert np.allclose(det.values[1:-1, 1:-1], 4.0)

    def test_matches_expansion_oracle(self):
        rng = np.random.default_rng(7)
        g = geom2()
        u = 0.1 * rng.standard_normal((2, 8, 8))
        det = jacobian_determinant(DeformationMap(g, VectorField(g, u))).values
        for i in range(8):
            for j in range(8):
                du = np.empty((2, 2))
                for a in range(2):
                    du[a, 0] = (u[a, (i + 1) % 8, j] - u[a, (i - 1) % 8, j]) / 2
                    du[a, 1] = (u[a, i, (j + 1) % 8] - u[a, i, (j - 1) % 8]) / 2
                expected = np.linalg.det(np.eye(2) + du)
                assert det[i, j] == pytest.approx(expected, abs=1e-12)

    def test_3d_identity(self):
        g = GridGeometry((5, 5, 5))
        assert np.array_equal(jacobian_determinant(identity_map(g)).values,
                              np.ones((5, 5, 5)))


class TestInvertMap:
    def test_identity(self):
        inv = invert_map(identity_map(geom2()))
        assert np.allclose(inv.displacement.values, 0.0)

    def test_translation_inverts_to_negative(self):
        g = geom2(16)
        disp = np.zeros((2, 16, 16))
        disp[0] = 1.5
        inv = invert_map(DeformationMap(g, VectorField(g, disp)))
        assert np.allclose(inv.displacement.values[0], -1.5, atol=1e-6)
        assert np.allclose(inv.displacement.values[1], 0.0, atol=1e-6)

    def test_composition_residual(self):
        rng = np.random.default_rng(8)
        g = GridGeometry((16, 16))
        from momshoot.kernel import KernelParams, make_plan, apply_K

        plan = make_plan(KernelParams(0.05, 0.05, 0.005), g)
        noise = VectorField(g, rng.standard_normal((2, 16, 16)))
        smooth = apply_K(noise, plan)
        u = 0.5 * smooth.values / np.max(np.abs(smooth.values))
        fwd = DeformationMap(g, VectorField(g, u))
        inv = invert_map(fwd, iterations=200, tolerance=1e-8)
        # residual of map(inverse(x)) - x
        from momshoot.fields import sample

        coords = mesh_coordinates(g)
        y = inv.displacement.values
        u_at = sample(u, coords + y, g.dims, g.boundary)
        residual = np.max(np.abs(y + u_at))
        assert residual < 1e-3

    def test_nonconvergence_raises(self):
        g = geom2(16)
        disp = np.zeros((2, 16, 16))
        disp[0] = 1.0
        m = DeformationMap(g, VectorField(g, disp))
        with pytest.raises(ConvergenceError) as info:
            invert_map(m, iterations=1, tolerance=1e-12)
        assert info.value.residual is not None
