"""Regular-grid field containers and the differential/interpolation primitives.

Coordinates and displacements are expressed in grid-index units; the grid
spacing only enters differential operators (gradient, Jacobian).
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import ConvergenceError, GeometryMismatchError, InvalidInputError

PERIODIC = "periodic"
CLAMP = "clamp"


@dataclass(frozen=True)
class GridGeometry:
    """A d-dimensional regular grid (d in {2, 3})."""

    dims: tuple
    spacing: tuple = None
    boundary: str = PERIODIC

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) not in (2, 3):
            raise InvalidInputError("grid must be 2D or 3D, got %dD" % len(dims))
        if any(n < 3 for n in dims):
            raise InvalidInputError("all grid extents must be >= 3")
        spacing = self.spacing
        if spacing is None:
            spacing = (1.0,) * len(dims)
        spacing = tuple(float(h) for h in spacing)
        if len(spacing) != len(dims):
            raise InvalidInputError("spacing must give one value per axis")
        if any(h <= 0 for h in spacing):
            raise InvalidInputError("all spacings must be positive")
        object.__setattr__(self, "spacing", spacing)
        if self.boundary not in (PERIODIC, CLAMP):
            raise InvalidInputError("boundary must be 'periodic' or 'clamp'")

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def node_count(self):
        return int(np.prod(self.dims))


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ScalarField:
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.geometry.dims:
            raise InvalidInputError(
                "scalar field shape %s does not match grid %s"
                % (v.shape, self.geometry.dims)
            )
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("scalar field contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True)
class VectorField:
    geometry: GridGeometry
    values: np.ndarray  # shape (d, *dims), component-major

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        want = (self.geometry.ndim,) + self.geometry.dims
        if v.shape != want:
            raise InvalidInputError(
                "vector field shape %s does not match %s" % (v.shape, want)
            )
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("vector field contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True)
class DeformationMap:
    """Map(x) = x + displacement(x), displacement in grid-index units."""

    geometry: GridGeometry
    displacement: VectorField = None

    def __post_init__(self):
        disp = self.displacement
        if disp is None:
            disp = zero_vector(self.geometry)
            object.__setattr__(self, "displacement", disp)
        if disp.geometry != self.geometry:
            raise GeometryMismatchError("displacement lives on a different grid")

    @property
    def is_identity(self):
        return not np.any(self.displacement.values)


def zero_scalar(geometry):
    return ScalarField(geometry, np.zeros(geometry.dims))


def zero_vector(geometry):
    return VectorField(geometry, np.zeros((geometry.ndim,) + geometry.dims))


def identity_map(geometry):
    return DeformationMap(geometry, zero_vector(geometry))


def mesh_coordinates(geometry):
    """Node index coordinates, shape (d, *dims)."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in geometry.dims],
                        indexing="ij")
    return np.stack(grids)


def _check_same_grid(a, b):
    if a.geometry != b.geometry:
        raise GeometryMismatchError(
            "fields live on different grids: %s vs %s" % (a.geometry, b.geometry)
        )


# ---------------------------------------------------------------------------
# interpolation


def sample(values, points, dims, boundary):
    """Multilinear interpolation of `values` (shape (*dims,) or broadcastable
    leading axes x (*dims,)) at `points` of shape (d, ...) in index units."""
    d = len(dims)
    points = np.asarray(points, dtype=np.float64)
    base = np.floor(points).astype(np.int64)
    frac = points - base
    out = 0.0
    for corner in product((0, 1), repeat=d):
        idx = []
        w = 1.0
        for ax in range(d):
            i = base[ax] + corner[ax]
            if boundary == PERIODIC:
                i = np.mod(i, dims[ax])
            else:
                i = np.clip(i, 0, dims[ax] - 1)
            idx.append(i)
            w = w * (frac[ax] if corner[ax] else (1.0 - frac[ax]))
        out = out + w * values[(Ellipsis,) + tuple(idx)]
    return out


def sample_with_point_grad(values, points, dims, boundary):
    """As `sample`, also returning d/d(point) of the interpolant,
    shape (d, ...)."""
    d = len(dims)
    points = np.asarray(points, dtype=np.float64)
    base = np.floor(points).astype(np.int64)
    frac = points - base
    out = 0.0
    grad = [0.0] * d
    for corner in product((0, 1), repeat=d):
        idx = []
        ws = []
        dws = []
        for ax in range(d):
            i = base[ax] + corner[ax]
            if boundary == PERIODIC:
                i = np.mod(i, dims[ax])
            else:
                i = np.clip(i, 0, dims[ax] - 1)
            idx.append(i)
            if corner[ax]:
                ws.append(frac[ax])
                dws.append(np.ones_like(frac[ax]))
            else:
                ws.append(1.0 - frac[ax])
                dws.append(-np.ones_like(frac[ax]))
        v = values[(Ellipsis,) + tuple(idx)]
        w_all = np.prod(np.stack(ws), axis=0)
        out = out + w_all * v
        for ax in range(d):
            w = dws[ax]
            for other in range(d):
                if other != ax:
                    w = w * ws[other]
            grad[ax] = grad[ax] + w * v
    return out, np.stack(grad)


def interpolate(fld, point):
    """Multilinear interpolation of a Scalar/VectorField at one point."""
    point = np.asarray(point, dtype=np.float64)
    geom = fld.geometry
    if point.shape != (geom.ndim,):
        raise InvalidInputError("point must have %d coordinates" % geom.ndim)
    if not np.all(np.isfinite(point)):
        raise InvalidInputError("interpolation point must be finite")
    pts = point.reshape(geom.ndim, 1)
    out = sample(fld.values, pts, geom.dims, geom.boundary)
    if isinstance(fld, ScalarField):
        return float(out[0])
    return np.array([out[k, 0] for k in range(geom.ndim)])


def warp(image, defmap):
    """output(x) = image(x + u(x)); boundary handling per image geometry."""
    _check_same_grid(image, defmap)
    geom = image.geometry
    points = mesh_coordinates(geom) + defmap.displacement.values
    out = sample(image.values, points, geom.dims, geom.boundary)
    return ScalarField(geom, out)


# ---------------------------------------------------------------------------
# differential operators


def central_diff(values, axis, spacing, boundary):
    """d/dx_axis by central differences; one-sided at clamp borders."""
    if boundary == PERIODIC:
        return (np.roll(values, -1, axis) - np.roll(values, 1, axis)) / (2.0 * spacing)
    out = np.empty_like(values)
    n = values.shape[axis]
    sl = lambda a, b: tuple(
        slice(a, b) if ax == axis else slice(None) for ax in range(values.ndim)
    )
    out[sl(1, n - 1)] = (values[sl(2, n)] - values[sl(0, n - 2)]) / (2.0 * spacing)
    out[sl(0, 1)] = (values[sl(1, 2)] - values[sl(0, 1)]) / spacing
    out[sl(n - 1, n)] = (values[sl(n - 1, n)] - values[sl(n - 2, n - 1)]) / spacing
    return out


def gradient(fld):
    """Central-difference gradient of a scalar field."""
    geom = fld.geometry
    comps = [
        central_diff(fld.values, ax, geom.spacing[ax], geom.boundary)
        for ax in range(geom.ndim)
    ]
    return VectorField(geom, np.stack(comps))


def displacement_jacobian(defmap):
    """Du, shape (d, d, *dims): entry (i, j) = d u_i / d x_j."""
    geom = defmap.geometry
    u = defmap.displacement.values
    d = geom.ndim
    J = np.empty((d, d) + geom.dims)
    for i in range(d):
        for j in range(d):
            J[i, j] = central_diff(u[i], j, geom.spacing[j], geom.boundary)
    return J


def jacobian_determinant(defmap):
    """Per-node det of D(x + u(x)) = I + Du."""
    geom = defmap.geometry
    J = displacement_jacobian(defmap)
    for i in range(geom.ndim):
        J[i, i] += 1.0
    if geom.ndim == 2:
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    else:
        det = (
            J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
            - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
            + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
        )
    return ScalarField(geom, det)


def invert_map(defmap, iterations=50, tolerance=1e-6):
    """Fixed-point inversion: y <- -u(x + y), starting from y = 0."""
    geom = defmap.geometry
    u = defmap.displacement.values
    coords = mesh_coordinates(geom)
    y = np.zeros_like(u)
    for _ in range(iterations):
        y_new = -sample(u, coords + y, geom.dims, geom.boundary)
        delta = float(np.max(np.abs(y_new - y)))
        y = y_new
        if delta <= tolerance:
            return DeformationMap(geom, VectorField(geom, y))
    raise ConvergenceError(
        "map inversion did not converge: last update %.3g > %.3g"
        % (delta, tolerance),
        residual=delta,
    )
