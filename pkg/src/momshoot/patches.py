"""Sliding-window patch geometry: extraction, background pruning and
overlap-averaged reassembly of per-patch momentum predictions."""

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import GeometryMismatchError, InvalidInputError
from .fields import GridGeometry, VectorField


def _per_axis(value, ndim, name):
    if np.isscalar(value):
        value = (int(value),) * ndim
    value = tuple(int(v) for v in value)
    if len(value) != ndim:
        raise InvalidInputError("%s must give one value per axis" % name)
    return value


@dataclass(frozen=True)
class PatchSpec:
    size: tuple = 15      # odd, per axis (scalar broadcast)
    stride: tuple = 1     # per axis (scalar broadcast)
    flush_edges: bool = True

    def resolved(self, ndim):
        size = _per_axis(self.size, ndim, "size")
        stride = _per_axis(self.stride, ndim, "stride")
        for s in size:
            if s % 2 == 0 or s < 1:
                raise InvalidInputError("patch size must be odd and positive")
        for st, s in zip(stride, size):
            if not 1 <= st <= s:
                raise InvalidInputError("stride must satisfy 1 <= stride <= size")
        return size, stride


@dataclass(frozen=True)
class PatchGrid:
    spec: PatchSpec
    geometry: GridGeometry
    origins: tuple  # of d-int tuples, ordered

    @property
    def size(self):
        return self.spec.resolved(self.geometry.ndim)[0]


@dataclass(frozen=True)
class PatchBatch:
    grid: PatchGrid
    inputs: np.ndarray            # (n, 2, *size): layer 0 moving, layer 1 target
    targets: np.ndarray = None    # (n, d, *size) momentum windows, optional


def _axis_origins(n, size, stride, flush):
    origins = list(range(0, n - size + 1, stride))
    if flush and origins[-1] != n - size:
        origins.append(n - size)
    return origins


def plan_grid(geometry, spec):
    size, stride = spec.resolved(geometry.ndim)
    for s, n in zip(size, geometry.dims):
        if s > n:
            raise InvalidInputError("patch size %d exceeds grid extent %d" % (s, n))
    per_axis = [
        _axis_origins(n, s, st, spec.flush_edges)
        for n, s, st in zip(geometry.dims, size, stride)
    ]
    origins = tuple(product(*per_axis))
    return PatchGrid(spec, geometry, origins)


def _window(origin, size):
    return tuple(slice(o, o + s) for o, s in zip(origin, size))


def extract(moving, target, grid, momentum=None):
    """Copy raw patch windows; optionally fill per-dimension momentum targets."""
    if moving.geometry != target.geometry or moving.geometry != grid.geometry:
        raise GeometryMismatchError("moving/target/grid must share a geometry")
    size = grid.size
    n = len(grid.origins)
    d = grid.geometry.ndim
    inputs = np.empty((n, 2) + size)
    targets = None
    if momentum is not None:
        if momentum.geometry != grid.geometry:
            raise GeometryMismatchError("momentum grid differs from patch grid")
        targets = np.empty((n, d) + size)
    for k, origin in enumerate(grid.origins):
        win = _window(origin, size)
        inputs[k, 0] = moving.values[win]
        inputs[k, 1] = target.values[win]
        if targets is not None:
            targets[k] = momentum.values[(slice(None),) + win]
    return PatchBatch(grid, inputs, targets)


def prune(batch, background_threshold):
    """Drop patches whose moving AND target windows stay below the threshold.

    Returns (pruned batch, kept original indices)."""
    if background_threshold < 0:
        raise InvalidInputError("background threshold must be >= 0")
    d = batch.grid.geometry.ndim
    spatial = tuple(range(2, 2 + d))
    peak = batch.inputs.max(axis=spatial).max(axis=1)
    kept = np.nonzero(~(peak < background_threshold))[0]
    targets = batch.targets[kept] if batch.targets is not None else None
    return PatchBatch(batch.grid, batch.inputs[kept], targets), list(map(int, kept))


def assemble(predictions, grid):
    """Average per-patch momentum windows into a whole-image vector field.

    `predictions` has one (d, *size) block per grid origin; pruned positions
    must be zero-filled by the caller and still count toward the coverage
    denominator."""
    predictions = np.asarray(predictions, dtype=np.float64)
    n = len(grid.origins)
    d = grid.geometry.ndim
    size = grid.size
    if predictions.shape != (n, d) + size:
        raise InvalidInputError(
            "predictions shape %s does not match %s"
            % (predictions.shape, (n, d) + size)
        )
    acc = np.zeros((d,) + grid.geometry.dims)
    count = np.zeros(grid.geometry.dims)
    for k, origin in enumerate(grid.origins):
        win = _window(origin, size)
        acc[(slice(None),) + win] += predictions[k]
        count[win] += 1.0
    if np.any(count == 0):
        raise InvalidInputError("patch grid does not cover every node")
    return VectorField(grid.geometry, acc / count)
