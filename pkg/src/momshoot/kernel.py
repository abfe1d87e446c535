"""Spectral smoothing operator K and its inverse differential operator L.

L is the positive-definite operator a*Lap^2 - b*Lap + c built from the
3-point discrete Laplacian stencil on a periodic grid; K = L^{-1} applied
per vector component through real-to-complex FFTs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GeometryMismatchError, InvalidInputError
from .fields import PERIODIC, GridGeometry, VectorField

DEFAULT_PARAMS_2D = (0.05, 0.05, 0.005)
DEFAULT_PARAMS_3D = (1.5, 1.5, 0.15)


@dataclass(frozen=True)
class KernelParams:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise InvalidInputError("kernel a and b must be >= 0")
        if self.c <= 0:
            raise InvalidInputError("kernel c must be > 0")
        if self.a + self.b <= 0:
            raise InvalidInputError("kernel needs a + b > 0 for actual smoothing")

    @classmethod
    def default(cls, ndim):
        p = DEFAULT_PARAMS_2D if ndim == 2 else DEFAULT_PARAMS_3D
        return cls(*p)


@dataclass(frozen=True)
class KernelPlan:
    params: KernelParams
    geometry: GridGeometry
    multiplier: np.ndarray  # on the rfft frequency grid

    def __post_init__(self):
        m = np.asarray(self.multiplier, dtype=np.float64)
        m.flags.writeable = False
        object.__setattr__(self, "multiplier", m)


def laplacian_symbol(geometry):
    """Negated eigenvalues of the 3-point discrete Laplacian (>= 0),
    on the rfft frequency grid."""
    dims = geometry.dims
    lam = 0.0
    for ax, (n, h) in enumerate(zip(dims, geometry.spacing)):
        freq = np.arange(n, dtype=np.float64)
        if ax == len(dims) - 1:
            freq = freq[: n // 2 + 1]
        shape = [1] * len(dims)
        shape[ax] = len(freq)
        lam = lam + ((2.0 - 2.0 * np.cos(2.0 * np.pi * freq / n)) / h**2).reshape(shape)
    return np.broadcast_to(lam, dims[:-1] + (dims[-1] // 2 + 1,)).copy()


def make_plan(params, geometry):
    if geometry.boundary != PERIODIC:
        raise InvalidInputError("spectral kernel requires a periodic grid")
    lam = laplacian_symbol(geometry)
    mult = 1.0 / (params.a * lam**2 + params.b * lam + params.c)
    return KernelPlan(params, geometry, mult)


def _apply(vec, plan, multiplier):
    if vec.geometry != plan.geometry:
        raise GeometryMismatchError("vector field grid differs from kernel plan grid")
    return VectorField(vec.geometry, apply_multiplier(vec.values, plan.geometry.dims,
                                                      multiplier))


def apply_multiplier(values, dims, multiplier):
    """Pointwise spectral multiply on the last len(dims) axes."""
    axes = tuple(range(values.ndim - len(dims), values.ndim))
    spec = np.fft.rfftn(values, axes=axes)
    spec *= multiplier
    return np.fft.irfftn(spec, s=dims, axes=axes)


def apply_K(m, plan):
    """v = K m: smooth momentum into velocity."""
    return _apply(m, plan, plan.multiplier)


def apply_L(v, plan):
    """m = L v: the inverse differential operator."""
    return _apply(v, plan, 1.0 / plan.multiplier)
