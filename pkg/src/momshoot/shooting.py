"""Forward integration of the geodesic system from initial momentum to the
time-1 deformation map.

State is (m, u) where u is the displacement of the map x -> x + u(x):
    v = K m
    dm/dt = -((Dv)^T m + (Dm) v + (div v) m)
    du/dt = -(I + Du) v
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import BlowUpError, GeometryMismatchError, InvalidInputError
from .fields import DeformationMap, VectorField, central_diff, identity_map
from .kernel import KernelPlan, apply_multiplier

BLOWUP_LIMIT = 1e6


@dataclass(frozen=True)
class ShootingConfig:
    plan: KernelPlan
    steps: int = 10
    scheme: str = "rk4"

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidInputError("shooting needs at least one step")
        if self.scheme not in ("euler", "rk4"):
            raise InvalidInputError("scheme must be 'euler' or 'rk4'")


@dataclass(frozen=True)
class GeodesicState:
    m: VectorField
    phi: DeformationMap
    t: float


def _diff(values, axis, geometry):
    return central_diff(values, axis, geometry.spacing[axis], geometry.boundary)


def ad_star_values(v, m, geometry):
    """(Dv)^T m + (Dm) v + (div v) m on raw (d, *dims) arrays."""
    d = geometry.ndim
    out = np.zeros_like(m)
    div_v = sum(_diff(v[j], j, geometry) for j in range(d))
    for i in range(d):
        acc = div_v * m[i]
        for j in range(d):
            acc += _diff(v[j], i, geometry) * m[j]  # (Dv)^T m
            acc += _diff(m[i], j, geometry) * v[j]  # (Dm) v
        out[i] = acc
    return out


def ad_star(v, m):
    if v.geometry != m.geometry:
        raise GeometryMismatchError("ad* operands live on different grids")
    return VectorField(v.geometry, ad_star_values(v.values, m.values, v.geometry))


def rhs(m, u, plan):
    """Time derivatives (dm, du) of momentum and displacement."""
    geom = plan.geometry
    d = geom.ndim
    v = apply_multiplier(m, geom.dims, plan.multiplier)
    dm = -ad_star_values(v, m, geom)
    du = np.empty_like(u)
    for i in range(d):
        acc = v[i].copy()
        for j in range(d):
            acc += _diff(u[i], j, geom) * v[j]
        du[i] = -acc
    return dm, du


def _advance(m, u, dt, plan, scheme):
    if scheme == "euler":
        dm, du = rhs(m, u, plan)
        return m + dt * dm, u + dt * du
    k1m, k1u = rhs(m, u, plan)
    k2m, k2u = rhs(m + 0.5 * dt * k1m, u + 0.5 * dt * k1u, plan)
    k3m, k3u = rhs(m + 0.5 * dt * k2m, u + 0.5 * dt * k2u, plan)
    k4m, k4u = rhs(m + dt * k3m, u + dt * k3u, plan)
    m_new = m + (dt / 6.0) * (k1m + 2.0 * k2m + 2.0 * k3m + k4m)
    u_new = u + (dt / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    return m_new, u_new


def _check_finite(m, u, t):
    if (not np.all(np.isfinite(m)) or not np.all(np.isfinite(u))
            or np.max(np.abs(m), initial=0.0) > BLOWUP_LIMIT):
        raise BlowUpError("geodesic integration blew up at t=%.4f" % t, t=t)


def step(state, config):
    dt = 1.0 / config.steps
    if state.t + dt > 1.0 + 1e-9:
        raise InvalidInputError("step would integrate past t=1")
    m, u = _advance(state.m.values, state.phi.displacement.values, dt,
                    config.plan, config.scheme)
    t = state.t + dt
    _check_finite(m, u, t)
    geom = config.plan.geometry
    return GeodesicState(
        VectorField(geom, m), DeformationMap(geom, VectorField(geom, u)), t
    )


def integrate_arrays(m0, config):
    """Integrate raw arrays from t=0 to t=1; returns (m1, u1)."""
    dt = 1.0 / config.steps
    m = np.array(m0, dtype=np.float64)
    u = np.zeros_like(m)
    for k in range(config.steps):
        m, u = _advance(m, u, dt, config.plan, config.scheme)
        _check_finite(m, u, (k + 1) * dt)
    return m, u


def shoot(m0, config):
    """Shoot initial momentum to the time-1 deformation map."""
    geom = config.plan.geometry
    if m0.geometry != geom:
        raise GeometryMismatchError("momentum grid differs from kernel plan grid")
    if not np.any(m0.values):
        return identity_map(geom)
    _, u = integrate_arrays(m0.values, config)
    return DeformationMap(geom, VectorField(geom, u))
