"""Shooting-energy minimization over the initial momentum.

E(m0) = <m0, K m0> + (1/sigma^2) ||S o Phi(1) - T||^2

The gradient is the exact gradient of the discretized energy: reverse-mode
differentiation through every arithmetic step of the integrator, the warp
and both energy terms (discretize-then-optimize).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUpError, GeometryMismatchError, InvalidInputError
from .fields import (DeformationMap, VectorField, central_diff,
                     mesh_coordinates, sample, sample_with_point_grad,
                     zero_vector)
from .kernel import apply_multiplier
from .shooting import ShootingConfig, _advance, _check_finite, rhs


@dataclass(frozen=True)
class RegistrationConfig:
    shooting: ShootingConfig
    sigma: float = 0.1
    max_iters: int = 100
    step_size: float = 1e-3
    step_shrink: float = 0.5
    grad_tolerance: float = 1e-4

    def __post_init__(self):
        if self.sigma <= 0 or self.step_size <= 0 or self.grad_tolerance <= 0:
            raise InvalidInputError("sigma, step_size, grad_tolerance must be > 0")
        if not 0.0 < self.step_shrink < 1.0:
            raise InvalidInputError("step_shrink must lie in (0, 1)")


@dataclass(frozen=True)
class RegistrationResult:
    m0: VectorField
    phi: DeformationMap
    energy_trace: list   # (iteration, total, metric_term, image_term)
    converged: bool
    step_trace: list = None  # accepted step size per trace entry


def _check_inputs(m0, S, T, config):
    geom = config.shooting.plan.geometry
    for f in (m0, S, T):
        if f.geometry != geom:
            raise GeometryMismatchError("inputs must share the kernel plan grid")


# ---------------------------------------------------------------------------
# forward energy


def _integrate_with_tape(m0, config):
    """Returns ((m1, u1), tape) with the (m, u) arrays at every step start."""
    dt = 1.0 / config.steps
    m = np.array(m0, dtype=np.float64)
    u = np.zeros_like(m)
    tape = []
    for k in range(config.steps):
        tape.append((m, u))
        m, u = _advance(m, u, dt, config.plan, config.scheme)
        _check_finite(m, u, (k + 1) * dt)
    return (m, u), tape


def energy_terms(m0_values, S, T, config):
    """(total, metric, image, u1) on raw momentum values."""
    geom = config.shooting.plan.geometry
    Km0 = apply_multiplier(m0_values, geom.dims, config.shooting.plan.multiplier)
    metric = float(np.sum(m0_values * Km0))
    if np.any(m0_values):
        (_, u1), _ = _integrate_with_tape(m0_values, config.shooting)
    else:
        u1 = np.zeros_like(m0_values)
    coords = mesh_coordinates(geom)
    warped = sample(S.values, coords + u1, geom.dims, geom.boundary)
    image = float(np.sum((warped - T.values) ** 2)) / config.sigma**2
    return metric + image, metric, image, u1


def energy(m0, S, T, config):
    """Evaluate the shooting energy; returns (total, metric_term, image_term)."""
    _check_inputs(m0, S, T, config)
    total, metric, image, _ = energy_terms(m0.values, S, T, config)
    return total, metric, image


# ---------------------------------------------------------------------------
# reverse-mode gradient


def _d(values, axis, geom):
    return central_diff(values, axis, geom.spacing[axis], geom.boundary)


def _rhs_vjp(m, u, wm, wu, plan):
    """Cotangents on (m, u) given cotangents (wm, wu) on rhs(m, u)."""
    geom = plan.geometry
    d = geom.ndim
    v = apply_multiplier(m, geom.dims, plan.multiplier)
    div_v = sum(_d(v[j], j, geom) for j in range(d))

    vbar = np.zeros_like(v)
    mbar = np.zeros_like(m)
    ubar = np.zeros_like(u)

    # du_i = -(v_i + sum_j (D_j u_i) v_j)
    for j in range(d):
        acc = wu[j].copy()
        for i in range(d):
            acc += wu[i] * _d(u[i], j, geom)
        vbar[j] -= acc
    for i in range(d):
        for j in range(d):
            ubar[i] += _d(wu[i] * v[j], j, geom)

    # dm = -((Dv)^T m + (Dm) v + (div v) m)
    wm_dot_m = sum(wm[i] * m[i] for i in range(d))
    for j in range(d):
        acc = _d(wm_dot_m, j, geom)
        for i in range(d):
            acc += _d(wm[i] * m[j], i, geom)
            acc -= wm[i] * _d(m[i], j, geom)
        vbar[j] += acc
    for j in range(d):
        acc = -wm[j] * div_v
        for i in range(d):
            acc -= wm[i] * _d(v[j], i, geom)
            acc += _d(wm[j] * v[i], i, geom)
        mbar[j] += acc

    # v = K m, K self-adjoint
    mbar += apply_multiplier(vbar, geom.dims, plan.multiplier)
    return mbar, ubar


def _step_vjp(m, u, wm, wu, dt, config):
    """Pull cotangents back through one integration step starting at (m, u)."""
    _rhs = rhs
    plan = config.plan
    if config.scheme == "euler":
        dm, du = _rhs_vjp(m, u, wm, wu, plan)
        return wm + dt * dm, wu + dt * du

    k1m, k1u = _rhs(m, u, plan)
    a2 = (m + 0.5 * dt * k1m, u + 0.5 * dt * k1u)
    k2m, k2u = _rhs(a2[0], a2[1], plan)
    a3 = (m + 0.5 * dt * k2m, u + 0.5 * dt * k2u)
    k3m, k3u = _rhs(a3[0], a3[1], plan)
    a4 = (m + dt * k3m, u + dt * k3u)

    ymbar, yubar = wm.copy(), wu.copy()
    kbar4 = (dt / 6.0 * wm, dt / 6.0 * wu)
    kbar3 = (dt / 3.0 * wm, dt / 3.0 * wu)
    kbar2 = (dt / 3.0 * wm, dt / 3.0 * wu)
    kbar1 = (dt / 6.0 * wm, dt / 6.0 * wu)

    am, au = _rhs_vjp(a4[0], a4[1], kbar4[0], kbar4[1], plan)
    ymbar += am
    yubar += au
    kbar3 = (kbar3[0] + dt * am, kbar3[1] + dt * au)

    am, au = _rhs_vjp(a3[0], a3[1], kbar3[0], kbar3[1], plan)
    ymbar += am
    yubar += au
    kbar2 = (kbar2[0] + 0.5 * dt * am, kbar2[1] + 0.5 * dt * au)

    am, au = _rhs_vjp(a2[0], a2[1], kbar2[0], kbar2[1], plan)
    ymbar += am
    yubar += au
    kbar1 = (kbar1[0] + 0.5 * dt * am, kbar1[1] + 0.5 * dt * au)

    am, au = _rhs_vjp(m, u, kbar1[0], kbar1[1], plan)
    return ymbar + am, yubar + au


def energy_gradient_values(m0_values, S, T, config):
    geom = config.shooting.plan.geometry
    plan = config.shooting.plan
    (m1, u1), tape = _integrate_with_tape(m0_values, config.shooting)

    coords = mesh_coordinates(geom)
    warped, gS = sample_with_point_grad(S.values, coords + u1, geom.dims,
                                        geom.boundary)
    resid = warped - T.values
    wu = (2.0 / config.sigma**2) * resid * gS
    wm = np.zeros_like(wu)

    dt = 1.0 / config.shooting.steps
    for m, u in reversed(tape):
        wm, wu = _step_vjp(m, u, wm, wu, dt, config.shooting)

    grad = wm + 2.0 * apply_multiplier(m0_values, geom.dims, plan.multiplier)
    return grad


def energy_gradient(m0, S, T, config):
    """Exact gradient of the discretized energy with respect to m0."""
    _check_inputs(m0, S, T, config)
    geom = config.shooting.plan.geometry
    if geom.boundary != "periodic":
        raise InvalidInputError("energy gradient requires a periodic grid")
    return VectorField(geom, energy_gradient_values(m0.values, S, T, config))


# ---------------------------------------------------------------------------
# gradient descent with backtracking


MAX_HALVINGS = 20


def register(S, T, config):
    """Gradient descent on E(m0) from m0 = 0, with backtracking line search."""
    geom = config.shooting.plan.geometry
    m0 = np.zeros((geom.ndim,) + geom.dims)
    _check_inputs(VectorField(geom, m0), S, T, config)

    total, metric, image, _ = energy_terms(m0, S, T, config)
    trace = [(0, total, metric, image)]
    steps_taken = [0.0]
    step_size = config.step_size
    converged = False
    blew_up_everywhere = True

    for it in range(1, config.max_iters + 1):
        grad = energy_gradient_values(m0, S, T, config)
        gmax = float(np.max(np.abs(grad)))
        if gmax < config.grad_tolerance:
            converged = True
            blew_up_everywhere = False
            break

        accepted = False
        s = step_size
        for _ in range(MAX_HALVINGS + 1):
            cand = m0 - s * grad
            try:
                c_total, c_metric, c_image, _ = energy_terms(cand, S, T, config)
            except BlowUpError:
                s *= config.step_shrink
                continue
            blew_up_everywhere = False
            if c_total < total:
                m0, total, metric, image = cand, c_total, c_metric, c_image
                trace.append((it, total, metric, image))
                steps_taken.append(s)
                step_size = s
                accepted = True
                break
            s *= config.step_shrink
        if not accepted:
            converged = gmax < config.grad_tolerance
            break

    if blew_up_everywhere and config.max_iters > 0 and not converged:
        raise BlowUpError("every line-search trial blew up; registration failed")

    from .shooting import shoot

    m0_field = VectorField(geom, m0)
    phi = shoot(m0_field, config.shooting)
    return RegistrationResult(m0_field, phi, trace, converged, steps_taken)
