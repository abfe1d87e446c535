"""Evaluation metrics (pooled error percentiles, det-J positivity), patch and
wall-clock accounting, a greedy iterative-mean atlas builder, and the bundled
synthetic corpus generator used in place of clinical data."""

import time
from dataclasses import dataclass

import numpy as np

from .errors import GeometryMismatchError, InvalidInputError
from .fields import (DeformationMap, GridGeometry, ScalarField, VectorField,
                     invert_map, jacobian_determinant, warp)
from .kernel import apply_multiplier
from .optimizer import register
from .patches import plan_grid

PERCENTILES = (0.3, 5.0, 25.0, 50.0, 75.0, 95.0, 99.7)


@dataclass(frozen=True)
class ErrorReport:
    percentiles: dict           # percentile -> pooled error, grid units
    detj_positive: tuple        # per-case flag
    detj_ratio: float
    case_count: int
    node_count: int


def deformation_error(pred, truth):
    """Per-node Euclidean norm of the displacement difference."""
    if pred.geometry != truth.geometry:
        raise GeometryMismatchError("maps live on different grids")
    diff = pred.displacement.values - truth.displacement.values
    return ScalarField(pred.geometry, np.sqrt(np.sum(diff**2, axis=0)))


def report(errors, maps):
    """Pool error values over all nodes of all cases; per-case det-J check."""
    if not errors or not maps:
        raise InvalidInputError("need at least one case")
    pooled = np.concatenate([e.values.ravel() for e in errors])
    pct = {p: float(np.percentile(pooled, p)) for p in PERCENTILES}
    flags = tuple(
        bool(np.min(jacobian_determinant(m).values) > 0.0) for m in maps
    )
    return ErrorReport(
        percentiles=pct,
        detj_positive=flags,
        detj_ratio=sum(flags) / len(flags),
        case_count=len(errors),
        node_count=int(pooled.size),
    )


def speed_accounting(spec_fast, spec_slow, geometry, kept_fast, kept_slow,
                     run_fast=None, run_slow=None):
    """Patch-count reduction ratio plus optional measured wall-clock pair.

    kept_* are the patch counts actually predicted (after pruning); run_* are
    zero-argument callables timed once each when given."""
    n_fast = len(plan_grid(geometry, spec_fast).origins)
    n_slow = len(plan_grid(geometry, spec_slow).origins)
    count_ratio = kept_fast / kept_slow if kept_slow else float("nan")
    result = {
        "origins_fast": n_fast,
        "origins_slow": n_slow,
        "kept_fast": kept_fast,
        "kept_slow": kept_slow,
        "count_ratio": count_ratio,
    }
    if run_fast is not None and run_slow is not None:
        t0 = time.perf_counter()
        run_fast()
        t_fast = time.perf_counter() - t0
        t0 = time.perf_counter()
        run_slow()
        t_slow = time.perf_counter() - t0
        result["seconds_fast"] = t_fast
        result["seconds_slow"] = t_slow
        result["wallclock_ratio"] = t_fast / t_slow if t_slow else float("nan")
    return result


def build_atlas(images, rounds, reg_config):
    """Greedy iterative mean: register the running atlas to every image and
    average the images pulled back into the atlas frame."""
    if len(images) < 2:
        raise InvalidInputError("atlas needs at least two images")
    geom = images[0].geometry
    for im in images[1:]:
        if im.geometry != geom:
            raise GeometryMismatchError("atlas images must share a geometry")
    atlas = ScalarField(geom, np.mean([im.values for im in images], axis=0))
    for _ in range(rounds):
        warped = []
        for im in images:
            result = register(atlas, im, reg_config)
            inverse = invert_map(result.phi, iterations=100, tolerance=1e-6)
            warped.append(warp(im, inverse).values)
        atlas = ScalarField(geom, np.mean(warped, axis=0))
    return atlas


# ---------------------------------------------------------------------------
# synthetic corpus


def brain_template(geometry, rng=None):
    """Brain-like template: a ring (cortex stand-in) plus Gaussian blobs."""
    dims = geometry.dims
    d = geometry.ndim
    coords = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims],
                                  indexing="ij"))
    centre_vec = np.array([(n - 1) / 2.0 for n in dims])
    centre = centre_vec.reshape((d,) + (1,) * d)
    r = np.sqrt(np.sum((coords - centre) ** 2, axis=0))
    ring_r = 0.38 * min(dims)
    img = np.exp(-((r - ring_r) ** 2) / (2.0 * (0.05 * min(dims)) ** 2))
    blob_rng = np.random.default_rng(1234) if rng is None else rng
    for _ in range(4):
        pos = centre_vec + blob_rng.uniform(
            -0.2 * min(dims), 0.2 * min(dims), size=d)
        width = blob_rng.uniform(0.05, 0.10) * min(dims)
        dist2 = np.sum((coords - pos.reshape((d,) + (1,) * d)) ** 2, axis=0)
        img += blob_rng.uniform(0.5, 1.0) * np.exp(-dist2 / (2.0 * width**2))
    img /= img.max()
    return ScalarField(geometry, img)


def random_diffeo(geometry, plan, shooting_config, rng, magnitude=1.0,
                  support=None):
    """Random smooth diffeomorphic map: smoothed noise momentum, shot to t=1.

    `support`, when given, is a [0, 1] weight array multiplying the momentum,
    confining it to a region of interest. Returns (m0, map)."""
    from .shooting import shoot

    d = geometry.ndim
    noise = rng.standard_normal((d,) + geometry.dims)
    m0 = apply_multiplier(noise, geometry.dims, plan.multiplier)
    if support is not None:
        m0 = m0 * support
    v_scale = np.max(np.abs(
        apply_multiplier(m0, geometry.dims, plan.multiplier)))
    m0 = m0 * (magnitude / v_scale)
    m0 = VectorField(geometry, m0)
    return m0, shoot(m0, shooting_config)


def synthetic_pair(template, plan, shooting_config, rng, magnitude=1.0):
    """(moving, target, truth_map): target = template warped by the inverse of
    a random diffeo, so the moving->target ground truth is the diffeo itself.

    The diffeo's momentum is weighted by the template intensity: momentum
    lives on image structure and vanishes in the background, matching what
    registration of the pair can actually recover. The forward map satisfies
    target(x) = moving(x + u(x)); warping the moving image by the returned
    map reproduces the target."""
    support = template.values / np.max(template.values)
    _, truth = random_diffeo(template.geometry, plan, shooting_config, rng,
                             magnitude, support=support)
    target = warp(template, truth)
    return template, target, truth
