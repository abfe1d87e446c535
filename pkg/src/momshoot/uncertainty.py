"""Monte Carlo dropout sampling of momentum predictions and per-node
deformation variance.

The final momentum is the sample mean; the mean deformation is the shoot of
that mean (not the mean of the shot maps). Per-direction variance comes from
integrating each momentum sample separately.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .fields import DeformationMap, ScalarField, VectorField
from .network import predict_image
from .shooting import shoot
from . import runtime


@dataclass(frozen=True)
class UncertaintyConfig:
    samples: int = 50
    rng_seed: int = 0
    dropout_p: float = 0.3

    def __post_init__(self):
        if self.samples < 1:
            raise InvalidInputError("need at least one sample")


@dataclass(frozen=True)
class UncertaintyResult:
    mean_m0: VectorField
    mean_phi: DeformationMap
    variance: VectorField       # per-direction variance of the map
    uncertainty: ScalarField    # sqrt of the summed directional variances
    degenerate: bool = False    # single sample: variance defined as 0


def sample_predictions(weights, config, moving, target, spec, ucfg,
                       threshold=0.0):
    """`samples` independent whole-image predictions in sampled dropout mode.

    Each sample k draws its dropout masks from an rng stream derived from
    (rng_seed, k), so the list is deterministic for a given seed."""
    def one(k):
        return predict_image(weights, config, moving, target, spec, threshold,
                             dropout_mode="sampled",
                             rng_seed=(ucfg.rng_seed, k))

    threads = runtime.thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(ucfg.samples)))
    return [one(k) for k in range(ucfg.samples)]


def summarize(samples_m0, shooting_config):
    """Sample-mean momentum, its deformation, and per-node map variance."""
    if not samples_m0:
        raise InvalidInputError("need at least one momentum sample")
    geom = samples_m0[0].geometry
    n = len(samples_m0)
    stack = np.stack([s.values for s in samples_m0])
    mean_m0 = VectorField(geom, stack.mean(axis=0))
    mean_phi = shoot(mean_m0, shooting_config)

    def one_map(s):
        return shoot(s, shooting_config).displacement.values

    threads = runtime.thread_count()
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            maps = list(pool.map(one_map, samples_m0))
    else:
        maps = [one_map(s) for s in samples_m0]

    if n == 1:
        variance = np.zeros_like(maps[0])
        degenerate = True
    else:
        variance = np.var(np.stack(maps), axis=0, ddof=1)
        degenerate = False
    uncertainty = np.sqrt(variance.sum(axis=0))
    return UncertaintyResult(
        mean_m0, mean_phi, VectorField(geom, variance),
        ScalarField(geom, uncertainty), degenerate,
    )
