"""Run configuration: one TOML file plus flag overrides (flags win).

Unknown sections or keys are rejected so a typo cannot silently fall back to
a default.
"""

import copy

import tomli

from .errors import InvalidInputError
from .fields import GridGeometry
from .kernel import KernelParams, make_plan
from .network import NetConfig, TrainConfig
from .optimizer import RegistrationConfig
from .patches import PatchSpec
from .shooting import ShootingConfig
from .uncertainty import UncertaintyConfig

DEFAULTS = {
    "kernel": {"a": 0.05, "b": 0.05, "c": 0.005},
    "kernel3d": {"a": 1.5, "b": 1.5, "c": 0.15},
    "shooting": {"steps": 10, "scheme": "rk4"},
    "registration": {
        "sigma": 0.1,
        "max_iters": 200,
        "step_size": 0.05,
        "step_shrink": 0.5,
        "grad_tolerance": 1e-4,
    },
    "patch": {
        "size": 15,
        "train_stride_2d": 1,
        "train_stride_3d": 7,
        "predict_stride": 14,
        "flush_edges": True,
        "background_threshold": 0.001,
    },
    "net": {
        "features": [16, 32],
        "convs_per_block": 3,
        "dropout_p": 0.3,
    },
    "train": {
        "learning_rate": 0.0005,
        "decay": 0.1,
        "epochs": 10,
        "rmsprop_epsilon": 1e-8,
        "batch_size": 32,
        "rng_seed": 0,
    },
    "uncertainty": {"samples": 50, "rng_seed": 0, "dropout_p": 0.3},
}

INIT_CONFIG = """\
# momshoot run configuration

[kernel]            # 2D fluid kernel K = (a*Lap^2 - b*Lap + c)^-1
a = 0.05
b = 0.05
c = 0.005

[kernel3d]          # 3D fluid kernel
a = 1.5
b = 1.5
c = 0.15

[shooting]
steps = 10
scheme = "rk4"      # or "euler"

[registration]
sigma = 0.1         # image-match weight 1/sigma^2
max_iters = 200
step_size = 0.05
step_shrink = 0.5
grad_tolerance = 1e-4

[patch]
size = 15
train_stride_2d = 1
train_stride_3d = 7
predict_stride = 14
flush_edges = true
background_threshold = 0.001   # fraction of the image intensity range

[net]
features = [16, 32]            # paper-scale: [128, 256]
convs_per_block = 3
dropout_p = 0.3                # 0 = deterministic network

[train]
learning_rate = 0.0005
decay = 0.1
epochs = 10
rmsprop_epsilon = 1e-8
batch_size = 32
rng_seed = 0

[uncertainty]
samples = 50
rng_seed = 0
dropout_p = 0.3
"""


def _merge(base, update, path=""):
    for key, value in update.items():
        if key not in base:
            raise InvalidInputError("unknown config key: %s%s" % (path, key))
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidInputError("config section %s%s must be a table"
                                        % (path, key))
            _merge(base[key], value, path + key + ".")
        else:
            base[key] = value


def load_config(path=None, overrides=None):
    """Defaults, updated by the TOML file, updated by flag overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "rb") as fh:
            _merge(cfg, tomli.load(fh))
    if overrides:
        _merge(cfg, overrides)
    return cfg


# ---------------------------------------------------------------------------
# object builders


def kernel_params(cfg, ndim):
    sec = cfg["kernel"] if ndim == 2 else cfg["kernel3d"]
    return KernelParams(sec["a"], sec["b"], sec["c"])


def shooting_config(cfg, geometry):
    plan = make_plan(kernel_params(cfg, geometry.ndim), geometry)
    return ShootingConfig(plan, steps=cfg["shooting"]["steps"],
                          scheme=cfg["shooting"]["scheme"])


def registration_config(cfg, geometry):
    r = cfg["registration"]
    return RegistrationConfig(
        shooting=shooting_config(cfg, geometry),
        sigma=r["sigma"],
        max_iters=r["max_iters"],
        step_size=r["step_size"],
        step_shrink=r["step_shrink"],
        grad_tolerance=r["grad_tolerance"],
    )


def patch_spec(cfg, ndim, mode):
    p = cfg["patch"]
    if mode == "predict":
        stride = p["predict_stride"]
    else:
        stride = p["train_stride_2d"] if ndim == 2 else p["train_stride_3d"]
    return PatchSpec(size=p["size"], stride=stride,
                     flush_edges=p["flush_edges"])


def net_config(cfg, ndim, deterministic=False):
    n = cfg["net"]
    return NetConfig(
        ndim=ndim,
        patch_size=cfg["patch"]["size"],
        encoder_features=tuple(n["features"]),
        convs_per_block=n["convs_per_block"],
        dropout_p=0.0 if deterministic else n["dropout_p"],
    )


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"],
        decay=t["decay"],
        epochs=t["epochs"],
        rmsprop_epsilon=t["rmsprop_epsilon"],
        batch_size=t["batch_size"],
        rng_seed=t["rng_seed"],
    )


def uncertainty_config(cfg):
    u = cfg["uncertainty"]
    return UncertaintyConfig(samples=u["samples"], rng_seed=u["rng_seed"],
                             dropout_p=u["dropout_p"])


def background_threshold(cfg, *images):
    """Absolute intensity floor from the configured range fraction."""
    lo = min(float(im.values.min()) for im in images)
    hi = max(float(im.values.max()) for im in images)
    return cfg["patch"]["background_threshold"] * (hi - lo)
