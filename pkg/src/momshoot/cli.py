"""momshoot command-line interface.

Exit codes: 0 success, 1 usage/input error, 2 numerical failure (integration
blow-up, training divergence, non-convergence). Numerical failures emit one
machine-parseable line on stderr: `momshoot-error kind=<kind> msg="<text>"`.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import config as cfgmod
from . import io as iomod
from . import runtime
from .errors import (BlowUpError, ConvergenceError, DivergenceError,
                     MomshootError)
from .evaluation import (build_atlas, brain_template, deformation_error,
                         report, synthetic_pair, PERCENTILES)
from .fields import DeformationMap, GridGeometry, jacobian_determinant
from .network import init_weights, predict_image, train
from .optimizer import register
from .patches import extract, plan_grid, prune
from .shooting import shoot
from .uncertainty import sample_predictions, summarize


def _load_cfg(args, overrides=None):
    return cfgmod.load_config(getattr(args, "config", None), overrides)


def cmd_init_config(args):
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(cfgmod.INIT_CONFIG)
    else:
        sys.stdout.write(cfgmod.INIT_CONFIG)
    return 0


def cmd_register(args):
    cfg = _load_cfg(args)
    S = iomod.read_field(args.moving)
    T = iomod.read_field(args.target)
    reg = cfgmod.registration_config(cfg, S.geometry)
    result = register(S, T, reg)
    if args.out_m0:
        iomod.write_field(args.out_m0, result.m0)
    if args.out_map:
        iomod.write_field(args.out_map, result.phi)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "total", "metric", "image", "step"])
            for (it, total, metric, image), s in zip(result.energy_trace,
                                                     result.step_trace):
                w.writerow([it, total, metric, image, s])
    last = result.energy_trace[-1]
    print("register: %d accepted steps, energy %.6g (metric %.6g, image %.6g)"
          ", converged=%s" % (len(result.energy_trace) - 1, last[1], last[2],
                              last[3], result.converged))
    return 0


def cmd_export_batch(args):
    cfg = _load_cfg(args)
    moving = iomod.read_field(args.moving)
    target = iomod.read_field(args.target)
    momentum = iomod.read_field(args.m0) if args.m0 else None
    spec = cfgmod.patch_spec(cfg, moving.geometry.ndim, args.mode)
    grid = plan_grid(moving.geometry, spec)
    batch = extract(moving, target, grid, momentum)
    if args.prune:
        threshold = cfgmod.background_threshold(cfg, moving, target)
        batch, kept = prune(batch, threshold)
        print("export-batch: kept %d/%d patches" % (len(kept),
                                                    len(grid.origins)))
    iomod.write_batch(args.out, batch)
    print("export-batch: wrote %d patches to %s" % (batch.inputs.shape[0],
                                                    args.out))
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    inputs, targets, size = iomod.read_batch(args.batch[0])
    parts_i, parts_t = [inputs], [targets]
    for extra in args.batch[1:]:
        i2, t2, s2 = iomod.read_batch(extra)
        if s2 != size:
            raise MomshootError("batch patch sizes differ")
        parts_i.append(i2)
        parts_t.append(t2)
    inputs = np.concatenate(parts_i)
    if any(t is None for t in parts_t):
        raise MomshootError("training batches must carry momentum targets")
    targets = np.concatenate(parts_t)

    ndim = len(size)
    net_cfg = cfgmod.net_config(cfg, ndim, deterministic=args.deterministic)
    train_cfg = cfgmod.train_config(cfg)
    if args.seed is not None:
        train_cfg = cfgmod.train_config(
            cfgmod.load_config(getattr(args, "config", None),
                               {"train": {"rng_seed": args.seed}}))

    class _Bundle:
        pass

    bundle = _Bundle()
    bundle.inputs = inputs
    bundle.targets = targets
    init = None
    if args.init:
        init = iomod.read_weights(args.init)
        net_cfg = init.config
    weights, trace = train(bundle, net_cfg, train_cfg, weights=init)
    iomod.write_weights(args.out, weights)
    for epoch, loss in enumerate(trace):
        print("train: epoch %d mean L1 loss %.6g" % (epoch, loss))
    return 0


def _predict_spec(cfg, args, ndim):
    spec = cfgmod.patch_spec(cfg, ndim, "predict")
    if args.stride is not None:
        from .patches import PatchSpec

        spec = PatchSpec(size=spec.size, stride=args.stride,
                         flush_edges=spec.flush_edges)
    return spec


def cmd_predict(args):
    cfg = _load_cfg(args)
    weights = iomod.read_weights(args.weights)
    moving = iomod.read_field(args.moving)
    target = iomod.read_field(args.target)
    spec = _predict_spec(cfg, args, moving.geometry.ndim)
    threshold = (0.0 if args.no_prune
                 else cfgmod.background_threshold(cfg, moving, target))
    grid = plan_grid(moving.geometry, spec)
    batch = extract(moving, target, grid)
    _, kept = prune(batch, threshold)
    pruned = len(grid.origins) - len(kept)
    print("predict: pruned %d/%d patches (%.1f%%)"
          % (pruned, len(grid.origins), 100.0 * pruned / len(grid.origins)))
    m0 = predict_image(weights, weights.config, moving, target, spec,
                       threshold, dropout_mode=args.dropout,
                       rng_seed=args.seed or 0)
    iomod.write_field(args.out_m0, m0)
    return 0


def cmd_shoot(args):
    cfg = _load_cfg(args)
    m0 = iomod.read_field(args.m0)
    shooting = cfgmod.shooting_config(cfg, m0.geometry)
    phi = shoot(m0, shooting)
    iomod.write_field(args.out_map, phi)
    if args.out_detj:
        iomod.write_field(args.out_detj, jacobian_determinant(phi))
    return 0


def cmd_uncertainty(args):
    overrides = {"uncertainty": {}}
    if args.samples is not None:
        overrides["uncertainty"]["samples"] = args.samples
    if args.seed is not None:
        overrides["uncertainty"]["rng_seed"] = args.seed
    cfg = _load_cfg(args, overrides)
    weights = iomod.read_weights(args.weights)
    moving = iomod.read_field(args.moving)
    target = iomod.read_field(args.target)
    ucfg = cfgmod.uncertainty_config(cfg)
    spec = _predict_spec(cfg, args, moving.geometry.ndim)
    threshold = cfgmod.background_threshold(cfg, moving, target)
    samples = sample_predictions(weights, weights.config, moving, target,
                                 spec, ucfg, threshold)
    shooting = cfgmod.shooting_config(cfg, moving.geometry)
    result = summarize(samples, shooting)
    if args.out_mean_m0:
        iomod.write_field(args.out_mean_m0, result.mean_m0)
    if args.out_map:
        iomod.write_field(args.out_map, result.mean_phi)
    if args.out_variance:
        iomod.write_field(args.out_variance, result.variance)
    if args.out_uncertainty:
        iomod.write_field(args.out_uncertainty, result.uncertainty)
    if args.out_pgm:
        if moving.geometry.ndim != 2:
            raise MomshootError("PGM heat rendering is 2D only")
        iomod.write_pgm(args.out_pgm, result.uncertainty)
    print("uncertainty: %d samples, max uncertainty %.6g grid units"
          % (ucfg.samples, float(result.uncertainty.values.max())))
    return 0


def cmd_eval(args):
    if len(args.pred) != len(args.truth):
        raise MomshootError("need one truth map per predicted map")
    preds = [iomod.read_map(p) for p in args.pred]
    truths = [iomod.read_map(p) for p in args.truth]
    errors = [deformation_error(p, t) for p, t in zip(preds, truths)]
    rep = report(errors, preds)
    header = ["%g%%" % p for p in PERCENTILES] + ["detJ>0"]
    row = ["%.6g" % rep.percentiles[p] for p in PERCENTILES]
    row.append("%.4g" % rep.detj_ratio)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerow(row)
    print("eval: %d cases, median error %.6g, detJ>0 ratio %.4g"
          % (rep.case_count, rep.percentiles[50.0], rep.detj_ratio))
    return 0


def cmd_atlas(args):
    cfg = _load_cfg(args)
    images = [iomod.read_field(p) for p in args.images]
    reg = cfgmod.registration_config(cfg, images[0].geometry)
    atlas = build_atlas(images, args.rounds, reg)
    iomod.write_field(args.out, atlas)
    return 0


def cmd_gen_synthetic(args):
    cfg = _load_cfg(args)
    geom = GridGeometry((args.size,) * args.ndim)
    template = brain_template(geom)
    shooting = cfgmod.shooting_config(cfg, geom)
    plan = shooting.plan
    os.makedirs(args.out_dir, exist_ok=True)
    iomod.write_field(os.path.join(args.out_dir, "template.field"), template)
    rng = np.random.default_rng(args.seed)
    for kind, count in (("train", args.train), ("test", args.test)):
        for i in range(count):
            _, target, truth = synthetic_pair(template, plan, shooting, rng,
                                              magnitude=args.magnitude)
            iomod.write_field(
                os.path.join(args.out_dir, "%s_target_%03d.field" % (kind, i)),
                target)
            iomod.write_field(
                os.path.join(args.out_dir, "%s_truth_%03d.field" % (kind, i)),
                truth)
    print("gen-synthetic: wrote %d train and %d test pairs to %s"
          % (args.train, args.test, args.out_dir))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="momshoot",
        description="Predictive diffeomorphic registration by geodesic "
                    "shooting of learned initial momenta.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap internal parallelism (1 = deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="emit the default config file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("register", help="optimize initial momentum (ground truth)")
    p.add_argument("--moving", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--config")
    p.add_argument("--out-m0")
    p.add_argument("--out-map")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("export-batch", help="extract training patches")
    p.add_argument("--moving", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--m0", help="momentum targets to include")
    p.add_argument("--config")
    p.add_argument("--mode", choices=["train", "predict"], default="train")
    p.add_argument("--prune", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_batch)

    p = sub.add_parser("train", help="train the momentum prediction network")
    p.add_argument("--batch", nargs="+", action="extend", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true",
                   help="disable dropout")
    p.add_argument("--seed", type=int)
    p.add_argument("--init", help="warm-start from existing weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict whole-image momentum")
    p.add_argument("--weights", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--config")
    p.add_argument("--stride", type=int)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--dropout", choices=["off", "sampled"], default="off")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-m0", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("shoot", help="integrate momentum to a deformation map")
    p.add_argument("--m0", required=True)
    p.add_argument("--config")
    p.add_argument("--out-map", required=True)
    p.add_argument("--out-detj")
    p.set_defaults(func=cmd_shoot)

    p = sub.add_parser("uncertainty", help="MC-dropout deformation uncertainty")
    p.add_argument("--weights", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--config")
    p.add_argument("--stride", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-mean-m0")
    p.add_argument("--out-map")
    p.add_argument("--out-variance")
    p.add_argument("--out-uncertainty")
    p.add_argument("--out-pgm")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("eval", help="error percentiles and det-J report")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("atlas", help="greedy iterative-mean atlas")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_atlas)

    p = sub.add_parser("gen-synthetic", help="generate the synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train", type=int, default=30)
    p.add_argument("--test", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--ndim", type=int, default=2, choices=[2, 3])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_synthetic)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    runtime.set_threads(args.threads)
    try:
        return args.func(args)
    except (BlowUpError, ConvergenceError, DivergenceError) as exc:
        kind = type(exc).__name__.replace("Error", "").lower()
        print('momshoot-error kind=%s msg="%s"' % (kind, exc), file=sys.stderr)
        return 2
    except (MomshootError, OSError) as exc:
        print('momshoot-error kind=usage msg="%s"' % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
