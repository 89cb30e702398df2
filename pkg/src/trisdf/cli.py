"""Command-line front end for the reconstruction pipeline.

Subcommands cover the full workflow: gen-data, train, render, extract-mesh,
refine, eval-chamfer, eval-psnr, and grad-check. Machine-readable output
(single numbers, CSV rows) goes to stdout; all diagnostics go to stderr.
Exit codes: 0 success, 1 invalid input (or a failed grad-check gate),
2 runtime failure.

Only the standard library is imported at module level so that --threads can
cap the BLAS pools before numpy first loads.
"""

from __future__ import annotations

import argparse
import os
import sys

GRAD_GATE = 1e-4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on bad flags, per the exit-code contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def build_parser():
    p = _Parser(prog="trisdf",
                description="Multi-scale tri-plane SDF reconstruction.")
    p.add_argument("--threads", type=int, default=1,
                   help="cap BLAS/OpenMP worker threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset")
    g.add_argument("--scene", required=True, choices=("sphere", "lego", "plate"))
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--holdout", type=int, default=8,
                   help="reserve every Nth view for evaluation (0 = none)")
    t.add_argument("--seed", type=int, default=None,
                   help="override the config's training seed")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override (repeatable)")

    r = sub.add_parser("render", help="render one view from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--view", type=int, required=True)
    r.add_argument("--out", required=True, help="output PPM path")
    r.add_argument("--opacity-out", default=None, help="optional PGM path")
    r.add_argument("--seed", type=int, default=0)

    m = sub.add_parser("extract-mesh", help="marching-cubes mesh from a checkpoint")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--out", required=True, help="output OBJ path")
    m.add_argument("--grid", type=int, default=128)
    m.add_argument("--bound", type=float, default=1.0)
    m.add_argument("--iso", type=float, default=0.0)

    f = sub.add_parser("refine", help="mask-guided refinement of a checkpoint")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--steps", type=int, default=6)
    f.add_argument("--iters", type=int, default=300)
    f.add_argument("--lr", type=float, default=5e-5)
    f.add_argument("--seed", type=int, default=1)
    f.add_argument("--strategy", choices=("sequence", "random"),
                   default="sequence")
    f.add_argument("--threshold", type=float, default=None,
                   help="error binarization threshold (default: Otsu)")
    f.add_argument("--holdout", type=int, default=8)
    f.add_argument("--export-masks", action="store_true")

    c = sub.add_parser("eval-chamfer", help="symmetric Chamfer distance "
                       "(mean nearest-neighbor L2, both directions, halved)")
    c.add_argument("--mesh-a", required=True, help="OBJ path")
    c.add_argument("--mesh-b", default=None, help="OBJ path")
    c.add_argument("--scene-b", default=None,
                   choices=("sphere", "lego", "plate"),
                   help="analytic reference surface instead of --mesh-b")
    c.add_argument("--scene-grid", type=int, default=256,
                   help="marching-cubes grid for the analytic reference")
    c.add_argument("--samples", type=int, default=100000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--method", choices=("tree", "brute"), default="tree")

    e = sub.add_parser("eval-psnr", help="held-out PSNR of a checkpoint")
    e.add_argument("--ckpt", required=True, help="checkpoint file or run dir")
    e.add_argument("--data", required=True)
    e.add_argument("--holdout", type=int, default=8,
                   help="every Nth view is a test view")
    e.add_argument("--seed", type=int, default=0)

    k = sub.add_parser("grad-check", help="gradients vs finite differences")
    k.add_argument("--level", choices=("full", "ops"), default="full")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--seeds", type=int, default=1,
                   help="number of consecutive seeds to run")
    k.add_argument("--coords", type=int, default=40,
                   help="coordinates spot-checked per seed (full level)")
    return p


def _resolve_ckpt(path):
    if os.path.isdir(path):
        cand = os.path.join(path, "ckpt_final.bin")
        if not os.path.exists(cand):
            raise FileNotFoundError(f"no ckpt_final.bin under {path}")
        return cand
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _require_dataset(path):
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise FileNotFoundError(f"no dataset manifest under {path}")
    return path


def _split(n_views, holdout):
    from . import scenes
    if holdout and holdout > 0:
        return scenes.holdout_split(n_views, every=holdout)
    import numpy as np
    return np.arange(n_views), np.arange(0)


def cmd_gen_data(args):
    from . import scenes
    if args.views < 1 or args.res < 8:
        raise ValueError("need --views >= 1 and --res >= 8")
    manifest = scenes.generate_dataset(args.scene, args.out,
                                       n_views=args.views, width=args.res,
                                       height=args.res, seed=args.seed)
    _log(f"wrote {args.views} views under {args.out}")
    print(os.path.join(args.out, "manifest.json"))
    return 0


def cmd_train(args):
    from . import config, scenes, train
    _require_dataset(args.data)
    cfg = config.load_config(args.config) if args.config else config.Config()
    if args.set:
        cfg = config.apply_overrides(cfg, config.parse_cli_overrides(args.set))
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    ds = scenes.load_dataset(args.data)
    train_views, test_views = _split(ds.n_views, args.holdout)
    _log(f"training on views {list(train_views)} "
         f"(held out: {list(test_views)})")
    model, row = train.fit(ds, cfg, args.out, train_views=train_views,
                           log_fn=lambda r: _log(
                               f"it {r['iteration']:6d} loss {r['loss']:.5f} "
                               f"s {r['s']:.1f} lr {r['lr']:.2e}"))
    final = os.path.join(args.out, "ckpt_final.bin")
    _log(f"final loss {row['loss']:.5f}")
    print(final)
    return 0


def cmd_render(args):
    from . import images, render, scenes, train
    ckpt = _resolve_ckpt(args.ckpt)
    ds = scenes.load_dataset(_require_dataset(args.data))
    if not (0 <= args.view < ds.n_views):
        raise ValueError(f"--view must be in [0, {ds.n_views})")
    model, cfg, _ = train.load_checkpoint(ckpt)
    rgb, opacity = render.render_image(model, ds.cameras[args.view],
                                       cfg.sample, seed=args.seed)
    images.write_ppm(args.out, images.to_u8(rgb))
    if args.opacity_out:
        images.write_pgm(args.opacity_out, images.to_u8(opacity))
    print(args.out)
    return 0


def cmd_extract_mesh(args):
    from . import mesh, render, train
    ckpt = _resolve_ckpt(args.ckpt)
    if args.grid < 8:
        raise ValueError("--grid must be >= 8")
    model, cfg, _ = train.load_checkpoint(ckpt)
    source = render.make_source(model)
    source.begin_step()

    def sdf_fn(pts):
        return render.sdf_at_points(model, source, pts).data.reshape(-1)

    m = mesh.marching_cubes(sdf_fn, args.grid,
                            bounds=(-args.bound, args.bound), iso=args.iso)
    mesh.write_obj(m, args.out)
    _log(f"wrote {args.out}")
    print(f"{len(m.vertices)},{len(m.triangles)}")
    return 0


def cmd_refine(args):
    from . import growth, scenes, train
    ckpt = _resolve_ckpt(args.ckpt)
    ds = scenes.load_dataset(_require_dataset(args.data))
    if args.steps < 1 or args.iters < 1:
        raise ValueError("need --steps >= 1 and --iters >= 1")
    model, cfg, it0 = train.load_checkpoint(ckpt)
    train_views, _ = _split(ds.n_views, args.holdout)
    plan = growth.make_plan(model, ds, train_views, cfg.sample, args.steps,
                            seed=args.seed, threshold=args.threshold)
    os.makedirs(args.out, exist_ok=True)
    if args.export_masks:
        growth.export_plan(plan, os.path.join(args.out, "masks"))
    before = growth.region_error(model, ds, plan.views, plan.region,
                                 cfg.sample, seed=args.seed)
    executed, step_errors = growth.refine(
        model, ds, plan, cfg, args.iters, lr=args.lr, seed=args.seed,
        strategy=args.strategy,
        log_fn=lambda r: _log(f"refine it {r['iteration']:5d} "
                              f"loss {r.get('loss', float('nan')):.5f}"
                              if "loss" in r else f"refine: {r['note']}"))
    after = growth.region_error(model, ds, plan.views, plan.region,
                                cfg.sample, seed=args.seed)
    out_ckpt = os.path.join(args.out, "ckpt_refined.bin")
    train.save_checkpoint(out_ckpt, model, cfg, it0 + executed)
    _log(f"executed {executed} steps; wrote {out_ckpt}")
    errs = ",".join(f"{e:.6f}" for e in step_errors)
    print(f"{args.strategy},{executed},{before:.6f},{after:.6f},{errs}")
    return 0


def _analytic_reference(scene_name, grid, samples, seed):
    from . import mesh, scenes
    scene = scenes.build_scene(scene_name)
    m = mesh.marching_cubes(scene.sdf, grid, bounds=(-1.0, 1.0))
    return mesh.sample_surface(m, samples, seed=seed)


def cmd_eval_chamfer(args):
    from . import mesh
    if (args.mesh_b is None) == (args.scene_b is None):
        raise ValueError("give exactly one of --mesh-b / --scene-b")
    ma = mesh.read_obj(args.mesh_a)
    if ma.is_empty:
        raise ValueError(f"{args.mesh_a} has no triangles")
    pa = mesh.sample_surface(ma, args.samples, seed=args.seed)
    if args.mesh_b is not None:
        mb = mesh.read_obj(args.mesh_b)
        if mb.is_empty:
            raise ValueError(f"{args.mesh_b} has no triangles")
        pb = mesh.sample_surface(mb, args.samples, seed=args.seed + 1)
        b_name = args.mesh_b
    else:
        pb = _analytic_reference(args.scene_b, args.scene_grid, args.samples,
                                 args.seed + 1)
        b_name = f"scene:{args.scene_b}"
    d = mesh.chamfer_distance(pa, pb, method=args.method)
    print(f"{d:.10g}")
    print(f"{args.mesh_a},{b_name},{args.samples},{args.seed},{d:.10g}")
    return 0


def cmd_eval_psnr(args):
    from . import scenes, train
    ckpt = _resolve_ckpt(args.ckpt)
    ds = scenes.load_dataset(_require_dataset(args.data))
    model, cfg, _ = train.load_checkpoint(ckpt)
    _, test_views = _split(ds.n_views, args.holdout)
    if len(test_views) == 0:
        raise ValueError("holdout split leaves no test views")
    value, _ = train.evaluate_views(model, ds, test_views, cfg.sample,
                                    seed=args.seed)
    print(f"{value:.6f}")
    return 0


def _ops_battery(seed):
    """Reverse-mode vs finite differences on a battery of core operations."""
    import numpy as np

    from . import autodiff as ad

    rng = np.random.default_rng([seed, 515151])
    worst = 0.0

    def check(fn, shape):
        nonlocal worst
        x = ad.Tensor(rng.uniform(0.2, 1.5, size=shape), requires_grad=True)
        worst = max(worst, ad.grad_check(fn, x))

    W = ad.constant(rng.standard_normal((4, 3)))
    idx = rng.integers(0, 5, size=(7,))
    check(lambda x: ad.sum_(ad.mul(x, x)), (3, 4))
    check(lambda x: ad.sum_(ad.div(ad.constant(1.0), x)), (5,))
    check(lambda x: ad.sum_(ad.matmul(x, W)), (6, 4))
    check(lambda x: ad.sum_(ad.sigmoid(x)), (4,))
    check(lambda x: ad.sum_(ad.softplus(x)), (4,))
    check(lambda x: ad.sum_(ad.exp(ad.log(x))), (4,))
    check(lambda x: ad.sum_(ad.norm_last(x)), (3, 3))
    check(lambda x: ad.sum_(ad.cumsum_exclusive(x, 0)), (6,))
    check(lambda x: ad.sum_(ad.gather(x, idx)), (5, 2))
    check(lambda x: ad.mean(ad.concat([x, ad.mul(x, x)], axis=-1)), (3, 2))
    return worst


def cmd_grad_check(args):
    from . import train
    worst = 0.0
    for s in range(args.seed, args.seed + args.seeds):
        if args.level == "full":
            worst = max(worst, train.end_to_end_grad_check(
                s, n_coords=args.coords))
        else:
            worst = max(worst, _ops_battery(s))
    print(f"{worst:.6e}")
    if worst >= GRAD_GATE:
        _log(f"gate failed: {worst:.3e} >= {GRAD_GATE:.0e}")
        return 1
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "render": cmd_render,
    "extract-mesh": cmd_extract_mesh,
    "refine": cmd_refine,
    "eval-chamfer": cmd_eval_chamfer,
    "eval-psnr": cmd_eval_psnr,
    "grad-check": cmd_grad_check,
}


def run(argv):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits (bad flags, --help)
        return int(exc.code or 0)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(args.threads))
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
