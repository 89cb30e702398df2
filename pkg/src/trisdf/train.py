"""Training loop: losses, Adam, LR schedule, checkpoints, and evaluation.

One training step samples a pixel batch across the training views (RNG keyed
by (seed, iteration, stream) so runs are deterministic and resumable), samples
ray depths off-tape, then renders and backprops the weighted sum of the L1
color loss, the eikonal penalty on the SDF spatial gradients, and a BCE mask
loss. Rays that miss the bounding sphere contribute their target residuals as
constants, so reported losses stay honest on silhouette-heavy batches.

Checkpoints are a sectioned binary container (planes, both MLPs, the scalars,
iteration, RNG key); optimizer moments are deliberately not stored, so a
resumed run restarts Adam statistics.
"""

from __future__ import annotations

import json
import os
import struct
import time

import numpy as np

from . import autodiff as ad
from . import cone, net, render, triplane
from .config import Config

CKPT_MAGIC = b"TPSD"
CKPT_VERSION = 1

STREAM_PIXELS = 0
STREAM_DEPTHS = 1

MASK_EPS = 1e-6


def lr_at(iteration, tcfg):
    """Linear warmup to lr_max, then cosine decay to lr_min."""
    if iteration < tcfg.warmup:
        return tcfg.lr_max * (iteration + 1) / tcfg.warmup
    span = max(1, tcfg.iterations - tcfg.warmup)
    p = min(1.0, (iteration - tcfg.warmup) / span)
    return tcfg.lr_min + (tcfg.lr_max - tcfg.lr_min) * 0.5 * (1 + np.cos(np.pi * p))


class Adam:
    """Adam over Tensor leaves with optional per-parameter LR multipliers."""

    def __init__(self, params, lr_mults=None, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr_mults = ([1.0] * len(self.params) if lr_mults is None
                         else list(lr_mults))
        if len(self.lr_mults) != len(self.params):
            raise ValueError("one lr multiplier per parameter required")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mh = self.m[i] / bc1
            vh = self.v[i] / bc2
            p.data -= (lr * self.lr_mults[i]) * mh / (np.sqrt(vh) + self.eps)


def make_optimizer(model, tcfg):
    scalars = set(id(p) for p in model.scalar_parameters())
    params = model.parameters()
    mults = [tcfg.scalar_lr_mult if id(p) in scalars else 1.0 for p in params]
    return Adam(params, lr_mults=mults)


def batch_losses(result, target_rgb, target_mask, n_total, miss_rgb=None,
                 miss_mask=None, use_mask=True):
    """Loss terms for one rendered batch; miss-ray residuals enter as constants.

    result: RenderResult over the hit rays. target_rgb (Rh, 3), target_mask
    (Rh,) cover the hit rays; miss_rgb / miss_mask the rays that missed the
    bounding sphere (predicted black and empty). Returns a dict of scalar
    Tensors: l_rgb, l_eik, l_mask.
    """
    n = float(n_total)
    diff = ad.abs_(ad.sub(result.color, ad.constant(target_rgb)))
    miss_l1 = 0.0 if miss_rgb is None else float(np.abs(miss_rgb).sum())
    l_rgb = ad.add(ad.mul(ad.sum_(diff), ad.constant(1.0 / n)),
                   ad.constant(miss_l1 / n))

    grad_norm = ad.norm_last(result.grad)  # (P,)
    pen = ad.sub(grad_norm, ad.constant(1.0))
    l_eik = ad.mean(ad.mul(pen, pen))

    if not use_mask:
        return {"l_rgb": l_rgb, "l_eik": l_eik, "l_mask": ad.constant(0.0)}

    o = ad.clamp(result.opacity, MASK_EPS, 1.0 - MASK_EPS)
    m = np.asarray(target_mask, dtype=np.float64)
    bce = ad.neg(ad.add(ad.mul(ad.constant(m), ad.log(o)),
                        ad.mul(ad.constant(1.0 - m),
                               ad.log(ad.sub(ad.constant(1.0), o)))))
    miss_bce = 0.0
    if miss_mask is not None and miss_mask.size:
        mm = miss_mask.astype(np.float64)
        # predicted opacity is exactly 0 on misses; clamp as above
        miss_bce = float(np.sum(-(mm * np.log(MASK_EPS)
                                  + (1 - mm) * np.log(1 - MASK_EPS))))
    l_mask = ad.add(ad.mul(ad.sum_(bce), ad.constant(1.0 / n)),
                    ad.constant(miss_bce / n))
    return {"l_rgb": l_rgb, "l_eik": l_eik, "l_mask": l_mask}


def total_loss(terms, tcfg):
    return ad.add(ad.add(ad.mul(terms["l_rgb"], ad.constant(tcfg.lambda_rgb)),
                         ad.mul(terms["l_eik"], ad.constant(tcfg.lambda_eik))),
                  ad.mul(terms["l_mask"], ad.constant(tcfg.lambda_mask)))


def _assemble_batch(dataset, view_ids, xs, ys):
    """Rays plus targets for per-pixel draws, grouped by ascending view id."""
    origins, dirs, corners, rgbs, masks = [], [], [], [], []
    for view in np.unique(view_ids):
        sel = view_ids == view
        px = np.stack([xs[sel], ys[sel]], axis=-1)
        b = dataset.cameras[view].rays(px)
        origins.append(b.origins)
        dirs.append(b.dirs)
        corners.append(b.corner_dirs)
        rgbs.append(dataset.images[view][ys[sel], xs[sel]])
        masks.append(dataset.masks[view][ys[sel], xs[sel]])
    bundle = cone.RayBundle(np.concatenate(origins), np.concatenate(dirs),
                            np.concatenate(corners))
    return bundle, np.concatenate(rgbs), np.concatenate(masks)


def sample_pixel_batch(dataset, train_views, n_rays, rng):
    """Uniform pixels across the training views, grouped by view.

    Returns (bundle, target_rgb (K, 3), target_mask (K,)) in a deterministic
    grouped order; train_views must be ascending so the grouping is stable.
    """
    H, W = dataset.images.shape[1:3]
    vi = rng.integers(0, len(train_views), size=n_rays)
    xs = rng.integers(0, W, size=n_rays)
    ys = rng.integers(0, H, size=n_rays)
    view_ids = np.asarray(train_views)[vi]
    return _assemble_batch(dataset, view_ids, xs, ys)


def sample_pool_batch(dataset, pixel_pool, n_rays, rng):
    """Uniform draws from an explicit pixel pool of rows (view, y, x)."""
    rows = pixel_pool[rng.integers(0, pixel_pool.shape[0], size=n_rays)]
    return _assemble_batch(dataset, rows[:, 0], rows[:, 2], rows[:, 1])


def train_step(model, optimizer, dataset, train_views, cfg, iteration,
               pixel_pool=None, fixed_lr=None):
    """One optimization step; returns the metrics row as a dict.

    pixel_pool restricts ray draws to explicit (view, y, x) rows (used by
    mask-restricted refinement); fixed_lr bypasses the warmup/cosine schedule.
    """
    scfg, tcfg = cfg.sample, cfg.train
    t0 = time.perf_counter()
    rng_pix = np.random.default_rng([tcfg.seed, iteration, STREAM_PIXELS])
    rng_depth = np.random.default_rng([tcfg.seed, iteration, STREAM_DEPTHS])

    if pixel_pool is not None:
        bundle, target_rgb, target_mask = sample_pool_batch(
            dataset, pixel_pool, tcfg.rays_per_batch, rng_pix)
    else:
        bundle, target_rgb, target_mask = sample_pixel_batch(
            dataset, train_views, tcfg.rays_per_batch, rng_pix)
    near, far, hit = cone.intersect_sphere(bundle.origins, bundle.dirs,
                                           scfg.bound_radius, scfg.near_min)
    lr = lr_at(iteration, tcfg) if fixed_lr is None else fixed_lr
    n_total = bundle.origins.shape[0]

    if not np.any(hit):
        row = {"iteration": iteration,
               "l_rgb": float(np.abs(target_rgb).sum()) / n_total,
               "l_eik": 0.0,
               "l_mask": float(-np.log(MASK_EPS)) * float(target_mask.mean()),
               "lr": lr,
               "s": float(model.s().data), "k": float(model.k().data)}
        row["loss"] = (tcfg.lambda_rgb * row["l_rgb"]
                       + tcfg.lambda_mask * row["l_mask"])
        row["wall_ms"] = (time.perf_counter() - t0) * 1e3
        return row

    sub = cone.RayBundle(bundle.origins[hit], bundle.dirs[hit],
                         bundle.corner_dirs[hit])
    source = render.make_source(model)
    t = render.sample_depths(model, sub, near[hit], far[hit],
                             scfg, rng_depth)

    with ad.Tape() as tape:
        source.begin_step()  # re-record smoothing on this step's tape
        res = render.render_batch(model, source, sub, t,
                                  near[hit], far[hit], scfg)
        terms = batch_losses(res, target_rgb[hit], target_mask[hit], n_total,
                             miss_rgb=target_rgb[~hit],
                             miss_mask=target_mask[~hit],
                             use_mask=tcfg.use_mask)
        loss = total_loss(terms, tcfg)
        tape.backward(loss)

    optimizer.step(lr)
    ad.zero_grads(optimizer.params)

    row = {"iteration": iteration, "loss": float(loss.data),
           "l_rgb": float(terms["l_rgb"].data),
           "l_eik": float(terms["l_eik"].data),
           "l_mask": float(terms["l_mask"].data),
           "lr": lr, "s": float(model.s().data), "k": float(model.k().data),
           "wall_ms": (time.perf_counter() - t0) * 1e3}
    return row


METRIC_COLUMNS = ("iteration", "loss", "l_rgb", "l_eik", "l_mask",
                  "lr", "s", "k", "wall_ms")


class MetricsWriter:
    def __init__(self, path):
        self.path = path
        new = not os.path.exists(path)
        self._fh = open(path, "a")
        if new:
            self._fh.write(",".join(METRIC_COLUMNS) + "\n")

    def write(self, row):
        self._fh.write(",".join(f"{row[c]:.10g}" if c != "iteration"
                                else str(row[c]) for c in METRIC_COLUMNS))
        self._fh.write("\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def fit(dataset, cfg, out_dir, train_views=None, resume_from=None,
        log_fn=None):
    """Run the full training loop; returns (model, last metrics row).

    Writes metrics.csv and periodic checkpoints (ckpt_%06d.bin plus
    ckpt_final.bin) under out_dir. `train_views` defaults to every view.
    """
    os.makedirs(out_dir, exist_ok=True)
    tcfg = cfg.train
    if train_views is None:
        train_views = list(range(dataset.n_views))
    train_views = sorted(train_views)  # grouped sampling expects ascending

    if resume_from is not None:
        model, cfg_loaded, start = load_checkpoint(resume_from)
        if cfg_loaded.to_dict() != cfg.to_dict():
            raise ValueError("checkpoint config does not match the run config")
    else:
        model = net.build_model(cfg.model, tcfg.seed)
        start = 0

    optimizer = make_optimizer(model, tcfg)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    row = None
    try:
        for it in range(start, tcfg.iterations):
            row = train_step(model, optimizer, dataset, train_views, cfg, it)
            metrics.write(row)
            if log_fn is not None and (it % tcfg.log_every == 0
                                       or it + 1 == tcfg.iterations):
                log_fn(row)
            done = it + 1
            if tcfg.checkpoint_every > 0 and done % tcfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{done:06d}.bin"),
                                model, cfg, done)
        save_checkpoint(os.path.join(out_dir, "ckpt_final.bin"), model, cfg,
                        tcfg.iterations)
    finally:
        metrics.close()
    return model, row


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def psnr(pred, gt):
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    if mse <= 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def end_to_end_grad_check(seed=0, n_coords=40, step=1e-5, zero_floor=1e-7):
    """Reverse-mode vs central-difference agreement through the whole stack.

    Builds a tiny model, fixes a 3-ray batch and its depth samples, runs one
    tape backward through encode -> smoothed featurization -> blend -> MLPs
    -> opacity -> compositing -> the weighted rgb/eikonal/mask losses, then
    spot-checks n_coords coordinates spread over every parameter tensor with
    central differences. Coordinates where both sides are below zero_floor
    count as agreeing at zero (finite differences cannot resolve them);
    returns the max relative error over the rest, with denominator
    max(|analytic|, |numeric|).
    """
    from .config import ModelConfig, SampleConfig, TrainConfig

    rng = np.random.default_rng([seed, 424243])
    mcfg = ModelConfig(resolutions=(4, 6), n_features=2, windows=(1, 3),
                       geom_width=8, geom_hidden=2, geom_skip_at=1,
                       theta_dim=8, color_width=8, color_hidden=1).validate()
    scfg = SampleConfig(n_coarse=3, n_fine=2, fine_rounds=1)
    tcfg = TrainConfig()
    model = net.build_model(mcfg, seed)

    R = 3
    origins = rng.standard_normal((R, 3))
    origins *= 1.4 / np.linalg.norm(origins, axis=-1, keepdims=True)
    aim = rng.uniform(-0.25, 0.25, size=(R, 3))  # interior points: always hit
    dirs = aim - origins
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    corner = dirs[:, None, :] + 0.01 * rng.standard_normal((R, 4, 3))
    corner /= np.linalg.norm(corner, axis=-1, keepdims=True)
    bundle = cone.RayBundle(origins, dirs, corner)
    near, far, hit = cone.intersect_sphere(origins, dirs, scfg.bound_radius,
                                           scfg.near_min)
    if not np.all(hit):
        raise RuntimeError("grad-check rays must hit the bounding sphere")
    t = render.sample_depths(model, bundle, near, far, scfg, rng)
    target_rgb = rng.random((R, 3))
    target_mask = (rng.random(R) > 0.4).astype(np.float64)

    def forward():
        source = render.make_source(model)
        source.begin_step()
        res = render.render_batch(model, source, bundle, t, near, far, scfg)
        terms = batch_losses(res, target_rgb, target_mask, R,
                             miss_rgb=np.zeros((0, 3)), miss_mask=np.zeros(0),
                             use_mask=True)
        return total_loss(terms, tcfg)

    params = model.parameters()
    ad.zero_grads(params)
    with ad.Tape() as tape:
        loss = forward()
        if not np.isfinite(loss.data):
            raise FloatingPointError("grad-check loss is not finite")
        tape.backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad)
             for p in params]
    ad.zero_grads(params)

    per = max(1, int(np.ceil(n_coords / len(params))))
    worst = 0.0
    for pi, p in enumerate(params):
        size = p.data.size
        take = min(per, size)
        for flat in rng.choice(size, size=take, replace=False):
            orig = p.data.flat[flat]
            p.data.flat[flat] = orig + step
            f_plus = float(forward().data)
            p.data.flat[flat] = orig - step
            f_minus = float(forward().data)
            p.data.flat[flat] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(grads[pi].flat[flat])
            scale = max(abs(an), abs(fd))
            if scale < zero_floor:
                continue
            worst = max(worst, abs(an - fd) / scale)
    return worst


def evaluate_views(model, dataset, view_indices, scfg, seed=0):
    """Render the views and return (mean PSNR, mean L1) against ground truth."""
    psnrs, l1s = [], []
    for v in view_indices:
        rgb, _ = render.render_image(model, dataset.cameras[v], scfg,
                                     seed=seed)
        gt = dataset.images[v]
        psnrs.append(psnr(rgb, gt))
        l1s.append(float(np.mean(np.abs(rgb - gt))))
    return float(np.mean(psnrs)), float(np.mean(l1s))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_array(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    head = struct.pack("<I", a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def _unpack_array(buf, off):
    (ndim,) = struct.unpack_from("<I", buf, off)
    off += 4
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
    off += 8 * n
    return a.copy(), off


def _pack_linear_stack(layers):
    out = struct.pack("<I", len(layers))
    for lin in layers:
        for p in lin.parameters():
            out += _pack_array(p.data)
    return out


def _load_linear_stack(buf, layers):
    off = 0
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if n != len(layers):
        raise ValueError(f"checkpoint has {n} layers, model has {len(layers)}")
    for lin in layers:
        for p in lin.parameters():
            a, off = _unpack_array(buf, off)
            if a.shape != p.data.shape:
                raise ValueError(f"layer shape mismatch: {a.shape} vs "
                                 f"{p.data.shape}")
            p.data = a


def save_checkpoint(path, model, cfg, iteration):
    """Sectioned binary checkpoint; see module docstring for contents."""
    sections = []
    sections.append((b"CONF", json.dumps(cfg.to_dict(),
                                         sort_keys=True).encode()))

    plns = struct.pack("<I", model.volume.n_levels)
    for level, level_planes in enumerate(model.volume.planes):
        for pid, p in enumerate(level_planes):
            R, _, N = p.data.shape
            plns += struct.pack("<IIII", level, pid, R, N)
            plns += _pack_array(p.data)
    sections.append((b"PLNS", plns))

    sections.append((b"GEOM", _pack_linear_stack(model.geometry.layers)))
    sections.append((b"COLR", _pack_linear_stack(model.color.layers)))
    sections.append((b"SCLR", struct.pack("<dd", float(model.s_raw.data),
                                          float(model.k_raw.data))))
    sections.append((b"ITER", struct.pack("<Q", iteration)))
    sections.append((b"RNGS", struct.pack("<QQ", cfg.train.seed, iteration)))

    blob = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(sections))
    for tag, payload in sections:
        blob += tag + struct.pack("<Q", len(payload)) + payload
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_sections(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    sections = {}
    for _ in range(n):
        tag = blob[off:off + 4]
        (length,) = struct.unpack_from("<Q", blob, off + 4)
        off += 12
        sections[tag] = blob[off:off + length]
        off += length
    return sections


def _model_shell(mcfg):
    """An uninitialized FieldModel with the right shapes (for loading into)."""
    volume = triplane.zero_init(mcfg.resolutions, mcfg.n_features)
    geometry = net.GeometryNet.build(mcfg.encode_dim, mcfg.geom_width,
                                     mcfg.geom_hidden, mcfg.geom_skip_at,
                                     mcfg.theta_dim, seed=0,
                                     radius=mcfg.init_radius,
                                     beta=mcfg.geom_beta)
    color = net.ColorNet.build(mcfg.theta_dim, mcfg.color_width,
                               mcfg.color_hidden, seed=0)
    s_raw = ad.tensor(0.0, requires_grad=True)
    k_raw = ad.tensor(0.0, requires_grad=True)
    return net.FieldModel(volume, geometry, color, s_raw, k_raw, mcfg)


def load_checkpoint(path):
    """Returns (model, cfg, iteration) for a saved checkpoint."""
    sections = read_sections(path)
    cfg = Config.from_dict(json.loads(sections[b"CONF"].decode()))
    model = _model_shell(cfg.model)

    buf = sections[b"PLNS"]
    (n_levels,) = struct.unpack_from("<I", buf, 0)
    if n_levels != model.volume.n_levels:
        raise ValueError("checkpoint level count does not match config")
    off = 4
    for _ in range(n_levels * 3):
        level, pid, R, N = struct.unpack_from("<IIII", buf, off)
        off += 16
        a, off = _unpack_array(buf, off)
        target = model.volume.planes[level][pid]
        if a.shape != target.data.shape or a.shape != (R, R, N):
            raise ValueError("plane shape mismatch in checkpoint")
        target.data = a

    _load_linear_stack(sections[b"GEOM"], model.geometry.layers)
    _load_linear_stack(sections[b"COLR"], model.color.layers)
    s_raw, k_raw = struct.unpack("<dd", sections[b"SCLR"])
    model.s_raw.data = np.asarray(s_raw)
    model.k_raw.data = np.asarray(k_raw)
    (iteration,) = struct.unpack("<Q", sections[b"ITER"])
    return model, cfg, int(iteration)
