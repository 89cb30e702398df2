"""Differentiable volume rendering of the SDF field.

Opacity follows the sigmoid-CDF construction: with Phi_s(f) = sigmoid(s*f),
a segment with endpoint SDF values (f_i, f_{i+1}) contributes

    alpha_i = max((Phi_s(f_i) - Phi_s(f_{i+1})) / Phi_s(f_i), 0)

which is positive only where the SDF decreases (the ray entering the
surface), and transmittance is the running product of (1 - alpha). Pixel
color is the transmittance-weighted sum of per-sample radiance; the weight
sum is the rendered opacity used by the mask loss.

The sampling pass (stratified coarse plus importance rounds) runs off-tape;
the render pass re-evaluates the field at the chosen depths on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cone
from . import convfeat
from . import triplane
from .convfeat import FeatureSource, KernelSet

ALPHA_EPS = 1e-12  # keeps alpha < 1 and Phi denominators positive


class RenderError(RuntimeError):
    """Non-finite values during rendering; message carries ray diagnostics."""


def make_source(model):
    kernels = KernelSet(model.mcfg.windows)
    return FeatureSource(model.volume, kernels, mode=model.mcfg.featurize_mode)


def alpha_from_sdf(f, s):
    """Per-segment opacity from endpoint SDF values f (R, S), sharpness s.

    Returns (R, S-1) with entries in [0, 1); exactly 0 where the SDF does
    not decrease and where Phi_s(f_i) underflows to 0.
    """
    S = f.shape[-1]
    phi = ad.sigmoid(ad.mul(s, f))
    phi_i = ad.narrow(phi, f.ndim - 1, 0, S - 1)
    phi_n = ad.narrow(phi, f.ndim - 1, 1, S - 1)
    dead = phi_i.data <= ALPHA_EPS
    ratio = ad.div(phi_n, ad.clamp_min(phi_i, ALPHA_EPS))
    raw = ad.clamp(ad.sub(ad.constant(1.0), ratio), 0.0, 1.0 - ALPHA_EPS)
    return ad.mul(raw, ad.constant((~dead).astype(np.float64)))


def transmittance(alpha):
    """T_i = prod_{j<i} (1 - alpha_j), computed through logs on the tape."""
    one_minus = ad.clamp_min(ad.sub(ad.constant(1.0), alpha), ALPHA_EPS)
    return ad.exp(ad.cumsum_exclusive(ad.log(one_minus), alpha.ndim - 1))


def composite(alpha, values):
    """Weights w = T * alpha; returns (sum w*values, sum w, w).

    values is (R, S, C); the opacity sum is the rendered mask value.
    """
    w = ad.mul(transmittance(alpha), alpha)
    R, S = w.shape
    wv = ad.mul(ad.reshape(w, (R, S, 1)), values)
    return ad.sum_(wv, axis=1), ad.sum_(w, axis=1), w


@dataclass
class RenderResult:
    color: object        # (R, 3) tensor
    opacity: object      # (R,) tensor
    sdf: object          # (P, 1) tensor, all sample SDF values
    grad: object         # (P, 3) tensor, spatial SDF gradients
    aux: dict


def field_points(model, source, x, want_tangent=False):
    """Point evaluation of the encoding, consistent with the render path.

    A point is the zero-size limit of a frustum: all 8 vertices coincide and
    every blend weight is exp(0) = 1. With normalized blending the pairwise
    tree gives exactly the plain encoding; without it the feature block is
    exactly 8x the plain encoding (both exact in IEEE arithmetic, so this
    shortcut is bit-identical to running the full blend).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mcfg = model.mcfg
    scale_8 = (mcfg.encoder == "lod" and not mcfg.blend_normalize)
    K = x.shape[0]
    if want_tangent:
        feats, tang = source.level_features(x, want_tangent=True)
        if scale_8:
            feats = ad.mul(feats, ad.constant(8.0))
            tang = ad.mul(tang, ad.constant(8.0))
        eye = np.broadcast_to(np.eye(3), (K, 3, 3)).copy()
        return (ad.concat([ad.constant(x), feats], axis=-1),
                ad.concat([ad.constant(eye), tang], axis=-1))
    feats = source.level_features(x)
    if scale_8:
        feats = ad.mul(feats, ad.constant(8.0))
    return ad.concat([ad.constant(x), feats], axis=-1)


def sdf_at_points(model, source, x, want_gradient=False):
    """SDF (and optionally its spatial gradient) at raw points x (K, 3)."""
    if want_gradient:
        z, zt = field_points(model, source, x, want_tangent=True)
        f, _, ft = model.geometry.forward_jvp(z, zt)
        return f, ft
    z = field_points(model, source, x)
    f, _ = model.geometry.forward(z)
    return f


def _sample_inputs(model, source, bundle, t, stations, want_tangent=True):
    """Encoding (P, D) for all samples; with want_tangent also (P, 3, D).

    Returns (z, zt, x, t_eval); zt is None when want_tangent is False.
    """
    mcfg = model.mcfg
    R, S = t.shape
    o = bundle.origins
    d = bundle.dirs
    if mcfg.alpha_eval == "midpoint":
        t_eval = 0.5 * (stations[:, :-1] + stations[:, 1:])
    else:
        t_eval = t
    x = (o[:, None, :] + t_eval[:, :, None] * d[:, None, :]).reshape(R * S, 3)
    K = x.shape[0]

    if mcfg.encoder == "tpe":
        if want_tangent:
            feats, tang = source.level_features(x, want_tangent=True)
            eye = np.broadcast_to(np.eye(3), (K, 3, 3)).copy()
            z = ad.concat([ad.constant(x), feats], axis=-1)
            zt = ad.concat([ad.constant(eye), tang], axis=-1)
            return z, zt, x, t_eval
        feats = source.level_features(x)
        return ad.concat([ad.constant(x), feats], axis=-1), None, x, t_eval

    if mcfg.degenerate_cone:
        # zero-size frusta: 8 copies of each sample point, unit weights,
        # exercised through the full gather/blend path
        P = R * S
        idx = np.repeat(np.arange(P), 8).reshape(P, 8)
        verts = np.repeat(x[:, None, :], 8, axis=1)
        if want_tangent:
            feats, tang = source.level_features(x, want_tangent=True)
            g8 = ad.gather(feats, idx)
            gt8 = ad.gather(tang, idx)
        else:
            feats = source.level_features(x)
            g8 = ad.gather(feats, idx)
            gt8 = None
    else:
        # shared stations: corner-ray points at the segment boundaries
        corner = bundle.corner_dirs                      # (R, 4, 3)
        pos = (o[:, None, None, :]
               + stations[:, :, None, None] * corner[:, None, :, :])
        M = R * (S + 1) * 4
        flat_pos = pos.reshape(M, 3)
        # vertex v of sample (r, i): stations (r, i, v) for v < 4,
        # (r, i+1, v-4) otherwise
        base = (np.arange(R)[:, None, None] * (S + 1) * 4
                + np.arange(S)[None, :, None] * 4
                + np.arange(4)[None, None, :])        # (R, S, 4)
        ids = np.concatenate([base, base + 4], axis=2).reshape(R * S, 8)
        verts = flat_pos[ids]                          # (P, 8, 3)
        if want_tangent:
            feats, tang = source.level_features(flat_pos, want_tangent=True)
            g8 = ad.gather(feats, ids)
            gt8 = ad.gather(tang, ids)
        else:
            feats = source.level_features(flat_pos)
            g8 = ad.gather(feats, ids)
            gt8 = None

    w = convfeat.blend_weights(x, verts, model.k())
    blended = convfeat.blend_features(g8, w, mcfg.blend_normalize,
                                      vert_tangents=gt8)
    if want_tangent:
        z_feat, zt_feat = blended
        eye = np.broadcast_to(np.eye(3), (K, 3, 3)).copy()
        z = ad.concat([ad.constant(x), z_feat], axis=-1)
        zt = ad.concat([ad.constant(eye), zt_feat], axis=-1)
        return z, zt, x, t_eval
    z = ad.concat([ad.constant(x), blended], axis=-1)
    return z, None, x, t_eval


def render_batch(model, source, bundle, t, near, far, scfg):
    """Render rays given their sorted depths t (R, S). Tape-aware.

    Returns a RenderResult; color/opacity cover the S-1 forward segments.
    """
    R, S = t.shape
    stations = cone.segment_stations(t, near, far, scfg.n_coarse)
    z, zt, x, t_eval = _sample_inputs(model, source, bundle, t, stations)

    f, theta, ft = model.geometry.forward_jvp(z, zt)

    d_rep = np.repeat(bundle.dirs, S, axis=0)          # (P, 3)
    rgb = model.color.forward(theta, x, d_rep, ft)     # (P, 3)

    f_rs = ad.reshape(f, (R, S))
    alpha = alpha_from_sdf(f_rs, model.s())
    rgb_rs = ad.narrow(ad.reshape(rgb, (R, S, 3)), 1, 0, S - 1)
    color, opacity, weights = composite(alpha, rgb_rs)

    aux = {
        "t": t,
        "t_eval": t_eval,
        "alpha": alpha.data,
        "weights": weights.data,
        "stations": stations,
    }
    return RenderResult(color, opacity, f, ft, aux)


def sample_depths(model, bundle, near, far, scfg, rng):
    """Stratified coarse depths plus importance rounds; runs off-tape.

    Each round scores the current depth set's segments with opacity weights
    (sharpness doubled per round, starting from the learned s) and inverts
    their CDF. New depths merge sorted into the set. Scoring queries the
    SDF with the raw bilinear encoding at the depths themselves -- a cheap
    proxy for where the surface sits; the renderer re-evaluates the full
    smoothed/aggregated field at the chosen depths.
    """
    if ad.active_tape() is not None:
        raise RuntimeError("sample_depths must run outside a tape")
    t = np.sort(cone.stratified_ts(near, far, scfg.n_coarse, rng), axis=-1)
    if scfg.n_fine <= 0 or scfg.fine_rounds <= 0:
        return t
    s_now = float(model.s().data)
    o = bundle.origins
    d = bundle.dirs
    per_round = [scfg.n_fine // scfg.fine_rounds] * scfg.fine_rounds
    per_round[-1] += scfg.n_fine - sum(per_round)
    for r, n_new in enumerate(per_round):
        if n_new <= 0:
            continue
        R, S = t.shape
        x = (o[:, None, :] + t[:, :, None] * d[:, None, :]).reshape(R * S, 3)
        z = triplane.encode(model.volume, x)
        f, _ = model.geometry.forward(z)
        f_rs = f.data.reshape(R, S)
        s_round = s_now * (2.0 ** (r + 1))
        alpha = alpha_from_sdf(ad.constant(f_rs), ad.constant(s_round)).data
        w = transmittance(ad.constant(alpha)).data * alpha
        t_new = cone.sample_cdf(t, w, n_new, rng)
        t = cone.merge_sorted(t, t_new)
    return t


def render_rays(model, source, bundle, near, far, scfg, rng):
    """Sample depths off-tape, then render; convenience for inference/tests."""
    t = sample_depths(model, bundle, near, far, scfg, rng)
    return render_batch(model, source, bundle, t, near, far, scfg)


def render_image(model, camera, scfg, seed=0, chunk=256):
    """Full-frame inference render: returns (rgb (H, W, 3), opacity (H, W)).

    Deterministic in `seed`; rays missing the bounding sphere stay black
    with zero opacity.
    """
    H, W = camera.height, camera.width
    rgb = np.zeros((H, W, 3))
    opa = np.zeros((H, W))
    source = make_source(model)
    source.begin_step()
    ys, xs = np.mgrid[0:H, 0:W]
    pixels = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
    n = pixels.shape[0]
    for ci, start in enumerate(range(0, n, chunk)):
        px = pixels[start:start + chunk]
        bundle = camera.rays(px)
        near, far, hit = cone.intersect_sphere(
            bundle.origins, bundle.dirs, scfg.bound_radius, scfg.near_min)
        if not np.any(hit):
            continue
        sub = cone.RayBundle(bundle.origins[hit], bundle.dirs[hit],
                             bundle.corner_dirs[hit])
        rng = np.random.default_rng([seed, ci])
        res = render_rays(model, source, sub, near[hit], far[hit], scfg, rng)
        c = res.color.data
        o = res.opacity.data
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(o))):
            bad = np.nonzero(~np.isfinite(c).all(axis=-1) | ~np.isfinite(o))[0]
            pix = px[hit][bad[:4]]
            raise RenderError(f"non-finite render at pixels {pix.tolist()}")
        sel = px[hit]
        rgb[sel[:, 1], sel[:, 0]] = c
        opa[sel[:, 1], sel[:, 0]] = o
    return rgb, opa
