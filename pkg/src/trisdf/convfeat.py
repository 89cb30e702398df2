"""Cone-aware feature aggregation: per-level Gaussian plane smoothing plus
distance-weighted blending of frustum vertex features.

Coarse levels keep window 1 (no smoothing); finer levels use wider Gaussian
windows so a query averages a footprint instead of a point, which is what
suppresses aliasing when a pixel's cone spans several texels.

A sample's feature is the blend of its frustum's 8 vertex features with
weights W_v = exp(-k * |x_v - x|). The reduction over vertices is a fixed
pairwise tree, so in the degenerate case (all vertices equal, window 1,
normalized weights) the result reproduces the plain tri-plane encoding
bit for bit.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import triplane
from .triplane import BILINEAR, PLANE_AXES


def gaussian_window(window, tau=None):
    """Symmetric 1-d Gaussian taps of odd length `window` summing to 1.

    tau defaults to window / 3 (texel units). Window 1 is the identity.
    """
    window = int(window)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return BILINEAR
    if tau is None:
        tau = window / 3.0
    h = (window - 1) // 2
    d = np.arange(-h, h + 1, dtype=np.float64)
    k = np.exp(-0.5 * (d / tau) ** 2)
    return k / k.sum()


class KernelSet:
    """Per-level smoothing taps. windows must match the volume's level count."""

    def __init__(self, windows, taus=None):
        self.windows = tuple(int(w) for w in windows)
        if taus is None:
            taus = [None] * len(self.windows)
        self.taus = tuple(taus)
        self.kernels = [gaussian_window(w, t) for w, t in zip(self.windows, self.taus)]

    def __len__(self):
        return len(self.kernels)

    def __getitem__(self, i):
        return self.kernels[i]

    @property
    def all_unit(self):
        return all(w == 1 for w in self.windows)


def convolve_plane(plane, resolution, n_features, kernel):
    """Tape-recorded separable smoothing of one plane with replicate padding.

    Equivalent to correlating each channel with the outer product of the
    taps; gradients flow back to the raw plane.
    """
    w = len(kernel)
    if w == 1:
        return plane
    h = (w - 1) // 2
    R = resolution
    rows = np.arange(R)

    def conv_axis(t, axis):
        # shifted replicate-pad gathers, one per tap
        if axis == 0:
            flat = ad.reshape(t, (R, R * n_features))
        else:
            flat = ad.reshape(ad.transpose(t, (1, 0, 2)), (R, R * n_features))
        acc = None
        for tap in range(w):
            idx = np.clip(rows + tap - h, 0, R - 1)
            term = ad.mul(ad.gather(flat, idx), ad.constant(kernel[tap]))
            acc = term if acc is None else ad.add(acc, term)
        out = ad.reshape(acc, (R, R, n_features))
        if axis == 1:
            out = ad.transpose(out, (1, 0, 2))
        return out

    return conv_axis(conv_axis(plane, 0), 1)


def convolved_planes(volume, kernels):
    """Smoothed plane tensors for every level: [level][plane]."""
    out = []
    for level in range(volume.n_levels):
        kern = kernels[level]
        res = volume.resolutions[level]
        out.append([
            convolve_plane(p, res, volume.n_features, kern)
            for p in volume.planes[level]
        ])
    return out


def convolved_query(volume, level, x, kernels, mode="gather", conv_planes=None,
                    want_tangent=False):
    """Smoothed feature of one level at points x (K, 3).

    mode "gather": one widened stencil per query against the raw plane.
    mode "preconv": bilinear query of the precomputed smoothed plane (pass
    conv_planes from convolved_planes to amortize). The two agree to fp
    rounding; window 1 is bit-identical to the plain query in both modes.
    """
    if mode == "gather":
        return triplane.query_level(volume, level, x, kernels[level],
                                    want_tangent=want_tangent)
    if mode == "preconv":
        planes = conv_planes[level] if conv_planes is not None else [
            convolve_plane(p, volume.resolutions[level], volume.n_features,
                           kernels[level])
            for p in volume.planes[level]
        ]
        return triplane.query_level(volume, level, x, BILINEAR,
                                    planes_override=planes,
                                    want_tangent=want_tangent)
    raise ValueError(f"unknown featurization mode {mode!r}")


class FeatureSource:
    """Per-step front end for querying smoothed multi-scale features.

    begin_step() refreshes the tape-recorded convolved planes (preconv mode)
    and must be called inside the step's tape before any query.
    """

    def __init__(self, volume, kernels, mode="preconv"):
        self.volume = volume
        self.kernels = kernels
        self.mode = mode
        self._conv = None

    def begin_step(self):
        if self.mode == "preconv" and not self.kernels.all_unit:
            self._conv = convolved_planes(self.volume, self.kernels)
        else:
            self._conv = None

    def encode(self, x, want_tangent=False):
        """Plain encoding (x, F_1..F_L) with smoothing applied per level."""
        if self.mode == "preconv":
            if self._conv is None and not self.kernels.all_unit:
                self.begin_step()
            return triplane.encode(self.volume, x, kernels=None,
                                   want_tangent=want_tangent,
                                   planes_override=self._conv)
        return triplane.encode(self.volume, x, kernels=self.kernels.kernels,
                               want_tangent=want_tangent)

    def level_features(self, x, want_tangent=False):
        """Concatenated per-level features (no position block) at x (K, 3).

        Returns (K, L*N) or with tangents (K, 3, L*N).
        """
        vals = []
        tangs = []
        for level in range(self.volume.n_levels):
            ov = self._conv[level] if self._conv is not None else None
            kern = BILINEAR if self._conv is not None else self.kernels[level]
            if want_tangent:
                v, tg = triplane.query_level(self.volume, level, x, kern,
                                             planes_override=ov,
                                             want_tangent=True)
                vals.append(v)
                tangs.append(tg)
            else:
                vals.append(triplane.query_level(self.volume, level, x, kern,
                                                 planes_override=ov))
        if want_tangent:
            return ad.concat(vals, axis=-1), ad.concat(tangs, axis=-1)
        return ad.concat(vals, axis=-1)


def pair_tree_sum8(t):
    """Sum axis 1 of (K, 8, ...) as ((a+b)+(c+d)) + ((e+f)+(g+h))."""
    K = t.shape[0]
    rest = t.shape[2:]
    t = ad.sum_(ad.reshape(t, (K, 4, 2) + rest), axis=2)
    t = ad.sum_(ad.reshape(t, (K, 2, 2) + rest), axis=2)
    t = ad.sum_(ad.reshape(t, (K, 1, 2) + rest), axis=2)
    return ad.reshape(t, (K,) + rest)


def blend_weights(x, vertices, k):
    """W_v = exp(-k |x_v - x|) for x (K, 3), vertices (K, 8, 3), scalar k.

    Positions are sampler outputs (constants); only k carries gradient.
    """
    d = np.linalg.norm(np.asarray(vertices) - np.asarray(x)[:, None, :], axis=-1)
    return ad.exp(ad.mul(k, ad.constant(-d)))  # (K, 8)


def blend_features(vert_feats, weights, normalize, vert_tangents=None):
    """Blend per-vertex features (K, 8, F) with weights (K, 8).

    normalize divides by the pairwise-tree weight sum. With vert_tangents
    (K, 8, 3, F) also blends the spatial tangents with the same weights
    (the footprint co-moves with the point, so the weights carry no spatial
    gradient of their own).
    """
    K = weights.shape[0]
    w3 = ad.reshape(weights, (K, 8, 1))
    z = pair_tree_sum8(ad.mul(vert_feats, w3))  # (K, F)
    wsum = None
    if normalize:
        wsum = pair_tree_sum8(weights)  # (K,)
        z = ad.div(z, ad.reshape(wsum, (K, 1)))
    if vert_tangents is None:
        return z
    w4 = ad.reshape(weights, (K, 8, 1, 1))
    zt = pair_tree_sum8(ad.mul(vert_tangents, w4))  # (K, 3, F)
    if normalize:
        zt = ad.div(zt, ad.reshape(wsum, (K, 1, 1)))
    return z, zt


def lod_encode(source, x, vertices, k, normalize, want_tangent=False):
    """Footprint-aware encoding at samples x (K, 3) with frusta (K, 8, 3).

    Evaluates smoothed features at each frustum vertex, blends them with
    exp(-k dist) weights, and concatenates the sample position in front.
    """
    x = np.asarray(x, dtype=np.float64)
    K = x.shape[0]
    verts = np.asarray(vertices, dtype=np.float64)
    flat = verts.reshape(K * 8, 3)
    if want_tangent:
        g, gt = source.level_features(flat, want_tangent=True)
        F = g.shape[-1]
        g8 = ad.reshape(g, (K, 8, F))
        gt8 = ad.reshape(gt, (K, 8, 3, F))
    else:
        g = source.level_features(flat)
        F = g.shape[-1]
        g8 = ad.reshape(g, (K, 8, F))
        gt8 = None
    w = blend_weights(x, verts, k)
    blended = blend_features(g8, w, normalize, vert_tangents=gt8)
    if want_tangent:
        z, zt = blended
        eye = np.broadcast_to(np.eye(3), (K, 3, 3)).copy()
        return (ad.concat([ad.constant(x), z], axis=-1),
                ad.concat([ad.constant(eye), zt], axis=-1))
    return ad.concat([ad.constant(x), blended], axis=-1)
