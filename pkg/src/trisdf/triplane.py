"""Multi-scale tri-plane feature volumes.

Each level stores three feature planes (xy, xz, yz projections) over the
cube [-1, 1]^3. A query projects the point onto each plane, interpolates
bilinearly, and sums the three plane features element-wise; the encoding
concatenates the raw position with every level's feature vector.

Texel (i, j) of an R x R plane is centered at world coordinate
(-1 + (i + 0.5) * 2 / R, -1 + (j + 0.5) * 2 / R); i indexes the first
projected axis. Queries outside the cube clamp to the boundary and bump
volume.clamp_events.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

from . import autodiff as ad

# projected world-axis pairs for planes xy, xz, yz
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
PLANE_NAMES = ("xy", "xz", "yz")


def texel_variance(a, b, n):
    """Init variance of one feature channel at plane coordinate (a, b).

    n is the total concatenated feature length (levels * channels); the sum
    over a level's three planes then gives (a^2+b^2 + a^2+c^2 + b^2+c^2)/(2n)
    = r^2/n per channel, so the full concatenation has mean squared norm r^2
    on the sphere of radius r.
    """
    return (np.asarray(a) ** 2 + np.asarray(b) ** 2) / (2.0 * n)


def texel_centers(resolution):
    return -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)


class MultiScaleTriPlane:
    """Learnable feature planes: planes[level][p] is a (R, R, N) leaf tensor."""

    def __init__(self, resolutions, n_features, planes):
        self.resolutions = tuple(int(r) for r in resolutions)
        self.n_features = int(n_features)
        self.planes = planes
        self.clamp_events = 0
        for r in self.resolutions:
            if r < 2:
                raise ValueError(f"plane resolution must be >= 2, got {r}")

    @property
    def n_levels(self):
        return len(self.resolutions)

    @property
    def feature_length(self):
        """Length of the concatenated encoding: 3 + levels * channels."""
        return 3 + self.n_levels * self.n_features

    def parameters(self):
        return [p for level in self.planes for p in level]


def _wrapped_kernel_sq_sum(kernel, resolution):
    """Sum of squared effective taps after circular wrap onto `resolution`."""
    eff = np.zeros(resolution)
    half = (len(kernel) - 1) // 2
    for t, k in enumerate(kernel):
        eff[(t - half) % resolution] += k
    return float(np.sum(eff * eff))


CALIBRATION_RADII = (0.25, 0.5, 0.9)


def _probe_directions(n_points, seed):
    rng = np.random.default_rng([seed, 104729])
    v = rng.standard_normal((n_points, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _feature_norm_ratios(volume, radii, seed, n_points=20000):
    """Mean interpolated-feature norm divided by the radius, per probe radius."""
    dirs = _probe_directions(n_points, seed)
    ratios = []
    for r in radii:
        enc = encode(volume, r * dirs)
        feats = enc.data[:, 3:]
        ratios.append(float(np.mean(np.linalg.norm(feats, axis=1))) / r)
    return ratios


def _radial_calibration(volume, seed, rounds=4, tol=2e-3):
    """Center mean ||features|| / ||x|| at the calibration radii.

    Fits log(ratio) over log(r / 0.5) as a quadratic from a probe and divides
    the planes by the fitted profile, expressed per texel through its plane
    radius; scale, radial exponent and curvature together cancel the offset
    and the radial trend of the finite draw. The plane-radius form of the
    correction only tracks the fit to first order, so a few rounds iterate
    it to convergence.
    """
    radii = np.asarray(CALIBRATION_RADII, dtype=np.float64)
    u = np.log(radii / 0.5)
    design = np.stack([np.ones(len(radii)), u, u * u], axis=1)
    for _ in range(rounds):
        ratios = np.asarray(_feature_norm_ratios(volume, CALIBRATION_RADII, seed))
        if np.max(np.abs(ratios - 1.0)) < tol:
            break
        coef = np.linalg.solve(design, np.log(ratios))
        for level_planes, res in zip(volume.planes, volume.resolutions):
            centers = texel_centers(res)
            s = np.hypot(centers[:, None], centers[None, :])
            delta = 2.0 / res  # one texel softens the pole at s = 0
            t = np.log((s + delta) / 0.5)
            corr = np.exp(-(coef[0] + coef[1] * t + coef[2] * t * t))
            for p in level_planes:
                p.data *= corr[:, :, None]


def _ring_normalize(field, centers):
    """Rescale each radial ring of a plane field to unit empirical variance.

    Coarse planes have few texels inside a small plane radius, so a finite
    draw's variance wobbles by tens of percent there, which would show up as
    a seed-dependent radial trend in the encoding norm. Normalizing ring by
    ring pins the realized variance profile instead of relying on the law of
    large numbers.
    """
    R = field.shape[0]
    s = np.hypot(centers[:, None], centers[None, :]).ravel()
    edges = np.linspace(0.0, np.sqrt(2.0) + 1e-9, R + 1)
    ring = np.clip(np.digitize(s, edges) - 1, 0, R - 1)
    flat = field.reshape(R * R, -1)
    out = flat.copy()
    for b in range(R):
        m = ring == b
        if not np.any(m):
            continue
        var = np.mean(flat[m] ** 2)
        if var > 0.0:
            out[m] = flat[m] / np.sqrt(var)
    return out.reshape(field.shape)


def geometric_init(resolutions, n_features, seed, blur_sigma=3.0):
    """Draw planes so the encoding's norm tracks the distance to the origin.

    Per plane: iid standard normals per texel, smoothed with a periodic
    Gaussian blur (so values between texel centers keep unit variance under
    interpolation), normalized ring-by-ring to exact unit empirical variance,
    then scaled by the per-texel std sqrt(texel_variance). A probe-fitted
    scale-plus-radial-exponent correction finally centers the remaining
    interpolation bias of mean ||features|| / ||x|| around 1 at the
    calibration radii. The whole procedure is deterministic in `seed`.
    """
    resolutions = tuple(int(r) for r in resolutions)
    n_total = len(resolutions) * n_features
    rng = np.random.default_rng(seed)

    half = int(np.ceil(3.0 * blur_sigma))
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / blur_sigma) ** 2)
    taps /= taps.sum()

    planes = []
    for level, res in enumerate(resolutions):
        centers = texel_centers(res)
        level_planes = []
        norm = 1.0 / np.sqrt(_wrapped_kernel_sq_sum(taps, res))
        for axes in PLANE_AXES:
            raw = rng.standard_normal((res, res, n_features))
            sm = convolve1d(raw, taps, axis=0, mode="wrap")
            sm = convolve1d(sm, taps, axis=1, mode="wrap")
            sm *= norm * norm  # one factor per smoothed axis
            sm = _ring_normalize(sm, centers)
            a = centers[:, None]
            b = centers[None, :]
            std = np.sqrt(texel_variance(a, b, n_total))  # (R, R)
            level_planes.append(ad.tensor(sm * std[:, :, None], requires_grad=True))
        planes.append(level_planes)
    volume = MultiScaleTriPlane(resolutions, n_features, planes)
    _radial_calibration(volume, seed)
    return volume


def zero_init(resolutions, n_features):
    planes = [
        [ad.tensor(np.zeros((r, r, n_features)), requires_grad=True) for _ in range(3)]
        for r in resolutions
    ]
    return MultiScaleTriPlane(resolutions, n_features, planes)


# ---------------------------------------------------------------------------
# windowed bilinear sampling
#
# Querying a plane convolved with a (2h+1)-tap kernel k then interpolating
# bilinearly equals a single weighted gather over (2h+2)^2 texels per point:
# along each axis the composite weights are the convolution of the bilinear
# pair [1-f, f] with k. Window 1 (k = [1]) is plain bilinear interpolation,
# and the plain query below runs through exactly this code path so the two
# agree bit for bit.
# ---------------------------------------------------------------------------

BILINEAR = np.array([1.0])


def axis_window(resolution, coords, kernel):
    """Composite sampling stencil along one plane axis.

    coords: (K,) world coordinates in [-1, 1] (clamped outside).
    kernel: (w,) symmetric odd-length taps summing to 1.
    Returns (idx, cw, dcw, clamped): texel indices (K, w+1), composite
    weights, their d/dcoord, and the out-of-bounds flag per point.
    """
    R = resolution
    w = len(kernel)
    u = (np.asarray(coords) + 1.0) * (R / 2.0) - 0.5
    clamped = (u < 0.0) | (u > R - 1.0)
    u = np.clip(u, 0.0, float(R - 1))
    i0 = np.minimum(np.floor(u).astype(np.int64), R - 2)
    f = u - i0  # (K,)

    h = (w - 1) // 2
    offs = np.arange(-h, h + 2)  # (w+1,)
    kpad = np.zeros(w + 2)
    kpad[1:-1] = kernel
    # cw_d = (1-f) * k[d] + f * k[d-1] for offsets d in [-h, h+1]
    k_at = kpad[1 + offs + h]          # k[d], zero outside
    k_prev = kpad[offs + h]            # k[d-1]
    one_f = 1.0 - f
    cw = one_f[:, None] * k_at[None, :] + f[:, None] * k_prev[None, :]
    dcw = (k_prev - k_at)[None, :] * (~clamped[:, None]) * (R / 2.0)

    idx = np.clip(i0[:, None] + offs[None, :], 0, R - 1)
    return idx, cw, dcw, clamped


def plane_stencil(resolution, ab, kernel):
    """2-d composite stencil for points ab (K, 2) on an R x R plane.

    Returns (flat_idx (K, S), cw (K, S), dcw_da, dcw_db, clamped (K,)) with
    S = (w+1)^2 and flat indices into the row-major (R*R, N) plane.
    """
    idx_a, cw_a, dcw_a, cl_a = axis_window(resolution, ab[:, 0], kernel)
    idx_b, cw_b, dcw_b, cl_b = axis_window(resolution, ab[:, 1], kernel)
    K, S1 = idx_a.shape
    flat = (idx_a[:, :, None] * resolution + idx_b[:, None, :]).reshape(K, S1 * S1)
    cw = (cw_a[:, :, None] * cw_b[:, None, :]).reshape(K, S1 * S1)
    dcw_da = (dcw_a[:, :, None] * cw_b[:, None, :]).reshape(K, S1 * S1)
    dcw_db = (cw_a[:, :, None] * dcw_b[:, None, :]).reshape(K, S1 * S1)
    return flat, cw, dcw_da, dcw_db, cl_a | cl_b


def sample_plane(plane, resolution, n_features, ab, kernel, want_tangent=False):
    """Tape-recorded windowed query of one plane at points ab (K, 2).

    Returns value (K, N), or (value, d/da, d/db) when want_tangent. One
    gather feeds all three weighted reductions, so the spatial tangents
    reuse the gathered texels.
    """
    flat_idx, cw, dcw_da, dcw_db, _ = plane_stencil(resolution, ab, kernel)
    flat = ad.reshape(plane, (resolution * resolution, n_features))
    texels = ad.gather(flat, flat_idx)  # (K, S, N)
    val = ad.sum_(ad.mul(texels, ad.constant(cw[:, :, None])), axis=1)
    if not want_tangent:
        return val
    da = ad.sum_(ad.mul(texels, ad.constant(dcw_da[:, :, None])), axis=1)
    db = ad.sum_(ad.mul(texels, ad.constant(dcw_db[:, :, None])), axis=1)
    return val, da, db


def count_clamped(volume, x):
    """Count out-of-cube events for queries x (K, 3) and bump the counter."""
    n = int(np.count_nonzero(np.any(np.abs(np.asarray(x)) > 1.0, axis=-1)))
    volume.clamp_events += n
    return n


def query_level(volume, level, x, kernel=BILINEAR, planes_override=None,
                want_tangent=False):
    """Feature of one level at points x (K, 3): sum of the three plane queries.

    With want_tangent also returns the spatial derivative (K, 3, N).
    planes_override substitutes precomputed (e.g. convolved) plane tensors.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    count_clamped(volume, x)
    res = volume.resolutions[level]
    nf = volume.n_features
    planes = volume.planes[level] if planes_override is None else planes_override

    if not want_tangent:
        total = None
        for plane, axes in zip(planes, PLANE_AXES):
            v = sample_plane(plane, res, nf, x[:, axes], kernel)
            total = v if total is None else ad.add(total, v)
        return total

    total = None
    ax_terms = [[], [], []]  # world axis -> tangent contributions
    for plane, axes in zip(planes, PLANE_AXES):
        v, da, db = sample_plane(plane, res, nf, x[:, axes], kernel,
                                 want_tangent=True)
        total = v if total is None else ad.add(total, v)
        ax_terms[axes[0]].append(da)
        ax_terms[axes[1]].append(db)
    K = x.shape[0]
    per_axis = []
    for terms in ax_terms:
        t = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
        per_axis.append(ad.reshape(t, (K, 1, nf)))
    tangent = ad.concat(per_axis, axis=1)  # (K, 3, N)
    return total, tangent


def encode(volume, x, kernels=None, want_tangent=False, planes_override=None):
    """Concatenated encoding (x, F_1, ..., F_L) at points x (K, 3).

    kernels: optional per-level 1-d taps (default plain bilinear everywhere).
    With want_tangent also returns d(encoding)/dx (K, 3, 3 + L*N); the
    position block's tangent is the identity.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    K = x.shape[0]
    parts = [ad.constant(x)]
    if not want_tangent:
        for level in range(volume.n_levels):
            kern = BILINEAR if kernels is None else kernels[level]
            ov = None if planes_override is None else planes_override[level]
            parts.append(query_level(volume, level, x, kern, planes_override=ov))
        return ad.concat(parts, axis=-1)

    eye = np.broadcast_to(np.eye(3), (K, 3, 3)).copy()
    tparts = [ad.constant(eye)]
    for level in range(volume.n_levels):
        kern = BILINEAR if kernels is None else kernels[level]
        ov = None if planes_override is None else planes_override[level]
        v, tg = query_level(volume, level, x, kern, planes_override=ov,
                            want_tangent=True)
        parts.append(v)
        tparts.append(tg)
    return ad.concat(parts, axis=-1), ad.concat(tparts, axis=-1)
