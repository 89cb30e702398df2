"""Pixel cones, conical frusta, and depth sampling along rays.

A pixel's cone is its center ray plus the four rays through the pixel
corners. A depth segment [t0, t1] cuts the cone into a frustum represented
by 8 vertices: the 4 corner-ray points at t0 followed by the 4 at t1
(t is the affine parameter along each normalized direction).

Sampling produces per-ray sorted depth vectors: stratified-uniform coarse
samples plus optional importance rounds that invert the opacity-weight CDF
of the current sample set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CORNER_OFFSETS = np.array([
    [-0.5, -0.5],
    [0.5, -0.5],
    [-0.5, 0.5],
    [0.5, 0.5],
])


@dataclass
class RayBundle:
    """Per-pixel cone geometry. corner_dirs is (K, 4, 3), unit length."""

    origins: np.ndarray      # (K, 3)
    dirs: np.ndarray         # (K, 3) center directions, unit length
    corner_dirs: np.ndarray  # (K, 4, 3)

    def __len__(self):
        return self.origins.shape[0]

    def degenerate(self):
        """Collapse corner rays onto the center ray (point-sampling mode)."""
        corners = np.repeat(self.dirs[:, None, :], 4, axis=1)
        return RayBundle(self.origins, self.dirs, corners)


def frustum_vertices(bundle, t0, t1):
    """Vertices (K, 8, 3) of the frusta cut at depths t0, t1 (K,)."""
    near = bundle.origins[:, None, :] + t0[:, None, None] * bundle.corner_dirs
    far = bundle.origins[:, None, :] + t1[:, None, None] * bundle.corner_dirs
    return np.concatenate([near, far], axis=1)


def intersect_sphere(origins, dirs, radius=1.0, near_min=0.05):
    """Entry/exit depths of rays against the bounding sphere.

    Returns (near (K,), far (K,), hit (K,) bool); near is clamped to
    near_min. Rays that miss keep near=far=0 and hit=False.
    """
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    near = np.where(hit, np.maximum(-b - sq, near_min), 0.0)
    far = np.where(hit, -b + sq, 0.0)
    hit &= far > near
    return near, far, hit


def stratified_ts(near, far, n, rng):
    """One uniform draw per equal-width bin of [near, far] per ray: (K, n)."""
    K = near.shape[0]
    edges = np.linspace(0.0, 1.0, n + 1)
    lo = edges[:-1][None, :]
    u = rng.random((K, n))
    frac = lo + u / n
    return near[:, None] + (far - near)[:, None] * frac


def sample_cdf(bins, weights, n, rng):
    """Inverse-CDF draw of n new depths per ray.

    bins: (K, B+1) sorted segment edges; weights: (K, B) nonnegative. A
    small floor keeps empty segments reachable. Returns (K, n), unsorted.
    """
    K, B = weights.shape
    w = weights + 1e-5
    pdf = w / np.sum(w, axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((K, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0

    u = rng.random((K, n))
    # row-offset trick: searchsorted once over the flattened staircase
    offs = 2.0 * np.arange(K)[:, None]
    flat_cdf = (cdf + offs).reshape(-1)
    flat_u = (u + offs).reshape(-1)
    inds = np.searchsorted(flat_cdf, flat_u, side="right").reshape(K, n)
    inds -= np.arange(K)[:, None] * (B + 1)
    below = np.clip(inds - 1, 0, B - 1)
    above = np.clip(inds, 1, B)

    rows = np.arange(K)[:, None]
    cdf_lo = cdf[rows, below]
    cdf_hi = cdf[rows, above]
    denom = cdf_hi - cdf_lo
    denom = np.where(denom < 1e-12, 1.0, denom)
    frac = (u - cdf_lo) / denom
    t_lo = bins[rows, below]
    t_hi = bins[rows, above]
    return t_lo + frac * (t_hi - t_lo)


def merge_sorted(t, t_new):
    """Sort the union of existing and new depths per ray, keeping strict order.

    Exact ties (measure zero, but possible) are nudged apart by 1e-12 so
    segment widths stay positive; untied inputs pass through untouched.
    """
    merged = np.sort(np.concatenate([t, t_new], axis=-1), axis=-1)
    d = np.diff(merged, axis=-1)
    if np.any(d <= 0.0):
        for r in np.nonzero(np.any(d <= 0.0, axis=-1))[0]:
            row = merged[r]
            for i in range(1, row.size):
                if row[i] <= row[i - 1]:
                    row[i] = row[i - 1] + 1e-12
    return merged


def segment_stations(t, near, far, n_nominal):
    """Segment boundaries (K, S+1): the samples plus a trailing far edge.

    Sample i's frustum spans [b_i, b_{i+1}]; the last segment's width is the
    nominal coarse spacing so every sample owns a forward segment.
    """
    K, S = t.shape
    trail = (far - near) / max(n_nominal, 1)
    b = np.empty((K, S + 1))
    b[:, :S] = t
    b[:, S] = t[:, -1] + trail
    return b
