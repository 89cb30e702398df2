"""Synthetic scenes: analytic SDFs, cameras, and dataset generation.

Scenes are CSG trees over sphere/box/torus/plate primitives, all contained
in the unit sphere. Ground-truth images come from sphere tracing the
analytic SDF with Lambertian shading under a headlight plus ambient term;
the alpha channel of the tracer becomes the object mask.

Cameras sit on a Fibonacci spiral of a sphere of radius 2 looking at the
origin. A dataset on disk is a manifest.json plus one PPM image and PGM
mask per view.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import images
from .cone import CORNER_OFFSETS, RayBundle

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera. pose is the 3x4 camera-to-world matrix [R|t];
    camera space has x right, y down, z forward through the image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray

    def rays(self, pixels):
        """Cone bundle through pixel centers; pixels (K, 2) as (col, row)."""
        px = np.asarray(pixels, dtype=np.float64)
        u = px[:, 0] + 0.5
        v = px[:, 1] + 0.5
        R = self.pose[:, :3]
        t = self.pose[:, 3]

        def dirs_for(uu, vv):
            d = np.stack([(uu - self.cx) / self.fx,
                          (vv - self.cy) / self.fy,
                          np.ones_like(uu)], axis=-1)
            d = d @ R.T
            return d / np.linalg.norm(d, axis=-1, keepdims=True)

        center = dirs_for(u, v)
        corners = np.stack(
            [dirs_for(u + off[0], v + off[1]) for off in CORNER_OFFSETS],
            axis=1)  # (K, 4, 3)
        origins = np.broadcast_to(t, center.shape).copy()
        return RayBundle(origins, center, corners)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "pose": [float(x) for x in self.pose.reshape(-1)],
        }

    @staticmethod
    def from_dict(d):
        pose = np.asarray(d["pose"], dtype=np.float64).reshape(3, 4)
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]),
                      float(d["cy"]), int(d["width"]), int(d["height"]), pose)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world 3x4 with +z toward target, +y down-ish, +x right."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-8:  # looking along up: fall back
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1), eye


def fibonacci_cameras(n_views, width, height, radius=2.0, focal_frac=0.7):
    """Cameras on a Fibonacci spiral of the radius-2 sphere, looking at 0."""
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    cams = []
    for i in range(n_views):
        z = 1.0 - (2.0 * i + 1.0) / n_views  # avoid exact poles
        r = np.sqrt(max(0.0, 1.0 - z * z))
        phi = 2.0 * np.pi * i / golden
        eye = radius * np.array([r * np.cos(phi), r * np.sin(phi), z])
        R, t = look_at(eye, (0.0, 0.0, 0.0))
        pose = np.concatenate([R, t[:, None]], axis=1)
        f = focal_frac * width
        cams.append(Camera(f, f, width / 2.0, height / 2.0, width, height,
                           pose))
    return cams


# ---------------------------------------------------------------------------
# SDF primitives and CSG (batched over leading dims)
# ---------------------------------------------------------------------------

def sd_sphere(p, center, radius):
    return np.linalg.norm(p - np.asarray(center), axis=-1) - radius


def sd_box(p, center, half_extents):
    q = np.abs(p - np.asarray(center)) - np.asarray(half_extents)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def sd_torus(p, center, major, minor):
    """Torus around the z axis through `center`."""
    q = p - np.asarray(center)
    ring = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2) - major
    return np.sqrt(ring ** 2 + q[..., 2] ** 2) - minor


def sd_plate(p, center, normal, half_thickness, half_extent):
    """Thin square plate: a box aligned to `normal` (axis-aligned normals)."""
    normal = np.asarray(normal, dtype=np.float64)
    axis = int(np.argmax(np.abs(normal)))
    he = np.full(3, half_extent, dtype=np.float64)
    he[axis] = half_thickness
    return sd_box(p, center, he)


def csg_union(a, b):
    return np.minimum(a, b)


def csg_intersection(a, b):
    return np.maximum(a, b)


def csg_difference(a, b):
    return np.maximum(a, -b)


@dataclass
class Scene:
    name: str
    sdf: object           # callable (K, 3) -> (K,)
    albedo: object        # callable (K, 3) -> (K, 3)
    bound_radius: float = 1.0


def _flat_albedo(color):
    color = np.asarray(color, dtype=np.float64)

    def fn(p):
        return np.broadcast_to(color, p.shape).copy()

    return fn


def _stripe_albedo(base, accent, axis=2, freq=8.0):
    base = np.asarray(base, dtype=np.float64)
    accent = np.asarray(accent, dtype=np.float64)

    def fn(p):
        s = 0.5 + 0.5 * np.sin(freq * np.pi * p[..., axis])
        return base + s[..., None] * (accent - base)

    return fn


def build_scene(name):
    """Named analytic scenes used by the pipeline and its tests.

    sphere: radius-0.5 sphere at the origin.
    lego:   a slab with thin vertical slots between posts (union of boxes),
            exercising pixel-scale detail.
    plate:  a box body with a thin fin sticking out of the top.
    """
    if name == "sphere":
        def sdf(p):
            return sd_sphere(p, (0.0, 0.0, 0.0), 0.5)
        return Scene("sphere", sdf, _stripe_albedo(
            (0.75, 0.45, 0.30), (0.35, 0.55, 0.80), axis=2, freq=3.0))

    if name == "lego":
        # base slab plus a fence of posts; gaps are ~3 texels of a 256 plane
        gap = 3.0 * (2.0 / 256.0)
        post_w = 0.055
        pitch = post_w + gap
        xs = (np.arange(5) - 2.0) * pitch

        def sdf(p):
            d = sd_box(p, (0.0, 0.0, -0.25), (0.42, 0.18, 0.10))
            for x0 in xs:
                d = csg_union(d, sd_box(p, (x0, 0.0, 0.05),
                                        (post_w / 2.0, 0.12, 0.22)))
            d = csg_union(d, sd_box(p, (0.0, 0.0, 0.32), (0.42, 0.15, 0.05)))
            return d
        return Scene("lego", sdf, _flat_albedo((0.80, 0.55, 0.25)))

    if name == "plate":
        # half-thickness 0.02 >= two texels of the finest default plane
        def sdf(p):
            body = sd_box(p, (0.0, 0.0, -0.18), (0.30, 0.26, 0.16))
            fin = sd_plate(p, (0.0, 0.0, 0.22), (0.0, 1.0, 0.0),
                           0.02, 0.24)
            return csg_union(body, fin)
        return Scene("plate", sdf, _stripe_albedo(
            (0.70, 0.40, 0.35), (0.30, 0.50, 0.75), axis=0, freq=4.0))

    raise ValueError(f"unknown scene {name!r}; try sphere, lego, plate")


# ---------------------------------------------------------------------------
# ground-truth rendering
# ---------------------------------------------------------------------------

def sphere_trace(sdf, origins, dirs, t_near, t_far, max_steps=96, tol=1e-5):
    """Batched sphere tracing. Returns (t_hit, hit_mask)."""
    t = t_near.copy()
    hit = np.zeros(t.shape, dtype=bool)
    active = t < t_far
    for _ in range(max_steps):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        p = origins[idx] + t[idx, None] * dirs[idx]
        d = sdf(p)
        converged = np.abs(d) < tol
        hit[idx[converged]] = True
        t[idx] += np.maximum(d, tol * 0.5)
        escaped = t[idx] > t_far[idx]
        active[idx[converged | escaped]] = False
    return t, hit


def analytic_normal(sdf, p, eps=1e-4):
    n = np.zeros_like(p)
    for a in range(3):
        dp = np.zeros(3)
        dp[a] = eps
        n[:, a] = sdf(p + dp) - sdf(p - dp)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def shade(scene, p, n, view_dir):
    """Headlight Lambertian with ambient floor; colors in [0, 1]."""
    light = -view_dir
    lam = np.maximum(np.sum(n * light, axis=-1), 0.0)
    alb = scene.albedo(p)
    return np.clip(alb * (0.25 + 0.75 * lam[..., None]), 0.0, 1.0)


def render_ground_truth(scene, camera):
    """Returns (rgb float (H, W, 3), mask bool (H, W))."""
    H, W = camera.height, camera.width
    ys, xs = np.mgrid[0:H, 0:W]
    pixels = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
    bundle = camera.rays(pixels)
    o, d = bundle.origins, bundle.dirs
    b = np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - scene.bound_radius ** 2
    disc = b * b - c
    ok = disc > 0
    t_near = np.where(ok, np.maximum(-b - np.sqrt(np.maximum(disc, 0)), 0.0),
                      np.inf)
    t_far = np.where(ok, -b + np.sqrt(np.maximum(disc, 0)), -np.inf)
    t, hit = sphere_trace(scene.sdf, o, d, t_near, t_far)
    rgb = np.zeros((H * W, 3))
    if np.any(hit):
        p = o[hit] + t[hit, None] * d[hit]
        n = analytic_normal(scene.sdf, p)
        rgb[hit] = shade(scene, p, n, d[hit])
    return rgb.reshape(H, W, 3), hit.reshape(H, W)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SceneDataset:
    cameras: list
    images: np.ndarray   # (V, H, W, 3) float64 in [0, 1]
    masks: np.ndarray    # (V, H, W) bool
    manifest: dict

    @property
    def n_views(self):
        return len(self.cameras)


def generate_dataset(scene_name, out_dir, n_views=16, width=64, height=64,
                     seed=0, radius=2.0):
    """Render ground truth for every view and write the dataset to out_dir.

    Layout: manifest.json, view_%03d.ppm, mask_%03d.pgm. Deterministic in
    all arguments; `seed` is recorded and keys downstream training RNG.
    """
    scene = build_scene(scene_name)
    cams = fibonacci_cameras(n_views, width, height, radius=radius)
    os.makedirs(out_dir, exist_ok=True)
    views = []
    for i, cam in enumerate(cams):
        rgb, mask = render_ground_truth(scene, cam)
        img_name = f"view_{i:03d}.ppm"
        mask_name = f"mask_{i:03d}.pgm"
        images.write_ppm(os.path.join(out_dir, img_name), images.to_u8(rgb))
        images.write_pgm(os.path.join(out_dir, mask_name),
                         (mask * np.uint8(255)))
        views.append({
            "image": img_name,
            "mask": mask_name,
            "camera": cam.to_dict(),
        })
    manifest = {
        "version": MANIFEST_VERSION,
        "scene": scene_name,
        "seed": int(seed),
        "views": views,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_dataset(path):
    """Load a dataset directory (or its manifest.json path)."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    base = os.path.dirname(path)
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version "
                         f"{manifest.get('version')!r}")
    cams, imgs, masks = [], [], []
    for view in manifest["views"]:
        cams.append(Camera.from_dict(view["camera"]))
        img = images.read_ppm(os.path.join(base, view["image"]))
        imgs.append(img.astype(np.float64) / 255.0)
        masks.append(images.read_pgm(os.path.join(base, view["mask"])) > 127)
    return SceneDataset(cams, np.stack(imgs), np.stack(masks), manifest)


def holdout_split(n_views, every=8):
    """Train/test view indices: every `every`-th view is held out."""
    idx = np.arange(n_views)
    test = idx[idx % every == 0]
    train = idx[idx % every != 0]
    return train, test
