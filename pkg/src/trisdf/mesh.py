"""Zero-level-set extraction and Chamfer-distance evaluation.

marching_cubes samples an SDF on a regular grid and pulls out the
iso-surface as a triangle mesh; chamfer_distance compares two point sets
sampled uniformly by area from such meshes (or from analytic references).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

# triangles at or below this area are dropped as degenerate
DEGENERATE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int64, indices into vertices

    @property
    def is_empty(self):
        return self.triangles.shape[0] == 0

    def validate(self):
        V = self.vertices.shape[0]
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= V):
            raise ValueError("triangle index out of range")
        return self


@dataclass
class PointSample:
    points: np.ndarray  # (N, 3) float64


def triangle_areas(vertices, triangles):
    """Areas (F,) of each triangle."""
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    cross = np.cross(p1 - p0, p2 - p0)
    return 0.5 * np.sqrt((cross * cross).sum(axis=-1))


def _empty_mesh():
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def marching_cubes(sdf_eval, grid_res, bounds=(-1.0, 1.0), iso=0.0,
                   chunk=65536):
    """Extract the iso-surface of sdf_eval over a cubic grid.

    sdf_eval maps points (K, 3) to values (K,) and is called in chunks
    (inference only, no tape). Returns a TriangleMesh in world coordinates;
    a field with no sign change yields a valid empty mesh. Degenerate
    (zero-area) triangles are dropped.
    """
    if grid_res < 8:
        raise ValueError(f"grid_res must be >= 8, got {grid_res}")
    lo, hi = float(bounds[0]), float(bounds[1])
    if not hi > lo:
        raise ValueError(f"bad bounds {bounds}")
    axis = np.linspace(lo, hi, grid_res)
    dx = axis[1] - axis[0]
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=-1)

    field = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        stop = min(start + chunk, pts.shape[0])
        field[start:stop] = np.asarray(sdf_eval(pts[start:stop])).reshape(-1)
    if not np.all(np.isfinite(field)):
        raise ValueError("sdf_eval produced non-finite values")
    field = field.reshape(grid_res, grid_res, grid_res)

    if field.min() >= iso or field.max() <= iso:
        return _empty_mesh()

    verts, faces, _, _ = measure.marching_cubes(
        field, level=iso, spacing=(dx, dx, dx), method="lorensen")
    verts = verts + lo  # grid index space -> world
    faces = faces.astype(np.int64)
    keep = triangle_areas(verts, faces) > DEGENERATE_AREA
    return TriangleMesh(verts.astype(np.float64), faces[keep]).validate()


def sample_surface(mesh, n, seed=0):
    """n points drawn uniformly by surface area; deterministic in seed."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng([seed, 9176])
    areas = triangle_areas(mesh.vertices, mesh.triangles)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has no positive-area triangles")
    which = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0  # reflect into the lower barycentric triangle
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.triangles[which]
    p0 = mesh.vertices[tri[:, 0]]
    p1 = mesh.vertices[tri[:, 1]]
    p2 = mesh.vertices[tri[:, 2]]
    pts = p0 + u[:, None] * (p1 - p0) + v[:, None] * (p2 - p0)
    return PointSample(pts)


def _nearest_brute(a, b, block=512):
    """Distance (n_a,) from each point of a to its nearest point of b."""
    out = np.empty(a.shape[0])
    for start in range(0, a.shape[0], block):
        stop = min(start + block, a.shape[0])
        d2 = ((a[start:stop, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        out[start:stop] = np.sqrt(d2.min(axis=1))
    return out


def _nearest_tree(a, b):
    d, _ = cKDTree(b).query(a, k=1)
    return d


def chamfer_distance(a, b, method="tree"):
    """Symmetric Chamfer distance between two point sets.

    0.5 * (mean over a of the L2 distance to its nearest point in b
           + the same with a and b swapped).
    method "tree" uses a k-d tree, "brute" exact pairwise distances; the
    two agree to tight float tolerance and tests pin them together.
    """
    pa = a.points if isinstance(a, PointSample) else np.asarray(a)
    pb = b.points if isinstance(b, PointSample) else np.asarray(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer_distance needs non-empty point sets")
    nearest = _nearest_tree if method == "tree" else _nearest_brute
    if method not in ("tree", "brute"):
        raise ValueError(f"unknown method {method!r}")
    return 0.5 * (nearest(pa, pb).mean() + nearest(pb, pa).mean())


def euler_characteristic(mesh):
    """V - E + F with E the count of distinct undirected edges."""
    tri = mesh.triangles
    if tri.shape[0] == 0:
        return 0
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    n_edges = np.unique(edges, axis=0).shape[0]
    n_verts = np.unique(tri.reshape(-1)).shape[0]
    return int(n_verts - n_edges + tri.shape[0])


def write_obj(mesh, path):
    """ASCII OBJ with v/f lines only (f indices are 1-based)."""
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.10g} {y:.10g} {z:.10g}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"f {i + 1} {j + 1} {k + 1}\n")


def read_obj(path):
    """Read a v/f-line OBJ written by write_obj (plain triangle faces)."""
    verts = []
    faces = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(verts, faces).validate()
