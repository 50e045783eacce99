"""Mesh to SDF samples: depth renders from many cameras give a surface point
cloud and a visibility-based inside/outside test."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh, read_obj
from .shapes import NEAR_SURFACE, UNIFORM, SdfSampleSet

log = logging.getLogger(__name__)

VISIBILITY_BIAS = 1e-4


def normalize_mesh(mesh: TriangleMesh, radius: float = 0.9) -> TriangleMesh:
    """Center on the bounding-box center and scale the bounding sphere to ``radius``."""
    if len(mesh.vertices) == 0 or mesh.is_empty:
        raise ValueError("cannot normalize an empty mesh")
    used = mesh.vertices[np.unique(mesh.faces)]
    center = 0.5 * (used.min(axis=0) + used.max(axis=0))
    extent = np.linalg.norm(used - center, axis=1).max()
    if extent <= 0:
        raise ValueError("mesh has zero extent")
    scale = radius / extent
    return TriangleMesh((mesh.vertices - center) * scale, mesh.faces.copy())


def fibonacci_directions(n: int) -> np.ndarray:
    """n nearly equidistant unit vectors on the sphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@dataclass
class CameraRig:
    """Orthographic cameras on a sphere, each looking at the origin.

    The image plane of every camera covers [-extent, extent]^2 around its axis.
    """

    n_views: int = 50
    resolution: int = 1024
    extent: float = 1.0
    distance: float = 3.0
    directions: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.directions is None:
            self.directions = fibonacci_directions(self.n_views)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.directions /= np.linalg.norm(self.directions, axis=1, keepdims=True)
        self.n_views = len(self.directions)

    def basis(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, direction) for view k; the camera sits at distance * direction."""
        d = self.directions[k]
        helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(helper, d)
        right /= np.linalg.norm(right)
        return right, np.cross(d, right), d

    @property
    def pixel_size(self) -> float:
        return 2.0 * self.extent / self.resolution

    def project(self, k: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous image coords (u, v) and depth from the camera plane."""
        right, up, d = self.basis(k)
        return points @ right, points @ up, self.distance - points @ d

    def pixel_index(self, u: np.ndarray) -> np.ndarray:
        return np.floor((u + self.extent) / self.pixel_size).astype(np.int64)

    def pixel_center(self, i: np.ndarray) -> np.ndarray:
        return -self.extent + (i + 0.5) * self.pixel_size

    def min_angle_degrees(self) -> float:
        c = np.clip(self.directions @ self.directions.T, -1.0, 1.0)
        np.fill_diagonal(c, -1.0)
        return float(np.degrees(np.arccos(c.max())))


def rasterize_depth(mesh: TriangleMesh, rig: CameraRig, k: int, chunk_pixels: int = 1 << 22) -> np.ndarray:
    """Orthographic z-buffer of view k; empty pixels hold +inf. Indexed [iu, iv]."""
    res = rig.resolution
    buf = np.full(res * res, np.inf)
    if mesh.is_empty:
        return buf.reshape(res, res)
    u, v, depth = rig.project(k, mesh.vertices)
    f = mesh.faces
    tu, tv, tz = u[f], v[f], depth[f]
    lo_u = np.clip(rig.pixel_index(tu.min(axis=1) - 0.5 * rig.pixel_size) , 0, res - 1)
    hi_u = np.clip(rig.pixel_index(tu.max(axis=1) + 0.5 * rig.pixel_size), 0, res - 1)
    lo_v = np.clip(rig.pixel_index(tv.min(axis=1) - 0.5 * rig.pixel_size), 0, res - 1)
    hi_v = np.clip(rig.pixel_index(tv.max(axis=1) + 0.5 * rig.pixel_size), 0, res - 1)
    # signed area in the image plane; edge-on triangles cover no pixel centers
    area = (tu[:, 1] - tu[:, 0]) * (tv[:, 2] - tv[:, 0]) - (tu[:, 2] - tu[:, 0]) * (tv[:, 1] - tv[:, 0])
    wu, wv = hi_u - lo_u + 1, hi_v - lo_v + 1
    ok = (np.abs(area) > 1e-300) & (tu.max(axis=1) >= -rig.extent) & (tu.min(axis=1) <= rig.extent) \
        & (tv.max(axis=1) >= -rig.extent) & (tv.min(axis=1) <= rig.extent)
    order = np.nonzero(ok)[0]
    order = order[np.argsort(wu[order] * wv[order], kind="stable")]
    start = 0
    while start < len(order):
        # group triangles of similar footprint so the candidate grid stays tight
        bw, bh = wu[order[start]], wv[order[start]]
        stop = start
        while stop < len(order):
            cand_w = max(bw, wu[order[stop]])
            cand_h = max(bh, wv[order[stop]])
            if (stop - start + 1) * cand_w * cand_h > chunk_pixels and stop > start:
                break
            bw, bh = cand_w, cand_h
            stop += 1
        ids = order[start:stop]
        start = stop
        du, dv = np.meshgrid(np.arange(bw), np.arange(bh), indexing="ij")
        iu = lo_u[ids, None] + du.reshape(1, -1)
        iv = lo_v[ids, None] + dv.reshape(1, -1)
        inside_box = (iu <= hi_u[ids, None]) & (iv <= hi_v[ids, None])
        pu, pv = rig.pixel_center(iu), rig.pixel_center(iv)
        a0u, a0v = tu[ids, 0, None], tv[ids, 0, None]
        e1u, e1v = tu[ids, 1, None] - a0u, tv[ids, 1, None] - a0v
        e2u, e2v = tu[ids, 2, None] - a0u, tv[ids, 2, None] - a0v
        det = area[ids, None]
        qu, qv = pu - a0u, pv - a0v
        b1 = (qu * e2v - qv * e2u) / det
        b2 = (e1u * qv - e1v * qu) / det
        b0 = 1.0 - b1 - b2
        tol = -1e-12
        cover = inside_box & (b0 >= tol) & (b1 >= tol) & (b2 >= tol)
        z = b0 * tz[ids, 0, None] + b1 * tz[ids, 1, None] + b2 * tz[ids, 2, None]
        flat = (iu * res + iv)[cover]
        np.minimum.at(buf, flat, z[cover])
    return buf.reshape(res, res)


@dataclass
class DepthRender:
    rig: CameraRig
    buffers: np.ndarray  # (views, res, res)
    cloud: np.ndarray    # (N, 3) back-projected surface points


def render_depth(mesh: TriangleMesh, rig: CameraRig | None = None, max_points: int | None = None,
                 rng: np.random.Generator | None = None) -> DepthRender:
    """Depth buffers of every view and the back-projected surface cloud.

    ``max_points`` caps the cloud by keeping a random subset of each view's
    covered pixels (an equal share per view).
    """
    rig = rig or CameraRig()
    rng = rng or np.random.default_rng(0)
    buffers = np.stack([rasterize_depth(mesh, rig, k) for k in range(rig.n_views)])
    per_view = None if max_points is None else max(1, max_points // rig.n_views)
    parts = []
    for k in range(rig.n_views):
        iu, iv = np.nonzero(np.isfinite(buffers[k]))
        if per_view is not None and len(iu) > per_view:
            pick = np.sort(rng.choice(len(iu), per_view, replace=False))
            iu, iv = iu[pick], iv[pick]
        right, up, d = rig.basis(k)
        u, v = rig.pixel_center(iu), rig.pixel_center(iv)
        along = rig.distance - buffers[k][iu, iv]
        parts.append(u[:, None] * right + v[:, None] * up + along[:, None] * d)
    cloud = np.concatenate(parts) if parts else np.zeros((0, 3))
    return DepthRender(rig, buffers, cloud)


def seen_by_any(render: DepthRender, points: np.ndarray, bias: float = VISIBILITY_BIAS) -> np.ndarray:
    """True where some camera sees the point in front of the recorded surface.

    Points projecting outside a view's image count as seen by that view.
    """
    rig = render.rig
    res = rig.resolution
    seen = np.zeros(len(points), dtype=bool)
    for k in range(rig.n_views):
        todo = np.nonzero(~seen)[0]
        if todo.size == 0:
            break
        u, v, depth = rig.project(k, points[todo])
        iu, iv = rig.pixel_index(u), rig.pixel_index(v)
        off = (iu < 0) | (iu >= res) | (iv < 0) | (iv >= res)
        vis = off.copy()
        on = ~off
        vis[on] = depth[on] < render.buffers[k][iu[on], iv[on]] - bias
        seen[todo[vis]] = True
    return seen


class MeshSdf:
    """SDF of a mesh from its depth renders: distance to the nearest back-projected
    surface point, positive where any camera sees the query."""

    def __init__(self, mesh: TriangleMesh, rig: CameraRig | None = None,
                 max_cloud: int | None = 2_000_000, rng: np.random.Generator | None = None):
        self.render = render_depth(mesh, rig, max_cloud, rng)
        self.cloud = self.render.cloud
        if len(self.cloud) == 0:
            raise ValueError("depth renders produced an empty surface cloud")
        self.tree = cKDTree(self.cloud)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return signed_distance(points, self)


def signed_distance(points: np.ndarray, shape: MeshSdf) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d, _ = shape.tree.query(points)
    return np.where(seen_by_any(shape.render, points), d, -d)


def build_sample_set(shape_id: str, sdf: MeshSdf, n_uniform: int, rng: np.random.Generator,
                     n_surface: int | None = None) -> SdfSampleSet:
    """Uniform samples in [-1, 1]^3 plus stored surface-cloud points (value 0,
    near-surface provenance) for later ground-truth queries."""
    p = rng.uniform(-1.0, 1.0, (n_uniform, 3))
    s = sdf(p)
    cloud = sdf.cloud
    if n_surface is not None and len(cloud) > n_surface:
        cloud = cloud[np.sort(rng.choice(len(cloud), n_surface, replace=False))]
    points = np.concatenate([p, cloud])
    values = np.concatenate([s, np.zeros(len(cloud))])
    prov = np.concatenate([np.full(n_uniform, UNIFORM, np.uint8), np.full(len(cloud), NEAR_SURFACE, np.uint8)])
    return SdfSampleSet(shape_id, points, values, prov)


@dataclass
class FilterResult:
    accepted: bool
    reason: str  # "ok", "interior" or "discontinuous"
    interior_fraction: float
    violation_fraction: float


def filter_shape(samples: SdfSampleSet, sdf, rng: np.random.Generator, min_interior: float = 0.01,
                 pairs: int = 10_000, max_gap: float = 0.05, slack: float = 0.01,
                 max_violations: float = 0.001) -> FilterResult:
    """Reject shapes with too little interior or with a non-Lipschitz SDF.

    The discontinuity test draws pairs (p, q) with |p - q| < max_gap and
    counts |s(p) - s(q)| > |p - q| + slack.
    """
    uniform = samples.uniform()
    frac = float(np.mean(uniform.values < 0)) if len(uniform) else 0.0
    p = rng.uniform(-1.0, 1.0, (pairs, 3))
    dirs = rng.standard_normal((pairs, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    q = np.clip(p + dirs * rng.uniform(0.0, max_gap, (pairs, 1)), -1.0, 1.0)
    gap = np.linalg.norm(p - q, axis=1)
    viol = float(np.mean(np.abs(sdf(p) - sdf(q)) > gap + slack))
    if viol > max_violations:
        return FilterResult(False, "discontinuous", frac, viol)
    if frac < min_interior:
        return FilterResult(False, "interior", frac, viol)
    return FilterResult(True, "ok", frac, viol)


@dataclass
class PreprocessReport:
    accepted: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (name, reason)


def preprocess_meshes(paths, rng: np.random.Generator, rig: CameraRig | None = None,
                      n_uniform: int = 64 ** 3, n_surface: int | None = 100_000) -> tuple[list[SdfSampleSet], PreprocessReport]:
    """OBJ files -> accepted sample sets plus a record of rejects."""
    rig = rig or CameraRig()
    sets, report = [], PreprocessReport()
    for path in paths:
        name = Path(path).stem
        try:
            mesh = normalize_mesh(read_obj(path).cleaned())
            sdf = MeshSdf(mesh, rig)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
            report.rejected.append((name, f"unreadable: {exc}"))
            continue
        samples = build_sample_set(name, sdf, n_uniform, rng, n_surface)
        verdict = filter_shape(samples, sdf, rng)
        if verdict.accepted:
            sets.append(samples)
            report.accepted.append(name)
        else:
            report.rejected.append((name, verdict.reason))
    return sets, report
