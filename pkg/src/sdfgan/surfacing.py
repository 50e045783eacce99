"""Zero iso-surface extraction (Marching Cubes), grid upscaling, sphere tracing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from ._mc_tables import CORNERS, EDGES, EDGE_TABLE, TRI_TABLE
from .mesh import TriangleMesh

SdfSource = Callable[[np.ndarray], np.ndarray]

_CORNERS = np.array(CORNERS, dtype=np.int64)
_TRI = np.full((256, 16), -1, dtype=np.int64)
for _case, _tris in enumerate(TRI_TABLE):
    _TRI[_case, :len(_tris)] = _tris
# Each cell edge, as (lower grid corner offset, axis) of the shared grid edge.
_EDGE_BASE = np.array([np.minimum(_CORNERS[a], _CORNERS[b]) for a, b in EDGES])
_EDGE_AXIS = np.array([int(np.argmax(np.abs(_CORNERS[b] - _CORNERS[a]))) for a, b in EDGES])
# The published tables wind triangles so that normals face the negative side;
# reversing each triangle makes them face increasing s.
_FLIP = True


def grid_axis(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return np.linspace(lo, hi, resolution)


def raster(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """(R, R, R, 3) grid positions indexed [ix, iy, iz]."""
    a = grid_axis(resolution, lo, hi)
    return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)


def evaluate_grid(source: SdfSource, resolution: int, lo: float = -1.0, hi: float = 1.0,
                  chunk: int = 65536) -> np.ndarray:
    """Source values on the R^3 raster, indexed [ix, iy, iz]."""
    pts = raster(resolution, lo, hi).reshape(-1, 3)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = source(pts[s:s + chunk])
    return out.reshape((resolution,) * 3)


def marching_cubes(source: SdfSource | np.ndarray, resolution: int | None = None,
                   lo: float = -1.0, hi: float = 1.0) -> TriangleMesh:
    """Triangle mesh of the zero level set over the raster ``linspace(lo, hi, R)^3``.

    ``source`` is either a callable or an already sampled (R, R, R) grid
    indexed [ix, iy, iz]. Corners with s < 0 count as inside. Vertices on
    shared grid edges are emitted once, so closed surfaces come out watertight.
    """
    if callable(source):
        if resolution is None:
            raise ValueError("resolution is required for a callable source")
        if resolution < 2:
            raise ValueError("resolution must be at least 2")
        grid = evaluate_grid(source, resolution, lo, hi)
    else:
        grid = np.asarray(source, dtype=np.float64)
        if grid.ndim != 3 or len(set(grid.shape)) != 1 or grid.shape[0] < 2:
            raise ValueError(f"expected a cubic grid with side >= 2, got {grid.shape}")
    r = grid.shape[0]
    step = (hi - lo) / (r - 1)

    inside = grid < 0.0
    n = r - 1
    case = np.zeros((n, n, n), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:dx + n, dy:dy + n, dz:dz + n].astype(np.int64) << bit
    cells = np.nonzero((case != 0) & (case != 255))
    if len(cells[0]) == 0:
        return TriangleMesh.empty()
    cell = np.stack(cells, axis=1)           # (C, 3)
    tri = _TRI[case[cells]]                  # (C, 16)
    slot_cell, slot = np.nonzero(tri >= 0)
    edge = tri[slot_cell, slot]              # local edge per triangle corner
    base = cell[slot_cell] + _EDGE_BASE[edge]
    axis = _EDGE_AXIS[edge]
    gid = ((base[:, 0] * r + base[:, 1]) * r + base[:, 2]) * 3 + axis
    uniq, inverse = np.unique(gid, return_inverse=True)

    # one vertex per distinct grid edge
    axis_u = uniq % 3
    lin = uniq // 3
    a = np.stack([lin // (r * r), (lin // r) % r, lin % r], axis=1)
    b = a + np.eye(3, dtype=np.int64)[axis_u]
    va = grid[a[:, 0], a[:, 1], a[:, 2]]
    vb = grid[b[:, 0], b[:, 1], b[:, 2]]
    t = va / (va - vb)
    verts = lo + (a + t[:, None] * (b - a)) * step

    faces = inverse.reshape(-1, 3)
    if _FLIP:
        faces = faces[:, ::-1]
    return TriangleMesh(verts, np.ascontiguousarray(faces))


# ------------------------------------------------------------------ upscaling


def trilinear_upscale(grid: np.ndarray, resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Resample an (R, R, R) raster to (R', R', R') by trilinear interpolation."""
    r = grid.shape[0]
    a = grid_axis(r, lo, hi)
    interp = RegularGridInterpolator((a, a, a), grid, method="linear")
    pts = raster(resolution, lo, hi).reshape(-1, 3)
    return interp(np.clip(pts, lo, hi)).reshape((resolution,) * 3)


@dataclass
class UpscaleResult:
    low: np.ndarray       # source at the low raster
    upscaled: np.ndarray  # trilinear upscale of ``low``
    direct: np.ndarray    # source at the high raster

    def meshes(self) -> tuple[TriangleMesh, TriangleMesh, TriangleMesh]:
        return marching_cubes(self.low), marching_cubes(self.upscaled), marching_cubes(self.direct)


def grid_upscale_eval(source: SdfSource, low: int, high: int) -> UpscaleResult:
    a = evaluate_grid(source, low)
    b = a.copy() if high == low else trilinear_upscale(a, high)
    c = a.copy() if high == low else evaluate_grid(source, high)
    return UpscaleResult(a, b, c)


# ------------------------------------------------------------------ sphere tracing


@dataclass
class Camera:
    eye: tuple = (0.0, 0.0, 2.5)
    target: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov_degrees: float = 45.0

    def rays(self, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel origins and unit directions, row-major from the top row."""
        eye = np.asarray(self.eye, dtype=np.float64)
        fwd = np.asarray(self.target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        half = np.tan(np.radians(self.fov_degrees) / 2.0)
        aspect = width / height
        xs = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * half * aspect
        ys = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * half
        px, py = np.meshgrid(xs, ys)
        d = fwd + px[..., None] * right + py[..., None] * up
        d = d.reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(eye, d.shape).copy(), d


@dataclass
class TraceResult:
    t: np.ndarray
    hit: np.ndarray
    steps: np.ndarray


def trace_rays(source: SdfSource, origins: np.ndarray, directions: np.ndarray, damping: float = 0.8,
               hit_eps: float = 1e-3, t_min: float = 1e-4, t_max: float = 10.0,
               max_steps: int = 200) -> TraceResult:
    """March t <- t + max(damping * s, t_min) until s < hit_eps (hit) or t > t_max
    or the step budget runs out (background)."""
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n = len(origins)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        s = np.asarray(source(origins[active] + t[active, None] * directions[active]), dtype=np.float64)
        steps[active] += 1
        done = s < hit_eps
        hit[active[done]] = True
        keep = active[~done]
        t[keep] += np.maximum(damping * s[~done], t_min)
        active = keep[t[keep] <= t_max]
    return TraceResult(t, hit, steps)


def estimate_normals(source: SdfSource, points: np.ndarray, h: float = 1e-3) -> np.ndarray:
    n = np.empty_like(points)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        n[:, k] = source(points + e) - source(points - e)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


@dataclass
class RayImage:
    width: int
    height: int
    intensity: np.ndarray  # (H, W) in [0, 1]
    hit: np.ndarray        # (H, W) bool; False marks background

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def to_rgb(self, background=(255, 255, 255), tint=(200, 210, 230)) -> np.ndarray:
        rgb = np.empty((self.height, self.width, 3), dtype=np.uint8)
        rgb[:] = background
        shade = np.clip(self.intensity, 0.0, 1.0)[..., None] * np.asarray(tint, dtype=np.float64)
        rgb[self.hit] = np.round(shade[self.hit]).astype(np.uint8)
        return rgb


def sphere_trace(source: SdfSource, camera: Camera, width: int, height: int,
                 light=(0.4, 0.6, 0.7), damping: float = 0.8, hit_eps: float = 1e-3,
                 t_min: float = 1e-4, t_max: float = 10.0, max_steps: int = 200) -> RayImage:
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    o, d = camera.rays(width, height)
    res = trace_rays(source, o, d, damping, hit_eps, t_min, t_max, max_steps)
    intensity = np.zeros(len(o))
    if res.hit.any():
        p = o[res.hit] + res.t[res.hit, None] * d[res.hit]
        normals = estimate_normals(source, p)
        l = np.asarray(light, dtype=np.float64)
        l = l / np.linalg.norm(l)
        intensity[res.hit] = np.clip(normals @ l, 0.0, 1.0)
    return RayImage(width, height, intensity.reshape(height, width), res.hit.reshape(height, width))


def write_ppm(path: str | Path, image: RayImage | np.ndarray) -> None:
    rgb = image.to_rgb() if isinstance(image, RayImage) else np.asarray(image, dtype=np.uint8)
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max value {maxval}")
    return np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3)


# ------------------------------------------------------------------ latent paths and fits


def interpolate_latents(z0, z1, count: int) -> list[np.ndarray]:
    if count < 2:
        raise ValueError("count must be at least 2")
    z0, z1 = np.asarray(z0, dtype=np.float64), np.asarray(z1, dtype=np.float64)
    ts = [i / (count - 1) for i in range(count)]
    return [(1.0 - t) * z0 + t * z1 for t in ts]


def fit_sphere(points: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Algebraic least-squares sphere; returns (center, radius, RMS radial deviation)."""
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 4:
        raise ValueError("need at least 4 points to fit a sphere")
    a = np.hstack([2.0 * p, np.ones((len(p), 1))])
    sol, *_ = np.linalg.lstsq(a, (p * p).sum(axis=1), rcond=None)
    c = sol[:3]
    r = float(np.sqrt(max(sol[3] + c @ c, 0.0)))
    rms = float(np.sqrt(np.mean((np.linalg.norm(p - c, axis=1) - r) ** 2)))
    return c, r, rms
