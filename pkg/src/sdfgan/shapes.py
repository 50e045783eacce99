"""Ground-truth SDF sources: analytic primitives, stored sample sets, and the SDFD file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor

UNIFORM, NEAR_SURFACE = 0, 1
SDFD_MAGIC = b"SDFD"
SDFD_VERSION = 1


# ------------------------------------------------------------------ analytic fields
# Each takes an (N, 3) Tensor and returns an (N,) Tensor, so gradients and
# surface projections come from the diff engine.


def sphere_field(radius: float, center=(0.0, 0.0, 0.0)) -> Callable[[Tensor], Tensor]:
    c = np.asarray(center, dtype=np.float64)

    def f(p: Tensor) -> Tensor:
        q = p - c
        return ad.sqrt((q * q).sum(axis=1)) - radius
    return f


def plane_field(normal=(0.0, 0.0, 1.0), offset: float = 0.0) -> Callable[[Tensor], Tensor]:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)

    def f(p: Tensor) -> Tensor:
        return (p * n).sum(axis=1) - offset
    return f


def _tmax(a: Tensor, b: Tensor) -> Tensor:
    return a + ad.relu(b - a)


def box_field(half_extents, center=(0.0, 0.0, 0.0)) -> Callable[[Tensor], Tensor]:
    b = np.asarray(half_extents, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)

    def f(p: Tensor) -> Tensor:
        q = ad.tabs(p - c) - b
        outside = ad.relu(q)
        out_len = ad.sqrt((outside * outside).sum(axis=1) + 1e-300)
        qx, qy, qz = q[:, 0], q[:, 1], q[:, 2]
        inside = -ad.relu(-_tmax(_tmax(qx, qy), qz))
        return out_len + inside
    return f


def evaluate(field_fn: Callable[[Tensor], Tensor], points: np.ndarray) -> np.ndarray:
    with ad.no_record():
        return field_fn(Tensor(np.asarray(points, dtype=np.float64))).data


# ------------------------------------------------------------------ sample sets


@dataclass
class SdfSampleSet:
    shape_id: str
    points: np.ndarray
    values: np.ndarray
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.provenance is None:
            self.provenance = np.zeros(len(self.values), dtype=np.uint8)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8)
        if not (len(self.points) == len(self.values) == len(self.provenance)):
            raise ValueError("sample set arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.values)

    def uniform(self) -> "SdfSampleSet":
        keep = self.provenance == UNIFORM
        return SdfSampleSet(self.shape_id, self.points[keep], self.values[keep], self.provenance[keep])


def write_sdfd(path: str | Path, sets: Sequence[SdfSampleSet]) -> None:
    parts = [SDFD_MAGIC, struct.pack("<II", SDFD_VERSION, len(sets))]
    for s in sets:
        raw = s.shape_id.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", len(s)))
        block = np.hstack([s.points, s.values[:, None]]).astype("<f4")
        parts.append(block.tobytes())
        parts.append(s.provenance.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_sdfd(path: str | Path) -> list[SdfSampleSet]:
    buf = Path(path).read_bytes()
    if buf[:4] != SDFD_MAGIC:
        raise ValueError(f"{path}: not an SDF dataset (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != SDFD_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    pos = 12
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        sid = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        block = np.frombuffer(buf, dtype="<f4", count=4 * n, offset=pos).reshape(n, 4).astype(np.float64)
        pos += 16 * n
        prov = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).copy()
        pos += n
        out.append(SdfSampleSet(sid, block[:, :3], block[:, 3], prov))
    return out


# ------------------------------------------------------------------ shape records


class ShapeRecord:
    """A training shape: ground-truth SDF queries and closest-surface projection."""

    shape_id: str

    def sdf(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def project(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_uniform(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        p = rng.uniform(-1.0, 1.0, (n, 3))
        return p, self.sdf(p)


class AnalyticShape(ShapeRecord):
    def __init__(self, shape_id: str, field_fn: Callable[[Tensor], Tensor], params: dict | None = None):
        self.shape_id = shape_id
        self.field_fn = field_fn
        self.params = params or {}

    def sdf(self, points):
        return evaluate(self.field_fn, points)

    def project(self, points):
        from .generator import field_value_and_grad, project_to_surface
        s, g = field_value_and_grad(self.field_fn, np.asarray(points, dtype=np.float64))
        return project_to_surface(s, g, points)[0]


class SampledShape(ShapeRecord):
    """Shape backed by a stored sample set.

    Magnitudes come from the distance to the stored zero-valued near-surface
    samples (the surface cloud); signs from the nearest stored sample. Without
    surface samples it falls back to nearest-sample values.
    """

    def __init__(self, samples: SdfSampleSet):
        self.samples = samples
        self.shape_id = samples.shape_id
        self._all = cKDTree(samples.points)
        surf = (samples.provenance == NEAR_SURFACE) & (samples.values == 0.0)
        self._surface = samples.points[surf]
        self._surf_tree = cKDTree(self._surface) if len(self._surface) else None
        signed = samples.values != 0.0
        self._signed_pts = samples.points[signed]
        self._signed_vals = samples.values[signed]
        self._signed_tree = cKDTree(self._signed_pts) if signed.any() else self._all
        self._uniform_idx = np.nonzero(samples.provenance == UNIFORM)[0]

    def sdf(self, points):
        points = np.asarray(points, dtype=np.float64)
        if self._surf_tree is None:
            _, i = self._all.query(points)
            return self.samples.values[i]
        d, _ = self._surf_tree.query(points)
        _, j = self._signed_tree.query(points)
        sign = np.where(self._signed_vals[j] < 0, -1.0, 1.0) if len(self._signed_vals) else 1.0
        return sign * d

    def project(self, points):
        if self._surf_tree is None:
            raise ValueError(f"shape {self.shape_id!r} has no stored surface samples")
        _, i = self._surf_tree.query(np.asarray(points, dtype=np.float64))
        return self._surface[i]

    def sample_uniform(self, n, rng):
        if len(self._uniform_idx) == 0:
            return super().sample_uniform(n, rng)
        pick = self._uniform_idx[rng.integers(0, len(self._uniform_idx), n)]
        return self.samples.points[pick], self.samples.values[pick]


# ------------------------------------------------------------------ procedural datasets


def procedural_dataset(kind: str, count: int, rng: np.random.Generator,
                       radius_range=(0.3, 0.7)) -> list[AnalyticShape]:
    """Analytic spheres, boxes, or an alternating mix, centered at the origin."""
    if kind not in ("spheres", "boxes", "mixed"):
        raise ValueError(f"unknown procedural dataset kind {kind!r}")
    shapes = []
    lo, hi = radius_range
    for i in range(count):
        use_box = kind == "boxes" or (kind == "mixed" and i % 2 == 1)
        if use_box:
            half = rng.uniform(lo * 0.6, hi * 0.8, 3)
            shapes.append(AnalyticShape(f"box_{i:04d}", box_field(half), {"half_extents": half.tolist()}))
        else:
            r = float(rng.uniform(lo, hi))
            shapes.append(AnalyticShape(f"sphere_{i:04d}", sphere_field(r), {"radius": r}))
    return shapes


def load_dataset(path: str | Path) -> list[SampledShape]:
    return [SampledShape(s) for s in read_sdfd(path)]


def split_dataset(shapes: Sequence[ShapeRecord], rng: np.random.Generator,
                  fractions=(0.85, 0.05, 0.10)) -> tuple[list, list, list]:
    """Random train/validation/test split; every part gets at least one shape when possible."""
    n = len(shapes)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    order = rng.permutation(n)
    n_val = max(1, int(round(fractions[1] * n))) if n >= 3 else 0
    n_test = max(1, int(round(fractions[2] * n))) if n >= 3 else 0
    n_train = n - n_val - n_test
    train = [shapes[i] for i in order[:n_train]]
    val = [shapes[i] for i in order[n_train:n_train + n_val]]
    test = [shapes[i] for i in order[n_train + n_val:]]
    return train, val, test
