"""Point-cloud metrics for generated shapes: JSD, MMD and coverage under CD / EMD."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .mesh import TriangleMesh

DEFAULT_POINTS = 2048
JSD_RESOLUTION = 28


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points distributed uniformly by area over the mesh triangles."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    su = np.sqrt(u)
    w0, w1, w2 = 1.0 - su, su * (1.0 - v), su * v
    t = mesh.triangles()[tri]
    return w0[:, None] * t[:, 0] + w1[:, None] * t[:, 1] + w2[:, None] * t[:, 2]


def _check(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point clouds must be non-empty")
    return a, b


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    a, b = _check(a, b)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da * da) + np.mean(db * db))


def emd(a: np.ndarray, b: np.ndarray, exact: bool = True, eps: float | None = None) -> float:
    """Mean Euclidean distance under the optimal bijection between equal-size clouds.

    ``exact=False`` uses the epsilon-scaling auction, whose total cost is
    within n * eps of the optimum.
    """
    a, b = _check(a, b)
    if len(a) != len(b):
        raise ValueError(f"EMD needs equal-size clouds, got {len(a)} and {len(b)}")
    cost = cdist(a, b)
    if exact:
        rows, cols = linear_sum_assignment(cost)
    else:
        rows = np.arange(len(a))
        cols = auction_assignment(cost, eps)
    return float(cost[rows, cols].mean())


def auction_assignment(cost: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Min-cost assignment by forward auction with epsilon scaling.

    Returns ``cols`` so that row i is matched to column cols[i].
    """
    n = cost.shape[0]
    benefit = -np.asarray(cost, dtype=np.float64)
    span = float(benefit.max() - benefit.min()) if n else 0.0
    final = eps if eps is not None else max(span, 1e-12) / (10.0 * (n + 1))
    price = np.zeros(n)
    cur = max(span / 4.0, final)
    while True:
        owner = np.full(n, -1)
        assigned = np.full(n, -1)
        free = list(range(n))
        while free:
            i = free.pop()
            values = benefit[i] - price
            if n == 1:
                j, gain = 0, cur
            else:
                top2 = np.argpartition(-values, 1)[:2]
                j, k = (top2 if values[top2[0]] >= values[top2[1]] else top2[::-1])
                gain = values[j] - values[k] + cur
            price[j] += gain
            if owner[j] >= 0:
                assigned[owner[j]] = -1
                free.append(owner[j])
            owner[j] = i
            assigned[i] = j
        if cur <= final:
            return assigned
        cur = max(cur / 4.0, final)


def _histogram(clouds: Sequence[np.ndarray], resolution: int) -> np.ndarray:
    pts = np.concatenate([np.asarray(c, dtype=np.float64).reshape(-1, 3) for c in clouds])
    idx = np.clip(((pts + 1.0) / 2.0 * resolution).astype(np.int64), 0, resolution - 1)
    flat = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    return np.bincount(flat, minlength=resolution ** 3).astype(np.float64)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def jsd_distributions(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64) / np.sum(p)
    q = np.asarray(q, dtype=np.float64) / np.sum(q)
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def jsd(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
        resolution: int = JSD_RESOLUTION) -> float:
    """Jensen-Shannon divergence (natural log) of pooled occupancy histograms over [-1, 1]^3."""
    if len(generated) == 0 or len(reference) == 0:
        raise ValueError("both cloud sets must be non-empty")
    return jsd_distributions(_histogram(generated, resolution), _histogram(reference, resolution))


def distance_matrix(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
                    distance: str = "cd", exact: bool = True) -> np.ndarray:
    """(|reference|, |generated|) pairwise cloud distances."""
    if distance == "cd":
        fn = chamfer
    elif distance == "emd":
        def fn(a, b):
            return emd(a, b, exact=exact)
    else:
        raise ValueError(f"unknown distance {distance!r}; expected 'cd' or 'emd'")
    return np.array([[fn(g, r) for g in generated] for r in reference])


def mmd_cov_from_matrix(d: np.ndarray) -> tuple[float, float]:
    if d.size == 0:
        raise ValueError("both cloud sets must be non-empty")
    mmd = float(d.min(axis=1).mean())
    covered = np.unique(d.argmin(axis=0))
    return mmd, 100.0 * len(covered) / d.shape[0]


def mmd_cov(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
            distance: str = "cd", exact: bool = True) -> tuple[float, float]:
    """MMD: mean over references of the distance to the closest generated cloud.
    COV: percent of references that are the nearest neighbour of some generated cloud."""
    if len(generated) == 0 or len(reference) == 0:
        raise ValueError("both cloud sets must be non-empty")
    return mmd_cov_from_matrix(distance_matrix(generated, reference, distance, exact))


@dataclass
class MetricReport:
    jsd: float
    mmd_cd: float
    mmd_emd: float
    cov_cd: float
    cov_emd: float

    COLUMNS = ("JSD", "MMD-CD", "MMD-EMD", "COV-CD", "COV-EMD")

    def values(self) -> list[float]:
        return [self.jsd, self.mmd_cd, self.mmd_emd, self.cov_cd, self.cov_emd]

    def to_csv(self, label: str = "model") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("name",) + self.COLUMNS)
        w.writerow([label] + [repr(v) for v in self.values()])
        return buf.getvalue()

    def to_text(self, label: str = "model") -> str:
        width = max(len(label), 5)
        head = f"{'':<{width}}  " + "  ".join(f"{c:>9}" for c in self.COLUMNS)
        row = f"{label:<{width}}  " + "  ".join(f"{v:>9.4f}" for v in self.values())
        return head + "\n" + row + "\n"

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_clouds(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
                    jsd_resolution: int = JSD_RESOLUTION, exact_emd: bool = True) -> MetricReport:
    j = jsd(generated, reference, jsd_resolution)
    mmd_cd, cov_cd = mmd_cov(generated, reference, "cd")
    mmd_emd, cov_emd = mmd_cov(generated, reference, "emd", exact_emd)
    report = MetricReport(j, mmd_cd, mmd_emd, cov_cd, cov_emd)
    if not all(math.isfinite(v) for v in report.values()):
        raise FloatingPointError("non-finite metric value")
    return report
