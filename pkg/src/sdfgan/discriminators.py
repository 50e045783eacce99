"""Critics over generated SDFs: a progressive 3D CNN on voxel rasters and a
shared-MLP/max-pool network on (x, y, z, sdf) tuples.

Neither critic uses normalization layers or weight clipping; the Lipschitz
constraint comes only from the gradient penalty in the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

VOXEL_RESOLUTIONS = (8, 16, 32, 64)
POINT_COUNTS = (512, 1024, 2048, 4096)


@dataclass(frozen=True)
class GrowthStage:
    index: int = 0
    alpha: float = 1.0

    def __post_init__(self):
        if not 0 <= self.index < len(VOXEL_RESOLUTIONS):
            raise ValueError(f"stage index {self.index} outside 0..{len(VOXEL_RESOLUTIONS) - 1}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"blend weight {self.alpha} outside [0, 1]")

    @property
    def resolution(self) -> int:
        return VOXEL_RESOLUTIONS[self.index]

    @property
    def point_count(self) -> int:
        return POINT_COUNTS[self.index]


@dataclass(frozen=True)
class GrowthSchedule:
    """Equal-length stages; the first ``fade_fraction`` of every stage after
    the first blends the new block in linearly."""

    total_steps: int
    n_stages: int = 4
    fade_fraction: float = 0.5

    def __post_init__(self):
        if self.total_steps < 1 or not 1 <= self.n_stages <= len(VOXEL_RESOLUTIONS):
            raise ValueError(f"invalid growth schedule {self}")

    @property
    def stage_length(self) -> int:
        return max(1, -(-self.total_steps // self.n_stages))

    def boundaries(self) -> list[int]:
        return [i * self.stage_length for i in range(1, self.n_stages)]

    def stage_at(self, step: int) -> GrowthStage:
        index = min(step // self.stage_length, self.n_stages - 1)
        if index == 0:
            return GrowthStage(0, 1.0)
        into = step - index * self.stage_length
        fade = self.fade_fraction * self.stage_length
        alpha = 1.0 if fade <= 0 else min(1.0, into / fade)
        return GrowthStage(index, alpha)


def grow(stage: GrowthStage, step: int, schedule: GrowthSchedule) -> GrowthStage:
    """Stage for ``step``; never moves backwards relative to ``stage``."""
    nxt = schedule.stage_at(step)
    if (nxt.index, nxt.alpha) < (stage.index, stage.alpha):
        return stage
    return nxt


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _avg_pool2(x: Tensor) -> Tensor:
    b, c, d, h, w = x.shape
    y = ad.reshape(x, (b, c, d // 2, 2, h // 2, 2, w // 2, 2))
    return ad.mean(y, axis=(3, 5, 7))


class VoxelCritic:
    """Stride-2, kernel-4 convolutions from the stage resolution down to 1^3,
    then dense layers (dense_width, 1).

    ``base_channels``/``max_channels`` set the width: a block reading an r^3
    volume has min(max_channels, base_channels * 64 // r) input channels.
    """

    def __init__(self, rng: np.random.Generator | None = None, max_stage: int = 3,
                 base_channels: int = 8, max_channels: int = 128, dense_width: int = 128,
                 slope: float = 0.2):
        rng = np.random.default_rng(0) if rng is None else rng
        self.max_stage = max_stage
        self.slope = slope
        self.base_channels = base_channels
        self.max_channels = max_channels
        self.params = ParameterStore()
        top = VOXEL_RESOLUTIONS[max_stage]
        for r in VOXEL_RESOLUTIONS[:max_stage + 1]:
            c = self.channels(r)
            self.params.add(f"d/from{r}/w", _uniform(rng, 1, (c, 1, 1, 1, 1)))
            self.params.add(f"d/from{r}/b", np.zeros(c))
        r = top
        while r >= 2:
            cin, cout = self.channels(r), self.channels(r // 2)
            fan = cin * 64
            self.params.add(f"d/block{r}/w", _uniform(rng, fan, (cout, cin, 4, 4, 4)))
            self.params.add(f"d/block{r}/b", np.zeros(cout))
            r //= 2
        c1 = self.channels(1)
        self.params.add("d/dense0/w", _uniform(rng, c1, (c1, dense_width)))
        self.params.add("d/dense0/b", np.zeros(dense_width))
        self.params.add("d/dense1/w", _uniform(rng, dense_width, (dense_width, 1)))
        self.params.add("d/dense1/b", np.zeros(1))

    def channels(self, r: int) -> int:
        return min(self.max_channels, self.base_channels * 64 // r)

    def _act(self, x):
        return ad.leaky_relu(x, self.slope)

    def _block(self, r: int, h: Tensor) -> Tensor:
        p = self.params
        h = ad.conv3d(h, p[f"d/block{r}/w"], stride=2, pad=1)
        return self._act(h + ad.reshape(p[f"d/block{r}/b"], (1, -1, 1, 1, 1)))

    def _from(self, r: int, x: Tensor) -> Tensor:
        p = self.params
        h = ad.conv3d(x, p[f"d/from{r}/w"])
        return self._act(h + ad.reshape(p[f"d/from{r}/b"], (1, -1, 1, 1, 1)))

    def score(self, grids, stage: GrowthStage) -> Tensor:
        """grids: (B, R, R, R) raster values -> (B,) critic scores."""
        grids = ad.as_tensor(grids)
        if stage.index > self.max_stage:
            raise ValueError(f"critic built for stages <= {self.max_stage}, got stage {stage.index}")
        r = stage.resolution
        if grids.ndim != 4 or grids.shape[1:] != (r, r, r):
            raise ValueError(f"stage {stage.index} expects {r}^3 grids, got shape {grids.shape}")
        b = grids.shape[0]
        x = ad.reshape(grids, (b, 1, r, r, r))
        h = self._block(r, self._from(r, x))
        if stage.index > 0 and stage.alpha < 1.0:
            old = self._from(r // 2, _avg_pool2(x))
            h = h * stage.alpha + old * (1.0 - stage.alpha)
        r //= 2
        while r >= 2:
            h = self._block(r, h)
            r //= 2
        p = self.params
        h = ad.reshape(h, (b, -1))
        h = self._act(h @ p["d/dense0/w"] + p["d/dense0/b"])
        out = h @ p["d/dense1/w"] + p["d/dense1/b"]
        return ad.reshape(out, (b,))


class PointCritic:
    """Shared per-point MLP on (x, y, z, s), channel-wise max over each
    shape's points, then dense layers ending in a scalar."""

    exact = True

    def __init__(self, rng: np.random.Generator | None = None,
                 point_widths: Sequence[int] = (64, 128, 256, 512),
                 dense_widths: Sequence[int] = (256, 128), slope: float = 0.2):
        rng = np.random.default_rng(0) if rng is None else rng
        self.slope = slope
        self.point_widths = tuple(point_widths)
        self.dense_widths = tuple(dense_widths)
        self.params = ParameterStore()
        width = 4
        for i, w in enumerate(self.point_widths):
            self.params.add(f"d/h{i}/w", _uniform(rng, width, (width, w)))
            self.params.add(f"d/h{i}/b", np.zeros(w))
            width = w
        for i, w in enumerate(self.dense_widths + (1,)):
            self.params.add(f"d/gamma{i}/w", _uniform(rng, width, (width, w)))
            self.params.add(f"d/gamma{i}/b", np.zeros(w))
            width = w

    def score(self, points, values, offsets: Sequence[int] | None = None) -> Tensor:
        """points (N, 3), values (N,), segment offsets per shape -> (B,) scores.

        With ``exact`` set, per-point layers use the batch-independent matmul,
        so the score is bit-identical under any permutation of a shape's points.
        """
        points, values = ad.as_tensor(points), ad.as_tensor(values)
        n = points.shape[0]
        if n == 0:
            raise ValueError("point critic needs at least one point")
        if values.shape != (n,):
            raise ValueError(f"expected {n} sdf values, got shape {values.shape}")
        offsets = [0, n] if offsets is None else list(offsets)
        p = self.params
        h = ad.concat([points, ad.reshape(values, (n, 1))], axis=1)
        for i in range(len(self.point_widths)):
            h = ad.leaky_relu(ad.matmul(h, p[f"d/h{i}/w"], exact=self.exact) + p[f"d/h{i}/b"], self.slope)
        h = ad.segment_max(h, offsets)
        last = len(self.dense_widths)
        for i in range(last + 1):
            h = h @ p[f"d/gamma{i}/w"] + p[f"d/gamma{i}/b"]
            if i < last:
                h = ad.leaky_relu(h, self.slope)
        return ad.reshape(h, (len(offsets) - 1,))


def voxel_discriminate(critic: VoxelCritic, grid: np.ndarray, stage: GrowthStage) -> float:
    with ad.no_record():
        return float(critic.score(np.asarray(grid)[None], stage).data[0])


def pointnet_discriminate(critic: PointCritic, points: np.ndarray, values: np.ndarray) -> float:
    with ad.no_record():
        return float(critic.score(points, values).data[0])
