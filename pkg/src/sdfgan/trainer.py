"""WGAN-GP training of the SDF generator against a voxel or point critic."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Tensor, load_arrays, save_arrays
from .discriminators import GrowthSchedule, GrowthStage, PointCritic, VoxelCritic, grow
from .generator import (
    GeneratorConfig,
    RefinementConfig,
    SdfGenerator,
    build_refined_point_set,
    refine_generated_samples,
)
from .shapes import ShapeRecord, split_dataset

log = logging.getLogger(__name__)

CSV_HEADER = ["step", "stage", "alpha", "critic_loss", "gen_loss", "gp", "wasserstein_val"]
KINDS = ("voxel", "point", "point-refined")


class NumericalError(RuntimeError):
    """A loss or parameter became non-finite."""


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs_max: int = 2000
    steps: int = 0  # total generator steps; 0 means epochs_max full epochs
    critic_steps_per_gen_step: int = 5
    batch_size: int = 16
    gp_lambda: float = 10.0
    discriminator: str = "voxel"
    n_stages: int = 4
    fade_fraction: float = 0.5
    seed: int = 0
    latent_dim: int = 128
    hidden_dim: int = 256
    layers: int = 8
    reinjection_layer: int = 4
    voxel_base_channels: int = 8
    voxel_max_channels: int = 128
    voxel_dense_width: int = 128
    point_widths: tuple = (64, 128, 256, 512)
    point_dense_widths: tuple = (256, 128)
    point_counts: tuple = (512, 1024, 2048, 4096)
    refine_delta: float = 0.1
    refine_sigma: float = 0.01
    checkpoint_every: int = 0
    val_every: int = 0  # 0 means once per epoch
    exact_matmul: int = 0  # 1 forces the batch-independent kernel during training

    def __post_init__(self):
        self.point_widths = _ints(self.point_widths)
        self.point_dense_widths = _ints(self.point_dense_widths)
        self.point_counts = _ints(self.point_counts)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be at least 1")
        if self.discriminator not in KINDS:
            raise ValueError(f"discriminator must be one of {KINDS}, got {self.discriminator!r}")
        if self.batch_size < 1 or self.critic_steps_per_gen_step < 1:
            raise ValueError("batch_size and critic_steps_per_gen_step must be positive")

    @property
    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.latent_dim, self.hidden_dim, self.layers, self.reinjection_layer)

    @property
    def refinement(self) -> RefinementConfig:
        return RefinementConfig(self.refine_delta, self.refine_sigma)

    # flat key=value text

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = val
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: _coerce(types[k], v) for k, v in values.items()})

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _coerce(typ: str, value):
    if not isinstance(value, str):
        return value
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "tuple":
        return _ints(value)
    return value


def raster_points(r: int) -> np.ndarray:
    """Raster over [-1, 1]^3 with x varying fastest, shape (r^3, 3)."""
    axis = np.linspace(-1.0, 1.0, r)
    zz, yy, xx = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


@contextmanager
def frozen(store: ParameterStore):
    """Temporarily exclude a store from gradient recording."""
    ts = store.tensors()
    for t in ts:
        t.requires_grad = False
    try:
        yield
    finally:
        for t in ts:
            t.requires_grad = True


def _segment_matrix(offsets: Sequence[int]) -> np.ndarray:
    m = np.zeros((len(offsets) - 1, offsets[-1]))
    for i, (a, b) in enumerate(zip(offsets, offsets[1:])):
        m[i, a:b] = 1.0
    return m


def gradient_penalty(grad_x: Tensor, segments: np.ndarray | None = None) -> Tensor:
    """Mean over samples of (||grad||_2 - 1)^2.

    ``grad_x`` has the batch on axis 0, or is a flat vector split by the
    rows of the 0/1 ``segments`` matrix.
    """
    if segments is None:
        norms = ad.norm_rows(grad_x)
    else:
        sq = ad.matmul(Tensor(segments), ad.reshape(grad_x * grad_x, (-1, 1)))
        norms = ad.power(ad.reshape(sq, (-1,)) + 1e-12, 0.5)
    return ad.mean((norms - 1.0) ** 2)


def critic_objective(d_fake: Tensor, d_real: Tensor, gp: Tensor, gp_lambda: float) -> Tensor:
    """E[D(fake)] - E[D(real)] + lambda * penalty."""
    return ad.mean(d_fake) - ad.mean(d_real) + gp * gp_lambda


@dataclass
class StepLosses:
    critic_loss: float = math.nan
    gen_loss: float = math.nan
    gp: float = math.nan
    d_real: float = math.nan
    d_fake: float = math.nan


@dataclass
class _Batch:
    """Critic input for a batch of shapes: real and fake values over shared layouts."""
    real: np.ndarray
    fake: np.ndarray
    points: np.ndarray | None = None        # point mode, fake layout
    real_points: np.ndarray | None = None   # point mode, real layout
    offsets: list = field(default_factory=list)
    real_offsets: list = field(default_factory=list)
    real_at_fake: np.ndarray | None = None  # ground truth on the fake layout (refined mode)


class Trainer:
    def __init__(self, config: TrainConfig, shapes: Sequence[ShapeRecord]):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.train_set, self.val_set, self.test_set = split_dataset(list(shapes), self.rng)
        if not self.train_set:
            raise ValueError("training split is empty")
        if not self.val_set:
            raise ValueError("validation split is empty (need at least 3 shapes)")
        self.gen = SdfGenerator(config.generator_config, self.rng)
        kind = config.discriminator
        if kind == "voxel":
            self.critic = VoxelCritic(self.rng, max_stage=config.n_stages - 1,
                                      base_channels=config.voxel_base_channels,
                                      max_channels=config.voxel_max_channels,
                                      dense_width=config.voxel_dense_width)
        else:
            self.critic = PointCritic(self.rng, config.point_widths, config.point_dense_widths)
        self.gen.exact = self.critic.exact = bool(config.exact_matmul)
        self.steps_per_epoch = max(1, math.ceil(len(self.train_set) / config.batch_size))
        total = config.steps or config.epochs_max * self.steps_per_epoch
        self.total_steps = total
        self.schedule = GrowthSchedule(total, config.n_stages, config.fade_fraction)
        self.stage = self.schedule.stage_at(0)
        self.step = 0
        self.wasserstein_val = math.nan
        self.best = (math.inf, -1)
        self.best_state: dict | None = None
        self._queue: list[int] = []
        self._raster_cache: dict[int, np.ndarray] = {}
        self._grid_cache: dict[tuple, np.ndarray] = {}

    # -------------------------------------------------------------- data

    def _next_shapes(self) -> list[ShapeRecord]:
        out = []
        while len(out) < self.config.batch_size:
            if not self._queue:
                self._queue = [int(i) for i in self.rng.permutation(len(self.train_set))]
            out.append(self.train_set[self._queue.pop(0)])
        return out

    def _raster(self, r: int) -> np.ndarray:
        if r not in self._raster_cache:
            self._raster_cache[r] = raster_points(r)
        return self._raster_cache[r]

    def _real_grid(self, shape: ShapeRecord, r: int) -> np.ndarray:
        key = (id(shape), r)
        if key not in self._grid_cache:
            self._grid_cache[key] = shape.sdf(self._raster(r)).reshape(r, r, r)
        return self._grid_cache[key]

    def sample_latents(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = self.rng if rng is None else rng
        return rng.standard_normal((n, self.config.latent_dim))

    def _point_count(self) -> int:
        return self.config.point_counts[self.stage.index]

    def _real_point_set(self, shape, rng):
        n = self._point_count()
        P, s = shape.sample_uniform(n, rng)
        if self.config.discriminator != "point-refined":
            return P, s
        cfg = self.config.refinement
        near = np.nonzero(np.abs(s) < cfg.delta)[0]
        if near.size == 0:
            return P, s
        added = shape.project(P[near])
        if cfg.sigma > 0:
            added = added + rng.normal(0.0, cfg.sigma, added.shape)
        added = np.clip(added, -1.0, 1.0)
        return np.concatenate([P, added]), np.concatenate([s, shape.sdf(added)])

    def _make_batch(self, shapes, latents, rng) -> _Batch:
        kind = self.config.discriminator
        if kind == "voxel":
            r = self.stage.resolution
            pts = self._raster(r)
            real = np.stack([self._real_grid(s, r) for s in shapes])
            with ad.no_record():
                fake = self.gen.field_shapes(latents, np.broadcast_to(pts, (len(shapes),) + pts.shape)).data
            return _Batch(real=real, fake=fake.reshape(real.shape))

        reals = [self._real_point_set(s, rng) for s in shapes]
        if kind == "point":
            P = np.stack([p for p, _ in reals])
            with ad.no_record():
                fake = self.gen.field_shapes(latents, P).data.reshape(-1)
            n = P.shape[1]
            offsets = [i * n for i in range(len(shapes) + 1)]
            return _Batch(real=np.concatenate([v for _, v in reals]), fake=fake,
                          points=P.reshape(-1, 3), real_points=P.reshape(-1, 3),
                          offsets=offsets, real_offsets=offsets)

        cfg = self.config.refinement
        fake_pts, fake_vals, truth = [], [], []
        for shape, z, (P, _) in zip(shapes, latents, reals):
            base = P[:self._point_count()]
            pts, _ = build_refined_point_set(self.gen.bind(z), base, cfg, rng)
            fake_pts.append(pts)
            fake_vals.append(self.gen.forward_batch(z, pts))
            truth.append(shape.sdf(pts))
        offsets = np.cumsum([0] + [len(p) for p in fake_pts]).tolist()
        real_offsets = np.cumsum([0] + [len(p) for p, _ in reals]).tolist()
        return _Batch(real=np.concatenate([v for _, v in reals]), fake=np.concatenate(fake_vals),
                      points=np.concatenate(fake_pts), real_points=np.concatenate([p for p, _ in reals]),
                      offsets=offsets, real_offsets=real_offsets, real_at_fake=np.concatenate(truth))

    # -------------------------------------------------------------- critic

    def _scores(self, values, batch: _Batch, real: bool) -> Tensor:
        if self.config.discriminator == "voxel":
            return self.critic.score(values, self.stage)
        pts = batch.real_points if real else batch.points
        offs = batch.real_offsets if real else batch.offsets
        return self.critic.score(pts, values, offs)

    def critic_losses(self, batch: _Batch, mix: np.ndarray) -> tuple[Tape, Tensor, StepLosses]:
        """Record the WGAN-GP critic loss on a fresh tape."""
        lam = self.config.gp_lambda
        if self.config.discriminator == "voxel":
            w = mix.reshape(-1, 1, 1, 1)
            interp = w * batch.real + (1.0 - w) * batch.fake
            segments = None
        else:
            truth = batch.real if batch.real_at_fake is None else batch.real_at_fake
            w = np.repeat(mix, np.diff(batch.offsets))
            interp = w * truth + (1.0 - w) * batch.fake
            segments = _segment_matrix(batch.offsets)
        with Tape() as tape:
            d_fake = self._scores(Tensor(batch.fake), batch, real=False)
            d_real = self._scores(Tensor(batch.real), batch, real=True)
            x_hat = Tensor(interp, requires_grad=True)
            d_hat = self._scores(x_hat, batch, real=False)
            grad_x = tape.gradient(ad.tsum(d_hat), x_hat, create_graph=True)
            gp = gradient_penalty(grad_x, segments)
            loss = critic_objective(d_fake, d_real, gp, lam)
        stats = StepLosses(critic_loss=loss.item(), gp=gp.item(),
                           d_real=float(d_real.data.mean()), d_fake=float(d_fake.data.mean()))
        return tape, loss, stats

    def critic_step(self) -> StepLosses:
        shapes = self._next_shapes()
        latents = self.sample_latents(len(shapes))
        batch = self._make_batch(shapes, latents, self.rng)
        mix = self.rng.uniform(0.0, 1.0, len(shapes))
        tape, loss, stats = self.critic_losses(batch, mix)
        self._check(stats.critic_loss, "critic loss")
        names = self.critic.params.names()
        grads = tape.gradient(loss, [self.critic.params[n] for n in names])
        self.critic.params.rmsprop_update({n: g.data for n, g in zip(names, grads)}, self.config.learning_rate)
        self._check_params(self.critic.params, "critic")
        return stats

    # -------------------------------------------------------------- generator

    def generator_loss(self, latents: np.ndarray, rng: np.random.Generator) -> tuple[Tape, Tensor]:
        kind = self.config.discriminator
        b = len(latents)
        with frozen(self.critic.params), Tape() as tape:
            if kind == "voxel":
                r = self.stage.resolution
                pts = self._raster(r)
                fake = self.gen.field_shapes(latents, np.broadcast_to(pts, (b,) + pts.shape))
                scores = self.critic.score(ad.reshape(fake, (b, r, r, r)), self.stage)
            elif kind == "point":
                n = self._point_count()
                P = rng.uniform(-1.0, 1.0, (b, n, 3))
                fake = self.gen.field_shapes(latents, P)
                scores = self.critic.score(P.reshape(-1, 3), ad.reshape(fake, (-1,)),
                                           [i * n for i in range(b + 1)])
            else:
                n = self._point_count()
                vals, pts = [], []
                for z in latents:
                    P = rng.uniform(-1.0, 1.0, (n, 3))
                    v, p = refine_generated_samples(self.gen.bind(z), P, self.config.refinement, rng)
                    vals.append(v)
                    pts.append(p)
                offsets = np.cumsum([0] + [len(p) for p in pts]).tolist()
                scores = self.critic.score(np.concatenate(pts), ad.concat(vals), offsets)
            loss = -ad.mean(scores)
        return tape, loss

    def generator_step(self, latents: np.ndarray | None = None, rng: np.random.Generator | None = None) -> float:
        if latents is None:
            latents = self.sample_latents(self.config.batch_size)
        tape, loss = self.generator_loss(latents, self.rng if rng is None else rng)
        self._check(loss.item(), "generator loss")
        names = self.gen.params.names()
        grads = tape.gradient(loss, [self.gen.params[n] for n in names])
        self.gen.params.rmsprop_update({n: g.data for n, g in zip(names, grads)}, self.config.learning_rate)
        self._check_params(self.gen.params, "generator")
        return loss.item()

    # -------------------------------------------------------------- loop

    def _check(self, value: float, what: str) -> None:
        if not np.isfinite(value):
            raise NumericalError(f"non-finite {what} at step {self.step} (stage {self.stage})")

    def _check_params(self, store: ParameterStore, what: str) -> None:
        if not store.all_finite():
            bad = [n for n, t in store.items() if not np.all(np.isfinite(t.data))]
            raise NumericalError(f"non-finite {what} parameters at step {self.step}: {bad[:5]}")

    def train_step(self) -> dict:
        self.stage = grow(self.stage, self.step, self.schedule)
        stats = StepLosses()
        for _ in range(self.config.critic_steps_per_gen_step):
            stats = self.critic_step()
        stats.gen_loss = self.generator_step()
        self.step += 1
        every = self.config.val_every or self.steps_per_epoch
        if self.step % every == 0 or self.step == self.total_steps:
            self.wasserstein_val = self.validation_estimate()
            # an untrained critic scores near zero, so early estimates cannot win
            warm = self.step >= self.total_steps // 4
            if warm and abs(self.wasserstein_val) < self.best[0]:
                self.best = (abs(self.wasserstein_val), self.step)
                self.best_state = {k: v.copy() for k, v in self.gen.params.state("g:").items()}
        return {
            "step": self.step, "stage": self.stage.index, "alpha": self.stage.alpha,
            "critic_loss": stats.critic_loss, "gen_loss": stats.gen_loss, "gp": stats.gp,
            "wasserstein_val": self.wasserstein_val,
        }

    def validation_estimate(self) -> float:
        """E[D(fake)] - E[D(real)] over the validation split with a fixed draw."""
        rng = np.random.default_rng([self.config.seed, 7919])
        shapes = self.val_set
        latents = self.sample_latents(len(shapes), rng)
        batch = self._make_batch(shapes, latents, rng)
        with ad.no_record():
            d_fake = self._scores(Tensor(batch.fake), batch, real=False).data
            d_real = self._scores(Tensor(batch.real), batch, real=True).data
        return float(d_fake.mean() - d_real.mean())

    def train(self, out_dir: str | Path | None = None, steps: int | None = None,
              log_every: int = 50) -> list[dict]:
        """Run until ``total_steps`` (or ``steps`` more). Writes metrics.csv and
        checkpoints into ``out_dir`` when given."""
        out = Path(out_dir) if out_dir is not None else None
        writer = fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            csv_path = out / "metrics.csv"
            fresh = self.step == 0 or not csv_path.exists()
            fh = open(csv_path, "w" if fresh else "a", newline="")
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(CSV_HEADER)
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        rows = []
        try:
            while self.step < end:
                try:
                    row = self.train_step()
                except NumericalError:
                    if out is not None:
                        self.save(out / "diagnostic")
                    raise
                rows.append(row)
                if writer is not None:
                    writer.writerow([_fmt(row[k]) for k in CSV_HEADER])
                if log_every and self.step % log_every == 0:
                    log.info("step %d stage %d alpha %.2f critic %.4f gen %.4f gp %.4f wval %.4f",
                             *(row[k] for k in CSV_HEADER))
                if out is not None and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                    self.save(out / "last")
        finally:
            if fh is not None:
                fh.close()
        if out is not None:
            self.save(out / "last")
            if self.best_state is not None:
                self.save(out / "best", generator_state=self.best_state)
        return rows

    # -------------------------------------------------------------- checkpoints

    def save(self, prefix: str | Path, generator_state: dict | None = None) -> None:
        prefix = Path(prefix)
        arrays = dict(generator_state) if generator_state is not None else self.gen.params.state("g:")
        arrays.update(self.critic.params.state("d:"))
        save_arrays(prefix.with_suffix(".sgpc"), arrays)
        meta = {
            "config": self.config.to_text(),
            "step": self.step,
            "stage": [self.stage.index, self.stage.alpha],
            "wasserstein_val": self.wasserstein_val,
            "best": list(self.best),
            "queue": self._queue,
            "rng": self.rng.bit_generator.state,
        }
        prefix.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, prefix: str | Path, shapes: Sequence[ShapeRecord], steps: int | None = None) -> "Trainer":
        """Restore a run; ``steps`` replaces the saved total to extend or shorten it."""
        prefix = Path(prefix)
        meta = json.loads(prefix.with_suffix(".json").read_text())
        trainer = cls(TrainConfig.from_text(meta["config"], steps=steps), shapes)
        arrays = load_arrays(prefix.with_suffix(".sgpc"))
        trainer.gen.params.load_state(arrays, "g:")
        trainer.critic.params.load_state(arrays, "d:")
        trainer.step = meta["step"]
        trainer.stage = GrowthStage(*meta["stage"])
        trainer.wasserstein_val = meta["wasserstein_val"]
        trainer.best = tuple(meta["best"])
        trainer._queue = list(meta["queue"])
        trainer.rng.bit_generator.state = meta["rng"]
        return trainer


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_generator(prefix: str | Path) -> tuple[SdfGenerator, TrainConfig]:
    """Generator weights and config from a trainer checkpoint."""
    prefix = Path(prefix)
    json_path = prefix.with_suffix(".json")
    sgpc_path = prefix.with_suffix(".sgpc")
    if not json_path.exists() or not sgpc_path.exists():
        raise FileNotFoundError(f"checkpoint {prefix} not found")
    meta = json.loads(json_path.read_text())
    config = TrainConfig.from_text(meta["config"])
    gen = SdfGenerator(config.generator_config)
    gen.params.load_state(load_arrays(sgpc_path), "g:")
    return gen, config


def sample_latent(rng: np.random.Generator, dim: int = 128) -> np.ndarray:
    return rng.standard_normal(dim)
