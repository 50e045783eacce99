"""Latent-conditioned SDF network, surface projection and near-surface refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Tensor

log = logging.getLogger(__name__)

Field = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 128
    hidden_dim: int = 256
    layers: int = 8
    reinjection_layer: int = 4

    def __post_init__(self):
        if not 0 < self.reinjection_layer < self.layers:
            raise ValueError("reinjection_layer must lie strictly inside the layer stack")
        if self.latent_dim < 1 or self.hidden_dim < 1 or self.layers < 2:
            raise ValueError(f"invalid generator config {self}")


@dataclass(frozen=True)
class RefinementConfig:
    delta: float = 0.1
    sigma: float = 0.01

    def __post_init__(self):
        if self.delta <= 0 or self.sigma < 0:
            raise ValueError(f"invalid refinement config {self}")


class SdfGenerator:
    """MLP g(z, p) -> signed distance.

    Hidden layers are Linear -> LayerNorm -> ReLU; [z; p] is concatenated
    again onto the input of layer ``reinjection_layer``. The output is not
    clamped. ``exact`` selects the batch-independent matmul, which makes
    batched and single-point evaluation bit-identical at some speed cost.
    """

    exact = True

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), rng: np.random.Generator | None = None,
                 params: ParameterStore | None = None):
        self.config = config
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = ParameterStore()
        d_in = config.latent_dim + 3
        width = d_in
        for i in range(config.layers):
            fan_in = width + (d_in if i == config.reinjection_layer else 0)
            fan_out = 1 if i == config.layers - 1 else config.hidden_dim
            bound = 1.0 / np.sqrt(fan_in)
            self.params.add(f"g/l{i}/w", rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.params.add(f"g/l{i}/b", rng.uniform(-bound, bound, fan_out))
            if i < config.layers - 1:
                self.params.add(f"g/l{i}/ln_gain", np.ones(fan_out))
                self.params.add(f"g/l{i}/ln_bias", np.zeros(fan_out))
            width = fan_out

    # -------------------------------------------------------------- core

    def _mlp(self, x: Tensor) -> Tensor:
        cfg, p = self.config, self.params
        h = x
        for i in range(cfg.layers):
            if i == cfg.reinjection_layer:
                h = ad.concat([h, x], axis=1)
            h = ad.matmul(h, p[f"g/l{i}/w"], exact=self.exact) + p[f"g/l{i}/b"]
            if i < cfg.layers - 1:
                h = ad.relu(ad.layer_norm(h, p[f"g/l{i}/ln_gain"], p[f"g/l{i}/ln_bias"]))
        return ad.reshape(h, (x.shape[0],))

    def _check_latent(self, z) -> None:
        if z.shape[-1] != self.config.latent_dim:
            raise ValueError(f"latent has length {z.shape[-1]}, generator expects {self.config.latent_dim}")

    def field(self, z, points) -> Tensor:
        """Differentiable g(z, P) for one latent and an (N, 3) point tensor."""
        z, points = ad.as_tensor(z), ad.as_tensor(points)
        self._check_latent(z)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {points.shape}")
        if points.shape[0] == 0:
            raise ValueError("empty point batch")
        zz = ad.gather_rows(ad.reshape(z, (1, -1)), np.zeros(points.shape[0], dtype=np.int64))
        return self._mlp(ad.concat([zz, points], axis=1))

    def field_shapes(self, latents, points) -> Tensor:
        """Differentiable batch over shapes: latents (B, d), points (B, N, 3) -> (B, N)."""
        latents, points = ad.as_tensor(latents), ad.as_tensor(points)
        self._check_latent(latents)
        b, n, _ = points.shape
        zz = ad.gather_rows(latents, np.repeat(np.arange(b), n))
        flat = ad.reshape(points, (b * n, 3))
        return ad.reshape(self._mlp(ad.concat([zz, flat], axis=1)), (b, n))

    def bind(self, z) -> Field:
        """Fix the latent; returns a differentiable field P -> g(z, P)."""
        return lambda pts: self.field(z, pts)

    # -------------------------------------------------------------- numpy API

    def forward(self, z, p) -> float:
        p = np.asarray(p, dtype=np.float64).reshape(1, 3)
        return float(self.forward_batch(z, p)[0])

    def forward_batch(self, z, points, chunk: int = 65536) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {points.shape}")
        if len(points) == 0:
            raise ValueError("empty point batch")
        z = np.asarray(z, dtype=np.float64)
        out = np.empty(len(points))
        with ad.no_record():
            for lo in range(0, len(points), chunk):
                out[lo:lo + chunk] = self.field(z, points[lo:lo + chunk]).data
        return out

    def sdf_source(self, z) -> Callable[[np.ndarray], np.ndarray]:
        return lambda pts: self.forward_batch(z, pts)


# ------------------------------------------------------------------ projection


def project_to_surface(sdf, grad, p, eps: float = 1e-12):
    """p - sdf * grad, vectorized over leading axes.

    Returns (points, degenerate) where ``degenerate`` flags gradients whose
    norm is below ``eps``; those rows are returned unchanged.
    """
    sdf = np.asarray(sdf, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    degenerate = np.linalg.norm(grad, axis=-1) < eps
    moved = p - sdf[..., None] * grad
    return np.where(degenerate[..., None], p, moved), degenerate


def field_value_and_grad(field: Field, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = Tensor(points, requires_grad=True)
    with Tape() as tape:
        s = field(pts)
    g = tape.gradient(s, pts)
    return s.data, g.data


def build_refined_point_set(field: Field, points: np.ndarray, cfg: RefinementConfig,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """P~ = P plus projected, jittered copies of points with |g| < delta.

    Returns (refined points, index into P of each added point).
    """
    points = np.asarray(points, dtype=np.float64)
    s, g = field_value_and_grad(field, points)
    idx = _near_surface(s, g, cfg)
    if idx.size == 0:
        return points.copy(), idx
    moved, _ = project_to_surface(s[idx], g[idx], points[idx])
    moved = np.clip(moved + _jitter(rng, cfg.sigma, len(idx)), -1.0, 1.0)
    return np.concatenate([points, moved]), idx


def _near_surface(s, g, cfg: RefinementConfig) -> np.ndarray:
    ok = (np.abs(s) < cfg.delta) & (np.linalg.norm(g, axis=1) >= 1e-12)
    return np.nonzero(ok)[0]


def _jitter(rng, sigma: float, n: int) -> np.ndarray:
    return rng.normal(0.0, sigma, (n, 3)) if sigma > 0 else np.zeros((n, 3))


def refine_generated_samples(field: Field, points, cfg: RefinementConfig,
                             rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """SDF values over P~ with the projection kept on the active tape.

    Must run inside a Tape when parameter gradients are wanted; the inner
    point-gradient is recorded with ``create_graph`` so the projection step
    contributes to dL/dtheta. Returns (values over P~, refined points).
    """
    tape = ad.tensor._active_tape()
    if tape is None:
        with Tape():
            return refine_generated_samples(field, points, cfg, rng)
    pts = Tensor(ad.as_tensor(points).data, requires_grad=True)
    s = field(pts)
    gp = tape.gradient(s, pts, create_graph=True)
    idx = _near_surface(s.data, gp.data, cfg)
    if idx.size == 0:
        return s, pts.data.copy()
    near = ad.gather_rows(pts, idx)
    s_near = ad.reshape(ad.gather_rows(ad.reshape(s, (-1, 1)), idx), (-1, 1))
    g_near = ad.gather_rows(gp, idx)
    moved = near - s_near * g_near + _jitter(rng, cfg.sigma, len(idx))
    moved = ad.clip(moved, -1.0, 1.0)
    s_added = field(moved)
    return ad.concat([s, s_added]), np.concatenate([pts.data, moved.data])


# ------------------------------------------------------------------ latent fitting


def fit_latent(gen: SdfGenerator, points: np.ndarray, target: np.ndarray, steps: int = 500,
               lr: float = 1e-2, z0: np.ndarray | None = None, restarts: int = 1,
               rng: np.random.Generator | None = None) -> tuple[np.ndarray, list[float]]:
    """Fit z to target SDF samples by minimizing mean absolute error.

    Adam on z only, with a cosine-decayed step so the L1 objective settles.
    The first run starts from ``z0`` (zeros by default); each extra restart
    starts from a fresh N(0, I) draw and the lowest final loss wins.
    Returns (z, loss history of the winning run).
    """
    points = np.asarray(points, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    best = None
    for r in range(max(1, restarts)):
        if r == 0:
            start = np.zeros(gen.config.latent_dim) if z0 is None else np.array(z0, dtype=np.float64)
        else:
            start = rng.standard_normal(gen.config.latent_dim)
        z, hist = _adam_latent(gen, points, target, start, steps, lr)
        if best is None or (hist and hist[-1] < best[1][-1]):
            best = (z, hist)
    return best


def _adam_latent(gen, points, target, z, steps, lr):
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    b1, b2, eps = 0.9, 0.999, 1e-8
    history = []
    for t in range(1, steps + 1):
        zt = Tensor(z, requires_grad=True)
        with Tape() as tape:
            loss = ad.tabs(gen.field(zt, points) - target).mean()
        if not np.isfinite(loss.item()):
            log.warning("latent fit diverged at step %d; keeping last finite latent", t)
            break
        history.append(loss.item())
        g = tape.gradient(loss, zt).data
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * 0.5 * (1 + np.cos(np.pi * (t - 1) / steps))
        z = z - step * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return z, history
