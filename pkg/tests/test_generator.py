import math

import numpy as np
import pytest

from sdfgan import autodiff as ad
from sdfgan.autodiff import Tape, Tensor
from sdfgan.generator import (
    GeneratorConfig,
    RefinementConfig,
    SdfGenerator,
    build_refined_point_set,
    fit_latent,
    project_to_surface,
    refine_generated_samples,
)
from sdfgan.shapes import plane_field, sphere_field

from helpers import central_diff, rel_err

SMALL = GeneratorConfig(latent_dim=6, hidden_dim=12, layers=8, reinjection_layer=4)
TOY = GeneratorConfig(latent_dim=2, hidden_dim=5, layers=2, reinjection_layer=1)


def naive_forward(gen, z, p):
    """Plain-loop re-implementation of the generator, independent of the engine."""
    cfg = gen.config
    P = {k: t.data for k, t in gen.params.items()}
    x = list(z) + list(p)
    h = list(x)
    for i in range(cfg.layers):
        if i == cfg.reinjection_layer:
            h = h + x
        w, b = P[f"g/l{i}/w"], P[f"g/l{i}/b"]
        out = []
        for j in range(w.shape[1]):
            acc = b[j]
            for k in range(w.shape[0]):
                acc += h[k] * w[k, j]
            out.append(acc)
        if i < cfg.layers - 1:
            mu = sum(out) / len(out)
            var = sum((o - mu) ** 2 for o in out) / len(out)
            gain, bias = P[f"g/l{i}/ln_gain"], P[f"g/l{i}/ln_bias"]
            out = [max(0.0, (o - mu) / math.sqrt(var + 1e-5) * gain[j] + bias[j]) for j, o in enumerate(out)]
        h = out
    return h[0]


def test_zero_parameters_give_zero():
    gen = SdfGenerator(SMALL)
    gen.params.zero_()
    rng = np.random.default_rng(0)
    assert gen.forward(rng.standard_normal(6), rng.uniform(-1, 1, 3)) == 0.0


def test_matches_plain_loop_oracle():
    rng = np.random.default_rng(1)
    gen = SdfGenerator(SMALL, rng)
    for _ in range(5):
        z, p = rng.standard_normal(6), rng.uniform(-1, 1, 3)
        assert abs(gen.forward(z, p) - naive_forward(gen, z, p)) < 1e-12


def test_point_gradient_vs_finite_differences():
    rng = np.random.default_rng(2)
    gen = SdfGenerator(SMALL, rng)
    z = rng.standard_normal(6)
    for _ in range(5):
        p = rng.uniform(-1, 1, 3)
        pt = Tensor(p[None], requires_grad=True)
        with Tape() as tape:
            s = gen.field(z, pt).sum()
        g = tape.gradient(s, pt).data[0]
        fd = central_diff(lambda q: gen.forward(z, q), p)
        assert rel_err(g, fd) < 1e-4


def test_batch_matches_scalar_bit_exactly():
    rng = np.random.default_rng(3)
    gen = SdfGenerator(SMALL, rng)
    z = rng.standard_normal(6)
    P = rng.uniform(-1, 1, (257, 3))
    batch = gen.forward_batch(z, P)
    for i in range(len(P)):
        assert batch[i].tobytes() == np.float64(gen.forward(z, P[i])).tobytes()
    assert gen.forward_batch(z, P[:1])[0] == gen.forward(z, P[0])


def test_permuting_points_permutes_outputs():
    rng = np.random.default_rng(4)
    gen = SdfGenerator(SMALL, rng)
    z = rng.standard_normal(6)
    P = rng.uniform(-1, 1, (100, 3))
    perm = rng.permutation(100)
    assert np.array_equal(gen.forward_batch(z, P)[perm], gen.forward_batch(z, P[perm]))


def test_full_raster_batch_size():
    gen = SdfGenerator(GeneratorConfig(latent_dim=4, hidden_dim=8))
    axis = np.linspace(-1, 1, 64)
    P = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    assert gen.forward_batch(np.zeros(4), P).shape == (262144,)


def test_shape_batch_equals_per_shape():
    rng = np.random.default_rng(5)
    gen = SdfGenerator(SMALL, rng)
    Z = rng.standard_normal((3, 6))
    P = rng.uniform(-1, 1, (3, 20, 3))
    with ad.no_record():
        out = gen.field_shapes(Z, P).data
    for b in range(3):
        assert np.array_equal(out[b], gen.forward_batch(Z[b], P[b]))


def test_input_validation():
    gen = SdfGenerator(SMALL)
    with pytest.raises(ValueError, match="latent"):
        gen.forward(np.zeros(5), np.zeros(3))
    with pytest.raises(ValueError, match="empty"):
        gen.forward_batch(np.zeros(6), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        GeneratorConfig(layers=4, reinjection_layer=4)


def test_default_architecture():
    gen = SdfGenerator()
    assert gen.params["g/l0/w"].shape == (131, 256)
    assert gen.params["g/l4/w"].shape == (256 + 131, 256)
    assert gen.params["g/l7/w"].shape == (256, 1)
    bound = 1 / np.sqrt(131)
    assert np.abs(gen.params["g/l0/w"].data).max() <= bound


# ------------------------------------------------------------------ projection


@pytest.mark.parametrize("sdf,grad,p,expected", [
    (0.5, (1, 0, 0), (1, 0, 0), (0.5, 0, 0)),
    (-0.3, (1, 0, 0), (0.2, 0, 0), (0.5, 0, 0)),
    (1.7, (0, 0, 1), (0.3, -0.2, 1.7), (0.3, -0.2, 0.0)),
])
def test_projection_examples(sdf, grad, p, expected):
    out, degenerate = project_to_surface(np.array([sdf]), np.array([grad], float), np.array([p], float))
    assert np.allclose(out[0], expected, atol=1e-15) and not degenerate[0]


def test_projection_flags_degenerate_gradient():
    out, degenerate = project_to_surface(np.array([0.2]), np.zeros((1, 3)), np.ones((1, 3)))
    assert degenerate[0] and np.array_equal(out[0], np.ones(3))


# ------------------------------------------------------------------ refinement


def test_no_near_points_leaves_set_unchanged():
    rng = np.random.default_rng(6)
    P = rng.uniform(-1, 1, (50, 3))
    out, idx = build_refined_point_set(plane_field(offset=5.0), P, RefinementConfig(0.1, 0.01), rng)
    assert np.array_equal(out, P) and idx.size == 0


def test_refined_points_on_sphere_without_jitter():
    rng = np.random.default_rng(7)
    P = rng.uniform(-1, 1, (2000, 3))
    out, idx = build_refined_point_set(sphere_field(0.5), P, RefinementConfig(0.1, 0.0), rng)
    added = out[len(P):]
    assert len(added) == len(idx) > 0
    assert np.max(np.abs(np.linalg.norm(added, axis=1) - 0.5)) < 1e-9


def test_jittered_points_stay_near_sphere():
    rng = np.random.default_rng(8)
    P = rng.uniform(-1, 1, (1000, 3))
    out, _ = build_refined_point_set(sphere_field(0.5), P, RefinementConfig(0.1, 0.05), rng)
    added = out[len(P):]
    assert np.max(np.abs(np.linalg.norm(added, axis=1) - 0.5)) < 0.25


def test_refined_set_size_bounds():
    rng = np.random.default_rng(9)
    for _ in range(20):
        P = rng.uniform(-1, 1, (int(rng.integers(1, 200)), 3))
        out, _ = build_refined_point_set(sphere_field(rng.uniform(0.2, 0.8)), P, RefinementConfig(0.1, 0.01), rng)
        assert len(P) <= len(out) <= 2 * len(P)
        assert np.array_equal(out[:len(P)], P)


def test_refined_points_clamped_to_cube():
    rng = np.random.default_rng(10)
    P = rng.uniform(0.9, 1.0, (200, 3))
    out, _ = build_refined_point_set(sphere_field(1.6), P, RefinementConfig(0.1, 0.0), rng)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_refine_generated_samples_without_near_points_matches_batch():
    rng = np.random.default_rng(11)
    gen = SdfGenerator(SMALL, rng)
    z = rng.standard_normal(6)
    P = rng.uniform(-1, 1, (30, 3))
    vals, pts = refine_generated_samples(gen.bind(z), P, RefinementConfig(delta=1e-300, sigma=0.0), rng)
    assert np.array_equal(vals.data, gen.forward_batch(z, P))
    assert len(pts) == len(P)


def _toy_refined_loss(gen, z, P):
    rng = np.random.default_rng(0)
    with Tape() as tape:
        vals, pts = refine_generated_samples(gen.bind(z), P, RefinementConfig(delta=10.0, sigma=0.0), rng)
        loss = (vals * vals).sum()
    return tape, loss, vals, pts


def test_refinement_parameter_gradient_vs_finite_differences():
    rng = np.random.default_rng(12)
    gen = SdfGenerator(TOY, rng)
    z = rng.standard_normal(2)
    P = rng.uniform(-0.5, 0.5, (6, 3))
    tape, loss, vals, pts = _toy_refined_loss(gen, z, P)
    assert len(vals) == len(pts) == 12
    names = gen.params.names()
    grads = tape.gradient(loss, [gen.params[n] for n in names])
    for name, g in zip(names, grads):
        t = gen.params[name]
        base = t.data.copy()

        def f(v):
            t.data[...] = v
            return _toy_refined_loss(gen, z, P)[1].item()
        fd = central_diff(f, base)
        t.data[...] = base
        assert rel_err(g.data, fd) < 1e-3, name


# ------------------------------------------------------------------ latent fitting


def test_fit_latent_at_optimum_is_stationary():
    rng = np.random.default_rng(13)
    gen = SdfGenerator(SMALL, rng)
    z_star = rng.standard_normal(6)
    P = rng.uniform(-1, 1, (64, 3))
    target = gen.forward_batch(z_star, P)
    z, hist = fit_latent(gen, P, target, steps=5, z0=z_star)
    assert np.array_equal(z, z_star)
    assert all(h == hist[0] == 0.0 for h in hist)


def test_fit_latent_descends():
    rng = np.random.default_rng(14)
    gen = SdfGenerator(SMALL, rng)
    P = rng.uniform(-1, 1, (256, 3))
    target = np.linalg.norm(P, axis=1) - 0.5
    _, hist = fit_latent(gen, P, target, steps=200, lr=1e-2)
    assert hist[-1] < hist[0]


def test_fit_latent_recovers_self_generated_target():
    # Random-init networks are rugged in z, so the fit uses restarts.
    cfg = GeneratorConfig(latent_dim=3, hidden_dim=16, layers=8, reinjection_layer=4)
    rng = np.random.default_rng(15)
    gen = SdfGenerator(cfg, rng)
    z_star = rng.standard_normal(3)
    P = rng.uniform(-1, 1, (256, 3))
    target = gen.forward_batch(z_star, P)
    z, hist = fit_latent(gen, P, target, steps=300, lr=5e-2, restarts=4, rng=rng)
    assert hist[-1] < 1e-3
    assert np.abs(gen.forward_batch(z, P) - target).mean() < 1e-3
