import numpy as np
import pytest

from sdfgan.mesh import TriangleMesh, read_ply, write_obj, write_ply, read_obj
from sdfgan.surfacing import (
    Camera,
    estimate_normals,
    fit_sphere,
    grid_upscale_eval,
    interpolate_latents,
    marching_cubes,
    read_ppm,
    sphere_trace,
    trace_rays,
    write_ppm,
)


def sphere(r, c=(0.0, 0.0, 0.0)):
    c = np.asarray(c)
    return lambda p: np.linalg.norm(p - c, axis=1) - r


def test_constant_field_gives_empty_mesh():
    assert marching_cubes(lambda p: np.ones(len(p)), 8).is_empty
    assert marching_cubes(lambda p: -np.ones(len(p)), 8).is_empty


def test_rejects_tiny_resolution():
    with pytest.raises(ValueError):
        marching_cubes(sphere(0.4), 1)


@pytest.mark.parametrize("res", [16, 32, 64])
def test_sphere_vertices_within_cell_diagonal(res):
    mesh = marching_cubes(sphere(0.4), res)
    err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.4)
    assert err.max() < 2 * np.sqrt(3) / res


@pytest.mark.parametrize("center", [(0, 0, 0), (0.13, -0.2, 0.05)])
def test_sphere_mesh_watertight(center):
    mesh = marching_cubes(sphere(0.4, center), 32)
    counts = mesh.edge_counts()
    assert counts and all(c == 2 for c in counts.values())


def test_orientation_follows_gradient():
    mesh = marching_cubes(sphere(0.4), 64)
    vol = mesh.signed_volume()
    true = 4 / 3 * np.pi * 0.4 ** 3
    assert vol > 0 and abs(vol - true) / true < 0.1
    # face normals agree with the outward radial direction
    centroids = mesh.triangles().mean(axis=1)
    dots = np.einsum("ij,ij->i", mesh.face_normals(), centroids / np.linalg.norm(centroids, axis=1, keepdims=True))
    assert np.all(dots > 0)


def test_inverted_field_flips_orientation():
    mesh = marching_cubes(lambda p: 0.4 - np.linalg.norm(p, axis=1), 32)
    assert mesh.signed_volume() < 0


def test_grid_and_callable_sources_agree():
    from sdfgan.surfacing import evaluate_grid
    grid = evaluate_grid(sphere(0.3), 20)
    a, b = marching_cubes(grid), marching_cubes(sphere(0.3), 20)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)


def test_vertex_values_bounded_by_lipschitz_times_cell():
    f = sphere(0.35, (0.1, 0.0, -0.1))
    mesh = marching_cubes(f, 24)
    assert np.abs(f(mesh.vertices)).max() < 2.0 / 23


def test_mesh_file_round_trip(tmp_path):
    mesh = marching_cubes(sphere(0.4), 12)
    write_ply(tmp_path / "m.ply", mesh)
    write_obj(tmp_path / "m.obj", mesh)
    back = read_ply(tmp_path / "m.ply")
    assert np.array_equal(back.faces, mesh.faces) and np.allclose(back.vertices, mesh.vertices, atol=1e-8)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.faces, mesh.faces)


# ------------------------------------------------------------------ upscaling


def test_upscale_same_resolution_is_identity():
    res = grid_upscale_eval(sphere(0.5), 8, 8)
    assert np.array_equal(res.low, res.upscaled) and np.array_equal(res.low, res.direct)


def test_upscale_reproduces_knots():
    res = grid_upscale_eval(sphere(0.5), 5, 9)  # 5 knots land on every other of 9 points
    assert np.array_equal(res.upscaled[::2, ::2, ::2], res.low)


def test_direct_evaluation_beats_trilinear_upscaling():
    from sdfgan.surfacing import raster
    f = sphere(0.5)
    res = grid_upscale_eval(f, 8, 128)
    truth = f(raster(128).reshape(-1, 3)).reshape((128,) * 3)
    assert np.abs(res.direct - truth).max() < np.abs(res.upscaled - truth).max()


# ------------------------------------------------------------------ sphere tracing


def test_ray_hits_sphere_front():
    r = trace_rays(sphere(0.5), np.array([[0, 0, 2.0]]), np.array([[0, 0, -1.0]]))
    assert r.hit[0]
    assert np.allclose(np.array([0, 0, 2.0]) + r.t[0] * np.array([0, 0, -1.0]), [0, 0, 0.5], atol=1e-3)


def test_ray_past_silhouette_is_background():
    r = trace_rays(sphere(0.5), np.array([[0.8, 0, 2.0]]), np.array([[0, 0, -1.0]]))
    assert not r.hit[0]


def test_exact_sdf_never_overshoots():
    f = sphere(0.5, (0.1, 0.05, 0))
    seen = []

    def recording(p):
        s = f(p)
        seen.append(s)
        return s
    cam = Camera(eye=(0.3, 0.2, 2.0))
    o, d = cam.rays(24, 24)
    trace_rays(recording, o, d, damping=1.0)
    assert min(s.min() for s in seen) >= 0.0


def test_learned_like_field_terminates():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 16))

    def bumpy(p):
        return np.linalg.norm(p, axis=1) - 0.5 + 0.3 * np.sin(p @ w).mean(axis=1)
    o, d = Camera().rays(32, 32)
    r = trace_rays(bumpy, o, d, damping=0.8, max_steps=200)
    assert r.steps.max() <= 200


def test_render_and_ppm(tmp_path):
    img = sphere_trace(sphere(0.5), Camera(), 32, 24)
    assert img.hit[12, 16] and not img.hit[0, 0]
    assert 0 < img.intensity[img.hit].max() <= 1
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n32 24\n255\n")
    assert read_ppm(tmp_path / "a.ppm").shape == (24, 32, 3)


def test_normals_on_sphere():
    p = np.array([[0.5, 0, 0], [0, -0.5, 0]])
    assert np.allclose(estimate_normals(sphere(0.5), p), [[1, 0, 0], [0, -1, 0]], atol=1e-6)


def test_zero_size_image_rejected():
    with pytest.raises(ValueError):
        sphere_trace(sphere(0.5), Camera(), 0, 10)


# ------------------------------------------------------------------ latents


def test_interpolation_endpoints_and_count():
    rng = np.random.default_rng(1)
    z0, z1 = rng.standard_normal(8), rng.standard_normal(8)
    zs = interpolate_latents(z0, z1, 5)
    assert len(zs) == 5
    assert np.array_equal(zs[0], z0) and np.array_equal(zs[-1], z1)
    assert np.array_equal(interpolate_latents(z0, z0, 3)[1], z0)
    with pytest.raises(ValueError):
        interpolate_latents(z0, z1, 1)


def test_fit_sphere_recovers_parameters():
    rng = np.random.default_rng(2)
    d = rng.standard_normal((500, 3))
    p = 0.3 * d / np.linalg.norm(d, axis=1, keepdims=True) + [0.1, 0.2, -0.1]
    c, r, rms = fit_sphere(p)
    assert np.allclose(c, [0.1, 0.2, -0.1]) and abs(r - 0.3) < 1e-12 and rms < 1e-12
