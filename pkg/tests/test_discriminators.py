import numpy as np
import pytest

from sdfgan import autodiff as ad
from sdfgan.autodiff import Tape, Tensor
from sdfgan.discriminators import (
    GrowthSchedule,
    GrowthStage,
    PointCritic,
    VoxelCritic,
    grow,
    pointnet_discriminate,
    voxel_discriminate,
)

from helpers import central_diff, rel_err


def small_voxel(rng=None, max_stage=1):
    return VoxelCritic(rng or np.random.default_rng(0), max_stage=max_stage, base_channels=2,
                       max_channels=4, dense_width=8)


def small_point(rng=None):
    return PointCritic(rng or np.random.default_rng(0), point_widths=(8, 8, 16, 16), dense_widths=(8, 4))


def test_zero_grid_zero_weights_gives_bias():
    critic = small_voxel()
    critic.params.zero_()
    critic.params["d/dense1/b"].data[...] = 0.37
    assert voxel_discriminate(critic, np.zeros((8, 8, 8)), GrowthStage(0)) == 0.37


def test_stage_zero_accepts_only_8_cubed():
    critic = small_voxel()
    voxel_discriminate(critic, np.zeros((8, 8, 8)), GrowthStage(0))
    with pytest.raises(ValueError):
        voxel_discriminate(critic, np.zeros((16, 16, 16)), GrowthStage(0))
    with pytest.raises(ValueError):
        voxel_discriminate(critic, np.zeros((8, 8, 8)), GrowthStage(1))


def test_stage_k_consumes_exact_resolution():
    critic = small_voxel(max_stage=2)
    for k in range(3):
        r = 8 * 2 ** k
        grid = np.random.default_rng(k).standard_normal((2, r, r, r))
        assert critic.score(grid, GrowthStage(k, 0.5 if k else 1.0)).shape == (2,)


def test_final_layer_linearity():
    rng = np.random.default_rng(1)
    critic = small_voxel(rng)
    critic.params["d/dense1/b"].data[...] = 0.2
    grid = rng.standard_normal((8, 8, 8))
    s1 = voxel_discriminate(critic, grid, GrowthStage(0)) - 0.2
    critic.params["d/dense1/w"].data *= 2
    s2 = voxel_discriminate(critic, grid, GrowthStage(0)) - 0.2
    assert abs(s2 - 2 * s1) < 1e-12


def test_fade_in_blends_between_paths():
    rng = np.random.default_rng(2)
    critic = small_voxel(rng)
    grid = rng.standard_normal((1, 16, 16, 16))
    with ad.no_record():
        full = critic.score(grid, GrowthStage(1, 1.0)).data
        half = critic.score(grid, GrowthStage(1, 0.5)).data
        none = critic.score(grid, GrowthStage(1, 0.0)).data
    assert not np.allclose(full, none)
    assert np.isfinite(half).all()


def test_point_permutation_invariance_bit_exact():
    rng = np.random.default_rng(3)
    critic = small_point(rng)
    P = rng.uniform(-1, 1, (300, 3))
    s = rng.standard_normal(300)
    ref = pointnet_discriminate(critic, P, s)
    for _ in range(5):
        perm = rng.permutation(300)
        assert pointnet_discriminate(critic, P[perm], s[perm]) == ref


def test_point_singleton_and_duplicates():
    rng = np.random.default_rng(4)
    critic = small_point(rng)
    P = rng.uniform(-1, 1, (40, 3))
    s = rng.standard_normal(40)
    assert pointnet_discriminate(critic, np.vstack([P, P]), np.concatenate([s, s])) == \
        pointnet_discriminate(critic, P, s)
    # N=1: max over a singleton is the per-point feature itself
    single = pointnet_discriminate(critic, P[:1], s[:1])
    with ad.no_record():
        h = np.concatenate([P[:1], s[:1, None]], axis=1)
        for i in range(4):
            h = ad.leaky_relu(Tensor(h) @ critic.params[f"d/h{i}/w"] + critic.params[f"d/h{i}/b"]).data
        for i in range(3):
            h = (Tensor(h) @ critic.params[f"d/gamma{i}/w"] + critic.params[f"d/gamma{i}/b"]).data
            if i < 2:
                h = ad.leaky_relu(Tensor(h)).data
    assert abs(single - h.item()) < 1e-12


def test_point_batch_segments_match_individual_scores():
    rng = np.random.default_rng(5)
    critic = small_point(rng)
    P1, P2 = rng.uniform(-1, 1, (30, 3)), rng.uniform(-1, 1, (50, 3))
    s1, s2 = rng.standard_normal(30), rng.standard_normal(50)
    with ad.no_record():
        both = critic.score(np.vstack([P1, P2]), np.concatenate([s1, s2]), [0, 30, 80]).data
    assert abs(both[0] - pointnet_discriminate(critic, P1, s1)) < 1e-12
    assert abs(both[1] - pointnet_discriminate(critic, P2, s2)) < 1e-12


def test_point_empty_set_rejected():
    with pytest.raises(ValueError):
        pointnet_discriminate(small_point(), np.zeros((0, 3)), np.zeros(0))


def test_default_point_architecture_widths():
    critic = PointCritic()
    assert [critic.params[f"d/h{i}/w"].shape[1] for i in range(4)] == [64, 128, 256, 512]
    assert [critic.params[f"d/gamma{i}/w"].shape[1] for i in range(3)] == [256, 128, 1]


def test_default_voxel_architecture_reaches_one_cubed():
    critic = VoxelCritic(max_stage=0)
    assert critic.params["d/block2/w"].shape[2:] == (4, 4, 4)
    assert critic.params["d/dense0/w"].shape[1] == 128
    assert critic.params["d/dense1/w"].shape == (128, 1)


def _score_sum(critic, x, kind):
    if kind == "voxel":
        return critic.score(x, GrowthStage(1, 0.7)).sum()
    return critic.score(x[:, :3], x[:, 3]).sum()


@pytest.mark.parametrize("kind", ["voxel", "point"])
def test_input_gradient_vs_finite_differences(kind):
    rng = np.random.default_rng(6)
    critic = small_voxel(rng) if kind == "voxel" else small_point(rng)
    x = rng.standard_normal((1, 16, 16, 16)) if kind == "voxel" else np.hstack(
        [rng.uniform(-1, 1, (20, 3)), rng.standard_normal((20, 1))])
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        s = _score_sum(critic, xt, kind)
    g = tape.gradient(s, xt).data

    def f(v):
        with ad.no_record():
            return _score_sum(critic, Tensor(v), kind).item()
    idx = [tuple(rng.integers(0, n) for n in x.shape) for _ in range(15)]
    fd = []
    for i in idx:
        e = np.zeros_like(x)
        e[i] = 1e-6
        fd.append((f(x + e) - f(x - e)) / 2e-6)
    assert rel_err([g[i] for i in idx], fd) < 1e-3


def test_voxel_penalty_parameter_gradient_vs_finite_differences():
    rng = np.random.default_rng(7)
    critic = small_voxel(rng, max_stage=0)
    x = rng.standard_normal((2, 8, 8, 8))

    def penalty():
        xt = Tensor(x, requires_grad=True)
        with Tape() as tape:
            s = critic.score(xt, GrowthStage(0)).sum()
            gx = tape.gradient(s, xt, create_graph=True)
            pen = ((ad.norm_rows(gx) - 1.0) ** 2).mean()
        return tape, pen

    tape, pen = penalty()
    for name in ["d/block8/w", "d/from8/w", "d/dense0/w"]:
        t = critic.params[name]
        g = tape.gradient(pen, t).data
        flat_idx = rng.choice(t.size, min(6, t.size), replace=False)
        fd = []
        for fi in flat_idx:
            i = np.unravel_index(fi, t.shape)
            old = t.data[i]
            t.data[i] = old + 1e-6
            fp = penalty()[1].item()
            t.data[i] = old - 1e-6
            fm = penalty()[1].item()
            t.data[i] = old
            fd.append((fp - fm) / 2e-6)
        assert rel_err(g.reshape(-1)[flat_idx], fd) < 1e-3, name


# ------------------------------------------------------------------ growth


def test_four_voxel_stages():
    sched = GrowthSchedule(total_steps=400)
    stages = {sched.stage_at(s).index for s in range(400)}
    assert stages == {0, 1, 2, 3}
    assert [GrowthStage(i).resolution for i in range(4)] == [8, 16, 32, 64]


def test_boundary_resets_alpha_and_doubles_resolution():
    sched = GrowthSchedule(total_steps=400)
    before = sched.stage_at(99)
    at = sched.stage_at(100)
    assert at.alpha == 0.0 and at.resolution == 2 * before.resolution
    assert sched.stage_at(125).alpha == 0.5
    assert sched.stage_at(150).alpha == 1.0


def test_final_stage_saturates():
    sched = GrowthSchedule(total_steps=400)
    stage = GrowthStage(0)
    alphas = []
    for step in range(400, 1000, 50):
        stage = grow(stage, step, sched)
        alphas.append(stage.alpha)
    assert stage.index == 3 and all(a == 1.0 for a in alphas)


def test_alpha_monotone_within_stage():
    sched = GrowthSchedule(total_steps=1000, n_stages=4)
    stage = GrowthStage(0)
    prev = stage
    for step in range(1000):
        stage = grow(stage, step, sched)
        if stage.index == prev.index:
            assert stage.alpha >= prev.alpha
        prev = stage
