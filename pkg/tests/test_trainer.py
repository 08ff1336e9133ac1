import numpy as np
import pytest

from voxelsl.config import parse_run_config
from voxelsl.density_grid import DensityGrid
from voxelsl.geometry import default_camera, default_projector, ndc_frame_from_camera, ndc_to_world, pixel_ndc_xy
from voxelsl.patterns import default_pattern_set
from voxelsl.renderer import compute_background_and_contrast
from voxelsl.simulator import analytic_scene, default_near, simulate_captures
from voxelsl.trainer import (
    BETA1,
    BETA2,
    NonFiniteLoss,
    OptimizerState,
    TrainConfig,
    Trainer,
    adam_step,
    extract_depth_map,
    make_batch,
)

from conftest import tiny_rig_config


def adam_reference(x, grads, lr, eps=1e-8):
    """Textbook Adam, one voxel at a time, skipping zero gradients."""
    x = np.array(x, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    n = np.zeros(x.shape, int)
    for g in grads:
        for k in np.ndindex(x.shape):
            if g[k] == 0:
                continue
            n[k] += 1
            m[k] = BETA1 * m[k] + (1 - BETA1) * g[k]
            v[k] = BETA2 * v[k] + (1 - BETA2) * g[k] ** 2
            x[k] -= lr * (m[k] / (1 - BETA1 ** n[k])) / (np.sqrt(v[k] / (1 - BETA2 ** n[k])) + eps)
    return x


def test_adam_descends_on_quadratic():
    g = DensityGrid(np.ones((2, 2, 2), np.float32), 0.0)
    st = OptimizerState.for_grid(g)
    x0 = g.raw.copy()
    adam_step(g, 2.0 * g.raw.astype(np.float64), st, 0.1)
    assert np.all(g.raw < x0)
    # the first bias-corrected step has length lr
    np.testing.assert_allclose(x0 - g.raw, 0.1, rtol=1e-6)


def test_adam_matches_reference_and_is_sparse():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4, 5)).astype(np.float32)
    grads = []
    for _ in range(6):
        gr = rng.normal(size=x0.shape)
        gr[rng.random(x0.shape) < 0.4] = 0.0
        grads.append(gr)
    g = DensityGrid(x0.copy(), 0.0)
    st = OptimizerState.for_grid(g)
    for gr in grads:
        adam_step(g, gr, st, 0.05)
    np.testing.assert_allclose(g.raw, adam_reference(x0, grads, 0.05), atol=1e-5)
    never = np.all(np.stack(grads) == 0, axis=0)
    assert np.array_equal(g.raw[never], x0[never])
    np.testing.assert_array_equal(st.counts, np.sum(np.stack(grads) != 0, axis=0))
    with pytest.raises(ValueError):
        adam_step(g, np.zeros((2, 2, 2)), st, 0.1)


def test_samples_per_ray_is_two_per_voxel():
    for n in (16, 96, 256):
        cfg = TrainConfig(grid_dims=(n, n, n))
        assert abs(cfg.samples_per_ray - 2 * n) <= 1
    assert TrainConfig(grid_dims=(8, 8, 96), z_max=0.0).samples_per_ray == 96


def test_schedule():
    cfg = TrainConfig(phase1_iters=10, phase2_iters=30, learning_rate=1.0, lr_final=0.1)
    assert cfg.weights_at(9).lambda_s == 0.0
    assert cfg.weights_at(10).lambda_s == 1.0
    assert cfg.weights_at(0).lambda_d == 0.01
    assert cfg.lr_at(0) == 1.0
    assert cfg.lr_at(40) == pytest.approx(0.1)
    lrs = [cfg.lr_at(i) for i in range(40)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("bad", [dict(grid_dims=(1, 4, 4)), dict(rays_per_iter=0), dict(phase1_iters=0, phase2_iters=0),
                                 dict(step_size=0.0), dict(z_max=1.5)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def tiny_problem(scene="plane", **over):
    cfg = parse_run_config(tiny_rig_config(), environ={})
    cam, proj = cfg.camera_model(), cfg.projector_model()
    pats = default_pattern_set(proj.intrinsics.width, proj.intrinsics.height)
    sc = analytic_scene(scene, None, cam)
    sim = simulate_captures(sc, pats, cam, proj)
    tcfg = TrainConfig(**{**cfg.train.build().to_dict(), "near": default_near(sc), **over})
    return np.stack(sim.images), np.stack([p.image for p in pats]), cam, proj, tcfg


def test_make_batch_draws_valid_pixels_without_replacement():
    caps, _, cam, _, _ = tiny_problem()
    stats = compute_background_and_contrast(list(caps))
    b = make_batch(caps, stats, np.random.default_rng(0), 200, cam, K=7, jitter=True)
    assert len(set(zip(b.rows, b.cols))) == 200
    assert np.all(stats.valid[b.rows, b.cols])
    np.testing.assert_array_equal(b.I, caps[:, b.rows, b.cols].T)
    np.testing.assert_array_equal(b.B, stats.B[b.rows, b.cols])
    assert b.jit.shape == (200, 7) and np.all((b.jit >= 0) & (b.jit < 1))
    xs, ys = pixel_ndc_xy(b.rows, b.cols, cam)
    np.testing.assert_array_equal(b.xs, xs)
    fixed = make_batch(caps, stats, np.random.default_rng(0), 5, cam, K=3)
    assert np.all(fixed.jit == 0.5)


def test_make_batch_small_valid_set_warns():
    caps, _, cam, _, _ = tiny_problem()
    stats = compute_background_and_contrast(list(caps))
    stats.valid[:] = False
    stats.valid[3, 4] = True
    with pytest.warns(UserWarning):
        b = make_batch(caps, stats, np.random.default_rng(0), 4, cam)
    assert set(zip(b.rows, b.cols)) == {(3, 4)}
    stats.valid[:] = False
    with pytest.raises(ValueError):
        make_batch(caps, stats, np.random.default_rng(0), 4, cam)


def test_trainer_input_validation():
    caps, pats, cam, proj, cfg = tiny_problem()
    with pytest.raises(ValueError):
        Trainer(caps[:1], pats[:1], cam, proj, cfg)
    with pytest.raises(ValueError):
        Trainer(caps, pats[:3], cam, proj, cfg)
    with pytest.raises(ValueError):
        Trainer(caps[:, :10], pats, cam, proj, cfg)
    cfg.near = None
    with pytest.raises(ValueError):
        Trainer(caps, pats, cam, proj, cfg)


def test_training_reduces_loss_and_is_deterministic():
    caps, pats, cam, proj, cfg = tiny_problem()
    a = Trainer(caps, pats, cam, proj, cfg)
    first = a.step().photo
    a.run()
    assert a.history[-1][1] < first
    b = Trainer(caps, pats, cam, proj, cfg)
    b.run()
    assert np.array_equal(a.grid.raw, b.grid.raw)
    assert [r[:5] for r in a.history] == [r[:5] for r in b.history[1:]]


def test_non_finite_loss_dumps_snapshot(tmp_path):
    caps, pats, cam, proj, cfg = tiny_problem()
    tr = Trainer(caps, pats, cam, proj, cfg, snapshot_path=str(tmp_path / "snap.ckpt"))
    tr.grid.raw[:] = np.nan
    with pytest.raises(NonFiniteLoss):
        tr.step()
    assert (tmp_path / "snap.ckpt").exists()


def test_extract_depth_from_opaque_slab():
    cam = default_camera(64, 51)
    frame = ndc_frame_from_camera(cam, 500.0)
    n = 32
    raw = np.full((n, n, n), -50.0, np.float32)
    k0 = 20
    raw[:, :, k0:] = 50.0
    grid = DensityGrid(raw, 0.0)
    K = 2 * n
    dm, disp = extract_depth_map(grid, cam, frame, K, baseline=209.39)
    assert dm.valid.all()
    z_ndc = -1 + 2 * k0 / (n - 1)
    expect = -ndc_to_world(np.array([0.0, 0.0, z_ndc]), frame)[2]
    # the surface sits within one sampling step of the slab face
    step = 2.0 / K
    lo = -ndc_to_world(np.array([0.0, 0.0, z_ndc - 1.5 * step]), frame)[2]
    hi = -ndc_to_world(np.array([0.0, 0.0, z_ndc + step]), frame)[2]
    assert np.all((dm.depth > lo) & (dm.depth < hi))
    assert abs(np.median(dm.depth) - expect) < hi - lo
    np.testing.assert_allclose(disp.disp, cam.fx * 209.39 / dm.depth)


def test_extract_depth_empty_grid_is_invalid():
    cam = default_camera(32, 24)
    grid = DensityGrid(np.full((8, 8, 8), -60.0, np.float32), 0.0)
    dm, disp = extract_depth_map(grid, cam, ndc_frame_from_camera(cam, 500.0), 16)
    assert not dm.valid.any() and disp is None
