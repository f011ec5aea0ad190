"""Top-level acceptance suite: one test per contract criterion.

Criteria 1-7 are exact property checks; criterion 8 trains three small
models on the synthetic corpus and asserts directional orderings (context
helps late frames, the epipolar mask helps, far context is not much worse
than near context); criterion 9 checks byte-level reproducibility of the
experiment pipeline.
"""

import math
import time

import numpy as np
import pytest

from contextvid import harness
from contextvid.autodiff import Tensor
from contextvid.diffusion import (
    ContextDiffusionModel,
    Denoiser,
    TrainConfig,
    build_schedule,
    ddim_sample,
    forward_noising,
    log_frame_weights,
    loss_log_weighted,
    train,
)
from contextvid.encoder import ContextEncoder
from contextvid.experiment import ExperimentConfig, run_experiment
from contextvid.geometry import (
    CameraPose,
    Intrinsics,
    default_epipolar_threshold,
    epipolar_line,
    epipolar_mask,
    fundamental_matrix,
    point_line_distance,
    project_points,
)
from contextvid.metrics import (
    TrajectoryPair,
    cam_mc,
    mse_per_frame,
    rot_err,
    ssim_per_frame,
    trans_err,
)
from contextvid.nn import PatchCodec, epi_cross_attention, grad_check

from conftest import TINY_DEN, TINY_ENC, build_tiny_model, make_clip_sample, unzero_residuals


def random_rig(rng):
    """A two-view rig with guaranteed baseline and shared-view geometry."""
    K = Intrinsics(fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32)
    a = harness.look_at(rng.uniform(-0.5, 0.5, 3) * [1, 0.5, 1],
                        [0.0, 0.0, 3.0])
    b = harness.look_at(rng.uniform(-0.5, 0.5, 3) * [1, 0.5, 1] + [0.8, 0.0, 0.0],
                        [0.2, 0.0, 3.0])
    return K, a, b


def test_criterion_1_epipolar_oracles():
    start = time.time()
    rng = np.random.default_rng(0)

    # |x'^T F x| < 1e-6 for projected world points, F at unit Frobenius norm
    for _ in range(100):
        K, pa, pb = random_rig(rng)
        F = fundamental_matrix(pa, K, pb, K)
        F = F / np.linalg.norm(F)
        pts = rng.uniform(-1.5, 1.5, size=(50, 3)) + [0, 0, 3.0]
        uv_a, za = project_points(pts, pa, K)
        uv_b, zb = project_points(pts, pb, K)
        xa = np.column_stack([uv_a, np.ones(50)])
        xb = np.column_stack([uv_b, np.ones(50)])
        residual = np.abs(np.einsum("ni,ij,nj->n", xb, F, xa))
        assert residual.max() < 1e-6

    # mask includes every true correspondence at the default threshold
    h = w = 16
    K16 = Intrinsics(fx=20.0, fy=20.0, cx=8.0, cy=8.0, width=16, height=16)
    delta = default_epipolar_threshold(h, w)
    for seed in range(5):
        rng2 = np.random.default_rng(seed)
        _, pa, pb = random_rig(rng2)
        pts = rng2.uniform(-1.5, 1.5, size=(50, 3)) + [0, 0, 3.0]
        uv_a, za = project_points(pts, pa, K16)
        uv_b, zb = project_points(pts, pb, K16)
        mask = epipolar_mask([pa], [pb], K16, h, w, delta=delta).dense()
        pix_a = np.rint(uv_a).astype(int)
        pix_b = np.rint(uv_b).astype(int)
        inside = ((za > 0) & (zb > 0)
                  & (pix_a >= 0).all(1) & (pix_a < 16).all(1)
                  & (pix_b >= 0).all(1) & (pix_b < 16).all(1))
        for a, b in zip(pix_a[inside], pix_b[inside]):
            assert mask[a[1] * w + a[0], b[1] * w + b[0]]

    # exact equality with brute-force per-pair thresholding on 16x16 grids
    for seed in range(3):
        rng3 = np.random.default_rng(100 + seed)
        _, pa, pb = random_rig(rng3)
        F = fundamental_matrix(pa, K16, pb, K16)
        got = epipolar_mask([pa], [pb], K16, h, w, delta=delta).dense()
        want = np.zeros((h * w, h * w), dtype=bool)
        for qv in range(h):
            for qu in range(w):
                line = epipolar_line(F, (qu, qv))
                for cv in range(h):
                    for cu in range(w):
                        want[qv * w + qu, cv * w + cu] = (
                            point_line_distance(line, (cu, cv)) <= delta)
        empty = ~want.any(axis=1)
        want[empty, :] = True
        assert np.array_equal(got, want)

    assert time.time() - start < 10.0


def test_criterion_2_masked_attention_exclusion():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((12, 8))
    k = rng.standard_normal((20, 8))
    v = rng.standard_normal((20, 8))
    mask = rng.random((12, 20)) < 0.3
    mask[:, 0] = True

    base = epi_cross_attention(q, k, v, mask).data
    hidden = ~mask.any(axis=0)
    assert hidden.any()
    k2, v2 = k.copy(), v.copy()
    k2[hidden] = rng.standard_normal((hidden.sum(), 8)) * 100
    v2[hidden] = rng.standard_normal((hidden.sum(), 8)) * 100
    assert np.array_equal(base, epi_cross_attention(q, k2, v2, mask).data)

    ones = np.ones((12, 20), dtype=bool)
    unmasked = epi_cross_attention(q, k, v, None).data
    assert np.abs(epi_cross_attention(q, k, v, ones).data - unmasked).max() < 1e-12


def test_criterion_3_gradient_suite():
    start = time.time()
    rng = np.random.default_rng(2)
    model = build_tiny_model(0)
    unzero_residuals(model, seed=50)
    sample = make_clip_sample(0)
    sub = 2  # coordinates checked per parameter

    # attention primitive
    mask = rng.random((4, 6)) > 0.5
    mask[:, 0] = True
    attn_params = {"q": Tensor(rng.standard_normal((4, 4)), requires_grad=True),
                   "k": Tensor(rng.standard_normal((6, 4)), requires_grad=True),
                   "v": Tensor(rng.standard_normal((6, 4)), requires_grad=True)}
    err = grad_check(lambda ps: (epi_cross_attention(
        ps["q"], ps["k"], ps["v"], mask) ** 2).sum(), attn_params)
    assert err < 1e-4

    # query transformer (inside the semantic stream), semantic stream
    sem = model.encoder.semantic
    tgt = rng.standard_normal((TINY_ENC.sem_queries, TINY_ENC.sem_dim))

    def f_sem(_):
        cond = model.conditions(sample)
        return ((cond.sem_tokens - Tensor(tgt)) ** 2).sum()

    err = grad_check(f_sem, sem.parameters(), max_entries_per_param=sub)
    assert err < 1e-4

    # visual stream and fusion gate
    vis_params = {**{f"v.{k}": v for k, v in model.encoder.visual.parameters().items()},
                  **{f"g.{k}": v for k, v in model.encoder.gate.parameters().items()}}

    def f_vis(_):
        cond = model.conditions(sample)
        return (cond.pixel_cond ** 2).sum()

    err = grad_check(f_vis, vis_params, max_entries_per_param=sub)
    assert err < 1e-4

    # denoiser + log-weighted loss, end to end
    schedule = build_schedule()
    eps = np.random.default_rng(3).standard_normal(sample.z0.shape)
    z_t = forward_noising(sample.z0, 40, eps, schedule)

    def f_den(_):
        cond = model.conditions(sample)
        eps_hat = model.predict(z_t, 40, cond)
        per_frame = ((eps_hat - Tensor(eps)) ** 2).mean(axis=(1, 2, 3))
        return loss_log_weighted(per_frame)

    err = grad_check(f_den, model.denoiser.parameters(), max_entries_per_param=sub)
    assert err < 1e-4
    assert time.time() - start < 120.0


def test_criterion_4_initialization_neutrality():
    ctx = build_tiny_model(0)
    baseline = build_tiny_model(0, use_context=False)
    sample = make_clip_sample(0)
    rng = np.random.default_rng(4)
    for _ in range(10):
        z_t = rng.standard_normal(sample.z0.shape)
        t = int(rng.integers(1, 1000))
        out_ctx = ctx.predict(z_t, t, ctx.conditions(sample)).data
        out_base = baseline.predict(z_t, t, baseline.conditions(sample)).data
        assert np.array_equal(out_ctx, out_base)


def test_criterion_5_log_weighted_loss():
    w = log_frame_weights(16)
    assert w[0] == 0.0
    assert loss_log_weighted(np.full(16, 0.73)) == pytest.approx(0.73, abs=1e-12)
    oracle = math.fsum(math.log10(k + 1) for k in range(16))
    assert abs(np.log10(math.factorial(16)) - oracle) < 1e-9
    assert abs(sum(math.log10(k + 1) * 0.5 for k in range(16)) / oracle
               - loss_log_weighted(np.full(16, 0.5))) < 1e-12


def test_criterion_6_metric_identities():
    p = CameraPose(np.eye(3), np.zeros(3))
    same = TrajectoryPair([p, p], [p, p])
    assert rot_err(same) == 0.0 and trans_err(same) == 0.0 and cam_mc(same) == 0.0

    rot90 = CameraPose(np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1.0]]), np.zeros(3))
    assert abs(rot_err(TrajectoryPair([rot90], [p])) - math.pi / 2) < 1e-9
    off = CameraPose(np.eye(3), np.array([3.0, 4.0, 0.0]))
    assert trans_err(TrajectoryPair([off], [p])) == 5.0
    x = np.random.default_rng(5).random((2, 16, 16, 3)) * 255
    assert np.allclose(ssim_per_frame(x, x), 1.0, atol=1e-12)


def test_criterion_7_ddim_inversion_oracle():
    schedule = build_schedule()
    rng = np.random.default_rng(6)
    z0 = rng.standard_normal((2, 4, 4, 3))
    eps = rng.standard_normal(z0.shape)
    for t_start in (1, 7, 50, 250, 1000):
        x_t = forward_noising(z0, t_start, eps, schedule)
        out = ddim_sample(lambda x, t: eps, z0.shape, schedule, steps=25,
                          x_init=x_t, t_start=t_start)
        assert np.abs(out - z0).max() < 1e-5


def test_codec_reconstruction_fidelity():
    K = harness.default_intrinsics(32, 32)
    frames = []
    for s in range(8):
        scene = harness.generate_scene(s)
        poses = harness.make_trajectory("orbit", 8, total_angle=math.pi)
        frames.extend(harness.render_view(scene, p, K) for p in poses)
    frames = np.stack(frames)
    codec = PatchCodec(patch=2, channels=8, rng=np.random.default_rng(0))
    codec.train(frames, steps=600, seed=0)
    recon = np.stack([codec.decode(codec.encode(f)) for f in frames])
    rmse = float(np.sqrt(np.mean((recon - frames) ** 2)))
    assert rmse < 0.05, rmse


# -- criterion 8: directional replication at toy scale -----------------------

EXP8 = ExperimentConfig(
    image_size=16, latent_patch=4, latent_channels=8, frames=16,
    video_frames=64, trajectory="orbit", stride=4, epipolar_delta=1.0,
    train_seeds=list(range(64)), eval_seeds=list(range(100, 106)),
    vis_dim=24, sem_dim=16, sem_queries=8, dim=48, blocks=1, temb_dim=8,
    steps=3000, batch=3, lr=1e-3)

# the clip covers the full half-orbit (stride 4 over 64 trajectory frames),
# so late frames show scene content that is poorly visible from the
# reference frame but adjacent to the end_plus_1 context frame
CHUNKS = 5           # 5 x 3000 training steps per model
EVAL_AT = (3, 4, 5)  # average MSE curves at 9k, 12k, and 15k steps


@pytest.fixture(scope="module")
def trained_curves():
    cfg = EXP8
    K = harness.default_intrinsics(cfg.image_size, cfg.image_size)
    codec = PatchCodec(cfg.latent_patch, cfg.latent_channels,
                       rng=np.random.default_rng(0))
    frames = []
    for s in cfg.train_seeds[::4]:
        spec = harness.ClipSpec(scene_seed=s, trajectory=cfg.trajectory,
                                stride=cfg.stride)
        scene = harness.generate_scene(s)
        poses = harness.trajectory_for_scene(spec)
        for i in spec.clip_indices()[::4]:
            frames.append(harness.render_view(scene, poses[i], K))
    codec.train(np.stack(frames), steps=500, seed=0)

    dataset = harness.build_dataset(
        cfg.train_seeds, codec, K, cfg.latent_size, cfg.latent_size,
        trajectory=cfg.trajectory, strategy="range_after_end",
        stride=cfg.stride, delta=cfg.delta)
    schedule = build_schedule()

    def mean_mse_curve(model, strategy):
        curves = []
        for seed in cfg.eval_seeds:
            spec = harness.ClipSpec(scene_seed=seed, trajectory=cfg.trajectory,
                                    strategy=strategy, stride=cfg.stride)
            sample, gt, _ = harness.assemble_clip(
                spec, codec, K, cfg.latent_size, cfg.latent_size, delta=cfg.delta)
            cond = model.conditions(sample)
            for gen_seed in (1, 2):
                z = ddim_sample(lambda x, t: model.predict(x, t, cond).data,
                                sample.z0.shape, schedule, steps=25, seed=gen_seed)
                gen = np.clip(np.stack([codec.decode(zi) for zi in z]), 0.0, 1.0)
                curves.append(mse_per_frame(gen * 255.0, gt * 255.0))
        return np.mean(curves, axis=0)

    curves = {}
    for name, flags in (("baseline", dict(use_context=False)),
                        ("full", {}),
                        ("nomask", dict(use_mask=False))):
        rng = np.random.default_rng(0)
        model = ContextDiffusionModel(ContextEncoder(cfg.encoder_config(), rng),
                                      Denoiser(cfg.denoiser_config(), rng), **flags)
        checkpoint_curves = []
        for chunk in range(CHUNKS):
            train(model, dataset,
                  TrainConfig(steps=cfg.steps, batch=cfg.batch, lr=cfg.lr,
                              seed=chunk),
                  schedule=schedule)
            if chunk + 1 in EVAL_AT:
                checkpoint_curves.append(mean_mse_curve(model, "end_plus_1"))
        curves[name] = np.mean(checkpoint_curves, axis=0)
        if name == "full":
            curves["furthest"] = mean_mse_curve(model, "furthest")
            curves["full_final"] = checkpoint_curves[-1]
    return curves


def test_criterion_8_directional_replication(trained_curves):
    late = {k: trained_curves[k][9:].mean()
            for k in ("baseline", "full", "nomask")}
    # (a) context cuts late-frame error by at least 10%
    assert late["full"] <= 0.9 * late["baseline"], late
    # (b) removing the epipolar mask degrades late frames at this budget
    assert late["nomask"] > late["full"], late
    # (c) far context is within 15% of near context on total error
    fur = trained_curves["furthest"].sum()
    near = trained_curves["full_final"].sum()
    assert fur <= 1.15 * near, (fur, near)


def test_criterion_9_experiment_determinism(tmp_path):
    cfg = ExperimentConfig(
        image_size=16, latent_patch=4, frames=4, video_frames=24,
        train_seeds=[0, 1], eval_seeds=[100], vis_dim=8, sem_dim=8,
        sem_queries=4, sem_layers=1, dim=16, blocks=1, temb_dim=4,
        steps=3, batch=2, codec_steps=15, ddim_steps=3)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("reports/100.csv", "reports/summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes()
