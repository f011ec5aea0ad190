import math

import numpy as np
import pytest

from contextvid.geometry import CameraPose
from contextvid.metrics import (
    MetricError,
    MetricReport,
    TrajectoryPair,
    cam_mc,
    mse_per_frame,
    normalize_trajectory,
    rot_err,
    ssim_per_frame,
    trans_err,
)


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_pose(rng) -> CameraPose:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return CameraPose(q, rng.standard_normal(3))


def pair(est, ref) -> TrajectoryPair:
    return TrajectoryPair(list(est), list(ref))


class TestMse:
    def test_identical_zero(self):
        v = np.random.default_rng(0).random((4, 16, 16, 3)) * 255
        assert np.array_equal(mse_per_frame(v, v), np.zeros(4))

    def test_constant_offset(self):
        rng = np.random.default_rng(1)
        gt = rng.random((3, 12, 12)) * 200
        np.testing.assert_allclose(mse_per_frame(gt + 10.0, gt), [100.0] * 3, atol=1e-9)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(2)
        gen = rng.random((5, 9, 7, 3)) * 255
        gt = rng.random((5, 9, 7, 3)) * 255
        got = mse_per_frame(gen, gt)
        for t in range(5):
            acc = math.fsum((float(a) - float(b)) ** 2
                            for a, b in zip(gen[t].ravel(), gt[t].ravel()))
            assert abs(got[t] - acc / gen[t].size) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            mse_per_frame(np.zeros((2, 8, 8)), np.zeros((2, 8, 9)))

    def test_quantization_bound(self):
        rng = np.random.default_rng(3)
        v = rng.random((2, 16, 16)) * 255
        q = np.round(v)
        assert mse_per_frame(v, q).max() <= 0.25


class TestSsim:
    def test_identical_is_one(self):
        v = np.random.default_rng(0).random((3, 16, 16, 3)) * 255
        np.testing.assert_allclose(ssim_per_frame(v, v), 1.0, atol=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.random((2, 16, 16)) * 255
        b = rng.random((2, 16, 16)) * 255
        np.testing.assert_allclose(ssim_per_frame(a, b), ssim_per_frame(b, a), atol=1e-12)

    def test_anticorrelated_checkerboard_negative(self):
        grid = np.indices((16, 16)).sum(axis=0) % 2
        gt = (grid * 255.0)[None]
        gen = 255.0 - gt
        assert ssim_per_frame(gen, gt)[0] < 0.0

    def test_constant_frames_luminance_only(self):
        a, b = 100.0, 150.0
        gen = np.full((1, 16, 16), a)
        gt = np.full((1, 16, 16), b)
        c1 = (0.01 * 255) ** 2
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        np.testing.assert_allclose(ssim_per_frame(gen, gt)[0], expected, atol=1e-12)

    def test_range_bounds(self):
        rng = np.random.default_rng(4)
        gen = rng.random((4, 20, 20, 3)) * 255
        gt = rng.random((4, 20, 20, 3)) * 255
        s = ssim_per_frame(gen, gt)
        assert np.all(s >= -1.0) and np.all(s <= 1.0)

    def test_too_small_frame(self):
        with pytest.raises(MetricError):
            ssim_per_frame(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


class TestTrajectoryMetrics:
    def test_identical_all_zero(self):
        rng = np.random.default_rng(0)
        ref = [random_pose(rng) for _ in range(5)]
        tp = pair(ref, ref)
        assert rot_err(tp) == 0.0
        assert trans_err(tp) == 0.0
        assert cam_mc(tp) == 0.0

    def test_rot_err_quarter_turn(self):
        est = [CameraPose(rot_z(math.pi / 2), np.zeros(3))]
        ref = [CameraPose(np.eye(3), np.zeros(3))]
        assert abs(rot_err(pair(est, ref)) - math.pi / 2) < 1e-9

    def test_rot_err_sums(self):
        est = [CameraPose(rot_z(math.pi / 2), np.zeros(3))] * 2
        ref = [CameraPose(np.eye(3), np.zeros(3))] * 2
        assert abs(rot_err(pair(est, ref)) - math.pi) < 1e-9

    def test_rot_err_global_rotation_invariance(self):
        rng = np.random.default_rng(1)
        est = [random_pose(rng) for _ in range(4)]
        ref = [random_pose(rng) for _ in range(4)]
        r0 = rot_z(0.7)
        est2 = [CameraPose(p.rotation @ r0, p.translation) for p in est]
        ref2 = [CameraPose(p.rotation @ r0, p.translation) for p in ref]
        assert abs(rot_err(pair(est, ref)) - rot_err(pair(est2, ref2))) < 1e-9

    def test_trans_err_345(self):
        ref = [CameraPose(np.eye(3), np.zeros(3))]
        est = [CameraPose(np.eye(3), np.array([3.0, 4.0, 0.0]))]
        assert trans_err(pair(est, ref)) == 5.0

    def test_trans_err_unit_offsets(self):
        n = 7
        ref = [CameraPose(np.eye(3), np.zeros(3))] * n
        est = [CameraPose(np.eye(3), np.array([1.0, 0.0, 0.0]))] * n
        assert trans_err(pair(est, ref)) == float(n)

    def test_cam_mc_translation_only(self):
        ref = [CameraPose(np.eye(3), np.zeros(3))]
        est = [CameraPose(np.eye(3), np.array([3.0, 4.0, 0.0]))]
        assert cam_mc(pair(est, ref)) == 5.0

    def test_cam_mc_half_turn(self):
        est = [CameraPose(rot_z(math.pi), np.zeros(3))]
        ref = [CameraPose(np.eye(3), np.zeros(3))]
        assert abs(cam_mc(pair(est, ref)) - math.sqrt(8.0)) < 1e-12

    def test_additive_over_concatenation(self):
        rng = np.random.default_rng(2)
        est = [random_pose(rng) for _ in range(6)]
        ref = [random_pose(rng) for _ in range(6)]
        whole = pair(est, ref)
        a = pair(est[:3], ref[:3])
        b = pair(est[3:], ref[3:])
        for fn in (rot_err, trans_err, cam_mc):
            assert abs(fn(whole) - (fn(a) + fn(b))) < 1e-9

    def test_length_mismatch(self):
        p = CameraPose(np.eye(3), np.zeros(3))
        with pytest.raises(MetricError):
            TrajectoryPair([p], [p, p])
        with pytest.raises(MetricError):
            TrajectoryPair([], [])


class TestNormalizeTrajectory:
    def test_rebases_first_to_identity(self):
        rng = np.random.default_rng(0)
        tp = pair([random_pose(rng) for _ in range(4)],
                  [random_pose(rng) for _ in range(4)])
        out = normalize_trajectory(tp)
        for traj in (out.estimated, out.reference):
            np.testing.assert_allclose(traj[0].rotation, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(traj[0].translation, 0.0, atol=1e-12)

    def test_unit_path_is_fixed_point(self):
        ref = [CameraPose(np.eye(3), np.zeros(3)),
               CameraPose(np.eye(3), np.array([-1.0, 0.0, 0.0]))]
        est = [CameraPose(np.eye(3), np.zeros(3)),
               CameraPose(np.eye(3), np.array([-0.5, 0.0, 0.0]))]
        out = normalize_trajectory(pair(est, ref))
        for got, want in zip(out.estimated + out.reference, est + ref):
            np.testing.assert_allclose(got.matrix34, want.matrix34, atol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        rot = [random_pose(rng).rotation for _ in range(4)]
        t_est = [rng.standard_normal(3) for _ in range(4)]
        t_ref = [rng.standard_normal(3) for _ in range(4)]
        base = pair([CameraPose(r, t) for r, t in zip(rot, t_est)],
                    [CameraPose(r, t) for r, t in zip(rot, t_ref)])
        scaled = pair([CameraPose(r, 10.0 * t) for r, t in zip(rot, t_est)],
                      [CameraPose(r, 10.0 * t) for r, t in zip(rot, t_ref)])
        a, b = normalize_trajectory(base), normalize_trajectory(scaled)
        for fn in (rot_err, trans_err, cam_mc):
            assert abs(fn(a) - fn(b)) < 1e-9

    def test_single_frame_all_zero(self):
        rng = np.random.default_rng(2)
        tp = normalize_trajectory(pair([random_pose(rng)], [random_pose(rng)]))
        assert trans_err(tp) < 1e-12
        assert cam_mc(tp) >= 0.0
        np.testing.assert_allclose(tp.reference[0].matrix34[:, 3], 0.0, atol=1e-12)


class TestMetricReport:
    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        rep = MetricReport(rng.random(16) * 100, rng.random(16) * 2 - 1,
                           0.1, 2.5, 3.25, header_lines=["strategy=end_plus_1"])
        path = tmp_path / "report.csv"
        rep.write_csv(path)
        back = MetricReport.read_csv(path)
        np.testing.assert_array_equal(back.mse, rep.mse)
        np.testing.assert_array_equal(back.ssim, rep.ssim)
        assert (back.rot_err, back.trans_err, back.cam_mc) == (0.1, 2.5, 3.25)
        assert back.header_lines == ["strategy=end_plus_1"]

    def test_csv_layout(self, tmp_path):
        rep = MetricReport(np.array([1.0]), np.array([0.5]), 0.0, 0.0, 0.0)
        path = tmp_path / "r.csv"
        rep.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "frame,mse,ssim"
        assert lines[1].startswith("0,")
        assert lines[2] == "rot_err,trans_err,cam_mc"

    def test_validation(self):
        with pytest.raises(MetricError):
            MetricReport(np.array([-1.0]), np.array([0.0]), 0, 0, 0)
        with pytest.raises(MetricError):
            MetricReport(np.array([1.0]), np.array([1.5]), 0, 0, 0)
