"""Evaluation metrics: per-frame MSE/SSIM curves and camera-trajectory errors.

Video metrics operate frame-by-frame so that error growth over time can be
plotted directly. Trajectory metrics compare an estimated pose sequence
against a reference one: summed geodesic rotation angle, summed translation
distance, and summed Frobenius distance between 3x4 extrinsic matrices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose

__all__ = [
    "MetricError",
    "TrajectoryPair",
    "MetricReport",
    "mse_per_frame",
    "ssim_per_frame",
    "rot_err",
    "trans_err",
    "cam_mc",
    "normalize_trajectory",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class MetricError(ValueError):
    """Invalid input to a metric computation."""


# ---------------------------------------------------------------------------
# video metrics
# ---------------------------------------------------------------------------

def _check_video_pair(gen, gt):
    gen = np.asarray(gen, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if gen.shape != gt.shape:
        raise MetricError(f"video shape mismatch: {gen.shape} vs {gt.shape}")
    if gen.ndim not in (3, 4):
        raise MetricError("expected (T, H, W) or (T, H, W, C) videos")
    return gen, gt


def mse_per_frame(gen, gt) -> np.ndarray:
    """Per-frame mean squared error.

    Inputs are expected on the 0-255 scale so the magnitudes are comparable
    with published video-diffusion numbers. Fixed-order accumulation keeps
    the result bit-stable.
    """
    gen, gt = _check_video_pair(gen, gt)
    diff = gen - gt
    return (diff * diff).reshape(diff.shape[0], -1).mean(axis=1)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _windows(img: np.ndarray, size: int) -> np.ndarray:
    """All valid size x size patches of a 2-D image, shape (nh, nw, size, size)."""
    return np.lib.stride_tricks.sliding_window_view(img, (size, size))


def _ssim_single(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    """Mean local SSIM of one 2-D channel pair (valid-mode Gaussian windows)."""
    win = _gaussian_window()
    wa = _windows(a, SSIM_WINDOW)
    wb = _windows(b, SSIM_WINDOW)
    mu_a = np.einsum("ijkl,kl->ij", wa, win)
    mu_b = np.einsum("ijkl,kl->ij", wb, win)
    e_aa = np.einsum("ijkl,kl->ij", wa * wa, win)
    e_bb = np.einsum("ijkl,kl->ij", wb * wb, win)
    e_ab = np.einsum("ijkl,kl->ij", wa * wb, win)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim_per_frame(gen, gt, data_range: float = 255.0) -> np.ndarray:
    """Per-frame structural similarity (11x11 Gaussian window, sigma 1.5).

    Multichannel frames average the per-channel SSIM. ``data_range`` is the
    dynamic range L used in the stabilizing constants C1=(0.01L)^2 and
    C2=(0.03L)^2.
    """
    gen, gt = _check_video_pair(gen, gt)
    h, w = gen.shape[1], gen.shape[2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise MetricError(f"frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    if gen.ndim == 3:
        gen = gen[..., np.newaxis]
        gt = gt[..., np.newaxis]
    out = np.empty(gen.shape[0])
    for t in range(gen.shape[0]):
        vals = [_ssim_single(gen[t, :, :, c], gt[t, :, :, c], data_range)
                for c in range(gen.shape[3])]
        out[t] = math.fsum(vals) / len(vals)
    return out


# ---------------------------------------------------------------------------
# trajectory metrics
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryPair:
    """Estimated and reference camera pose sequences of equal length."""

    estimated: list[CameraPose]
    reference: list[CameraPose]

    def __post_init__(self):
        if len(self.estimated) != len(self.reference):
            raise MetricError("trajectory lengths differ: "
                              f"{len(self.estimated)} vs {len(self.reference)}")
        if not self.estimated:
            raise MetricError("empty trajectory")

    def __len__(self) -> int:
        return len(self.reference)


def rot_err(tp: TrajectoryPair) -> float:
    """Summed geodesic rotation angle (radians) between pose pairs.

    The arccos argument is clamped to [-1, 1] to absorb round-off in the
    trace of nearly-identical rotations.
    """
    total = []
    for est, ref in zip(tp.estimated, tp.reference):
        if np.array_equal(est.rotation, ref.rotation):
            continue
        cos = (np.trace(est.rotation @ ref.rotation.T) - 1.0) / 2.0
        total.append(math.acos(min(1.0, max(-1.0, cos))))
    return math.fsum(total)


def trans_err(tp: TrajectoryPair) -> float:
    """Summed Euclidean distance between translation vectors."""
    return math.fsum(
        float(np.linalg.norm(est.translation - ref.translation))
        for est, ref in zip(tp.estimated, tp.reference))


def cam_mc(tp: TrajectoryPair) -> float:
    """Summed Frobenius distance between 3x4 [R|t] extrinsic matrices."""
    return math.fsum(
        float(np.linalg.norm(est.matrix34 - ref.matrix34))
        for est, ref in zip(tp.estimated, tp.reference))


def _rebase(poses: list[CameraPose]) -> list[CameraPose]:
    """Re-express every pose relative to the first (first becomes identity)."""
    first_inv = poses[0].inverse()
    out = []
    for p in poses:
        r = p.rotation @ first_inv.rotation
        t = p.rotation @ first_inv.translation + p.translation
        out.append(CameraPose(r, t))
    return out


def _path_length(poses: list[CameraPose]) -> float:
    return math.fsum(
        float(np.linalg.norm(poses[i + 1].center - poses[i].center))
        for i in range(len(poses) - 1))


def normalize_trajectory(tp: TrajectoryPair) -> TrajectoryPair:
    """Rebase both trajectories to their first frame and fix overall scale.

    Monocular pose estimates are scale-ambiguous, so translations in both
    trajectories are divided by the reference path length (total distance
    travelled by the reference camera). A zero-length reference path leaves
    the scale unchanged.
    """
    est = _rebase(tp.estimated)
    ref = _rebase(tp.reference)
    scale = _path_length(ref)
    if scale > 0.0:
        est = [CameraPose(p.rotation, p.translation / scale) for p in est]
        ref = [CameraPose(p.rotation, p.translation / scale) for p in ref]
    return TrajectoryPair(est, ref)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-frame MSE/SSIM curves plus scalar trajectory errors for one run."""

    mse: np.ndarray
    ssim: np.ndarray
    rot_err: float
    trans_err: float
    cam_mc: float
    header_lines: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.mse = np.asarray(self.mse, dtype=np.float64)
        self.ssim = np.asarray(self.ssim, dtype=np.float64)
        if self.mse.shape != self.ssim.shape or self.mse.ndim != 1:
            raise MetricError("mse and ssim curves must be 1-D and equal length")
        if (self.mse < 0).any():
            raise MetricError("negative MSE entry")
        if (np.abs(self.ssim) > 1.0 + 1e-9).any():
            raise MetricError("SSIM entry outside [-1, 1]")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for line in self.header_lines:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(["frame", "mse", "ssim"])
            for k in range(len(self.mse)):
                writer.writerow([k, repr(float(self.mse[k])), repr(float(self.ssim[k]))])
            writer.writerow(["rot_err", "trans_err", "cam_mc"])
            writer.writerow([repr(self.rot_err), repr(self.trans_err), repr(self.cam_mc)])

    @staticmethod
    def read_csv(path) -> "MetricReport":
        header_lines = []
        rows = []
        with open(path, newline="") as fh:
            for raw in fh:
                if raw.startswith("#"):
                    header_lines.append(raw[1:].strip())
                    continue
                rows.append(next(csv.reader([raw])))
        if len(rows) < 3 or rows[0] != ["frame", "mse", "ssim"]:
            raise MetricError(f"malformed metric report: {path}")
        if rows[-2] != ["rot_err", "trans_err", "cam_mc"]:
            raise MetricError(f"missing trajectory-error footer: {path}")
        body = rows[1:-2]
        mse = np.array([float(r[1]) for r in body])
        ssim = np.array([float(r[2]) for r in body])
        re_, te, cm = (float(v) for v in rows[-1])
        return MetricReport(mse, ssim, re_, te, cm, header_lines=header_lines)
