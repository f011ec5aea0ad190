"""Pinhole camera math: rays, Plücker embeddings, epipolar lines and masks.

Conventions: poses are world-to-camera, x_cam = R @ x_world + t. The camera
center in world coordinates is -R^T t. Pixel (u, v) means column u, row v.
All computation is float64; masks are stored bit-packed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
DEGENERATE_LINE_SQ = 1e-18
PURE_ROTATION_EPS = 1e-6


class GeometryError(ValueError):
    pass


class InvalidIntrinsicsError(GeometryError):
    pass


class DegenerateLineError(GeometryError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidIntrinsicsError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidIntrinsicsError("principal point outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics for the same camera at a different pixel resolution."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform [R | t]."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL, rtol=0):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise GeometryError("rotation must have determinant +1")

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    @property
    def matrix44(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply world-to-camera transform to points of shape (..., 3)."""
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PluckerField:
    """Per-pixel ray field of shape (h, w, 6): channels 0-2 moment, 3-5 unit direction."""

    tensor: np.ndarray

    @property
    def moment(self) -> np.ndarray:
        return self.tensor[..., :3]

    @property
    def direction(self) -> np.ndarray:
        return self.tensor[..., 3:]


@dataclass(frozen=True)
class EpipolarLine:
    """Line A u' + B v' + C = 0 in context-view pixel coordinates."""

    a: float
    b: float
    c: float

    @property
    def degenerate(self) -> bool:
        return self.a * self.a + self.b * self.b <= DEGENERATE_LINE_SQ


@dataclass
class EpipolarMask:
    """Binary relevance tensor of shape (T*h*w) x (N*h*w), stored bit-packed."""

    packed: np.ndarray
    rows: int
    cols: int
    num_query_frames: int
    num_context_frames: int
    grid_h: int
    grid_w: int

    @staticmethod
    def from_dense(dense: np.ndarray, num_query_frames: int, num_context_frames: int,
                   grid_h: int, grid_w: int) -> "EpipolarMask":
        dense = np.asarray(dense, dtype=bool)
        return EpipolarMask(
            packed=np.packbits(dense, axis=1),
            rows=dense.shape[0],
            cols=dense.shape[1],
            num_query_frames=num_query_frames,
            num_context_frames=num_context_frames,
            grid_h=grid_h,
            grid_w=grid_w,
        )

    def dense(self) -> np.ndarray:
        return np.unpackbits(self.packed, axis=1, count=self.cols).astype(bool)

    def slice(self, t: int, j: int) -> np.ndarray:
        """Boolean (h*w) x (h*w) block for query frame t and context view j."""
        hw = self.grid_h * self.grid_w
        return self.dense()[t * hw:(t + 1) * hw, j * hw:(j + 1) * hw]


def _pixel_grid(h: int, w: int) -> np.ndarray:
    """Homogeneous pixel coordinates, shape (3, h*w), flattened row-major (v major)."""
    v, u = np.mgrid[0:h, 0:w]
    return np.stack([u.ravel(), v.ravel(), np.ones(h * w)], axis=0).astype(np.float64)


def ray_directions(K: Intrinsics, pose: CameraPose, h: int, w: int) -> np.ndarray:
    """Unnormalized per-pixel ray directions in the reference frame, shape (h, w, 3).

    d = R^T K^{-1} [u, v, 1]^T for the world-to-camera pose [R | t].
    """
    if h < 1 or w < 1:
        raise GeometryError("grid dimensions must be >= 1")
    pix = _pixel_grid(h, w)
    d = pose.rotation.T @ (K.inverse_matrix @ pix)
    return d.T.reshape(h, w, 3)


def plucker_embedding(K: Intrinsics, pose: CameraPose, h: int, w: int) -> PluckerField:
    """Per-pixel Plücker ray field (o x d', d') with o the camera center."""
    d = ray_directions(K, pose, h, w)
    d_unit = d / np.linalg.norm(d, axis=-1, keepdims=True)
    o = pose.center
    moment = np.cross(np.broadcast_to(o, d_unit.shape), d_unit)
    return PluckerField(np.concatenate([moment, d_unit], axis=-1))


def relative_pose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Transform mapping camera-a coordinates to camera-b coordinates."""
    r_rel = b.rotation @ a.rotation.T
    t_rel = b.translation - r_rel @ a.translation
    return CameraPose(r_rel, t_rel)


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=np.float64
    )


def fundamental_matrix(a: CameraPose, K_a: Intrinsics, b: CameraPose, K_b: Intrinsics) -> np.ndarray:
    """F with x_b^T F x_a = 0 for projections (x_a, x_b) of a common 3D point.

    F = K_b^{-T} [t_rel]x R_rel K_a^{-1}. A pure-rotation pair yields a
    near-zero F; degeneracy is the caller's concern.
    """
    rel = relative_pose(a, b)
    return K_b.inverse_matrix.T @ _cross_matrix(rel.translation) @ rel.rotation @ K_a.inverse_matrix


def epipolar_line(F: np.ndarray, pixel: tuple[float, float]) -> EpipolarLine:
    """Epipolar line F [u, v, 1]^T in the second view."""
    a, b, c = np.asarray(F, dtype=np.float64) @ np.array([pixel[0], pixel[1], 1.0])
    return EpipolarLine(float(a), float(b), float(c))


def point_line_distance(line: EpipolarLine, pixel: tuple[float, float]) -> float:
    """Unsigned distance from a pixel to an epipolar line."""
    if line.degenerate:
        raise DegenerateLineError("cannot measure distance to a degenerate line")
    num = abs(line.a * pixel[0] + line.b * pixel[1] + line.c)
    return num / math.sqrt(line.a * line.a + line.b * line.b)


def default_epipolar_threshold(h: int, w: int) -> float:
    """Half the diagonal of the latent feature grid."""
    return 0.5 * math.hypot(h, w)


def epipolar_mask(
    query_poses: list[CameraPose],
    ctx_poses: list[CameraPose],
    K: Intrinsics,
    h: int,
    w: int,
    delta: float | None = None,
) -> EpipolarMask:
    """Binary admissibility mask between every query pixel and context pixel.

    Entry [(t, v, u), (j, v', u')] is 1 iff pixel (u', v') in context view j
    lies within delta of the epipolar line of query pixel (u, v) in frame t.
    Pure-rotation pairs and degenerate lines fall back to all-admissible; no
    row is ever all-zero.
    """
    if not query_poses or not ctx_poses:
        raise GeometryError("need at least one query pose and one context pose")
    if delta is None:
        delta = default_epipolar_threshold(h, w)
    if delta <= 0:
        raise GeometryError("threshold must be positive")

    hw = h * w
    T, N = len(query_poses), len(ctx_poses)
    pix = _pixel_grid(h, w)  # (3, hw)
    dense = np.empty((T * hw, N * hw), dtype=bool)

    for t, qp in enumerate(query_poses):
        for j, cp in enumerate(ctx_poses):
            rel = relative_pose(qp, cp)
            if np.linalg.norm(rel.translation) < PURE_ROTATION_EPS:
                block = np.ones((hw, hw), dtype=bool)
            else:
                F = fundamental_matrix(qp, K, cp, K)
                lines = (F @ pix).T  # (hw, 3): one line per query pixel
                norm_sq = lines[:, 0] ** 2 + lines[:, 1] ** 2
                with np.errstate(invalid="ignore", divide="ignore"):
                    dist = np.abs(lines @ pix) / np.sqrt(norm_sq)[:, None]
                block = dist <= delta
                block[norm_sq <= DEGENERATE_LINE_SQ, :] = True
            dense[t * hw:(t + 1) * hw, j * hw:(j + 1) * hw] = block

    empty_rows = ~dense.any(axis=1)
    dense[empty_rows, :] = True
    return EpipolarMask.from_dense(dense, T, N, h, w)


def project_points(points: np.ndarray, pose: CameraPose, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (..., 3) to pixels (..., 2); also returns camera-frame depth."""
    cam = pose.transform(points)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[..., 0] / z + K.cx
        v = K.fy * cam[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


# ---------------------------------------------------------------------------
# Pose file I/O (RealEstate10K-style line format)
# ---------------------------------------------------------------------------

@dataclass
class PoseFileEntry:
    timestamp: float
    intrinsics: Intrinsics
    pose: CameraPose


def read_pose_file(path, width: int, height: int) -> list[PoseFileEntry]:
    """Parse a pose file: one frame per line,

    ``timestamp fx fy cx cy 0 0 r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3``

    with intrinsics normalized by the image dimensions and the extrinsics a
    row-major world-to-camera [R | t].
    """
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 19:
                raise GeometryError(f"{path}:{lineno}: expected 19 fields, got {len(parts)}")
            vals = [float(p) for p in parts]
            K = Intrinsics(
                fx=vals[1] * width, fy=vals[2] * height,
                cx=vals[3] * width, cy=vals[4] * height,
                width=width, height=height,
            )
            m = np.array(vals[7:19], dtype=np.float64).reshape(3, 4)
            entries.append(PoseFileEntry(vals[0], K, CameraPose(m[:, :3], m[:, 3])))
    return entries


def write_pose_file(path, entries: list[PoseFileEntry]) -> None:
    """Write pose-file lines; floats use repr so parsing round-trips bit-exactly."""
    with open(path, "w") as fh:
        for e in entries:
            K = e.intrinsics
            fields = [
                e.timestamp,
                K.fx / K.width, K.fy / K.height, K.cx / K.width, K.cy / K.height,
                0.0, 0.0,
            ]
            fields.extend(e.pose.matrix34.ravel().tolist())
            fh.write(" ".join(repr(f) for f in fields) + "\n")


def write_mask_pgm(mask: EpipolarMask, t: int, j: int, path) -> None:
    """Emit one (t, j) mask slice as a binary PGM (P5), admissible pixels white."""
    block = mask.slice(t, j)
    img = np.where(block, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
