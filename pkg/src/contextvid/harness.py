"""Synthetic posed-scene harness: scenes, renderer, trajectories, datasets.

Scenes are deterministic functions of a seed: colored boxes and point splats
inside a bounded room whose walls carry a dot texture, so that panning and
orbiting cameras reveal and occlude content. Rendering is z-ordered point
splatting through the pinhole model of the geometry module, which keeps the
renderer and the epipolar machinery exactly consistent.

World axes follow image conventions: x grows right, y grows down, z grows
into the scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import ClipSample
from .geometry import (
    CameraPose,
    Intrinsics,
    epipolar_mask,
    plucker_embedding,
    relative_pose,
)
from .nn import PatchCodec

__all__ = [
    "HarnessError",
    "InsufficientContextError",
    "Box",
    "Splat",
    "Scene",
    "ClipSpec",
    "generate_scene",
    "render_view",
    "render_video",
    "make_trajectory",
    "default_intrinsics",
    "sample_context",
    "caption_for_scene",
    "tokenize",
    "assemble_clip",
    "build_dataset",
    "write_ppm",
    "read_ppm",
    "CAPTION_VOCAB",
    "TRAJECTORY_KINDS",
    "CONTEXT_STRATEGIES",
]

ROOM_HALF = 3.2
NEAR_PLANE = 0.05
BACKGROUND = np.array([0.12, 0.12, 0.14])

TRAJECTORY_KINDS = ("pan", "orbit", "dolly")
CONTEXT_STRATEGIES = ("range_after_end", "end_plus_1", "furthest")

COLOR_TABLE = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.90, 0.85, 0.15),
    "cyan": (0.15, 0.80, 0.80),
    "magenta": (0.85, 0.20, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.92, 0.92, 0.92),
}

CAPTION_VOCAB = (
    "<pad>", "a", "room", "with", "box", "boxes", "and", "dots", "of",
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white",
)
_WORD_TO_ID = {w: i for i, w in enumerate(CAPTION_VOCAB)}


class HarnessError(ValueError):
    pass


class InsufficientContextError(HarnessError):
    """The source video has too few frames after the clip window."""


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    color: str


@dataclass(frozen=True)
class Splat:
    point: tuple[float, float, float]
    color: tuple[float, float, float]
    radius: float


@dataclass
class Scene:
    """A seeded room of colored boxes and point splats."""

    seed: int
    boxes: list[Box]
    splats: list[Splat]
    walls: bool = True
    _cloud: tuple[np.ndarray, np.ndarray, np.ndarray] | None = field(
        default=None, repr=False, compare=False)

    def point_cloud(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points (P, 3), colors (P, 3) and splat radii (P,)."""
        if self._cloud is None:
            parts_p, parts_c, parts_r = [], [], []
            if self.walls:
                pts, cols, rads = _wall_dots()
                parts_p, parts_c, parts_r = [pts], [cols], [rads]
            for box in self.boxes:
                p, c, r = _box_surface(box)
                parts_p.append(p)
                parts_c.append(c)
                parts_r.append(r)
            if self.splats:
                parts_p.append(np.array([s.point for s in self.splats]))
                parts_c.append(np.array([s.color for s in self.splats]))
                parts_r.append(np.array([s.radius for s in self.splats]))
            if not parts_p:
                self._cloud = (np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
            else:
                self._cloud = (np.concatenate(parts_p),
                               np.concatenate(parts_c),
                               np.concatenate(parts_r))
        return self._cloud

    def serialize(self) -> bytes:
        pts, cols, rads = self.point_cloud()
        return pts.tobytes() + cols.tobytes() + rads.tobytes()


def _box_surface(box: Box, spacing: float = 0.11) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid-sample all six faces of an axis-aligned box."""
    c = np.asarray(box.center)
    half = np.asarray(box.size) / 2.0
    color = np.asarray(COLOR_TABLE[box.color])
    pts = []
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        nu = max(2, int(np.ceil(2 * half[u_ax] / spacing)) + 1)
        nv = max(2, int(np.ceil(2 * half[v_ax] / spacing)) + 1)
        u = np.linspace(-half[u_ax], half[u_ax], nu)
        v = np.linspace(-half[v_ax], half[v_ax], nv)
        uu, vv = np.meshgrid(u, v, indexing="ij")
        for sign in (-1.0, 1.0):
            face = np.empty((nu * nv, 3))
            face[:, axis] = c[axis] + sign * half[axis]
            face[:, u_ax] = c[u_ax] + uu.ravel()
            face[:, v_ax] = c[v_ax] + vv.ravel()
            pts.append(face)
    pts = np.concatenate(pts)
    # shade faces slightly by height so box edges read in the render
    shade = 1.0 - 0.12 * (pts[:, 1] - c[1]) / max(half[1], 1e-9)
    cols = color[None, :] * shade[:, None]
    rads = np.full(len(pts), spacing * 0.75)
    return pts, np.clip(cols, 0.0, 1.0), rads


def _wall_dots(spacing: float = 0.4) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dot texture on the six room walls; gives the background parallax."""
    g = np.arange(-ROOM_HALF, ROOM_HALF + 1e-9, spacing)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    pts = []
    cols = []
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            face = np.empty((uu.size, 3))
            face[:, axis] = sign * ROOM_HALF
            face[:, u_ax] = uu.ravel()
            face[:, v_ax] = vv.ravel()
            pts.append(face)
            # checker of two grays, offset per wall so walls are telling apart
            parity = (np.round(uu / spacing) + np.round(vv / spacing)
                      + axis + (sign > 0)).ravel() % 2
            base = 0.30 + 0.05 * axis + 0.03 * (sign > 0)
            cols.append(np.where(parity[:, None] > 0, base + 0.18, base)
                        * np.ones((uu.size, 3)))
    pts = np.concatenate(pts)
    return pts, np.concatenate(cols), np.full(len(pts), spacing * 0.25)


def generate_scene(seed: int, num_boxes: int = 10, num_splats: int = 40) -> Scene:
    """Deterministic scene: >= 8 distinctly colored boxes ringed around the origin."""
    if num_boxes < 8:
        raise HarnessError("need at least 8 boxes for occlusion under panning")
    rng = np.random.default_rng(seed)
    names = list(COLOR_TABLE)
    order = [names[i] for i in rng.permutation(len(names))]
    colors = [order[i % len(order)] for i in range(num_boxes)]
    boxes = []
    for i in range(num_boxes):
        angle = 2 * np.pi * i / num_boxes + rng.uniform(-0.18, 0.18)
        radius = rng.uniform(1.8, 2.6)
        center = (radius * np.sin(angle),
                  rng.uniform(-0.9, 0.9),
                  radius * np.cos(angle))
        size = tuple(rng.uniform(0.35, 0.65, size=3))
        boxes.append(Box(center, size, colors[i]))
    splats = []
    for _ in range(num_splats):
        angle = rng.uniform(0, 2 * np.pi)
        radius = rng.uniform(1.2, 2.9)
        point = (radius * np.sin(angle), rng.uniform(-1.4, 1.4), radius * np.cos(angle))
        splats.append(Splat(point, tuple(rng.uniform(0.3, 1.0, size=3)), 0.05))
    return Scene(seed, boxes, splats)


# ---------------------------------------------------------------------------
# renderer
# ---------------------------------------------------------------------------

def default_intrinsics(h: int, w: int, focal_scale: float = 0.9) -> Intrinsics:
    return Intrinsics(fx=focal_scale * w, fy=focal_scale * w,
                      cx=w / 2.0, cy=h / 2.0, width=w, height=h)


def render_view(scene: Scene, pose: CameraPose, K: Intrinsics,
                h: int | None = None, w: int | None = None) -> np.ndarray:
    """Painter's-order point splatting: RGB image in [0, 1], shape (h, w, 3).

    Points are sorted far to near and drawn as filled squares whose pixel
    size follows perspective, so nearer geometry correctly occludes farther
    geometry at splat granularity.
    """
    h = K.height if h is None else h
    w = K.width if w is None else w
    if (h, w) != (K.height, K.width):
        K = K.scaled(w, h)
    pts, cols, rads = scene.point_cloud()
    cam = pose.transform(pts)
    z = cam[:, 2]
    keep = z > NEAR_PLANE
    cam, cols, rads, z = cam[keep], cols[keep], rads[keep], z[keep]
    u = K.fx * cam[:, 0] / z + K.cx
    v = K.fy * cam[:, 1] / z + K.cy
    half_px = np.maximum(1, np.rint(rads * K.fx / z).astype(int))
    inside = ((u >= -half_px) & (u < w + half_px)
              & (v >= -half_px) & (v < h + half_px))
    u, v, z, cols, half_px = u[inside], v[inside], z[inside], cols[inside], half_px[inside]

    order = np.argsort(-z, kind="stable")
    img = np.tile(BACKGROUND, (h, w, 1))
    ui = np.rint(u).astype(int)
    vi = np.rint(v).astype(int)
    for i in order:
        r = half_px[i]
        x0, x1 = max(0, ui[i] - r), min(w, ui[i] + r + 1)
        y0, y1 = max(0, vi[i] - r), min(h, vi[i] + r + 1)
        if x0 < x1 and y0 < y1:
            img[y0:y1, x0:x1] = cols[i]
    return img


def render_video(scene: Scene, poses: list[CameraPose], K: Intrinsics) -> np.ndarray:
    return np.stack([render_view(scene, p, K) for p in poses])


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def look_at(eye, target) -> CameraPose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(f)
    if norm < 1e-12:
        raise HarnessError("look_at target coincides with the eye")
    f = f / norm
    down = np.array([0.0, 1.0, 0.0])
    r = np.cross(down, f)
    if np.linalg.norm(r) < 1e-9:
        raise HarnessError("viewing direction is vertical; pick another target")
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f]).astype(np.float64)  # rows = camera axes in world
    return CameraPose(rot, -rot @ eye)


def make_trajectory(kind: str, T: int, total_angle: float = np.pi / 2,
                    start_angle: float = 0.0, radius: float = 2.2,
                    speed: float = 0.05, height: float = 0.0) -> list[CameraPose]:
    """Smooth pose sequence of one of the three supported camera motions.

    pan    rotate in place about the vertical axis by ``total_angle``
    orbit  circle of ``radius`` around the origin, always facing it
    dolly  straight-line move along the initial viewing direction
    """
    if T < 1:
        raise HarnessError("trajectory needs at least one frame")
    steps = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    poses = []
    if kind == "pan":
        eye = np.array([0.0, height, 0.0])
        for s in steps:
            a = start_angle + s * total_angle
            poses.append(look_at(eye, eye + np.array([np.sin(a), 0.0, np.cos(a)])))
    elif kind == "orbit":
        for s in steps:
            a = start_angle + s * total_angle
            eye = np.array([radius * np.sin(a), height, radius * np.cos(a)])
            poses.append(look_at(eye, np.array([0.0, height, 0.0])))
    elif kind == "dolly":
        a = start_angle
        direction = np.array([np.sin(a), 0.0, np.cos(a)])
        base = -1.2 * direction + np.array([0.0, height, 0.0])
        for i in range(T):
            eye = base + (i * speed) * direction
            poses.append(look_at(eye, eye + direction))
    else:
        raise HarnessError(f"unknown trajectory kind {kind!r}; "
                           f"expected one of {TRAJECTORY_KINDS}")
    return poses


# ---------------------------------------------------------------------------
# clips and context sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipSpec:
    """Recipe for one clip cut from a longer synthetic video."""

    scene_seed: int
    trajectory: str = "pan"
    frames: int = 16
    stride: int = 1
    strategy: str = "range_after_end"
    context_n: int = 1
    video_frames: int = 64

    def __post_init__(self):
        if self.trajectory not in TRAJECTORY_KINDS:
            raise HarnessError(f"unknown trajectory {self.trajectory!r}")
        if self.strategy not in CONTEXT_STRATEGIES:
            raise HarnessError(f"unknown context strategy {self.strategy!r}")
        if not 1 <= self.stride <= 10:
            raise HarnessError(f"stride {self.stride} outside [1, 10]")
        if not 1 <= self.context_n <= 4:
            raise HarnessError(f"context count {self.context_n} outside [1, 4]")
        if self.frames < 2:
            raise HarnessError("clips need at least 2 frames")

    def clip_indices(self) -> np.ndarray:
        return self.stride * np.arange(self.frames)


def sample_context(spec: ClipSpec, num_video_frames: int,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Indices of context frames, all strictly after the clip window.

    ``range_after_end`` draws uniformly from (end, last]; ``end_plus_1``
    takes the frames immediately following the window; ``furthest`` takes
    the last frames of the video.
    """
    end = int(spec.clip_indices()[-1])
    n = spec.context_n
    available = num_video_frames - 1 - end
    if available < n:
        raise InsufficientContextError(
            f"clip ends at frame {end}; video of {num_video_frames} frames has "
            f"only {max(0, available)} frames after it, need {n}")
    if spec.strategy == "end_plus_1":
        return end + 1 + np.arange(n)
    if spec.strategy == "furthest":
        return num_video_frames - n + np.arange(n)
    if rng is None:
        rng = np.random.default_rng(spec.scene_seed)
    choice = rng.choice(np.arange(end + 1, num_video_frames), size=n, replace=False)
    return np.sort(choice)


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------

def caption_for_scene(scene: Scene) -> str:
    first, second = scene.boxes[0].color, scene.boxes[1].color
    return f"a room with a {first} box and a {second} box and dots"


def tokenize(caption: str) -> np.ndarray:
    try:
        return np.array([_WORD_TO_ID[w] for w in caption.split()], dtype=np.intp)
    except KeyError as exc:
        raise HarnessError(f"word {exc.args[0]!r} not in the caption vocabulary")


# ---------------------------------------------------------------------------
# clip assembly
# ---------------------------------------------------------------------------

def trajectory_for_scene(spec: ClipSpec) -> list[CameraPose]:
    """Seeded per-scene trajectory covering the whole source video."""
    rng = np.random.default_rng(spec.scene_seed + 7919)
    start = rng.uniform(0, 2 * np.pi)
    if spec.trajectory == "pan":
        return make_trajectory("pan", spec.video_frames,
                               total_angle=np.pi, start_angle=start)
    if spec.trajectory == "orbit":
        return make_trajectory("orbit", spec.video_frames,
                               total_angle=np.pi, start_angle=start,
                               radius=rng.uniform(2.0, 2.5))
    return make_trajectory("dolly", spec.video_frames,
                           start_angle=start, speed=2.4 / spec.video_frames)


def assemble_clip(spec: ClipSpec, codec: PatchCodec, K: Intrinsics,
                  latent_h: int, latent_w: int,
                  delta: float | None = None,
                  with_mask: bool = True) -> tuple[ClipSample, np.ndarray, list[CameraPose]]:
    """Render a clip and bundle everything the diffusion model consumes.

    Returns the clip sample, the ground-truth clip frames in [0, 1], and the
    clip's camera poses. Conditioning poses are expressed relative to the
    clip's first frame; Plücker fields and the epipolar mask live on the
    latent grid.
    """
    scene = generate_scene(spec.scene_seed)
    poses = trajectory_for_scene(spec)
    idx = spec.clip_indices()
    ctx_idx = sample_context(spec, spec.video_frames)

    frames = np.stack([render_view(scene, poses[i], K) for i in idx])
    ctx_frames = np.stack([render_view(scene, poses[i], K) for i in ctx_idx])
    clip_poses = [poses[i] for i in idx]
    ctx_poses = [poses[i] for i in ctx_idx]

    rel = [relative_pose(clip_poses[0], p) for p in clip_poses]
    rel_ctx = [relative_pose(clip_poses[0], p) for p in ctx_poses]
    K_lat = K.scaled(latent_w, latent_h)
    plucker = np.stack([plucker_embedding(K_lat, p, latent_h, latent_w).tensor
                        for p in rel])
    mask = None
    if with_mask:
        mask = epipolar_mask(rel, rel_ctx, K_lat, latent_h, latent_w, delta=delta)

    sample = ClipSample(
        z0=np.stack([codec.encode(f) for f in frames]),
        ref_image=frames[0],
        text_ids=tokenize(caption_for_scene(scene)),
        plucker=plucker,
        frame_indices=idx,
        ctx_images=ctx_frames,
        ctx_latents=np.stack([codec.encode(f) for f in ctx_frames]),
        ctx_frame_indices=ctx_idx,
        mask=mask,
    )
    return sample, frames, clip_poses


def build_dataset(seeds, codec: PatchCodec, K: Intrinsics,
                  latent_h: int, latent_w: int, trajectory: str = "pan",
                  strategy: str = "range_after_end", context_n: int = 1,
                  stride: int = 1, frames: int = 16, video_frames: int = 64,
                  delta: float | None = None,
                  with_mask: bool = True) -> list[ClipSample]:
    """One clip per scene seed, identical recipe across the set."""
    out = []
    for seed in seeds:
        spec = ClipSpec(scene_seed=int(seed), trajectory=trajectory,
                        strategy=strategy, context_n=context_n, stride=stride,
                        frames=frames, video_frames=video_frames)
        sample, _, _ = assemble_clip(spec, codec, K, latent_h, latent_w,
                                     delta=delta, with_mask=with_mask)
        out.append(sample)
    return out


# ---------------------------------------------------------------------------
# image file I/O
# ---------------------------------------------------------------------------

def write_ppm(image: np.ndarray, path) -> None:
    """Binary PPM (P6, maxval 255) from a float image in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise HarnessError(f"expected (h, w, 3) image, got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM written by :func:`write_ppm`; returns floats in [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise HarnessError(f"not a binary PPM: {path}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = fh.read(h * w * 3)
    if len(raw) != h * w * 3:
        raise HarnessError(f"truncated PPM: {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3) / float(maxval)
