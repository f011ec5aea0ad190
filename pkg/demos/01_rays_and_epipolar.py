"""Camera rays, Plücker embeddings, and epipolar masks on a two-view rig.

Builds two cameras looking at a synthetic room, embeds every pixel of the
first view as a Plücker ray, and shows that points rendered in one view land
on their epipolar lines in the other. Writes a pose file and a few epipolar
mask slices next to this script.
"""

from pathlib import Path

import numpy as np

from contextvid.geometry import (
    PoseFileEntry,
    epipolar_line,
    epipolar_mask,
    fundamental_matrix,
    plucker_embedding,
    point_line_distance,
    project_points,
    write_mask_pgm,
    write_pose_file,
)
from contextvid.harness import default_intrinsics, generate_scene, look_at

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

K = default_intrinsics(64, 64)
pose_a = look_at([0.0, 0.0, 0.0], [0.3, 0.0, 1.0])
pose_b = look_at([0.5, 0.1, -0.3], [0.2, 0.0, 1.0])

# Per-pixel ray field of view A: channels 0-2 are the moment o x d', 3-5 the
# unit direction d'.
field = plucker_embedding(K, pose_a, 64, 64)
print("plucker field:", field.tensor.shape)
print("direction norms all 1:",
      np.allclose(np.linalg.norm(field.direction, axis=-1), 1.0))

# Scene points seen by both cameras satisfy the epipolar constraint.
scene = generate_scene(0)
pts, _, _ = scene.point_cloud()
F = fundamental_matrix(pose_a, K, pose_b, K)
uv_a, za = project_points(pts, pose_a, K)
uv_b, zb = project_points(pts, pose_b, K)
ok = (za > 0.05) & (zb > 0.05)
dists = [point_line_distance(epipolar_line(F, tuple(a)), tuple(b))
         for a, b in zip(uv_a[ok][:300], uv_b[ok][:300])]
print(f"max |point, epipolar line| over {len(dists)} correspondences: "
      f"{max(dists):.2e} px")

# The admissibility mask between a 16x16 query grid and the context view.
mask = epipolar_mask([pose_a], [pose_b], K.scaled(16, 16), 16, 16, delta=2.0)
dense = mask.dense()
print(f"mask {dense.shape}, admissible fraction {dense.mean():.3f}")
write_mask_pgm(mask, 0, 0, out / "epipolar_mask.pgm")

write_pose_file(out / "two_view.poses.txt",
                [PoseFileEntry(0.0, K, pose_a), PoseFileEntry(1.0, K, pose_b)])
print(f"wrote {out / 'epipolar_mask.pgm'} and {out / 'two_view.poses.txt'}")
