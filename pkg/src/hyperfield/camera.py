"""Pinhole camera model, rigid poses, ray generation, and pose-file I/O.

Conventions: camera-to-world poses; camera frame is +x right, +y down,
+z along the optical axis. Pixel ``(x, y)`` generates the ray through
image-plane point ``((x - cx)/fx, (y - cy)/fy, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, ValidationError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ValidationError("pose needs a 3x3 rotation and a 3-vector translation")
        if np.abs(rot.T @ rot - np.eye(3)).max() > _ORTHO_TOL:
            raise ValidationError("rotation is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValidationError("rotation must have determinant +1")

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2]


def generate_rays(cam: CameraModel, pose: Pose, pixels) -> tuple[np.ndarray, np.ndarray]:
    """World-frame rays through the given pixel coordinates.

    Parameters
    ----------
    pixels:
        Array of shape (N, 2) holding (x, y) pairs. Integer coordinates
        address the pixel sample grid; fractional coordinates (used by the
        supersampling oracle renderer) are allowed within a half-pixel
        margin of the image bounds.

    Returns
    -------
    (origins, directions):
        Two (N, 3) float64 arrays; directions are unit length.
    """
    px = np.atleast_2d(np.asarray(pixels))
    if px.shape[-1] != 2:
        raise ValidationError("pixels must be (N, 2) with (x, y) pairs")
    x, y = px[:, 0], px[:, 1]
    if (
        (x < -0.5).any()
        or (x > cam.width - 0.5).any()
        or (y < -0.5).any()
        or (y > cam.height - 0.5).any()
    ):
        raise ValidationError("pixel coordinates out of image bounds")
    dirs_cam = np.stack(
        [(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, np.ones_like(x, dtype=np.float64)],
        axis=-1,
    )
    dirs_world = dirs_cam @ pose.rotation.T
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs_world.shape).copy()
    return origins, dirs_world


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``position`` with the optical axis through ``target``."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise GeometryError("camera position coincides with the look-at target")
    forward = forward / norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right_norm = np.linalg.norm(right)
    if right_norm < 1e-12:
        raise GeometryError("viewing direction is parallel to the up axis")
    right = right / right_norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return Pose(rotation=rotation, translation=position)


# --------------------------------------------------------------------------
# Pose / intrinsics text files
# --------------------------------------------------------------------------
#
# Poses file: one line per view,
#   view_id r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz
# (camera-to-world, row-major rotation, meters). Externally produced pose
# files in the same format are accepted unchanged.


def write_poses(path, poses: list[Pose]) -> None:
    lines = []
    for i, pose in enumerate(poses):
        parts = [str(i)]
        parts += [repr(float(v)) for v in pose.rotation.ravel()]
        parts += [repr(float(v)) for v in pose.translation]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 13:
            raise FormatError(f"{path}:{lineno}: expected 13 fields, got {len(parts)}")
        values = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        poses.append(Pose(rotation=values[:9].reshape(3, 3), translation=values[9:]))
    if not poses:
        raise FormatError(f"{path}: no poses found")
    return poses


def write_intrinsics(path, cam: CameraModel) -> None:
    Path(path).write_text(
        f"{repr(float(cam.fx))} {repr(float(cam.fy))} "
        f"{repr(float(cam.cx))} {repr(float(cam.cy))} {cam.width} {cam.height}\n"
    )


def read_intrinsics(path) -> CameraModel:
    parts = Path(path).read_text().split()
    if len(parts) != 6:
        raise FormatError(f"{path}: expected 6 fields (fx fy cx cy width height)")
    return CameraModel(
        fx=float(parts[0]),
        fy=float(parts[1]),
        cx=float(parts[2]),
        cy=float(parts[3]),
        width=int(parts[4]),
        height=int(parts[5]),
    )
