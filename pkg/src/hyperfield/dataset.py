"""Loading of emitted (or externally assembled) multi-view datasets.

A dataset directory holds per-view BIL cubes and mask PNGs, a poses file,
an intrinsics file, a train/eval split, and ``dataset.json`` with the
wavelength grid, background spectrum, and scene bounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraModel, Pose, read_intrinsics, read_poses
from .cube import HyperCube, read_cube
from .errors import FormatError
from .images import mask_from_png
from .scene import AnalyticScene


@dataclass
class SceneDataset:
    """In-memory multi-view dataset."""

    images: np.ndarray  # (V, H, W, L) float32
    masks: np.ndarray  # (V, H, W) bool
    poses: list[Pose]
    cam: CameraModel
    wavelengths: np.ndarray
    background: np.ndarray  # (L,)
    aabb: np.ndarray  # (2, 3)
    train_ids: list[int]
    eval_ids: list[int]
    scene: AnalyticScene | None = None

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def n_bands(self) -> int:
        return self.images.shape[3]

    def view_cube(self, view_id: int) -> HyperCube:
        return HyperCube(
            data=self.images[view_id], wavelengths=self.wavelengths, kind="calibrated"
        )


def load_dataset(path) -> SceneDataset:
    path = Path(path)
    meta_file = path / "dataset.json"
    if not meta_file.exists():
        raise FormatError(f"{path}: missing dataset.json")
    meta = json.loads(meta_file.read_text())

    poses = read_poses(path / "poses.txt")
    cam = read_intrinsics(path / "intrinsics.txt")
    n_views = int(meta["n_views"])
    if len(poses) != n_views:
        raise FormatError(f"{path}: poses.txt has {len(poses)} entries, expected {n_views}")

    wavelengths = np.asarray(meta["wavelengths_nm"], dtype=np.float64)
    images = np.empty((n_views, cam.height, cam.width, wavelengths.size), dtype=np.float32)
    masks = np.empty((n_views, cam.height, cam.width), dtype=bool)
    for k in range(n_views):
        cube = read_cube(path / f"view_{k:03d}")
        if cube.data.shape != images.shape[1:]:
            raise FormatError(f"{path}: view {k} has unexpected shape {cube.data.shape}")
        images[k] = cube.data
        masks[k] = mask_from_png(path / f"mask_{k:03d}.png").values

    train_ids, eval_ids = [], []
    for line in (path / "split.txt").read_text().splitlines():
        parts = line.split()
        if len(parts) != 2:
            continue
        (train_ids if parts[1] == "train" else eval_ids).append(int(parts[0]))
    if not train_ids:
        raise FormatError(f"{path}: split.txt lists no training views")

    scene = AnalyticScene.from_dict(meta["scene"]) if "scene" in meta else None
    aabb = (
        scene.aabb
        if scene is not None
        else np.asarray(meta["aabb"], dtype=np.float64)
    )
    return SceneDataset(
        images=images,
        masks=masks,
        poses=poses,
        cam=cam,
        wavelengths=wavelengths,
        background=np.asarray(meta["background_spectrum"], dtype=np.float64),
        aabb=np.asarray(aabb, dtype=np.float64),
        train_ids=sorted(train_ids),
        eval_ids=sorted(eval_ids),
        scene=scene,
    )
