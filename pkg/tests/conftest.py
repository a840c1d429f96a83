"""Shared fixtures: the desk-scale dataset and the trained model.

The end-to-end training fixture is expensive (minutes); it is session-scoped
and shared by the reconstruction, two-stage-benefit, and point-cloud
acceptance criteria.
"""

import numpy as np
import pytest

from hyperfield.camera import CameraModel
from hyperfield.dataset import load_dataset
from hyperfield.field import FieldConfig
from hyperfield.losses import LossWeights
from hyperfield.scene import TurntableConfig, default_scene, default_wavelengths, emit_dataset
from hyperfield.train import TrainConfig, two_stage

DESK_SIZE = 64
DESK_BANDS = 8
DESK_VIEWS = 20
DESK_SEED = 7


def desk_turntable(size=DESK_SIZE, n_views=DESK_VIEWS):
    cam = CameraModel(
        fx=1.25 * size,
        fy=1.25 * size,
        cx=(size - 1) / 2,
        cy=(size - 1) / 2,
        width=size,
        height=size,
    )
    return TurntableConfig(
        n_views=n_views, radius=0.22, elevation=0.35, look_at=np.zeros(3), intrinsics=cam
    )


DESK_SUPERSAMPLE = 4  # anti-aliased silhouettes carry sub-pixel geometry


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    out = emit_dataset(
        default_scene(),
        desk_turntable(),
        tmp_path_factory.mktemp("desk") / "ds",
        wavelengths=default_wavelengths(DESK_BANDS),
        seed=DESK_SEED,
        supersample=DESK_SUPERSAMPLE,
    )
    return load_dataset(out)


def acceptance_train_config():
    """The desk-scale two-stage configuration used by the acceptance run."""
    return TrainConfig(
        pretrain_iters=3000,
        finetune_iters=3000,
        rays_per_batch=256,
        coarse_samples=32,
        fine_samples=32,
        weights=LossWeights(hsi=0.75, ang=0.25),
        eval_interval=500,
        seed=0,
    )


def acceptance_field_config(dataset):
    return FieldConfig(
        n_channels=dataset.n_bands,
        aabb=tuple(map(tuple, dataset.aabb.tolist())),
        density_bias=-10.0,
    )


@pytest.fixture(scope="session")
def trained_model(desk_dataset):
    """Full two-stage acceptance training run (several minutes on CPU)."""
    result = two_stage(acceptance_train_config(), acceptance_field_config(desk_dataset), desk_dataset)
    return result
