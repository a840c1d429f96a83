"""Two-stage optimization protocol, ray batching, and the ablation harness.

Stage one pre-trains on full frames (every pixel of every training view has
equal sampling probability) to settle geometry; stage two fine-tunes on
foreground-mask pixels only, concentrating gradients on the object. Camera
poses are never part of the optimizer's variable set in either stage.

The optimizer is adaptive-moment estimation (beta1=0.9, beta2=0.999) with
an exponentially decaying learning rate ``lr0 * (lr_end/lr0)**(t/T)`` per
stage. Training is bit-reproducible: all randomness flows through one
generator whose state is checkpointed, so a resumed run continues exactly
where the interrupted one left off.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import generate_rays
from .dataset import SceneDataset
from .errors import TrainingDivergedError, ValidationError
from .field import (
    FieldConfig,
    FieldParams,
    backward,
    derived_normal,
    init_params,
    load_checkpoint,
    query_batch,
    query_density,
    save_checkpoint,
)
from .losses import LossInputs, LossReport, LossWeights, composite_loss_grad
from .render import (
    compute_weights,
    composite,
    composite_backward,
    ray_aabb_span,
    sample_importance,
    sample_stratified,
)

logger = logging.getLogger(__name__)

PRETRAIN = "pretrain"
FINETUNE = "finetune"

# The Table-3 style loss-weight grid: (angular, hsi) pairs.
DEFAULT_ABLATION_GRID = ((0.0, 1.0), (0.25, 0.75), (0.5, 0.5), (0.75, 0.25), (1.0, 0.0))


def grid_label(ang: float, hsi: float) -> str:
    if (ang, hsi) == (0.0, 1.0):
        return "(0,1) HSI-only"
    if (ang, hsi) == (1.0, 0.0):
        return "(1,0) Angular-only"
    return f"({ang:g},{hsi:g})"


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; paper-scale runs select 20k+20k iterations."""

    pretrain_iters: int = 3000
    finetune_iters: int = 3000
    rays_per_batch: int = 1024
    lr_init: float = 5e-4
    lr_final: float = 5e-5
    coarse_samples: int = 64
    fine_samples: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    finetune_weights: LossWeights | None = None  # defaults to `weights`
    # Parameters the masked stage is allowed to move. With a global MLP,
    # fine-tuning the geometry on foreground-only rays lets density drift in
    # never-sampled background space (spatially local encodings do not have
    # this failure mode), so the default refines the radiance branch only.
    finetune_trainable: str = "radiance"  # or "all"
    seed: int = 0
    eval_interval: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.pretrain_iters < 0 or self.finetune_iters < 0:
            raise ValidationError("iteration counts must be nonnegative")
        if self.lr_init <= 0 or self.lr_final <= 0:
            raise ValidationError("learning rates must be positive")
        if self.rays_per_batch < 1:
            raise ValidationError("rays_per_batch must be >= 1")
        if self.finetune_trainable not in ("radiance", "all"):
            raise ValidationError("finetune_trainable must be 'radiance' or 'all'")

    def stage_weights(self, stage: str) -> LossWeights:
        if stage == FINETUNE and self.finetune_weights is not None:
            return self.finetune_weights
        return self.weights


def learning_rate(cfg: TrainConfig, t: int, total: int) -> float:
    """Exponential decay from lr_init to lr_final over the stage."""
    if total <= 0:
        return cfg.lr_init
    return cfg.lr_init * (cfg.lr_final / cfg.lr_init) ** (t / total)


def trainable_mask(params: FieldParams, stage: str, config: TrainConfig) -> np.ndarray:
    """Per-parameter update mask for the stage (1.0 trainable, 0.0 frozen)."""
    if stage == PRETRAIN or config.finetune_trainable == "all":
        return np.ones_like(params.theta)
    mask = np.zeros_like(params.theta)
    views = params.grad_views(mask)
    for name in params.names:
        if name.startswith("rad."):
            views[name][:] = 1.0
    return mask


@dataclass
class TrainState:
    params: FieldParams
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    stage: str = PRETRAIN
    stage_step: int = 0
    rng: np.random.Generator = None

    @classmethod
    def fresh(cls, field_config: FieldConfig, train_config: TrainConfig) -> "TrainState":
        params = init_params(field_config, seed=train_config.seed)
        n = params.theta.size
        return cls(
            params=params,
            m=np.zeros(n),
            v=np.zeros(n),
            rng=np.random.default_rng(train_config.seed),
        )


# --------------------------------------------------------------------------
# Ray batches
# --------------------------------------------------------------------------


def pixel_pool(dataset: SceneDataset, stage: str) -> np.ndarray:
    """Flat (view, y, x) candidate list for the stage's sampling rule."""
    h, w = dataset.cam.height, dataset.cam.width
    entries = []
    for vid in dataset.train_ids:
        if stage == PRETRAIN:
            ys, xs = np.mgrid[0:h, 0:w]
            keep = np.ones((h, w), dtype=bool)
        else:
            keep = dataset.masks[vid]
            ys, xs = np.mgrid[0:h, 0:w]
        entries.append(
            np.stack(
                [np.full(keep.sum(), vid), ys[keep], xs[keep]],
                axis=-1,
            )
        )
    pool = np.concatenate(entries, axis=0)
    if pool.shape[0] == 0:
        raise ValidationError("fine-tune stage has an empty mask union")
    return pool


def sample_ray_batch(dataset: SceneDataset, pool: np.ndarray, rng, n: int):
    """Uniform draw of rays+targets from a stage's pixel pool."""
    picks = pool[rng.integers(0, pool.shape[0], size=n)]
    targets = dataset.images[picks[:, 0], picks[:, 1], picks[:, 2]].astype(np.float64)
    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    # Group by view to share the pose matmul.
    for vid in np.unique(picks[:, 0]):
        rows = picks[:, 0] == vid
        pixels = picks[rows][:, [2, 1]]  # (x, y)
        o, d = generate_rays(dataset.cam, dataset.poses[vid], pixels)
        origins[rows] = o
        dirs[rows] = d
    return origins, dirs, targets


# --------------------------------------------------------------------------
# One optimization step
# --------------------------------------------------------------------------


def loss_and_grad(
    params: FieldParams,
    origins,
    dirs,
    targets,
    background,
    weights: LossWeights,
    coarse_samples: int,
    fine_samples: int,
    rng,
    jitter: bool = True,
):
    """Render a ray batch, evaluate the composite loss, and backpropagate.

    Returns (LossReport, flat gradient). Gradients flow through densities,
    radiances, rendering weights, derived normals, and predicted normals;
    sample positions are constants of the draw.
    """
    cfg = params.config
    near, far = ray_aabb_span(origins, dirs, cfg.aabb_array)
    coarse = sample_stratified(origins, dirs, near, far, coarse_samples, jitter, rng)
    sigma_c = query_density(params, coarse.points().reshape(-1, 3)).reshape(coarse.t.shape)
    w_c, _ = compute_weights(coarse.deltas, sigma_c)
    fine = sample_importance(coarse, w_c, fine_samples, rng if jitter else None)

    r, s = fine.t.shape
    pts = fine.points().reshape(-1, 3)
    dirs_rep = np.repeat(fine.dirs, s, axis=0)
    use_normals = cfg.predict_normals
    batch = query_batch(
        params,
        pts,
        dirs_rep,
        sigma_grad=use_normals,
        pred_normal=use_normals,
        keep_tape=True,
    )
    sigma = batch.density.reshape(r, s)
    rad = batch.radiance.reshape(r, s, cfg.n_channels)
    out = composite(fine, sigma, rad, background)

    derived = valid = pred_n = None
    if use_normals:
        derived_flat, valid_flat = derived_normal(batch.density_gradient)
        derived = derived_flat.reshape(r, s, 3)
        valid = valid_flat.reshape(r, s)
        pred_n = batch.predicted_normal.reshape(r, s, 3)

    s_vals = fine.s
    s_deltas = fine.s_deltas
    inputs = LossInputs(
        pred=out.radiance,
        target=np.asarray(targets, dtype=np.float64),
        weights=out.weights,
        s_mid=s_vals + s_deltas / 2.0,
        s_deltas=s_deltas,
        derived_normals=derived,
        normals_valid=valid,
        pred_normals=pred_n,
        view_dirs=fine.dirs,
    )
    report, adj = composite_loss_grad(inputs, weights)

    d_sigma, d_rad = composite_backward(
        fine, out, rad, background, adj_radiance=adj.d_pred, adj_weights=adj.d_weights
    )

    adj_grad = adj_pn = None
    if use_normals:
        # Chain the normal adjoint through n = -g/|g| back to the density
        # gradient g; invalid rows stay zero.
        d_n = adj.d_derived_normals.reshape(-1, 3)
        g = batch.density_gradient
        norms = np.linalg.norm(g, axis=-1)
        ok = valid.reshape(-1)
        safe = np.where(ok, norms, 1.0)
        n_hat = -g / safe[:, None]
        adj_grad = -(d_n - n_hat * np.sum(n_hat * d_n, axis=-1, keepdims=True)) / safe[:, None]
        adj_grad[~ok] = 0.0
        adj_pn = adj.d_pred_normals.reshape(-1, 3)

    grad = backward(
        params,
        batch,
        adj_density=d_sigma.reshape(-1),
        adj_radiance=d_rad.reshape(-1, cfg.n_channels),
        adj_density_gradient=adj_grad,
        adj_predicted_normal=adj_pn,
    )
    return report, grad


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def train_stage(
    state: TrainState,
    config: TrainConfig,
    dataset: SceneDataset,
    stage: str,
    iters: int | None = None,
    log_rows: list | None = None,
) -> TrainState:
    """Run one stage's iterations in place and return the state."""
    if stage not in (PRETRAIN, FINETUNE):
        raise ValidationError(f"unknown stage {stage!r}")
    if state.stage != stage:
        state.stage = stage
        state.stage_step = 0
    # The LR schedule always spans the configured stage length; `iters` only
    # moves the stopping point (used for interrupt/resume tests).
    schedule_total = config.pretrain_iters if stage == PRETRAIN else config.finetune_iters
    total = schedule_total if iters is None else iters
    if total == 0:
        return state

    pool = pixel_pool(dataset, stage)
    weights = config.stage_weights(stage)
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    trainable = trainable_mask(state.params, stage, config)

    while state.stage_step < total:
        origins, dirs, targets = sample_ray_batch(
            dataset, pool, state.rng, config.rays_per_batch
        )
        report, grad = loss_and_grad(
            state.params,
            origins,
            dirs,
            targets,
            dataset.background,
            weights,
            config.coarse_samples,
            config.fine_samples,
            state.rng,
        )
        if not np.isfinite(report.total):
            raise TrainingDivergedError(
                f"non-finite loss at step {state.step} ({stage}): {report}"
            )
        lr = learning_rate(config, state.stage_step, schedule_total)
        state.m = b1 * state.m + (1.0 - b1) * grad
        state.v = b2 * state.v + (1.0 - b2) * grad**2
        t = state.step + 1
        m_hat = state.m / (1.0 - b1**t)
        v_hat = state.v / (1.0 - b2**t)
        state.params.theta -= lr * (m_hat / (np.sqrt(v_hat) + eps)) * trainable
        state.step += 1
        state.stage_step += 1

        if log_rows is not None and (
            state.stage_step % config.eval_interval == 0 or state.stage_step == total
        ):
            log_rows.append([stage] + report.as_row(state.step))
            logger.info(
                "%s step %d/%d loss %.6f (hsi %.6f ang %.6f)",
                stage, state.stage_step, total, report.total, report.hsi, report.ang,
            )
    return state


@dataclass
class TwoStageResult:
    state: TrainState
    pretrain_params: FieldParams
    log_rows: list


def two_stage(
    config: TrainConfig, field_config: FieldConfig, dataset: SceneDataset
) -> TwoStageResult:
    """Full protocol: full-frame pre-train, then masked fine-tune."""
    if config.weights.prop > 0:
        logger.warning(
            "proposal loss weight %.3g is inert: this renderer replaces the "
            "proposal network with fixed two-pass importance sampling",
            config.weights.prop,
        )
    state = TrainState.fresh(field_config, config)
    rows: list = []
    train_stage(state, config, dataset, PRETRAIN, log_rows=rows)
    pretrain_params = state.params.copy()
    train_stage(state, config, dataset, FINETUNE, log_rows=rows)
    return TwoStageResult(state=state, pretrain_params=pretrain_params, log_rows=rows)


def write_loss_csv(rows, path) -> None:
    """Loss log rows as CSV; steps are global, so stages remain recoverable."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "L_hsi", "L_ang", "L_dist", "L_ori", "L_pn", "total"])
        for row in rows:
            writer.writerow([row[1]] + [repr(float(v)) for v in row[2:]])


# --------------------------------------------------------------------------
# Checkpoint round trip (params + optimizer + rng)
# --------------------------------------------------------------------------


def save_state(path, state: TrainState, meta=None) -> None:
    rng_state = state.rng.bit_generator.state
    meta = dict(meta or {})
    meta.update(
        {
            "stage": state.stage,
            "stage_step": state.stage_step,
            "rng_state": rng_state,
        }
    )
    save_checkpoint(
        path,
        state.params,
        step=state.step,
        meta=meta,
        extra={"adam_m": state.m, "adam_v": state.v},
    )


def load_state(path) -> TrainState:
    ckpt = load_checkpoint(path)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.meta["rng_state"]
    return TrainState(
        params=ckpt.params,
        m=ckpt.extra["adam_m"],
        v=ckpt.extra["adam_v"],
        step=ckpt.step,
        stage=ckpt.meta["stage"],
        stage_step=ckpt.meta["stage_step"],
        rng=rng,
    )


# --------------------------------------------------------------------------
# Loss-weight ablation harness
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    label: str
    lambda_ang: float
    lambda_hsi: float
    stage: str
    sam_mean: float
    sam_sd: float
    rmse_mean: float
    rmse_sd: float
    ssim_mean: float
    ssim_sd: float
    psnr_mean: float
    psnr_sd: float


def ablation_grid(
    config: TrainConfig,
    field_config: FieldConfig,
    dataset: SceneDataset,
    grid=DEFAULT_ABLATION_GRID,
) -> list[AblationRow]:
    """Retrain the two-stage protocol per weight pair and evaluate held-out
    views after each stage; rows mirror the pre-train/fine-tune table."""
    from .spectral_metrics import evaluate_heldout  # deferred: avoids cycle

    grid = list(grid)
    if not grid:
        raise ValidationError("ablation grid is empty")
    rows = []
    for ang, hsi in grid:
        pair_weights = replace(config.weights, ang=ang, hsi=hsi)
        pair_config = replace(config, weights=pair_weights, finetune_weights=None)
        result = two_stage(pair_config, field_config, dataset)
        for stage, params in (
            (PRETRAIN, result.pretrain_params),
            (FINETUNE, result.state.params),
        ):
            metrics = evaluate_heldout(
                params,
                dataset,
                coarse_samples=config.coarse_samples,
                fine_samples=config.fine_samples,
            )
            rows.append(
                AblationRow(
                    label=grid_label(ang, hsi),
                    lambda_ang=ang,
                    lambda_hsi=hsi,
                    stage=stage,
                    sam_mean=metrics.sam_mean,
                    sam_sd=metrics.sam_sd,
                    rmse_mean=metrics.rmse_mean,
                    rmse_sd=metrics.rmse_sd,
                    ssim_mean=metrics.ssim_mean,
                    ssim_sd=metrics.ssim_sd,
                    psnr_mean=metrics.psnr_mean,
                    psnr_sd=metrics.psnr_sd,
                )
            )
    return rows


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "label", "lambda_ang", "lambda_hsi", "stage",
                "sam_mean", "sam_sd", "rmse_mean", "rmse_sd",
                "ssim_mean", "ssim_sd", "psnr_mean", "psnr_sd",
            ]
        )
        for r in rows:
            writer.writerow(
                [
                    r.label, f"{r.lambda_ang:g}", f"{r.lambda_hsi:g}", r.stage,
                    f"{r.sam_mean:.5f}", f"{r.sam_sd:.5f}",
                    f"{r.rmse_mean:.5f}", f"{r.rmse_sd:.5f}",
                    f"{r.ssim_mean:.5f}", f"{r.ssim_sd:.5f}",
                    f"{r.psnr_mean:.5f}", f"{r.psnr_sd:.5f}",
                ]
            )
