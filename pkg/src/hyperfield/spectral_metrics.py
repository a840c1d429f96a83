"""Held-out-view spectral metrics: SAM, spectral RMSE, HSI-SSIM, HSI-PSNR.

All four operate on ``(..., L)`` spectral arrays restricted to an optional
pixel mask. SAM and spectral RMSE are the primary wavelength-resolved
criteria; SSIM and PSNR are per-band image-quality proxies averaged over
bands. SSIM uses global statistics over the evaluated pixel set (not
sliding windows); PSNR assumes unit dynamic range.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cube import BandTriplet, composite as band_composite
from .dataset import SceneDataset
from .errors import ValidationError
from .field import FieldParams
from .images import float_to_png, side_by_side, write_png
from .render import DEFAULT_COARSE_SAMPLES, DEFAULT_FINE_SAMPLES, render_view

_SAM_DELTA = 1e-8
_PSNR_DELTA = 1e-10
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _flatten(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError("prediction/ground-truth shape mismatch")
    p = pred.reshape(-1, pred.shape[-1])
    g = gt.reshape(-1, gt.shape[-1])
    if mask is not None:
        m = np.asarray(getattr(mask, "values", mask), dtype=bool).reshape(-1)
        p, g = p[m], g[m]
    if p.shape[0] == 0:
        raise ValidationError("empty pixel set in metric")
    return p, g


def sam(pred, gt, mask=None, delta: float = _SAM_DELTA) -> float:
    """Mean spectral angle in radians (scale-invariant shape discrepancy)."""
    if delta <= 0:
        raise ValidationError("SAM delta must be positive")
    p, g = _flatten(pred, gt, mask)
    dot = np.sum(p * g, axis=-1)
    denom = np.linalg.norm(p, axis=-1) * np.linalg.norm(g, axis=-1) + delta
    return float(np.arccos(np.clip(dot / denom, -1.0, 1.0)).mean())


def spectral_rmse(pred, gt, mask=None) -> float:
    """Root of the pixel-mean, band-mean squared error."""
    p, g = _flatten(pred, gt, mask)
    return float(np.sqrt(((p - g) ** 2).mean()))


def hsi_ssim(pred, gt, mask=None) -> float:
    """Per-band SSIM with global statistics over the pixel set, band-averaged."""
    p, g = _flatten(pred, gt, mask)
    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    var_p = p.var(axis=0)
    var_g = g.var(axis=0)
    cov = ((p - mu_p) * (g - mu_g)).mean(axis=0)
    ssim_b = ((2 * mu_p * mu_g + _SSIM_C1) * (2 * cov + _SSIM_C2)) / (
        (mu_p**2 + mu_g**2 + _SSIM_C1) * (var_p + var_g + _SSIM_C2)
    )
    return float(ssim_b.mean())


def hsi_psnr(pred, gt, mask=None, delta: float = _PSNR_DELTA) -> float:
    """Per-band PSNR (unit dynamic range) averaged over bands, in dB."""
    if delta <= 0:
        raise ValidationError("PSNR delta must be positive")
    p, g = _flatten(pred, gt, mask)
    mse_b = ((p - g) ** 2).mean(axis=0)
    return float((10.0 * np.log10(1.0 / (mse_b + delta))).mean())


@dataclass(frozen=True)
class ViewMetrics:
    view_id: int
    sam_rad: float
    rmse: float
    ssim: float
    psnr_db: float


@dataclass(frozen=True)
class SpectralMetrics:
    """Mean +/- SD of each metric over the held-out views."""

    sam_mean: float
    sam_sd: float
    rmse_mean: float
    rmse_sd: float
    ssim_mean: float
    ssim_sd: float
    psnr_mean: float
    psnr_sd: float
    n_views: int
    rays_per_view: int
    per_view: tuple = ()


def _mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def evaluate_heldout(
    params: FieldParams,
    dataset: SceneDataset,
    mask_policy: str = "full",
    out_dir=None,
    triplet: BandTriplet | None = None,
    coarse_samples: int = DEFAULT_COARSE_SAMPLES,
    fine_samples: int = DEFAULT_FINE_SAMPLES,
    dataset_name: str = "synthetic",
) -> SpectralMetrics:
    """Render every held-out view and aggregate the four spectral metrics.

    ``mask_policy`` is ``"full"`` (all pixels; matches full-sensor ray
    counts) or ``"foreground"`` (foreground-mask pixels only). With
    ``out_dir`` set, a metrics CSV and side-by-side prediction/target
    composites are written.
    """
    if mask_policy not in ("full", "foreground"):
        raise ValidationError(f"unknown mask policy {mask_policy!r}")
    if not dataset.eval_ids:
        raise ValidationError("dataset has no held-out views")

    rows = []
    images = []
    for vid in dataset.eval_ids:
        view = render_view(
            params,
            dataset.cam,
            dataset.poses[vid],
            dataset.wavelengths,
            background=dataset.background,
            coarse_samples=coarse_samples,
            fine_samples=fine_samples,
        )
        gt = dataset.images[vid].astype(np.float64)
        pred = view.cube.data.astype(np.float64)
        mask = dataset.masks[vid] if mask_policy == "foreground" else None
        rows.append(
            ViewMetrics(
                view_id=vid,
                sam_rad=sam(pred, gt, mask),
                rmse=spectral_rmse(pred, gt, mask),
                ssim=hsi_ssim(pred, gt, mask),
                psnr_db=hsi_psnr(pred, gt, mask),
            )
        )
        if out_dir is not None:
            trip = triplet or _default_triplet(dataset.wavelengths)
            pred_rgb = (band_composite(view.cube, trip) * 255).round().astype(np.uint8)
            gt_rgb = (
                band_composite(dataset.view_cube(vid), trip) * 255
            ).round().astype(np.uint8)
            images.append((vid, side_by_side(gt_rgb, pred_rgb), view))

    sam_m, sam_s = _mean_sd([r.sam_rad for r in rows])
    rmse_m, rmse_s = _mean_sd([r.rmse for r in rows])
    ssim_m, ssim_s = _mean_sd([r.ssim for r in rows])
    psnr_m, psnr_s = _mean_sd([r.psnr_db for r in rows])
    metrics = SpectralMetrics(
        sam_mean=sam_m,
        sam_sd=sam_s,
        rmse_mean=rmse_m,
        rmse_sd=rmse_s,
        ssim_mean=ssim_m,
        ssim_sd=ssim_s,
        psnr_mean=psnr_m,
        psnr_sd=psnr_s,
        n_views=len(rows),
        rays_per_view=dataset.cam.width * dataset.cam.height,
        per_view=tuple(rows),
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(metrics, out_dir / "spectral_metrics.csv", dataset_name=dataset_name)
        for vid, img, view in images:
            write_png(img, out_dir / f"compare_view_{vid:03d}.png")
            float_to_png(view.depth, out_dir / f"depth_view_{vid:03d}.png", normalize=True)
    return metrics


def _default_triplet(wavelengths) -> BandTriplet:
    lo, hi = float(wavelengths[0]), float(wavelengths[-1])
    return BandTriplet(r_nm=lo + 0.8 * (hi - lo), g_nm=lo + 0.5 * (hi - lo), b_nm=lo + 0.2 * (hi - lo))


def write_metrics_csv(metrics: SpectralMetrics, path, dataset_name: str = "synthetic") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "view_id", "sam_rad", "rmse", "ssim", "psnr_db"])
        for row in metrics.per_view:
            writer.writerow(
                [
                    dataset_name,
                    row.view_id,
                    f"{row.sam_rad:.6f}",
                    f"{row.rmse:.6f}",
                    f"{row.ssim:.6f}",
                    f"{row.psnr_db:.5f}",
                ]
            )
        writer.writerow(
            [
                dataset_name,
                "mean+/-sd",
                f"{metrics.sam_mean:.6f}+/-{metrics.sam_sd:.6f}",
                f"{metrics.rmse_mean:.6f}+/-{metrics.rmse_sd:.6f}",
                f"{metrics.ssim_mean:.6f}+/-{metrics.ssim_sd:.6f}",
                f"{metrics.psnr_mean:.5f}+/-{metrics.psnr_sd:.5f}",
            ]
        )
        writer.writerow([dataset_name, "rays_per_view", metrics.rays_per_view, "", "", ""])
