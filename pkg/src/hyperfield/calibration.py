"""White-reference spectral calibration with automatic central-mask generation.

The calibration pipeline turns a raw radiance cube into reflectance by
band-wise division against a white-reference (WR) spectrum estimated from a
dedicated tarp capture:

1. per-pixel relative deviation map over a coarse WR region of interest,
2. percentile threshold on the deviation, morphological closing/opening,
   and largest-connected-component selection to form the refined WR mask,
3. mean WR spectrum over the refined mask, smoothed along the spectral
   axis with a centered moving average,
4. band-wise normalization of the target cube and clipping to [0, 1].

The percentile threshold defaults to 70: it keeps a spatially contiguous
central region while dropping illumination-unstable edge pixels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cube import CubeKind, HyperCube, Mask
from .errors import EmptyResultError, ValidationError
from .images import mask_to_png

DEFAULT_PERCENTILE = 70.0
DEFAULT_SMOOTH_WINDOW = 5

# 3x3 square structuring element; 8-way connectivity for components.
_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class DeviationMap:
    """Band-averaged relative deviation per pixel of a WR region of interest.

    ``values`` is a full-frame float64 array that is only meaningful where
    ``roi`` is true (zero elsewhere).
    """

    values: np.ndarray
    roi: Mask

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.shape != self.roi.values.shape:
            raise ValidationError("deviation map and ROI shapes differ")
        inside = values[self.roi.values]
        if inside.size and (not np.all(np.isfinite(inside)) or inside.min() < 0):
            raise ValidationError("deviation values must be finite and nonnegative")

    def roi_values(self) -> np.ndarray:
        return self.values[self.roi.values]


@dataclass(frozen=True)
class WrCalibration:
    """Refined WR mask plus the mean and smoothed reference spectra."""

    mask: Mask
    mean_spectrum: np.ndarray
    smoothed_spectrum: np.ndarray
    percentile_p: float
    pixel_count: int

    def __post_init__(self):
        mean = np.asarray(self.mean_spectrum, dtype=np.float64)
        smoothed = np.asarray(self.smoothed_spectrum, dtype=np.float64)
        object.__setattr__(self, "mean_spectrum", mean)
        object.__setattr__(self, "smoothed_spectrum", smoothed)
        if smoothed.min() <= 0:
            raise ValidationError("smoothed WR spectrum must be strictly positive")
        if self.pixel_count <= 0 or self.pixel_count != self.mask.count:
            raise ValidationError("pixel_count must equal the number of mask pixels (> 0)")


def deviation_map(wr_cube: HyperCube, coarse_roi: Mask) -> DeviationMap:
    """Per-pixel relative deviation from the preliminary mean WR spectrum.

    For each ROI pixel the absolute relative difference to the ROI-mean
    spectrum is averaged over bands. The preliminary mean is computed over
    the coarse ROI in a single pass and must be strictly positive per band.
    """
    if not coarse_roi.matches(wr_cube):
        raise ValidationError("coarse ROI shape does not match WR cube")
    if coarse_roi.count == 0:
        raise EmptyResultError("coarse WR ROI is empty")
    pixels = wr_cube.data[coarse_roi.values].astype(np.float64)  # (N, L)
    mu = pixels.mean(axis=0)
    if mu.min() <= 0:
        raise ValidationError("preliminary mean WR spectrum has a nonpositive band")
    dev = np.abs(pixels - mu) / mu
    values = np.zeros(coarse_roi.values.shape, dtype=np.float64)
    values[coarse_roi.values] = dev.mean(axis=1)
    return DeviationMap(values=values, roi=coarse_roi)


def deviation_threshold(dev: DeviationMap, p: float) -> float:
    """Percentile threshold (linear interpolation between order statistics)."""
    if not 0 < p < 100:
        raise ValidationError(f"percentile must be in (0, 100), got {p}")
    return float(np.percentile(dev.roi_values(), p))


def threshold_mask(dev: DeviationMap, p: float) -> Mask:
    """Pixels whose deviation is at or below the p-th percentile (pre-morphology)."""
    thr = deviation_threshold(dev, p)
    return Mask(values=dev.roi.values & (dev.values <= thr))


def _dilate(mask: np.ndarray) -> np.ndarray:
    # Outside the frame counts as background.
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys, yd = max(0, dy), max(0, -dy)
            xs, xd = max(0, dx), max(0, -dx)
            out[yd : h - ys, xd : w - xs] |= mask[ys : h - yd, xs : w - xd]
    return out


def _erode(mask: np.ndarray) -> np.ndarray:
    # Outside the frame counts as foreground, so shapes touching the image
    # boundary are not shaved by the border itself.
    out = np.ones_like(mask)
    h, w = mask.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys, yd = max(0, dy), max(0, -dy)
            xs, xd = max(0, dx), max(0, -dx)
            out[yd : h - ys, xd : w - xs] &= mask[ys : h - yd, xs : w - xd]
    return out


def _closing(mask: np.ndarray) -> np.ndarray:
    return _erode(_dilate(mask))


def _opening(mask: np.ndarray) -> np.ndarray:
    return _dilate(_erode(mask))


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 8-connected component of a boolean image."""
    labels, n = ndimage.label(mask, structure=_STRUCTURE)
    if n == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def refine_mask(dev: DeviationMap, p: float = DEFAULT_PERCENTILE) -> Mask:
    """Refined WR mask: percentile threshold, 3x3 closing then opening,
    largest 8-connected component.

    Raises :class:`EmptyResultError` if nothing survives the filtering.
    """
    retained = threshold_mask(dev, p).values
    filtered = largest_component(_opening(_closing(retained)))
    # The morphology may grow past the ROI boundary by one pixel; clamp.
    filtered &= dev.roi.values
    if not filtered.any():
        raise EmptyResultError(f"refined WR mask is empty at p={p}")
    return Mask(values=filtered)


def wr_mean(wr_cube: HyperCube, mask: Mask) -> np.ndarray:
    """Mean WR spectrum over the refined mask."""
    if not mask.matches(wr_cube):
        raise ValidationError("mask shape does not match WR cube")
    if mask.count == 0:
        raise EmptyResultError("WR mask is empty")
    return wr_cube.data[mask.values].astype(np.float64).mean(axis=0)


def smooth_spectrum(mu: np.ndarray, window: int = DEFAULT_SMOOTH_WINDOW) -> np.ndarray:
    """Centered moving average along the spectral axis.

    Boundaries are reflected symmetrically (edge value included), so a
    constant spectrum is unchanged for any window; ``window=1`` is the
    identity.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"smoothing window must be odd and >= 1, got {window}")
    if window > mu.size:
        raise ValidationError(f"smoothing window {window} exceeds band count {mu.size}")
    if window == 1:
        return mu.copy()
    half = window // 2
    padded = np.pad(mu, half, mode="symmetric")
    kernel = np.full(window, 1.0 / window)
    return np.convolve(padded, kernel, mode="valid")


def build_calibration(
    wr_cube: HyperCube,
    coarse_roi: Mask,
    percentile: float = DEFAULT_PERCENTILE,
    window: int = DEFAULT_SMOOTH_WINDOW,
) -> WrCalibration:
    """Run the mask-generation and spectrum-estimation steps end to end."""
    dev = deviation_map(wr_cube, coarse_roi)
    mask = refine_mask(dev, percentile)
    mu = wr_mean(wr_cube, mask)
    smoothed = smooth_spectrum(mu, window)
    if smoothed.min() <= 0:
        raise ValidationError("smoothed WR spectrum has a nonpositive band")
    return WrCalibration(
        mask=mask,
        mean_spectrum=mu,
        smoothed_spectrum=smoothed,
        percentile_p=float(percentile),
        pixel_count=mask.count,
    )


def calibrate(cube: HyperCube, calib: WrCalibration) -> HyperCube:
    """Band-wise normalization by the smoothed WR spectrum, clipped to [0, 1]."""
    if cube.kind is not CubeKind.RAW:
        raise ValidationError("calibrate expects a raw cube")
    ref = calib.smoothed_spectrum
    if ref.shape[0] != cube.bands:
        raise ValidationError(
            f"reference has {ref.shape[0]} bands but cube has {cube.bands}"
        )
    if ref.min() <= 0:
        raise ValidationError("reference spectrum has a nonpositive band")
    out = np.clip(cube.data.astype(np.float64) / ref, 0.0, 1.0)
    return HyperCube(data=out.astype(np.float32), wavelengths=cube.wavelengths,
                     kind=CubeKind.CALIBRATED)


@dataclass(frozen=True)
class SweepRow:
    """Mask statistics for one percentile threshold."""

    percentile: float
    pixel_count: int
    median_dev: float
    p95_dev: float
    max_dev: float


def percentile_sweep(
    wr_cube: HyperCube,
    coarse_roi: Mask,
    ps,
    out_dir=None,
) -> list[SweepRow]:
    """Evaluate the refined mask at several percentile thresholds.

    For each p the row records the mask pixel count and the median, 95th
    percentile, and maximum deviation inside the mask. When ``out_dir`` is
    given, a CSV and one mask PNG per percentile are written there.
    """
    ps = list(ps)
    if not ps:
        raise ValidationError("percentile sweep needs at least one percentile")
    dev = deviation_map(wr_cube, coarse_roi)
    rows = []
    masks = []
    for p in ps:
        mask = refine_mask(dev, p)
        inside = dev.values[mask.values]
        rows.append(
            SweepRow(
                percentile=float(p),
                pixel_count=mask.count,
                median_dev=float(np.median(inside)),
                p95_dev=float(np.percentile(inside, 95)),
                max_dev=float(inside.max()),
            )
        )
        masks.append(mask)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "wr_sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["p", "pixel_count", "median_D", "p95_D", "max_D"])
            for row in rows:
                writer.writerow(
                    [
                        repr(row.percentile),
                        row.pixel_count,
                        repr(row.median_dev),
                        repr(row.p95_dev),
                        repr(row.max_dev),
                    ]
                )
        for row, mask in zip(rows, masks):
            mask_to_png(mask, out_dir / f"wr_mask_p{row.percentile:g}.png")
    return rows
