"""Spatial validation of reconstructed point clouds.

Precision is the fraction of reconstructed points within a distance
threshold of the reference cloud, recall the symmetric fraction of
reference points, F their harmonic mean. Clouds are rigidly aligned first
by point-to-point ICP (closed-form SVD fit per iteration, optional
deterministic subsampling above a size limit). F-scores are kept in [0, 1]
internally and reported on a 0-100 scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryError, ValidationError
from .pointcloud import PointCloud, nearest_neighbors
from .plotting import line_plot

ICP_DEFAULT_MAX_ITERS = 50
ICP_DEFAULT_TOL = 1e-8
ICP_SUBSAMPLE_LIMIT = 50_000


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or np.linalg.det(rot) < 0:
            raise ValidationError("rigid transform rotation must be orthonormal, det +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )


def precision_recall(sc: PointCloud, gt: PointCloud, eps: float):
    """(precision, recall, fscore) at threshold ``eps``; all in [0, 1]."""
    if eps < 0:
        raise ValidationError("distance threshold must be nonnegative")
    d_sc = nearest_neighbors(sc, gt)[1]
    d_gt = nearest_neighbors(gt, sc)[1]
    precision = float((d_sc <= eps).mean())
    recall = float((d_gt <= eps).mean())
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f


def _rigid_fit(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Closed-form least-squares rigid fit via cross-covariance SVD."""
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation=rot, translation=ct - rot @ cs)


def _check_nondegenerate(points: np.ndarray, name: str) -> None:
    if points.shape[0] < 3:
        raise GeometryError(f"{name} cloud needs at least 3 points for ICP")
    centered = points - points.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] <= 1e-12 * max(svals[0], 1.0):
        raise GeometryError(f"{name} cloud is collinear; rigid fit is rank-deficient")


def icp_align(
    source: PointCloud,
    target: PointCloud,
    max_iters: int = ICP_DEFAULT_MAX_ITERS,
    tol: float = ICP_DEFAULT_TOL,
    subsample: int = ICP_SUBSAMPLE_LIMIT,
    seed: int = 0,
):
    """Point-to-point ICP; returns (transform mapping source onto target, rms).

    Iterates nearest-neighbor correspondence and the closed-form rigid fit,
    stopping when the RMS improvement falls below ``tol``. Clouds larger
    than ``subsample`` are deterministically subsampled for correspondence
    search.
    """
    src_pts = source.points
    tgt_pts = target.points
    rng = np.random.default_rng(seed)
    if subsample and len(src_pts) > subsample:
        src_pts = src_pts[rng.choice(len(src_pts), subsample, replace=False)]
    if subsample and len(tgt_pts) > subsample:
        tgt_pts = tgt_pts[rng.choice(len(tgt_pts), subsample, replace=False)]
    _check_nondegenerate(src_pts, "source")
    _check_nondegenerate(tgt_pts, "target")

    tgt_cloud = PointCloud(points=tgt_pts)
    transform = RigidTransform.identity()
    prev_rms = np.inf
    rms = np.inf
    for _ in range(max_iters):
        moved = transform.apply(src_pts)
        idx, dist = nearest_neighbors(PointCloud(points=moved), tgt_cloud)
        rms = float(np.sqrt((dist**2).mean()))
        if abs(prev_rms - rms) < tol:
            break
        prev_rms = rms
        transform = _rigid_fit(src_pts, tgt_pts[idx])
    return transform, rms


@dataclass(frozen=True)
class PrCurve:
    """Precision/recall/F as functions of the distance threshold."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    fscore: np.ndarray
    best_eps: float
    best_f: float

    @property
    def best_f_percent(self) -> float:
        return 100.0 * self.best_f


def pr_sweep(
    sc: PointCloud,
    gt: PointCloud,
    eps_grid,
    align: bool = True,
    out_dir=None,
    seed: int = 0,
) -> PrCurve:
    """ICP-align (optional), then evaluate P/R/F over a threshold grid.

    The best threshold maximizes F; ties break toward the smaller epsilon.
    When ``out_dir`` is given, writes ``pr_curve.csv`` and ``pr_curve.png``
    with a dashed marker at the best threshold. ``seed`` controls the ICP
    subsampling draw for oversized clouds.
    """
    eps_grid = np.asarray(sorted(eps_grid), dtype=np.float64)
    if eps_grid.size == 0:
        raise ValidationError("threshold grid is empty")
    aligned = sc
    if align:
        transform, _ = icp_align(sc, gt, seed=seed)
        aligned = PointCloud(
            points=transform.apply(sc.points), spectra=sc.spectra, wavelengths=sc.wavelengths
        )

    d_sc = nearest_neighbors(aligned, gt)[1]
    d_gt = nearest_neighbors(gt, aligned)[1]
    precision = np.array([(d_sc <= e).mean() for e in eps_grid])
    recall = np.array([(d_gt <= e).mean() for e in eps_grid])
    with np.errstate(invalid="ignore"):
        fscore = np.where(
            precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0
        )
    best_idx = int(np.argmax(fscore))  # argmax takes the first (smallest eps) maximum
    curve = PrCurve(
        thresholds=eps_grid,
        precision=precision,
        recall=recall,
        fscore=fscore,
        best_eps=float(eps_grid[best_idx]),
        best_f=float(fscore[best_idx]),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_pr_csv(curve, out_dir / "pr_curve.csv")
        line_plot(
            eps_grid,
            {"precision": precision, "recall": recall, "fscore": fscore},
            out_dir / "pr_curve.png",
            xlabel="epsilon_m",
            vline=curve.best_eps,
        )
    return curve


def write_pr_csv(curve: PrCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon_m", "precision", "recall", "fscore"])
        for eps, p, r, f in zip(curve.thresholds, curve.precision, curve.recall, curve.fscore):
            writer.writerow([repr(float(eps)), repr(float(p)), repr(float(r)), repr(float(f))])
