"""Composite training objective: spectral MSE, cosine angular loss,
distortion, orientation, and predicted-normal terms.

Every term is implemented twice over the same core: a plain scalar entry
point, and a ``*_grad`` variant that also returns the adjoints the trainer
feeds back through the compositor and the field. The proposal-loss weight
from the upstream pipeline is kept in the config for compatibility but is
inert here (there is no proposal network); the trainer warns once at
startup.

Gradients are exact with respect to every input the loss touches,
including the derived normals (which carry second-order density terms) and
the rendering weights. Sample positions are treated as constants: the
two-pass sampler is part of the stochastic data path, like minibatch
selection, so no gradient flows through ``t`` values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

_COS_EPS = 1e-8
_MEAN_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the composite objective; all must be nonnegative."""

    hsi: float = 0.75
    ang: float = 0.25
    dist: float = 0.002
    ori: float = 1e-4
    pn: float = 1e-3
    prop: float = 1.0  # retained for config compatibility; no proposal network

    def __post_init__(self):
        for name in ("hsi", "ang", "dist", "ori", "pn", "prop"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be nonnegative")


@dataclass(frozen=True)
class LossReport:
    """Per-term values and the weighted total for one batch."""

    hsi: float
    ang: float
    dist: float
    ori: float
    pn: float
    total: float
    batch_size: int
    mask_coverage: float = 1.0

    def as_row(self, step: int) -> list:
        return [step, self.hsi, self.ang, self.dist, self.ori, self.pn, self.total]


def _apply_mask(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValidationError("prediction/target shape mismatch")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pred, target = pred[mask], target[mask]
    if pred.shape[0] == 0:
        raise ValidationError("empty pixel set in loss")
    return pred, target, mask


# --------------------------------------------------------------------------
# Spectral data terms
# --------------------------------------------------------------------------


def loss_hsi_grad(pred, target, mask=None):
    """Spectral MSE: channel sums averaged over pixels. Returns (value, d_pred)."""
    p, t, m = _apply_mask(pred, target, mask)
    diff = p - t
    value = float((diff**2).sum(axis=-1).mean())
    grad_rows = 2.0 * diff / p.shape[0]
    if m is None:
        return value, grad_rows
    grad = np.zeros_like(np.asarray(pred, dtype=np.float64))
    grad[m] = grad_rows
    return value, grad


def loss_hsi(pred, target, mask=None) -> float:
    return loss_hsi_grad(pred, target, mask)[0]


def loss_angular_grad(pred, target, mask=None, eps: float = _COS_EPS):
    """Cosine spectral-shape loss: mean of (1 - cos angle). Returns (value, d_pred)."""
    if eps <= 0:
        raise ValidationError("cosine epsilon must be positive")
    p, t, m = _apply_mask(pred, target, mask)
    dot = np.sum(p * t, axis=-1)
    pn = np.linalg.norm(p, axis=-1)
    tn = np.linalg.norm(t, axis=-1)
    denom = pn * tn + eps
    cos = dot / denom
    value = float((1.0 - cos).mean())
    # d(1-cos)/dp = -(t/denom - dot * tn * p/pn / denom^2)
    safe_pn = np.maximum(pn, 1e-300)
    grad_rows = -(t / denom[:, None] - (dot * tn / (denom**2 * safe_pn))[:, None] * p)
    grad_rows /= p.shape[0]
    if m is None:
        return value, grad_rows
    grad = np.zeros_like(np.asarray(pred, dtype=np.float64))
    grad[m] = grad_rows
    return value, grad


def loss_angular(pred, target, mask=None, eps: float = _COS_EPS) -> float:
    return loss_angular_grad(pred, target, mask, eps)[0]


# --------------------------------------------------------------------------
# Ray regularizers
# --------------------------------------------------------------------------


def loss_distortion_grad(s_mid, s_deltas, weights):
    """Interlevel distortion on normalized ray distances; ray-averaged.

    ``s_mid`` are interval midpoints in [0, 1], ``s_deltas`` the normalized
    interval widths, ``weights`` the rendering weights. Uses the sorted
    prefix-sum form of the pairwise term, O(S) per ray.
    Returns (value, d_weights).
    """
    s_mid = np.asarray(s_mid, dtype=np.float64)
    ds = np.asarray(s_deltas, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    r = w.shape[0]
    # Per-sample cross sums X_i = sum_j w_j |m_i - m_j| via prefix sums
    # (midpoints are ascending along each ray).
    pw = np.cumsum(w, axis=1)
    qw = np.cumsum(w * s_mid, axis=1)
    w_tot = pw[:, -1:]
    q_tot = qw[:, -1:]
    cross = s_mid * (2.0 * pw - w_tot) + q_tot - 2.0 * qw
    pair = (w * cross).sum(axis=1)
    self_term = ((w**2) * ds).sum(axis=1) / 3.0
    value = float((pair + self_term).mean())
    d_w = (2.0 * cross + (2.0 / 3.0) * w * ds) / r
    return value, d_w


def loss_distortion(s_mid, s_deltas, weights) -> float:
    return loss_distortion_grad(s_mid, s_deltas, weights)[0]


def loss_orientation_grad(normals, valid, view_dirs, weights):
    """Back-facing penalty: weighted mean of (1 - <n, v>^2) over valid samples.

    ``normals`` (R, S, 3) are derived normals with their ``valid`` flags,
    ``view_dirs`` (R, 3) unit directions, ``weights`` (R, S) rendering
    weights. Degenerate normals contribute nothing.
    Returns (value, d_normals, d_weights).
    """
    n = np.asarray(normals, dtype=np.float64)
    v = np.asarray(view_dirs, dtype=np.float64)[:, None, :]
    w = np.asarray(weights, dtype=np.float64) * np.asarray(valid, dtype=np.float64)
    dot = np.sum(n * v, axis=-1)
    y = 1.0 - dot**2
    w_sum = w.sum() + _MEAN_EPS
    value = float((w * y).sum() / w_sum)
    d_w = np.asarray(valid, dtype=np.float64) * (y - value) / w_sum
    d_n = (w * (-2.0 * dot))[..., None] * v / w_sum
    return value, d_n, d_w


def loss_orientation(normals, valid, view_dirs, weights) -> float:
    return loss_orientation_grad(normals, valid, view_dirs, weights)[0]


def loss_predicted_normal_grad(pred_normals, derived_normals, valid, weights):
    """Normal-consistency term: mean over rays of sum_j w_j (1 - <n_hat, n_tilde>).

    Returns (value, d_pred_normals, d_derived_normals, d_weights).
    """
    pn = np.asarray(pred_normals, dtype=np.float64)
    dn = np.asarray(derived_normals, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64) * np.asarray(valid, dtype=np.float64)
    r = w.shape[0]
    dot = np.sum(pn * dn, axis=-1)
    value = float((w * (1.0 - dot)).sum(axis=1).mean())
    d_w = np.asarray(valid, dtype=np.float64) * (1.0 - dot) / r
    d_pn = -(w[..., None] * dn) / r
    d_dn = -(w[..., None] * pn) / r
    return value, d_pn, d_dn, d_w


def loss_predicted_normal(pred_normals, derived_normals, valid, weights) -> float:
    return loss_predicted_normal_grad(pred_normals, derived_normals, valid, weights)[0]


# --------------------------------------------------------------------------
# Weighted composite
# --------------------------------------------------------------------------


@dataclass
class LossInputs:
    """Everything the composite objective consumes for one ray batch."""

    pred: np.ndarray  # (R, n) composited pixel spectra
    target: np.ndarray  # (R, n)
    weights: np.ndarray  # (R, S) rendering weights
    s_mid: np.ndarray  # (R, S) normalized interval midpoints
    s_deltas: np.ndarray  # (R, S)
    derived_normals: np.ndarray | None = None  # (R, S, 3)
    normals_valid: np.ndarray | None = None  # (R, S) bool
    pred_normals: np.ndarray | None = None  # (R, S, 3)
    view_dirs: np.ndarray | None = None  # (R, 3)


@dataclass
class LossAdjoints:
    """Upstream gradients for the compositor/field backward passes."""

    d_pred: np.ndarray
    d_weights: np.ndarray
    d_derived_normals: np.ndarray | None = None
    d_pred_normals: np.ndarray | None = None


def composite_loss_grad(inputs: LossInputs, weights: LossWeights):
    """Weighted sum of all active terms. Returns (LossReport, LossAdjoints)."""
    v_hsi, d_pred_hsi = loss_hsi_grad(inputs.pred, inputs.target)
    v_ang, d_pred_ang = loss_angular_grad(inputs.pred, inputs.target)
    v_dist, d_w_dist = loss_distortion_grad(inputs.s_mid, inputs.s_deltas, inputs.weights)

    d_pred = weights.hsi * d_pred_hsi + weights.ang * d_pred_ang
    d_w = weights.dist * d_w_dist

    v_ori = v_pn = 0.0
    d_dn = d_pn = None
    has_normals = inputs.derived_normals is not None
    if has_normals:
        v_ori, d_n_ori, d_w_ori = loss_orientation_grad(
            inputs.derived_normals, inputs.normals_valid, inputs.view_dirs, inputs.weights
        )
        v_pn, d_pn, d_dn_pn, d_w_pn = loss_predicted_normal_grad(
            inputs.pred_normals, inputs.derived_normals, inputs.normals_valid, inputs.weights
        )
        d_dn = weights.ori * d_n_ori + weights.pn * d_dn_pn
        d_pn = weights.pn * d_pn
        d_w = d_w + weights.ori * d_w_ori + weights.pn * d_w_pn

    total = (
        weights.hsi * v_hsi
        + weights.ang * v_ang
        + weights.dist * v_dist
        + weights.ori * v_ori
        + weights.pn * v_pn
    )
    report = LossReport(
        hsi=v_hsi,
        ang=v_ang,
        dist=v_dist,
        ori=v_ori,
        pn=v_pn,
        total=float(total),
        batch_size=inputs.pred.shape[0],
    )
    return report, LossAdjoints(
        d_pred=d_pred, d_weights=d_w, d_derived_normals=d_dn, d_pred_normals=d_pn
    )


def composite_loss(inputs: LossInputs, weights: LossWeights) -> LossReport:
    return composite_loss_grad(inputs, weights)[0]
