"""Ray sampling and transmittance-weighted compositing of n-channel radiance.

Two-pass sampling: one stratified coarse pass over the ray's AABB span and
one importance pass drawn by inverse CDF over the coarse weight histogram,
merged and sorted. Compositing follows the standard volumetric quadrature
``alpha_i = 1 - exp(-sigma_i * delta_i)`` with weights ``w_i = T_i alpha_i``;
internally the transmittance is computed as ``exp`` of negative partial
sums of ``sigma * delta``, which makes the weights telescope
(``w_i = T_i - T_{i+1}``) so conservation holds exactly and zero density
reproduces the background bit for bit.

Rays that miss the scene bounds get a zero-length span and therefore
composite to pure background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel, Pose, generate_rays
from .cube import CubeKind, HyperCube
from .errors import ValidationError
from .field import FieldParams, query_batch, query_density

DEFAULT_COARSE_SAMPLES = 64
DEFAULT_FINE_SAMPLES = 64
_WEIGHT_FLOOR = 1e-5
_DEPTH_EPS = 1e-8


@dataclass
class RaySamples:
    """Per-ray sample positions along with their integration intervals.

    ``t`` is strictly increasing within [near, far] per ray; ``deltas`` are
    the forward differences with the last interval closed by ``far``;
    ``s`` are the ray-normalized distances in [0, 1].
    """

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3)
    t: np.ndarray  # (R, S)
    deltas: np.ndarray  # (R, S)
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)

    @property
    def s(self) -> np.ndarray:
        span = np.maximum(self.far - self.near, _DEPTH_EPS)[:, None]
        return (self.t - self.near[:, None]) / span

    @property
    def s_deltas(self) -> np.ndarray:
        span = np.maximum(self.far - self.near, _DEPTH_EPS)[:, None]
        return self.deltas / span

    def points(self) -> np.ndarray:
        """World-space sample positions, shape (R, S, 3)."""
        return self.origins[:, None, :] + self.t[..., None] * self.dirs[:, None, :]


@dataclass
class RenderOutput:
    """Composited radiance plus the per-sample quantities losses consume."""

    radiance: np.ndarray  # (R, n)
    weights: np.ndarray  # (R, S)
    accumulation: np.ndarray  # (R,)
    depth: np.ndarray  # (R,)
    trans_after: np.ndarray  # (R, S): transmittance just past each sample


def ray_aabb_span(origins, dirs, aabb, pad: float = 0.05):
    """Entry/exit distances of rays against an AABB, padded by ``pad`` of the
    span; rays that miss collapse to a zero-length span (near == far)."""
    aabb = np.asarray(aabb, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (aabb[0] - origins) * inv
        t_hi = (aabb[1] - origins) * inv
    near = np.nanmax(np.minimum(t_lo, t_hi), axis=-1)
    far = np.nanmin(np.maximum(t_lo, t_hi), axis=-1)
    near = np.maximum(near, 1e-6)
    hit = far > near
    span = far - near
    near = np.where(hit, near - pad * span, 1.0)
    far = np.where(hit, far + pad * span, 1.0)
    return np.maximum(near, 1e-6), far


def sample_stratified(origins, dirs, near, far, n_samples: int, jitter: bool, rng=None) -> RaySamples:
    """One sample per stratum: a uniform draw when jittered, the midpoint otherwise."""
    if n_samples < 2:
        raise ValidationError("stratified sampling needs at least 2 samples")
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if (far < near).any():
        raise ValidationError("invalid ray bounds: far < near")
    r = origins.shape[0]
    edges = np.linspace(0.0, 1.0, n_samples + 1)
    if jitter:
        if rng is None:
            raise ValidationError("jittered sampling requires an rng")
        u = edges[:-1] + rng.random((r, n_samples)) / n_samples
    else:
        u = np.broadcast_to((edges[:-1] + edges[1:]) / 2.0, (r, n_samples)).copy()
    span = (far - near)[:, None]
    t = near[:, None] + u * span
    deltas = np.concatenate([np.diff(t, axis=1), far[:, None] - t[:, -1:]], axis=1)
    return RaySamples(origins=origins, dirs=dirs, t=t, deltas=deltas, near=near, far=far)


def sample_importance(samples: RaySamples, coarse_weights, n_samples: int, rng=None) -> RaySamples:
    """Importance samples by inverse CDF over the coarse weight histogram,
    merged and sorted with the coarse sample positions.

    The histogram bins are the coarse strata; weights are floored at 1e-5
    for coverage, which also serves as the fallback to (near-)stratified
    sampling when every coarse weight is zero.
    """
    w = np.maximum(np.asarray(coarse_weights, dtype=np.float64), _WEIGHT_FLOOR)
    r, s1 = w.shape
    if samples.t.shape != (r, s1):
        raise ValidationError("coarse weights shape does not match samples")
    cdf = np.cumsum(w, axis=1)
    cdf = cdf / cdf[:, -1:]
    cdf = np.concatenate([np.zeros((r, 1)), cdf], axis=1)  # (R, S1+1)

    base = (np.arange(n_samples) / n_samples)[None, :]
    if rng is None:
        u = base + 0.5 / n_samples
        u = np.broadcast_to(u, (r, n_samples)).copy()
    else:
        u = base + rng.random((r, n_samples)) / n_samples

    # Invert the piecewise-linear CDF over the coarse strata. searchsorted
    # has no batched form, so rows are packed onto one axis with an offset
    # of 2 per row (cdf and u both live in [0, 1]).
    offsets = 2.0 * np.arange(r)
    cdf_flat = (cdf + offsets[:, None]).ravel()
    u_flat = (u + offsets[:, None]).ravel()
    idx = (np.searchsorted(cdf_flat, u_flat, side="right") - 1).reshape(r, n_samples)
    idx -= np.arange(r)[:, None] * (s1 + 1)
    idx = np.clip(idx, 0, s1 - 1)
    rows = np.arange(r)[:, None]
    cdf_lo = cdf[rows, idx]
    cdf_hi = cdf[rows, idx + 1]
    frac = (u - cdf_lo) / np.maximum(cdf_hi - cdf_lo, 1e-12)

    span = (samples.far - samples.near)[:, None]
    edges = samples.near[:, None] + span * (np.arange(s1 + 1) / s1)[None, :]
    t_new = edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])

    t_all = np.sort(np.concatenate([samples.t, t_new], axis=1), axis=1)
    deltas = np.concatenate(
        [np.diff(t_all, axis=1), samples.far[:, None] - t_all[:, -1:]], axis=1
    )
    return RaySamples(
        origins=samples.origins,
        dirs=samples.dirs,
        t=t_all,
        deltas=np.maximum(deltas, 0.0),
        near=samples.near,
        far=samples.far,
    )


def compute_weights(deltas, densities):
    """Rendering weights w_i = T_i * (1 - exp(-sigma_i delta_i)), telescoped.

    Returns (weights, trans_after) where ``trans_after[:, i]`` is the
    transmittance just past sample i.
    """
    densities = np.asarray(densities, dtype=np.float64)
    if (densities < 0).any():
        raise ValidationError("negative density passed to compositor")
    a = densities * deltas
    trans = np.exp(-np.cumsum(a, axis=-1))
    trans_full = np.concatenate([np.ones_like(trans[..., :1]), trans], axis=-1)
    weights = trans_full[..., :-1] - trans_full[..., 1:]
    return weights, trans


def composite(samples: RaySamples, densities, radiances, background) -> RenderOutput:
    """Transmittance-weighted compositing over a white (or given) background."""
    radiances = np.asarray(radiances, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    weights, trans = compute_weights(samples.deltas, densities)
    acc = weights.sum(axis=-1)
    color = np.einsum("rs,rsn->rn", weights, radiances)
    color = color + (1.0 - acc)[:, None] * background
    depth = (weights * samples.t).sum(axis=-1) / np.maximum(acc, _DEPTH_EPS)
    return RenderOutput(
        radiance=color, weights=weights, accumulation=acc, depth=depth, trans_after=trans
    )


def composite_backward(
    samples: RaySamples,
    out: RenderOutput,
    radiances,
    background,
    adj_radiance=None,
    adj_weights=None,
):
    """Adjoints of the composite w.r.t. per-sample densities and radiances.

    ``adj_radiance`` is the upstream gradient on the composited pixel
    radiance (R, n); ``adj_weights`` any direct gradient on the rendering
    weights (R, S). Depth is not differentiated (no loss consumes it).
    """
    radiances = np.asarray(radiances, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    r, s = out.weights.shape
    dw = np.zeros((r, s))
    d_radiance = np.zeros_like(radiances)
    if adj_radiance is not None:
        adj_radiance = np.asarray(adj_radiance, dtype=np.float64)
        dw += np.einsum("rn,rsn->rs", adj_radiance, radiances - background[None, None, :])
        d_radiance += out.weights[..., None] * adj_radiance[:, None, :]
    if adj_weights is not None:
        dw += adj_weights

    # d loss / d a_i with a_i = sigma_i delta_i:
    #   dw_i * T_{i+1} - sum_{k>i} dw_k w_k
    dww = dw * out.weights
    suffix = np.cumsum(dww[..., ::-1], axis=-1)[..., ::-1]
    da = dw * out.trans_after - (suffix - dww)
    d_density = da * samples.deltas
    return d_density, d_radiance


@dataclass
class RenderedView:
    """Full-view render: spectral cube plus depth and accumulation maps."""

    cube: HyperCube
    depth: np.ndarray
    accumulation: np.ndarray
    weights: np.ndarray | None = None


def render_rays(
    params: FieldParams,
    origins,
    dirs,
    background,
    coarse_samples: int = DEFAULT_COARSE_SAMPLES,
    fine_samples: int = DEFAULT_FINE_SAMPLES,
    jitter: bool = False,
    rng=None,
):
    """Two-pass render of a ray batch; returns (RenderOutput, fine RaySamples).

    The coarse pass only queries density (its weights steer the importance
    pass and receive no gradient); the fine pass is the full field query.
    """
    near, far = ray_aabb_span(origins, dirs, params.config.aabb_array)
    coarse = sample_stratified(origins, dirs, near, far, coarse_samples, jitter, rng)
    sigma_c = query_density(params, coarse.points().reshape(-1, 3)).reshape(coarse.t.shape)
    w_c, _ = compute_weights(coarse.deltas, sigma_c)
    fine = sample_importance(coarse, w_c, fine_samples, rng if jitter else None)

    pts = fine.points().reshape(-1, 3)
    dirs_rep = np.repeat(fine.dirs, fine.t.shape[1], axis=0)
    batch = query_batch(params, pts, dirs_rep)
    sigma = batch.density.reshape(fine.t.shape)
    rad = batch.radiance.reshape(fine.t.shape + (params.config.n_channels,))
    return composite(fine, sigma, rad, background), fine


def render_view(
    params: FieldParams,
    cam: CameraModel,
    pose: Pose,
    wavelengths,
    background=None,
    coarse_samples: int = DEFAULT_COARSE_SAMPLES,
    fine_samples: int = DEFAULT_FINE_SAMPLES,
    chunk: int = 4096,
    keep_weights: bool = False,
) -> RenderedView:
    """Render a full view in ray chunks; deterministic (jitter disabled)."""
    wavelengths = np.asarray(wavelengths, dtype=np.float64)
    n = params.config.n_channels
    if wavelengths.size != n:
        raise ValidationError(
            f"wavelength grid has {wavelengths.size} bands, field outputs {n}"
        )
    if background is None:
        background = np.ones(n)
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    origins, dirs = generate_rays(cam, pose, pixels)

    total = pixels.shape[0]
    color = np.empty((total, n))
    depth = np.empty(total)
    acc = np.empty(total)
    weights = [] if keep_weights else None
    for start in range(0, total, chunk):
        sl = slice(start, min(start + chunk, total))
        out, _ = render_rays(
            params, origins[sl], dirs[sl], background, coarse_samples, fine_samples
        )
        color[sl] = out.radiance
        depth[sl] = out.depth
        acc[sl] = out.accumulation
        if keep_weights:
            weights.append(out.weights)

    cube = HyperCube(
        data=np.clip(color, 0.0, 1.0).reshape(cam.height, cam.width, n).astype(np.float32),
        wavelengths=wavelengths,
        kind=CubeKind.CALIBRATED,
    )
    return RenderedView(
        cube=cube,
        depth=depth.reshape(cam.height, cam.width),
        accumulation=acc.reshape(cam.height, cam.width),
        weights=np.concatenate(weights, axis=0) if keep_weights else None,
    )
