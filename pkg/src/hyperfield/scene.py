"""Analytic synthetic hyperspectral scenes and the turntable pose ring.

A scene is a handful of spheres/boxes, each carrying a smooth spectral
reflectance curve, in front of a white diffuse background. Rendering is
exact ray-primitive intersection with flat reflectance (the diffuse-chamber
idealization: calibrated reflectance is approximately view-independent), so
rendered cubes double as ground truth for training data, metric validation,
and acceptance tests. The pose ring encodes the turntable equivalence: an
object rotating before a fixed camera is the same as a camera orbiting a
fixed object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import (
    CameraModel,
    Pose,
    generate_rays,
    look_at_pose,
    write_intrinsics,
    write_poses,
)
from .cube import CubeKind, HyperCube, Mask, write_cube
from .errors import ValidationError
from .images import mask_to_png


@dataclass(frozen=True)
class GaussianPeaksSpectrum:
    """Reflectance curve: baseline plus Gaussian peaks, clipped to [0, 1].

    Each peak is an (amplitude, center_nm, width_nm) triple.
    """

    baseline: float = 0.2
    peaks: tuple = ()

    def __call__(self, wavelengths) -> np.ndarray:
        wl = np.asarray(wavelengths, dtype=np.float64)
        out = np.full_like(wl, self.baseline)
        for amp, center, width in self.peaks:
            out = out + amp * np.exp(-0.5 * ((wl - center) / width) ** 2)
        return np.clip(out, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "peaks": [list(p) for p in self.peaks]}

    @classmethod
    def from_dict(cls, d) -> "GaussianPeaksSpectrum":
        return cls(baseline=d["baseline"], peaks=tuple(tuple(p) for p in d["peaks"]))


@dataclass(frozen=True)
class SpherePrimitive:
    center: np.ndarray
    radius: float
    spectrum: GaussianPeaksSpectrum

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if self.radius <= 0:
            raise ValidationError("sphere radius must be positive")

    def intersect(self, origins, dirs):
        """Smallest positive hit distance per ray (inf if missed)."""
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sqrt_disc
        t1 = -b + sqrt_disc
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where(hit & (t > 1e-9), t, np.inf)

    def signed_distance(self, points):
        return np.linalg.norm(points - self.center, axis=-1) - self.radius

    def surface_area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def sample_surface(self, n, rng):
        normals = rng.normal(size=(n, 3))
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        return self.center + self.radius * normals

    def to_dict(self) -> dict:
        return {
            "type": "sphere",
            "center": list(map(float, self.center)),
            "radius": float(self.radius),
            "spectrum": self.spectrum.to_dict(),
        }


@dataclass(frozen=True)
class BoxPrimitive:
    center: np.ndarray
    size: np.ndarray  # full edge lengths
    spectrum: GaussianPeaksSpectrum

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64))
        if (self.size <= 0).any():
            raise ValidationError("box edge lengths must be positive")

    def intersect(self, origins, dirs):
        half = self.size / 2.0
        lo, hi = self.center - half, self.center + half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (lo - origins) * inv
            t_hi = (hi - origins) * inv
        t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=-1)
        t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=-1)
        hit = (t_far >= t_near) & (t_far > 1e-9)
        t = np.where(t_near > 1e-9, t_near, t_far)
        return np.where(hit, t, np.inf)

    def signed_distance(self, points):
        q = np.abs(points - self.center) - self.size / 2.0
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def surface_area(self) -> float:
        a, b, c = self.size
        return 2.0 * (a * b + b * c + a * c)

    def sample_surface(self, n, rng):
        a, b, c = self.size
        areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        faces = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 3)) * self.size
        pts = u.copy()
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 0.5, -0.5)
        pts[np.arange(n), axis] = sign * self.size[axis]
        return self.center + pts

    def to_dict(self) -> dict:
        return {
            "type": "box",
            "center": list(map(float, self.center)),
            "size": list(map(float, self.size)),
            "spectrum": self.spectrum.to_dict(),
        }


def _primitive_from_dict(d):
    spectrum = GaussianPeaksSpectrum.from_dict(d["spectrum"])
    if d["type"] == "sphere":
        return SpherePrimitive(center=d["center"], radius=d["radius"], spectrum=spectrum)
    if d["type"] == "box":
        return BoxPrimitive(center=d["center"], size=d["size"], spectrum=spectrum)
    raise ValidationError(f"unknown primitive type {d['type']!r}")


@dataclass(frozen=True)
class AnalyticScene:
    """Primitive list + background spectrum + axis-aligned bounds (meters)."""

    primitives: tuple
    aabb: np.ndarray  # (2, 3): min corner, max corner
    background: GaussianPeaksSpectrum = field(
        default_factory=lambda: GaussianPeaksSpectrum(baseline=1.0)
    )

    def __post_init__(self):
        aabb = np.asarray(self.aabb, dtype=np.float64)
        object.__setattr__(self, "aabb", aabb)
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if aabb.shape != (2, 3) or (aabb[1] <= aabb[0]).any():
            raise ValidationError("aabb must be (2, 3) with max strictly above min")
        for prim in self.primitives:
            lo = prim.center - getattr(prim, "radius", 0.0)
            hi = prim.center + getattr(prim, "radius", 0.0)
            if hasattr(prim, "size"):
                lo, hi = prim.center - prim.size / 2, prim.center + prim.size / 2
            if (lo < aabb[0]).any() or (hi > aabb[1]).any():
                raise ValidationError("primitive extends outside the scene aabb")

    def background_spectrum(self, wavelengths) -> np.ndarray:
        return self.background(wavelengths)

    def signed_distance(self, points) -> np.ndarray:
        """Distance to the union of primitives; negative inside."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dists = np.stack([p.signed_distance(points) for p in self.primitives], axis=0)
        return dists.min(axis=0)

    def sample_surface(self, n: int, rng) -> np.ndarray:
        """Uniform sample of the union boundary (area-weighted, rejection-filtered)."""
        areas = np.array([p.surface_area() for p in self.primitives])
        out = []
        remaining = n
        while remaining > 0:
            draw = max(remaining * 2, 64)
            counts = rng.multinomial(draw, areas / areas.sum())
            batch = []
            for prim, count in zip(self.primitives, counts):
                if count == 0:
                    continue
                pts = prim.sample_surface(count, rng)
                # Keep only points on the union boundary.
                keep = np.ones(len(pts), dtype=bool)
                for other in self.primitives:
                    if other is prim:
                        continue
                    keep &= other.signed_distance(pts) > 0
                batch.append(pts[keep])
            batch = np.concatenate(batch, axis=0) if batch else np.empty((0, 3))
            out.append(batch)
            remaining -= len(batch)
        return np.concatenate(out, axis=0)[:n]

    def to_dict(self) -> dict:
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "aabb": [list(map(float, corner)) for corner in self.aabb],
            "background": self.background.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "AnalyticScene":
        return cls(
            primitives=tuple(_primitive_from_dict(p) for p in d["primitives"]),
            aabb=np.asarray(d["aabb"], dtype=np.float64),
            background=GaussianPeaksSpectrum.from_dict(d["background"]),
        )


def default_scene() -> AnalyticScene:
    """Desk-scale apple-with-blemish stand-in: a 5 cm sphere plus a small
    NIR-bright cap poking through its surface."""
    body = SpherePrimitive(
        center=(0.0, 0.0, 0.0),
        radius=0.05,
        spectrum=GaussianPeaksSpectrum(
            baseline=0.15, peaks=((0.55, 660.0, 70.0), (0.2, 460.0, 40.0))
        ),
    )
    blemish = SpherePrimitive(
        center=(0.035, 0.02, 0.012),
        radius=0.022,
        spectrum=GaussianPeaksSpectrum(baseline=0.1, peaks=((0.6, 860.0, 90.0),)),
    )
    return AnalyticScene(
        primitives=(body, blemish),
        aabb=np.array([[-0.08, -0.08, -0.08], [0.08, 0.08, 0.08]]),
    )


def default_wavelengths(bands: int = 8, lo: float = 400.0, hi: float = 1000.0) -> np.ndarray:
    return np.linspace(lo, hi, bands)


@dataclass(frozen=True)
class TurntableConfig:
    """Ring of equivalent camera poses induced by a rotating turntable."""

    n_views: int
    radius: float
    elevation: float
    look_at: np.ndarray
    intrinsics: CameraModel

    def __post_init__(self):
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=np.float64))
        if self.n_views < 2:
            raise ValidationError("a pose ring needs at least 2 views")
        if self.radius <= 0:
            raise ValidationError("turntable radius must be positive")


def pose_ring(cfg: TurntableConfig) -> list[Pose]:
    """Camera-to-world poses equally spaced in azimuth, all looking at the target."""
    poses = []
    for k in range(cfg.n_views):
        azimuth = 2.0 * np.pi * k / cfg.n_views
        offset = cfg.radius * np.array(
            [
                np.cos(cfg.elevation) * np.cos(azimuth),
                np.cos(cfg.elevation) * np.sin(azimuth),
                np.sin(cfg.elevation),
            ]
        )
        poses.append(look_at_pose(cfg.look_at + offset, cfg.look_at))
    return poses


@dataclass(frozen=True)
class AnalyticView:
    """Exact render of one view: spectra plus per-pixel depth and foreground."""

    cube: HyperCube
    depth: np.ndarray
    mask: Mask


def _first_hit(scene: AnalyticScene, origins, dirs):
    n_rays = origins.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_idx = np.full(n_rays, -1, dtype=np.int64)
    for idx, prim in enumerate(scene.primitives):
        t = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, idx, best_idx)
    return best_t, best_idx


def render_analytic(
    scene: AnalyticScene, pose: Pose, cam: CameraModel, wavelengths, supersample: int = 1
) -> AnalyticView:
    """Exact first-hit render: each pixel takes the reflectance spectrum of
    the nearest primitive, or the background spectrum when no primitive is
    hit.

    ``supersample`` > 1 averages an s x s subpixel ray grid per pixel,
    modeling a sensor that integrates over its pixel footprint (silhouettes
    become coverage fractions instead of hard point samples). Depth and the
    foreground mask always come from the pixel-center ray.
    """
    if supersample < 1:
        raise ValidationError("supersample factor must be >= 1")
    wavelengths = np.asarray(wavelengths, dtype=np.float64)
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)

    spectra = np.empty((len(scene.primitives) + 1, wavelengths.size))
    spectra[-1] = scene.background_spectrum(wavelengths)
    for idx, prim in enumerate(scene.primitives):
        spectra[idx] = prim.spectrum(wavelengths)

    # center pass defines depth and the foreground mask
    origins, dirs = generate_rays(cam, pose, pixels)
    center_t, center_idx = _first_hit(scene, origins, dirs)

    if supersample == 1:
        data = spectra[center_idx]
    else:
        offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
        data = np.zeros((pixels.shape[0], wavelengths.size))
        for dy in offsets:
            for dx in offsets:
                o, d = generate_rays(cam, pose, pixels + np.array([dx, dy]))
                _, idx = _first_hit(scene, o, d)
                data += spectra[idx]
        data /= supersample**2

    depth = center_t.reshape(cam.height, cam.width)
    mask = Mask(values=np.isfinite(depth))
    cube = HyperCube(
        data=data.reshape(cam.height, cam.width, -1).astype(np.float32),
        wavelengths=wavelengths,
        kind=CubeKind.CALIBRATED,
    )
    return AnalyticView(cube=cube, depth=depth, mask=mask)


def emit_dataset(
    scene: AnalyticScene,
    cfg: TurntableConfig,
    out_dir,
    wavelengths=None,
    seed: int = 0,
    noise_std: float = 0.0,
    train_frac: float = 0.9,
    supersample: int = 1,
) -> Path:
    """Write per-view BIL cubes, foreground mask PNGs, pose and intrinsics
    files, the train/eval split, and a dataset manifest. Deterministic for a
    fixed seed."""
    if not 0 < train_frac <= 1:
        raise ValidationError("train fraction must be in (0, 1]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if wavelengths is None:
        wavelengths = default_wavelengths()
    wavelengths = np.asarray(wavelengths, dtype=np.float64)
    rng = np.random.default_rng(seed)
    poses = pose_ring(cfg)

    for k, pose in enumerate(poses):
        view = render_analytic(scene, pose, cfg.intrinsics, wavelengths, supersample=supersample)
        data = view.cube.data
        if noise_std > 0:
            noisy = data + rng.normal(0.0, noise_std, size=data.shape)
            data = np.clip(noisy, 0.0, 1.0).astype(np.float32)
        cube = HyperCube(data=data, wavelengths=wavelengths, kind=CubeKind.CALIBRATED)
        write_cube(cube, out_dir / f"view_{k:03d}")
        mask_to_png(view.mask, out_dir / f"mask_{k:03d}.png")

    write_poses(out_dir / "poses.txt", poses)
    write_intrinsics(out_dir / "intrinsics.txt", cfg.intrinsics)

    n_eval = max(1, round(cfg.n_views * (1.0 - train_frac))) if train_frac < 1 else 0
    eval_ids = sorted({(i * cfg.n_views) // n_eval for i in range(n_eval)}) if n_eval else []
    split_lines = [
        f"{k:03d} {'eval' if k in eval_ids else 'train'}" for k in range(cfg.n_views)
    ]
    (out_dir / "split.txt").write_text("\n".join(split_lines) + "\n")

    meta = {
        "n_views": cfg.n_views,
        "wavelengths_nm": [float(w) for w in wavelengths],
        "seed": seed,
        "noise_std": noise_std,
        "train_frac": train_frac,
        "supersample": supersample,
        "background_spectrum": [float(v) for v in scene.background_spectrum(wavelengths)],
        "scene": scene.to_dict(),
        "turntable": {
            "radius": cfg.radius,
            "elevation": cfg.elevation,
            "look_at": list(map(float, cfg.look_at)),
        },
    }
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir
