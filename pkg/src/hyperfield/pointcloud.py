"""Point clouds with optional per-point spectra, ASCII PLY I/O, and
nearest-neighbor queries.

PLY vertices carry either ``L`` float reflectance properties (named
``refl_<nm>``, wavelengths recoverable from a header comment) or 3 uchar
colors. Floats are written with shortest round-trip representation so a
write/read cycle is value-exact.

Nearest-neighbor queries default to a k-d tree (scipy) with an exact
brute-force path that doubles as the oracle for small clouds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, ValidationError

BRUTE_FORCE_LIMIT = 2000


@dataclass(frozen=True)
class PointCloud:
    """N 3D points in meters, optionally with per-point spectra."""

    points: np.ndarray  # (N, 3)
    spectra: np.ndarray | None = None  # (N, L)
    wavelengths: np.ndarray | None = None  # (L,)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValidationError(f"points must be (N>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        if self.spectra is not None:
            spectra = np.asarray(self.spectra, dtype=np.float64)
            object.__setattr__(self, "spectra", spectra)
            if spectra.shape[0] != pts.shape[0]:
                raise ValidationError("spectra row count must match point count")
        if self.wavelengths is not None:
            object.__setattr__(
                self, "wavelengths", np.asarray(self.wavelengths, dtype=np.float64)
            )

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, index) -> "PointCloud":
        return PointCloud(
            points=self.points[index],
            spectra=None if self.spectra is None else self.spectra[index],
            wavelengths=self.wavelengths,
        )


# --------------------------------------------------------------------------
# Nearest neighbors
# --------------------------------------------------------------------------


def nearest_neighbors_brute(query: np.ndarray, reference: np.ndarray):
    """O(N*M) exact scan; the oracle path."""
    diffs = query[:, None, :] - reference[None, :, :]
    d2 = np.einsum("qrd,qrd->qr", diffs, diffs)
    idx = np.argmin(d2, axis=1)
    return idx, np.sqrt(d2[np.arange(len(query)), idx])


def nearest_neighbors(a: PointCloud, b: PointCloud, backend: str = "auto"):
    """Index and distance of each point of ``a``'s nearest neighbor in ``b``."""
    qa, qb = a.points, b.points
    if backend == "auto":
        backend = "brute" if max(len(qa), len(qb)) <= BRUTE_FORCE_LIMIT else "kdtree"
    if backend == "brute":
        return nearest_neighbors_brute(qa, qb)
    if backend == "kdtree":
        dist, idx = cKDTree(qb).query(qa, k=1)
        return idx, dist
    raise ValidationError(f"unknown nearest-neighbor backend {backend!r}")


def nearest_distances(a: PointCloud, b: PointCloud, backend: str = "auto") -> np.ndarray:
    return nearest_neighbors(a, b, backend)[1]


# --------------------------------------------------------------------------
# ASCII PLY
# --------------------------------------------------------------------------


def _wavelength_names(wavelengths) -> list[str]:
    return [f"refl_{w:.2f}nm".replace(".", "_") for w in wavelengths]


def write_ply(pc: PointCloud, path, colors: np.ndarray | None = None) -> None:
    """ASCII PLY with x y z plus either spectral float properties or colors.

    ``colors`` (N, 3) uint8 takes precedence over spectra when given.
    """
    lines = ["ply", "format ascii 1.0"]
    props = ["property float x", "property float y", "property float z"]
    n = len(pc)
    write_spectra = pc.spectra is not None and colors is None
    if write_spectra:
        if pc.wavelengths is None:
            raise ValidationError("spectral PLY output needs the wavelength grid")
        wl = " ".join(repr(float(w)) for w in pc.wavelengths)
        lines.append(f"comment wavelengths_nm {wl}")
        props += [f"property float {name}" for name in _wavelength_names(pc.wavelengths)]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (n, 3) or colors.dtype != np.uint8:
            raise ValidationError("colors must be (N, 3) uint8")
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element vertex {n}"] + props + ["end_header"]

    rows = []
    for i in range(n):
        row = [repr(float(v)) for v in pc.points[i]]
        if write_spectra:
            row += [repr(float(v)) for v in pc.spectra[i]]
        if colors is not None:
            row += [str(int(v)) for v in colors[i]]
        rows.append(" ".join(row))
    Path(path).write_text("\n".join(lines + rows) + "\n")


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY written by :func:`write_ply` (or compatible)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n_vertex = None
    props: list[str] = []
    wavelengths = None
    body_start = None
    for i, line in enumerate(text[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise FormatError(f"{path}: only ascii PLY is supported")
        if parts[0] == "comment" and len(parts) > 1 and parts[1] == "wavelengths_nm":
            wavelengths = np.array([float(v) for v in parts[2:]])
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise FormatError(f"{path}: unsupported element {parts[1]!r}")
            n_vertex = int(parts[2])
        if parts[0] == "property":
            props.append(parts[2])
        if parts[0] == "end_header":
            body_start = i + 1
            break
    if n_vertex is None or body_start is None:
        raise FormatError(f"{path}: incomplete PLY header")
    if props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: vertex properties must start with x y z")

    body = text[body_start : body_start + n_vertex]
    if len(body) < n_vertex:
        raise FormatError(f"{path}: expected {n_vertex} vertex rows, found {len(body)}")
    data = np.array([[float(tok) for tok in line.split()] for line in body])
    if data.shape != (n_vertex, len(props)):
        raise FormatError(f"{path}: vertex rows do not match property count")

    points = data[:, :3]
    spectral_cols = [j for j, name in enumerate(props) if name.startswith("refl_")]
    spectra = data[:, spectral_cols] if spectral_cols else None
    return PointCloud(points=points, spectra=spectra, wavelengths=wavelengths)
