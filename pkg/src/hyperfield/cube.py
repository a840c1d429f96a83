"""Hyperspectral cube container, BIL binary I/O, and band utilities.

A cube is a ``(height, width, bands)`` float32 array with a strictly
increasing wavelength axis. Files use the band-interleaved-by-line layout:
a minimal ``key = value`` text header next to a raw little-endian float32
data file. Memory layout is always band-last regardless of the file
interleave; the reader de-interleaves on load because per-pixel spectra
are the dominant access pattern downstream.
"""

from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

# The single element type supported by the file format: ENVI code 4,
# 32-bit IEEE float, little-endian.
_DATA_TYPE_CODE = 4
_ELEMENT_DTYPE = np.dtype("<f4")


class CubeKind(str, enum.Enum):
    """Whether cube values are raw radiance or calibrated reflectance."""

    RAW = "raw"
    CALIBRATED = "calibrated"


@dataclass(frozen=True)
class HyperCube:
    """Immutable ``(H, W, L)`` spectral volume with its wavelength axis.

    Parameters
    ----------
    data:
        Array of shape ``(height, width, bands)``; stored as float32.
    wavelengths:
        Strictly increasing band centers in nanometers, length ``bands``.
    kind:
        ``CubeKind.RAW`` (nonnegative radiance) or ``CubeKind.CALIBRATED``
        (reflectance in ``[0, 1]``).
    """

    data: np.ndarray
    wavelengths: np.ndarray
    kind: CubeKind = CubeKind.RAW

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "wavelengths", wavelengths)
        object.__setattr__(self, "kind", CubeKind(self.kind))
        if data.ndim != 3:
            raise ValidationError(f"cube data must be 3-D (H, W, L), got shape {data.shape}")
        if min(data.shape) == 0:
            raise ValidationError(f"cube has an empty dimension: shape {data.shape}")
        if wavelengths.ndim != 1 or wavelengths.shape[0] != data.shape[2]:
            raise ValidationError(
                f"wavelength count {wavelengths.shape} does not match band count {data.shape[2]}"
            )
        if not np.all(np.isfinite(wavelengths)) or not np.all(np.diff(wavelengths) > 0):
            raise ValidationError("wavelengths must be finite and strictly increasing")
        if not np.all(np.isfinite(data)):
            raise ValidationError("cube values must be finite")
        if self.kind is CubeKind.CALIBRATED:
            if data.min() < 0.0 or data.max() > 1.0:
                raise ValidationError("calibrated cube values must lie in [0, 1]")
        elif data.min() < 0.0:
            raise ValidationError("raw cube values must be nonnegative")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class BandTriplet:
    """Three wavelengths (nm) mapped onto the R, G, B channels of a composite."""

    r_nm: float
    g_nm: float
    b_nm: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.r_nm, self.g_nm, self.b_nm)


@dataclass(frozen=True)
class Mask:
    """Boolean ``(H, W)`` pixel selection."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=bool)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def count(self) -> int:
        return int(self.values.sum())

    def matches(self, cube: HyperCube) -> bool:
        return self.values.shape == cube.data.shape[:2]


# --------------------------------------------------------------------------
# BIL file I/O
# --------------------------------------------------------------------------

_REQUIRED_KEYS = ("samples", "lines", "bands", "interleave", "data type", "wavelength")


def _parse_header(text: str, path) -> dict:
    """Parse the minimal ``key = value`` header dialect into a dict."""
    fields: dict[str, str] = {}
    # Wavelength lists may span lines inside braces; normalize first.
    text = re.sub(r"\{[^}]*\}", lambda m: m.group(0).replace("\n", " "), text)
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed header line: {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip().lower()] = value.strip()
    for key in _REQUIRED_KEYS:
        if key not in fields:
            raise FormatError(f"{path}: header missing required key {key!r}")
    return fields


def _parse_wavelengths(raw: str, path) -> np.ndarray:
    raw = raw.strip()
    if raw.startswith("{") and raw.endswith("}"):
        raw = raw[1:-1]
    try:
        values = np.array([float(tok) for tok in raw.replace(",", " ").split()], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: unparseable wavelength list") from exc
    if values.size == 0:
        raise FormatError(f"{path}: empty wavelength list")
    return values


def read_bil(header_path, data_path) -> HyperCube:
    """Read a BIL cube from its header/data file pair.

    Raises :class:`FormatError` on a malformed header, a data-file size
    mismatch, or a non-increasing wavelength axis.
    """
    header_path = Path(header_path)
    data_path = Path(data_path)
    fields = _parse_header(header_path.read_text(), header_path)

    try:
        samples = int(fields["samples"])
        lines = int(fields["lines"])
        bands = int(fields["bands"])
        data_type = int(fields["data type"])
    except ValueError as exc:
        raise FormatError(f"{header_path}: non-integer dimension field") from exc
    if fields["interleave"].lower() != "bil":
        raise FormatError(f"{header_path}: unsupported interleave {fields['interleave']!r}")
    if data_type != _DATA_TYPE_CODE:
        raise FormatError(f"{header_path}: unsupported data type {data_type} (expected 4)")
    if int(fields.get("byte order", "0")) != 0:
        raise FormatError(f"{header_path}: only little-endian (byte order = 0) is supported")

    wavelengths = _parse_wavelengths(fields["wavelength"], header_path)
    if wavelengths.size != bands:
        raise FormatError(
            f"{header_path}: wavelength list length {wavelengths.size} != bands {bands}"
        )
    if not np.all(np.diff(wavelengths) > 0):
        raise FormatError(f"{header_path}: wavelengths are not strictly increasing")

    expected = lines * bands * samples * _ELEMENT_DTYPE.itemsize
    actual = data_path.stat().st_size
    if actual != expected:
        raise FormatError(
            f"{data_path}: size mismatch: expected {expected} bytes "
            f"({lines}x{bands}x{samples} float32), found {actual}"
        )

    flat = np.fromfile(data_path, dtype=_ELEMENT_DTYPE)
    # BIL on disk is (lines, bands, samples); in memory we keep band-last.
    cube_data = flat.reshape(lines, bands, samples).transpose(0, 2, 1)
    kind = CubeKind(fields.get("kind", "raw").lower())
    return HyperCube(data=np.ascontiguousarray(cube_data), wavelengths=wavelengths, kind=kind)


def write_bil(cube: HyperCube, header_path, data_path) -> None:
    """Write a cube as a BIL header/data pair; exact inverse of :func:`read_bil`."""
    header_path = Path(header_path)
    data_path = Path(data_path)
    wl = ", ".join(repr(float(w)) for w in cube.wavelengths)
    header = (
        f"samples = {cube.width}\n"
        f"lines = {cube.height}\n"
        f"bands = {cube.bands}\n"
        "interleave = bil\n"
        f"data type = {_DATA_TYPE_CODE}\n"
        "byte order = 0\n"
        f"kind = {cube.kind.value}\n"
        f"wavelength = {{ {wl} }}\n"
    )
    header_path.write_text(header)
    cube.data.transpose(0, 2, 1).astype(_ELEMENT_DTYPE).tofile(data_path)


def cube_paths(stem) -> tuple[Path, Path]:
    """Map a path stem to its ``(.hdr, .bil)`` file pair."""
    stem = Path(stem)
    if stem.suffix in (".hdr", ".bil"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".hdr"), stem.with_suffix(".bil")


def read_cube(stem) -> HyperCube:
    """Read a cube given its path stem (``stem.hdr`` + ``stem.bil``)."""
    header, data = cube_paths(stem)
    return read_bil(header, data)


def write_cube(cube: HyperCube, stem) -> None:
    header, data = cube_paths(stem)
    write_bil(cube, header, data)


# --------------------------------------------------------------------------
# Band arithmetic
# --------------------------------------------------------------------------


def band_index(cube: HyperCube, nm: float) -> int:
    """Index of the band nearest to ``nm``; ties break toward the lower index."""
    wl = cube.wavelengths
    if nm < wl[0] or nm > wl[-1]:
        raise ValidationError(
            f"wavelength {nm} nm outside cube range [{wl[0]}, {wl[-1]}] nm"
        )
    return int(np.argmin(np.abs(wl - nm)))


def band_slice(cube: HyperCube, nm: float) -> np.ndarray:
    """Return the ``(H, W)`` band whose wavelength is nearest to ``nm``."""
    return cube.data[:, :, band_index(cube, nm)]


def composite(cube: HyperCube, triplet: BandTriplet) -> np.ndarray:
    """Stack three band slices into an ``(H, W, 3)`` image clipped to [0, 1].

    Only calibrated cubes are accepted; raw radiance has no meaningful
    [0, 1] display range.
    """
    if cube.kind is not CubeKind.CALIBRATED:
        raise ValidationError("composite rendering requires a calibrated cube")
    channels = [band_slice(cube, nm) for nm in triplet.as_tuple()]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


def roi_mean_spectrum(cube: HyperCube, mask: Mask) -> np.ndarray:
    """Per-band mean over masked pixels, as float64 of length ``bands``."""
    if not mask.matches(cube):
        raise ValidationError(
            f"mask shape {mask.values.shape} does not match cube {cube.data.shape[:2]}"
        )
    if mask.count == 0:
        raise ValidationError("ROI mask is empty")
    return cube.data[mask.values].astype(np.float64).mean(axis=0)


def write_spectrum_csv(wavelengths, values, path) -> None:
    """Export a spectrum as ``wavelength_nm, reflectance`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wavelength_nm", "reflectance"])
        for wl, value in zip(wavelengths, values):
            writer.writerow([repr(float(wl)), repr(float(value))])
