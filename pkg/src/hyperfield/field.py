"""Trainable multi-channel radiance field with exact reverse-mode gradients.

The field maps a 3D position (and a viewing direction) to a scalar density
shared by all spectral channels and an n-channel radiance vector in (0, 1):
frequency encodings feed a small tanh MLP trunk; the density head is a
softplus readout of the trunk, the radiance branch conditions trunk features
on the encoded direction and ends in a sigmoid head, and an optional normal
head predicts unit surface normals. All activations are smooth, which keeps
finite-difference gradient checks meaningful everywhere.

All gradients are implemented by hand on a per-batch tape. Spatial density
gradients (needed to derive surface normals) are produced by forward-mode
tangent propagation through the trunk, and the reverse pass differentiates
through that tangent computation as well, so losses built on derived
normals receive exact parameter gradients.

Density is emitted in per-meter units but is computed scale-free: the
softplus pre-activation is offset (``density_bias``) so fresh fields start
nearly transparent, and the output is scaled by ``density_scale`` and
divided by the scene diagonal so the same configuration behaves the same
across scene sizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

_DEGENERATE_NORM = 1e-12

# Local stable implementations: scipy's expit and numpy's logaddexp are an
# order of magnitude slower than a clipped exp on this code's hot path.
_EXP_CLIP = 500.0


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -_EXP_CLIP, _EXP_CLIP)))


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass(frozen=True)
class FieldConfig:
    """Architecture constants of the field; all are config decisions."""

    n_channels: int
    aabb: tuple  # ((x0,y0,z0), (x1,y1,z1)) scene bounds in meters
    pos_frequencies: int = 6
    dir_frequencies: int = 4
    trunk_layers: int = 4
    trunk_width: int = 64
    radiance_layers: int = 2
    radiance_width: int = 64
    predict_normals: bool = False
    density_scale: float = 2000.0
    density_bias: float = -8.0
    dtype: str = "float32"  # compute/parameter precision; float64 for gradient checks

    def __post_init__(self):
        aabb = np.asarray(self.aabb, dtype=np.float64)
        object.__setattr__(self, "aabb", tuple(map(tuple, aabb.tolist())))
        if aabb.shape != (2, 3) or (aabb[1] <= aabb[0]).any():
            raise ValidationError("aabb must be (2, 3) with max strictly above min")
        for name in ("n_channels", "pos_frequencies", "dir_frequencies",
                     "trunk_layers", "trunk_width", "radiance_layers", "radiance_width"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.density_scale <= 0:
            raise ValidationError("density_scale must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def aabb_array(self) -> np.ndarray:
        return np.asarray(self.aabb, dtype=np.float64)

    @property
    def pos_encoding_size(self) -> int:
        return 3 + 6 * self.pos_frequencies

    @property
    def dir_encoding_size(self) -> int:
        return 3 + 6 * self.dir_frequencies

    def scene_diag(self) -> float:
        a = self.aabb_array
        return float(np.linalg.norm(a[1] - a[0]))

    def to_dict(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "aabb": [list(c) for c in self.aabb],
            "pos_frequencies": self.pos_frequencies,
            "dir_frequencies": self.dir_frequencies,
            "trunk_layers": self.trunk_layers,
            "trunk_width": self.trunk_width,
            "radiance_layers": self.radiance_layers,
            "radiance_width": self.radiance_width,
            "predict_normals": self.predict_normals,
            "density_scale": self.density_scale,
            "density_bias": self.density_bias,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d) -> "FieldConfig":
        d = dict(d)
        d["aabb"] = tuple(tuple(c) for c in d["aabb"])
        return cls(**d)


def _partition(config: FieldConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) parameter layout. Weight shapes are (out, in)."""
    w, wr = config.trunk_width, config.radiance_width
    spec = [("trunk.0.w", (w, config.pos_encoding_size)), ("trunk.0.b", (w,))]
    for i in range(1, config.trunk_layers):
        spec += [(f"trunk.{i}.w", (w, w)), (f"trunk.{i}.b", (w,))]
    spec += [("density.w", (w,)), ("density.b", (1,))]
    if config.predict_normals:
        spec += [("normal.w", (3, w)), ("normal.b", (3,))]
    rad_in = w + config.dir_encoding_size
    spec += [("rad.0.w", (wr, rad_in)), ("rad.0.b", (wr,))]
    for j in range(1, config.radiance_layers):
        spec += [(f"rad.{j}.w", (wr, wr)), (f"rad.{j}.b", (wr,))]
    spec += [("rad.out.w", (config.n_channels, wr)), ("rad.out.b", (config.n_channels,))]
    return spec


@dataclass
class FieldParams:
    """Flat parameter vector plus named views into it."""

    config: FieldConfig
    theta: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=self.config.np_dtype)
        spec = _partition(self.config)
        total = sum(int(np.prod(shape)) for _, shape in spec)
        if self.theta.shape != (total,):
            raise ValidationError(
                f"theta has {self.theta.shape} elements, partition needs {total}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValidationError("parameters must be finite")
        views = {}
        offset = 0
        for name, shape in spec:
            size = int(np.prod(shape))
            views[name] = self.theta[offset : offset + size].reshape(shape)
            offset += size
        self._views = views
        self._spec = spec

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self._spec]

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    def grad_views(self, grad: np.ndarray) -> dict:
        """Named views into a flat gradient buffer with the same layout."""
        views = {}
        offset = 0
        for name, shape in self._spec:
            size = int(np.prod(shape))
            views[name] = grad[offset : offset + size].reshape(shape)
            offset += size
        return views

    def copy(self) -> "FieldParams":
        return FieldParams(config=self.config, theta=self.theta.copy(), seed=self.seed)


def n_params(config: FieldConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in _partition(config))


def init_params(config: FieldConfig, seed: int = 0) -> FieldParams:
    """He-style uniform init scaled by fan-in; biases start at zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in _partition(config):
        if name.endswith(".b"):
            chunks.append(np.zeros(int(np.prod(shape))))
        else:
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            limit = np.sqrt(6.0 / fan_in)
            chunks.append(rng.uniform(-limit, limit, size=int(np.prod(shape))))
    theta = np.concatenate(chunks).astype(config.np_dtype)
    return FieldParams(config=config, theta=theta, seed=seed)


# --------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------


def encode(x, frequencies: int) -> np.ndarray:
    """Frequency encoding [x, sin(2^k pi x), cos(2^k pi x)] per axis; 3+6F wide."""
    x = np.atleast_2d(np.asarray(x))
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    feats = [x]
    for k in range(frequencies):
        arg = (2.0**k) * np.pi * x
        feats.append(np.sin(arg))
        feats.append(np.cos(arg))
    return np.concatenate(feats, axis=-1)


def _encode_with_tangent(x, frequencies, inv_scale):
    """Encoding plus its Jacobian w.r.t. the *unnormalized* input.

    ``inv_scale`` is the per-axis derivative of the normalized coordinate
    with respect to the world coordinate. Returns (enc (M, E), tangent
    (3, M, E)) where tangent[a] is the derivative along world axis a.
    """
    x = np.atleast_2d(x)
    m = x.shape[0]
    parts = [x]
    derivs = [np.broadcast_to(inv_scale, x.shape)]
    for k in range(frequencies):
        w = (2.0**k) * np.pi
        arg = w * x
        sin, cos = np.sin(arg), np.cos(arg)
        parts += [sin, cos]
        derivs += [w * cos * inv_scale, -w * sin * inv_scale]
    enc = np.concatenate(parts, axis=-1)
    deriv = np.concatenate(derivs, axis=-1)  # (M, E); feature f varies with axis f%3
    e = enc.shape[1]
    tangent = np.zeros((3, m, e), dtype=enc.dtype)
    axis_of = np.tile(np.arange(3), e // 3)
    for a in range(3):
        cols = np.where(axis_of == a)[0]
        tangent[a][:, cols] = deriv[:, cols]
    return enc, tangent


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class FieldTape:
    """Cached intermediates of one batched forward pass.

    Hidden layers are tanh, so activation derivatives are recovered from the
    stored post-activations (phi' = 1 - h^2) without keeping pre-activations.
    """

    enc_x: np.ndarray
    enc_tan: np.ndarray | None
    trunk_h: list
    trunk_hdot: list | None
    z_sigma: np.ndarray
    s_sigma: np.ndarray  # sigmoid(z_sigma + bias), the softplus derivative
    zdot_sigma: np.ndarray | None  # (3, M)
    z_normal: np.ndarray | None
    normal_r: np.ndarray | None
    enc_d: np.ndarray | None
    rad_inputs: list | None
    radiance: np.ndarray | None


@dataclass
class FieldBatch:
    """Outputs of a batched field query (plus the tape when requested)."""

    density: np.ndarray
    radiance: np.ndarray | None = None
    density_gradient: np.ndarray | None = None
    predicted_normal: np.ndarray | None = None
    tape: FieldTape | None = None


@dataclass(frozen=True)
class FieldOutput:
    """Single-point query result."""

    density: float
    radiance: np.ndarray
    predicted_normal: np.ndarray | None = None
    density_gradient: np.ndarray | None = None


def _normalize_positions(config: FieldConfig, x):
    aabb = config.aabb_array
    center = (aabb[0] + aabb[1]) / 2.0
    half = (aabb[1] - aabb[0]) / 2.0
    dtype = config.np_dtype
    xn = (np.atleast_2d(np.asarray(x, dtype=np.float64)) - center) / half
    return xn.astype(dtype), (1.0 / half).astype(dtype)


def query_batch(
    params: FieldParams,
    x,
    d=None,
    *,
    radiance: bool = True,
    sigma_grad: bool = False,
    pred_normal: bool = False,
    keep_tape: bool = False,
) -> FieldBatch:
    """Evaluate the field on a batch of points (and directions).

    Density depends on position only; radiance additionally on the unit
    viewing direction. ``sigma_grad`` enables forward-mode tangents through
    the trunk and returns the spatial density gradient per point.
    """
    cfg = params.config
    xn, inv_scale = _normalize_positions(cfg, x)
    m = xn.shape[0]
    need_tangent = sigma_grad

    if need_tangent:
        enc_x, enc_tan = _encode_with_tangent(xn, cfg.pos_frequencies, inv_scale)
    else:
        enc_x, enc_tan = encode(xn, cfg.pos_frequencies), None

    trunk_h = []
    trunk_hdot = [] if need_tangent else None
    h, hdot = enc_x, enc_tan
    for i in range(cfg.trunk_layers):
        w = params.view(f"trunk.{i}.w")
        b = params.view(f"trunk.{i}.b")
        h_new = np.tanh(h @ w.T + b)
        trunk_h.append(h_new)
        if need_tangent:
            zdot = hdot @ w.T  # (3, M, W)
            hdot = (1.0 - h_new**2)[None, :, :] * zdot
            trunk_hdot.append(hdot)
        h = h_new
    h_top = h

    w_sigma = params.view("density.w")
    b_sigma = params.view("density.b")
    z_sigma = h_top @ w_sigma + b_sigma[0]
    s_sigma = _sigmoid(z_sigma + cfg.density_bias)
    coef = cfg.density_scale / cfg.scene_diag()
    density = coef * _softplus(z_sigma + cfg.density_bias)

    zdot_sigma = None
    density_gradient = None
    if need_tangent:
        zdot_sigma = trunk_hdot[-1] @ w_sigma  # (3, M)
        density_gradient = (coef * s_sigma * zdot_sigma).T.copy()  # (M, 3)

    z_normal = normal_r = predicted = None
    if pred_normal:
        if not cfg.predict_normals:
            raise ValidationError("field was configured without a normal head")
        z_normal = h_top @ params.view("normal.w").T + params.view("normal.b")
        normal_r = np.linalg.norm(z_normal, axis=-1)
        safe = np.maximum(normal_r, _DEGENERATE_NORM)
        predicted = z_normal / safe[:, None]

    enc_d = None
    rad_inputs = rad_z = rad_s = None
    radiance_out = None
    if radiance:
        if d is None:
            raise ValidationError("radiance query requires viewing directions")
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        # norms checked in f64; the encoding runs at the config dtype
        norms = np.linalg.norm(d, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValidationError("viewing directions must be unit length")
        enc_d = encode(d.astype(cfg.np_dtype), cfg.dir_frequencies)
        u = np.concatenate([h_top, enc_d], axis=-1)
        rad_inputs = [u]
        h = u
        for j in range(cfg.radiance_layers):
            w = params.view(f"rad.{j}.w")
            b = params.view(f"rad.{j}.b")
            h = np.tanh(h @ w.T + b)
            rad_inputs.append(h)
        z_out = h @ params.view("rad.out.w").T + params.view("rad.out.b")
        radiance_out = _sigmoid(z_out)

    tape = None
    if keep_tape:
        tape = FieldTape(
            enc_x=enc_x,
            enc_tan=enc_tan,
            trunk_h=trunk_h,
            trunk_hdot=trunk_hdot,
            z_sigma=z_sigma,
            s_sigma=s_sigma,
            zdot_sigma=zdot_sigma,
            z_normal=z_normal,
            normal_r=normal_r,
            enc_d=enc_d,
            rad_inputs=rad_inputs,
            radiance=radiance_out,
        )
    return FieldBatch(
        density=density,
        radiance=radiance_out,
        density_gradient=density_gradient,
        predicted_normal=predicted,
        tape=tape,
    )


def query_density(params: FieldParams, x) -> np.ndarray:
    """Density-only fast path (no tape, no tangents)."""
    return query_batch(params, x, radiance=False).density


def query(params: FieldParams, x, d) -> FieldOutput:
    """Single-point convenience query following the field's configuration."""
    want_normals = params.config.predict_normals
    batch = query_batch(
        params,
        np.asarray(x, dtype=np.float64)[None, :],
        np.asarray(d, dtype=np.float64)[None, :],
        sigma_grad=want_normals,
        pred_normal=want_normals,
    )
    return FieldOutput(
        density=float(batch.density[0]),
        radiance=batch.radiance[0],
        predicted_normal=None if batch.predicted_normal is None else batch.predicted_normal[0],
        density_gradient=None
        if batch.density_gradient is None
        else batch.density_gradient[0],
    )


def backward(
    params: FieldParams,
    batch: FieldBatch,
    adj_density=None,
    adj_radiance=None,
    adj_density_gradient=None,
    adj_predicted_normal=None,
) -> np.ndarray:
    """Exact reverse-mode gradient of ``sum(adj * output)`` w.r.t. theta.

    The tape must have been kept by :func:`query_batch`. Adjoints may be
    omitted (treated as zero). Returns a flat gradient with theta's layout.
    """
    tape = batch.tape
    if tape is None:
        raise ValidationError("backward requires a batch queried with keep_tape=True")
    cfg = params.config
    dtype = params.theta.dtype
    m = tape.z_sigma.shape[0]
    grad = np.zeros_like(params.theta)
    g = params.grad_views(grad)
    coef = cfg.density_scale / cfg.scene_diag()

    h_top = tape.trunk_h[-1]
    d_h_top = np.zeros_like(h_top)
    # The tangent graph only needs a reverse pass when something downstream
    # consumed the density gradient.
    need_tangent = tape.trunk_hdot is not None and adj_density_gradient is not None
    d_hdot_top = np.zeros((3, m, cfg.trunk_width), dtype=dtype) if need_tangent else None

    # Radiance branch.
    if adj_radiance is not None:
        adj_radiance = np.asarray(adj_radiance, dtype=dtype)
        c = tape.radiance
        dz = adj_radiance * c * (1.0 - c)
        g["rad.out.w"] += dz.T @ tape.rad_inputs[-1]
        g["rad.out.b"] += dz.sum(axis=0)
        dh = dz @ params.view("rad.out.w")
        for j in range(cfg.radiance_layers - 1, -1, -1):
            dz = dh * (1.0 - tape.rad_inputs[j + 1] ** 2)
            g[f"rad.{j}.w"] += dz.T @ tape.rad_inputs[j]
            g[f"rad.{j}.b"] += dz.sum(axis=0)
            dh = dz @ params.view(f"rad.{j}.w")
        d_h_top += dh[:, : cfg.trunk_width]

    # Predicted-normal head (unit-normalized linear readout).
    if adj_predicted_normal is not None:
        adj_pn = np.asarray(adj_predicted_normal, dtype=dtype)
        r = np.maximum(tape.normal_r, _DEGENERATE_NORM)
        n = tape.z_normal / r[:, None]
        dz_n = (adj_pn - n * np.sum(n * adj_pn, axis=-1, keepdims=True)) / r[:, None]
        g["normal.w"] += dz_n.T @ h_top
        g["normal.b"] += dz_n.sum(axis=0)
        d_h_top += dz_n @ params.view("normal.w")

    # Density head: value path and (optionally) the spatial-gradient path.
    dz_sigma = np.zeros(m, dtype=dtype)
    if adj_density is not None:
        dz_sigma += np.asarray(adj_density, dtype=dtype) * coef * tape.s_sigma
    d_zdot_sigma = None
    if need_tangent:
        adj_gd = np.asarray(adj_density_gradient, dtype=dtype)  # (M, 3)
        zdot = tape.zdot_sigma  # (3, M)
        sp = tape.s_sigma * (1.0 - tape.s_sigma)
        dz_sigma += coef * sp * np.einsum("ma,am->m", adj_gd, zdot)
        d_zdot_sigma = coef * tape.s_sigma * adj_gd.T  # (3, M)

    w_sigma = params.view("density.w")
    g["density.w"] += h_top.T @ dz_sigma
    g["density.b"] += dz_sigma.sum(keepdims=True)
    d_h_top += np.outer(dz_sigma, w_sigma)
    if d_zdot_sigma is not None:
        hdot_top = tape.trunk_hdot[-1]
        for a in range(3):
            g["density.w"] += hdot_top[a].T @ d_zdot_sigma[a]
            d_hdot_top[a] += np.outer(d_zdot_sigma[a], w_sigma)

    # Trunk, including the tangent graph when present.
    dh, dhdot = d_h_top, d_hdot_top
    for i in range(cfg.trunk_layers - 1, -1, -1):
        h_i = tape.trunk_h[i]
        phi1 = 1.0 - h_i**2  # tanh'
        dz = dh * phi1
        dzdot = None
        prev_dot = None
        if need_tangent:
            prev_dot = tape.enc_tan if i == 0 else tape.trunk_hdot[i - 1]
            zdot = prev_dot @ params.view(f"trunk.{i}.w").T
            # tanh'' = -2 h tanh'
            dz += (dhdot * zdot).sum(axis=0) * (-2.0 * h_i * phi1)
            dzdot = dhdot * phi1[None]
        h_prev = tape.enc_x if i == 0 else tape.trunk_h[i - 1]
        g[f"trunk.{i}.w"] += dz.T @ h_prev
        g[f"trunk.{i}.b"] += dz.sum(axis=0)
        dh = dz @ params.view(f"trunk.{i}.w")
        if need_tangent:
            for a in range(3):
                g[f"trunk.{i}.w"] += dzdot[a].T @ prev_dot[a]
            dhdot = dzdot @ params.view(f"trunk.{i}.w")
    return grad


def query_batch_with_grad(
    params: FieldParams,
    x,
    d,
    adj_density=None,
    adj_radiance=None,
    adj_density_gradient=None,
    adj_predicted_normal=None,
):
    """Forward pass plus reverse pass in one call.

    Returns (FieldBatch, flat parameter gradient, per-point density
    gradients). The parameter gradient is that of ``sum(adjoint * output)``
    over the supplied upstream adjoints.
    """
    batch = query_batch(
        params,
        x,
        d,
        sigma_grad=True,
        pred_normal=params.config.predict_normals,
        keep_tape=True,
    )
    grad = backward(
        params,
        batch,
        adj_density=adj_density,
        adj_radiance=adj_radiance,
        adj_density_gradient=adj_density_gradient,
        adj_predicted_normal=adj_predicted_normal,
    )
    return batch, grad, batch.density_gradient


def derived_normal(density_gradient) -> tuple[np.ndarray, np.ndarray]:
    """Surface normals from density gradients: ``-grad / |grad|``.

    Returns (normals, valid); rows with near-zero gradient norm are flagged
    invalid and must be excluded from losses.
    """
    grad = np.atleast_2d(np.asarray(density_gradient, dtype=np.float64))
    norms = np.linalg.norm(grad, axis=-1)
    valid = norms >= _DEGENERATE_NORM
    safe = np.where(valid, norms, 1.0)
    normals = -grad / safe[:, None]
    normals[~valid] = 0.0
    return normals, valid


# --------------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------------

_MAGIC = b"HYPERFIELD-CKPT 1\n"


@dataclass
class Checkpoint:
    params: FieldParams
    step: int
    meta: dict
    extra: dict


def save_checkpoint(path, params: FieldParams, step: int = 0, meta=None, extra=None) -> None:
    """Versioned binary container: JSON header + raw little-endian arrays."""
    extra = extra or {}
    arrays = [("theta", params.theta)] + [(k, np.asarray(v)) for k, v in extra.items()]
    header = {
        "config": params.config.to_dict(),
        "seed": params.seed,
        "step": int(step),
        "meta": meta or {},
        "arrays": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in arrays
        ],
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != _MAGIC:
            raise FormatError(f"{path}: not a checkpoint file (bad magic)")
        try:
            header = json.loads(fh.readline().decode())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: unreadable checkpoint header") from exc
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise FormatError(f"{path}: truncated checkpoint payload")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
    config = FieldConfig.from_dict(header["config"])
    params = FieldParams(config=config, theta=arrays.pop("theta"), seed=header.get("seed", 0))
    return Checkpoint(params=params, step=header["step"], meta=header.get("meta", {}), extra=arrays)
