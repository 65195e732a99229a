"""Volumes on a physical grid: container I/O, intensity scaling, phantoms, overlap metrics."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INTENSITY = "intensity"
LABEL = "label"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised for malformed or inconsistent volume containers."""


class DegenerateDistributionError(ValueError):
    pass


def quantile(values, q):
    """Linear-interpolation quantile (order statistic at ``(n - 1) * q``).

    Shared by intensity preprocessing and the box-whisker summaries so both
    use the same rule.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("quantile of empty sample")
    return np.quantile(values, q, method="linear")


@dataclass
class Volume:
    """A scalar or label grid with voxel spacing and origin in mm.

    ``data`` is ``(d0, d1, d2)`` for single-channel volumes and
    ``(d0, d1, d2, C)`` otherwise. Voxel ``(i, j, l)`` sits at
    ``origin + (i*s0, j*s1, l*s2)``.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    kind: str = INTENSITY
    num_classes: int | None = None
    channels: int = field(default=1)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("spacing and origin must have three components")
        if any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if self.kind not in (INTENSITY, LABEL):
            raise ValueError(f"unknown volume kind {self.kind!r}")
        expected_ndim = 3 if self.channels == 1 else 4
        if self.data.ndim != expected_ndim:
            raise ValueError(f"data has {self.data.ndim} dims, expected {expected_ndim}")
        if self.channels != 1 and self.data.shape[3] != self.channels:
            raise ValueError("channel axis does not match declared channels")
        if self.kind == LABEL:
            if self.num_classes is None:
                self.num_classes = int(self.data.max()) if self.data.size else 0
            if self.data.size and (self.data.min() < 0 or self.data.max() > self.num_classes):
                raise VolumeFormatError(
                    f"label value outside [0, {self.num_classes}]")

    @property
    def shape(self):
        return tuple(self.data.shape[:3])

    def voxel_to_world(self, index):
        index = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + index * np.asarray(self.spacing)

    def world_to_voxel(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_grid(self):
        """Physical coordinates of every voxel centre, shape ``(d0, d1, d2, 3)``."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_data(self, data, kind=None, num_classes=None):
        kind = kind or self.kind
        if kind == LABEL and num_classes is None and kind == self.kind:
            num_classes = self.num_classes
        return Volume(data, self.spacing, self.origin, kind,
                      num_classes if kind == LABEL else None,
                      1 if np.ndim(data) == 3 else np.shape(data)[3])


# ---------------------------------------------------------------- container I/O

def _header_path(path):
    path = Path(path)
    return path if path.suffix == ".hdr" else path.with_suffix(".hdr")


def _payload_path(path):
    return _header_path(path).with_suffix(".raw")


def _fmt(values, conv=repr):
    return " ".join(conv(v) for v in values)


def write_container(path, data, spacing, origin, kind, channels=1, num_classes=None):
    """Write an array of any rank as ``.hdr`` text header + little-endian ``.raw`` payload."""
    hdr, raw = _header_path(path), _payload_path(path)
    dtype = "u8" if kind == LABEL else "f32"
    shape = data.shape if channels == 1 else data.shape[:-1]
    lines = [
        "shape = " + _fmt(shape, str),
        "spacing = " + _fmt(float(s) for s in spacing),
        "origin = " + _fmt(float(o) for o in origin),
        f"kind = {kind}",
        f"channels = {channels}",
        f"dtype = {dtype}",
        "byte_order = little",
    ]
    if num_classes is not None:
        lines.append(f"num_classes = {num_classes}")
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype])
    with open(raw, "wb") as fh:
        fh.write(payload.tobytes(order="C"))
    with open(hdr, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(text):
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"malformed header line {lineno}: {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
    required = ("shape", "spacing", "origin", "kind", "dtype")
    missing = [k for k in required if k not in fields]
    if missing:
        raise VolumeFormatError(f"malformed header: missing {', '.join(missing)}")
    try:
        header = {
            "shape": tuple(int(x) for x in fields["shape"].split()),
            "spacing": tuple(float(x) for x in fields["spacing"].split()),
            "origin": tuple(float(x) for x in fields["origin"].split()),
            "channels": int(fields.get("channels", "1")),
            "num_classes": int(fields["num_classes"]) if "num_classes" in fields else None,
        }
    except ValueError as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from None
    ndim = len(header["shape"])
    if ndim == 0 or len(header["spacing"]) != ndim or len(header["origin"]) != ndim:
        raise VolumeFormatError("malformed header: shape/spacing/origin lengths disagree")
    if fields["kind"] not in (INTENSITY, LABEL):
        raise VolumeFormatError(f"malformed header: unknown kind {fields['kind']!r}")
    if fields["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"malformed header: unsupported dtype {fields['dtype']!r}")
    if fields.get("byte_order", "little") != "little":
        raise VolumeFormatError("malformed header: only little-endian payloads are supported")
    header["kind"] = fields["kind"]
    header["dtype"] = fields["dtype"]
    return header


def read_container(path):
    """Return ``(data, header)`` for a container of any rank."""
    hdr, raw = _header_path(path), _payload_path(path)
    header = _parse_header(hdr.read_text(encoding="utf-8"))
    payload = np.fromfile(raw, dtype=_DTYPES[header["dtype"]])
    shape = header["shape"]
    full_shape = shape if header["channels"] == 1 else shape + (header["channels"],)
    if payload.size != int(np.prod(full_shape)):
        raise VolumeFormatError(
            f"payload length mismatch: {payload.size} values for shape {full_shape}")
    data = payload.reshape(full_shape)
    if header["kind"] == LABEL:
        data = data.astype(np.uint8, copy=False)
        k = header["num_classes"]
        if k is not None and data.size and int(data.max()) > k:
            raise VolumeFormatError(
                f"label value {int(data.max())} exceeds declared class count {k}")
    else:
        data = data.astype(np.float32, copy=False)
    return data, header


def save_volume(v: Volume, path):
    """Write ``v`` as a ``.hdr`` text header plus a little-endian ``.raw`` payload."""
    write_container(path, v.data, v.spacing, v.origin, v.kind, v.channels,
                    v.num_classes if v.kind == LABEL else None)


def load_volume(path) -> Volume:
    """Read a volume container written by :func:`save_volume`."""
    data, h = read_container(path)
    if len(h["shape"]) != 3:
        raise VolumeFormatError(f"malformed header: volume needs 3 dims, got {h['shape']}")
    try:
        return Volume(data, h["spacing"], h["origin"], h["kind"], h["num_classes"], h["channels"])
    except ValueError as exc:
        raise VolumeFormatError(str(exc)) from None


# ------------------------------------------------------------- preprocessing

def robust_scale(v: Volume) -> Volume:
    """Centre on the foreground median and divide by the foreground IQR, per channel.

    Foreground is every voxel brighter than the channel's 1st percentile; the
    resulting affine map is applied to all voxels.
    """
    if v.kind != INTENSITY:
        raise ValueError("robust_scale needs an intensity volume")
    data = v.data.astype(np.float64)
    chans = data[..., None] if v.channels == 1 else data
    out = np.empty_like(chans)
    for c in range(chans.shape[-1]):
        x = chans[..., c]
        fg = x[x > quantile(x, 0.01)]
        if fg.size == 0:
            raise DegenerateDistributionError("degenerate intensity distribution")
        q25, med, q75 = quantile(fg, [0.25, 0.5, 0.75])
        iqr = q75 - q25
        if iqr == 0:
            raise DegenerateDistributionError("degenerate intensity distribution")
        out[..., c] = (x - med) / iqr
    out = out[..., 0] if v.channels == 1 else out
    return v.with_data(out.astype(np.float32))


# ------------------------------------------------------------------ phantoms

@dataclass
class PhantomSpec:
    """Concentric ellipsoidal shells standing in for restricted MRI cohorts.

    ``shell_radii`` are outer radii as fractions of the grid half-extent;
    ``semi_axes`` stretch the ellipsoid per axis. ``level_step`` is the
    intensity gap between neighbouring classes (default ``max(1, 3*noise)``).
    """

    shape: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int = 3
    shell_radii: tuple = (0.35, 0.6, 0.85)
    noise_sigma: float = 0.0
    seed: int = 0
    semi_axes: tuple = (1.0, 1.0, 1.0)
    level_step: float | None = None

    def __post_init__(self):
        self.shell_radii = tuple(float(r) for r in self.shell_radii)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.shell_radii) != self.num_classes:
            raise ValueError("need one shell radius per class")
        r = np.asarray(self.shell_radii)
        if np.any(r <= 0) or np.any(np.diff(r) <= 0) or r[-1] > 1:
            raise ValueError("shell_radii must be positive, strictly increasing and <= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def normalized_radius(shape, spacing, semi_axes=(1.0, 1.0, 1.0)):
    """Ellipsoidal radius of each voxel centre relative to the grid half-extent."""
    terms = []
    for axis, (n, s, a) in enumerate(zip(shape, spacing, semi_axes)):
        half = max((n - 1) * s / 2.0, s / 2.0)
        coord = (np.arange(n) * s - (n - 1) * s / 2.0) / (half * a)
        view = [1, 1, 1]
        view[axis] = n
        terms.append(coord.reshape(view) ** 2)
    return np.sqrt(terms[0] + terms[1] + terms[2])


def make_phantom(spec: PhantomSpec):
    """Return ``(intensity, label)`` volumes for ``spec``; deterministic per seed."""
    radius = normalized_radius(spec.shape, spec.spacing, spec.semi_axes)
    label = np.zeros(spec.shape, dtype=np.uint8)
    # outermost first so inner shells overwrite
    for c in range(spec.num_classes, 0, -1):
        label[radius <= spec.shell_radii[c - 1]] = c
    step = spec.level_step if spec.level_step is not None else max(1.0, 3.0 * spec.noise_sigma)
    intensity = label.astype(np.float64) * step
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        intensity = intensity + rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    return (Volume(intensity.astype(np.float32), spec.spacing, (0.0, 0.0, 0.0), INTENSITY),
            Volume(label, spec.spacing, (0.0, 0.0, 0.0), LABEL, spec.num_classes))


# ------------------------------------------------------------------ metrics

def _label_array(x):
    return np.asarray(x.data if isinstance(x, Volume) else x)


def dice(pred, truth, c) -> float:
    """Dice overlap of class ``c``; 1.0 when the class is absent from both."""
    p, t = _label_array(pred), _label_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    pm, tm = p == c, t == c
    denom = int(pm.sum()) + int(tm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pm, tm).sum()) / denom


def dice_per_class(pred, truth, num_classes):
    """Dice for classes ``1..num_classes`` and which of them were empty in both."""
    scores, empty = {}, []
    p, t = _label_array(pred), _label_array(truth)
    for c in range(1, num_classes + 1):
        scores[c] = dice(p, t, c)
        if not np.any(p == c) and not np.any(t == c):
            empty.append(c)
    return scores, empty


def fp_fn_projection(pred, truth, c, axis):
    """Project per-voxel false positives/negatives of class ``c`` onto a 2D map."""
    p, t = _label_array(pred), _label_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if axis not in (0, 1, 2):
        raise ValueError(f"invalid axis {axis!r}")
    fp = np.logical_and(p == c, t != c)
    fn = np.logical_and(p != c, t == c)
    return fp.sum(axis=axis, dtype=np.int64), fn.sum(axis=axis, dtype=np.int64)


def write_count_map(counts, path):
    """Export a 2D count map as a 2D intensity container."""
    write_container(path, np.asarray(counts, dtype=np.float32), (1.0, 1.0), (0.0, 0.0), INTENSITY)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
