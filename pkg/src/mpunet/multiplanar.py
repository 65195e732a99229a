"""View-vector sampling, oblique slice extraction and nearest-point back-mapping.

Every slice stack lives on a regular lattice spanned by the view vector ``v``
and two in-plane axes ``u1, u2`` (a right-handed orthonormal frame), centred
on the centre of the volume and stepped at ``grid_spacing`` mm along all three
axes. Lattice index ``(s, a, b)`` sits at::

    centre + (s - (n-1)/2) * gs * v + (a - (w-1)/2) * gs * u1 + (b - (h-1)/2) * gs * u2
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import INTENSITY, LABEL, Volume, write_container

SAGITTAL = np.array([1.0, 0.0, 0.0])
ALLOWED_K = (1, 3, 6)


class PlaneSamplingError(RuntimeError):
    """The rejection sampler ran out of draws for the requested angle."""


def in_plane_basis(v):
    """Deterministic orthonormal ``(u1, u2)`` with ``v x u1 = u2``.

    ``u1`` is Gram-Schmidt of the canonical axis least aligned with ``v``
    (lowest index on ties).
    """
    v = np.asarray(v, dtype=np.float64)
    axis = int(np.argmin(np.abs(v)))
    e = np.zeros(3)
    e[axis] = 1.0
    u1 = e - np.dot(e, v) * v
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(v, u1)
    u2 /= np.linalg.norm(u2)
    return u1, u2


@dataclass
class PlaneSet:
    vectors: np.ndarray
    in_plane_bases: list
    seed: int = 0
    min_angle_deg: float = 60.0

    @property
    def k(self):
        return len(self.vectors)

    def to_dict(self):
        return {
            "vectors": np.asarray(self.vectors).tolist(),
            "in_plane_bases": [[u1.tolist(), u2.tolist()] for u1, u2 in self.in_plane_bases],
            "seed": self.seed,
            "min_angle_deg": self.min_angle_deg,
        }

    @classmethod
    def from_dict(cls, d):
        vectors = np.asarray(d["vectors"], dtype=np.float64)
        bases = [(np.asarray(b[0]), np.asarray(b[1])) for b in d["in_plane_bases"]]
        return cls(vectors, bases, d.get("seed", 0), d.get("min_angle_deg", 60.0))

    @classmethod
    def from_vectors(cls, vectors, seed=0, min_angle_deg=60.0):
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
        vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        return cls(vectors, [in_plane_basis(v) for v in vectors], seed, min_angle_deg)


def line_angles_deg(vectors):
    """Pairwise angles between the lines spanned by ``vectors`` (uses ``|dot|``)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    cos = np.clip(np.abs(vectors @ vectors.T), 0.0, 1.0)
    iu = np.triu_indices(len(vectors), 1)
    return np.degrees(np.arccos(cos[iu]))


def _separate(vectors, min_angle_deg, steps, rate=0.5):
    """Push apart only the line pairs that violate the angle bound.

    Returns the first iterate satisfying the bound, or ``None``.
    """
    # aim a hair past the bound so the accepted angles never round below it
    cos_max = np.cos(np.radians(min_angle_deg + 1e-7))
    v = vectors.copy()
    for _ in range(steps):
        if line_angles_deg(v).min() >= min_angle_deg:
            return v
        dots = v @ v.T
        np.fill_diagonal(dots, 0.0)
        viol = np.abs(dots) - cos_max
        np.fill_diagonal(viol, -1.0)
        weight = np.where(viol > 0, viol, 0.0) * np.sign(dots)
        # tangential push of v_i away from the (sign-matched) neighbour line
        push = -(weight @ v) + np.sum(weight * dots, axis=1, keepdims=True) * v
        v = v + rate * push
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return None


def sample_plane_set(k, seed=0, min_angle_deg=60.0, max_restarts=200, steps=200) -> PlaneSet:
    """Draw ``k`` unit view vectors whose pairwise line angles are ``>= min_angle_deg``.

    ``k = 1`` is the sagittal axis. Otherwise ``k`` isotropic directions are
    drawn and, if some pairs are too close, only those pairs are pushed apart
    along the sphere; a draw that does not settle within ``steps`` iterations
    is discarded. Raises :class:`PlaneSamplingError` once ``max_restarts`` draws
    have failed, which is what happens when the angle is infeasible for ``k``.
    """
    if k not in ALLOWED_K:
        raise ValueError(f"k must be one of {ALLOWED_K}, got {k}")
    if k == 1:
        return PlaneSet.from_vectors(SAGITTAL[None], seed, min_angle_deg)
    rng = np.random.default_rng(seed)
    for _ in range(max_restarts):
        cand = rng.normal(size=(k, 3))
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        found = _separate(cand, min_angle_deg, steps)
        if found is not None:
            return PlaneSet.from_vectors(found, seed, min_angle_deg)
    raise PlaneSamplingError(
        f"retry budget of {max_restarts} draws exhausted for k={k} at {min_angle_deg} deg; "
        "the angle is likely infeasible")


# ------------------------------------------------------------- slice stacks

@dataclass
class SliceStack:
    images: np.ndarray            # (n, w, h)
    labels: np.ndarray | None     # (n, w, h) or None
    view_index: int
    vector: np.ndarray
    basis: tuple
    centre: np.ndarray
    grid_spacing: float
    meta: dict = field(default_factory=dict)

    @property
    def lattice_shape(self):
        return self.images.shape[:3]

    def lattice_to_world(self, s, a, b):
        n, w, h = self.lattice_shape
        gs = self.grid_spacing
        u1, u2 = self.basis
        s = (np.asarray(s, dtype=np.float64) - (n - 1) / 2.0) * gs
        a = (np.asarray(a, dtype=np.float64) - (w - 1) / 2.0) * gs
        b = (np.asarray(b, dtype=np.float64) - (h - 1) / 2.0) * gs
        return (self.centre + s[..., None] * self.vector + a[..., None] * u1
                + b[..., None] * u2)

    @property
    def grid_points(self):
        """Physical coordinates (mm) of every lattice pixel, shape ``(n, w, h, 3)``."""
        n, w, h = self.lattice_shape
        s, a, b = np.meshgrid(np.arange(n), np.arange(w), np.arange(h), indexing="ij")
        return self.lattice_to_world(s, a, b)

    def geometry(self):
        return {
            "view_index": self.view_index,
            "vector": self.vector.tolist(),
            "basis": [self.basis[0].tolist(), self.basis[1].tolist()],
            "centre": self.centre.tolist(),
            "grid_spacing": self.grid_spacing,
            "lattice_shape": list(self.lattice_shape),
        }


def volume_centre(shape, spacing, origin):
    return np.asarray(origin) + (np.asarray(shape) - 1) * np.asarray(spacing) / 2.0


def _half_extent(direction, shape, spacing):
    return float(np.sum(np.abs(direction) * (np.asarray(shape) - 1) * np.asarray(spacing) / 2.0))


def _count(half_extent, gs, multiple=1):
    n = int(np.floor(2.0 * half_extent / gs + 1e-9)) + 1
    return int(np.ceil(n / multiple) * multiple)


def _trilinear(data, q, fill):
    """Sample ``data`` (d0, d1, d2[, C]) at voxel coordinates ``q`` (..., 3)."""
    dims = np.asarray(data.shape[:3])
    inside = np.all((q >= -0.5) & (q <= dims - 0.5), axis=-1)
    qc = np.clip(q, 0, dims - 1)
    i0 = np.minimum(np.floor(qc).astype(np.int64), dims - 2)
    f = qc - i0
    out = 0.0
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1.0 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1.0 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                vals = data[i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz]
                w = wx * wy * wz
                out = out + (w[..., None] * vals if vals.ndim > w.ndim else w * vals)
    mask = inside[..., None] if np.ndim(out) > inside.ndim else inside
    return np.where(mask, out, fill)


def _nearest(data, q, fill):
    dims = np.asarray(data.shape[:3])
    inside = np.all((q >= -0.5) & (q <= dims - 0.5), axis=-1)
    idx = np.clip(np.floor(q + 0.5).astype(np.int64), 0, dims - 1)
    vals = data[idx[..., 0], idx[..., 1], idx[..., 2]]
    return np.where(inside, vals, fill)


def stack_geometry(shape, spacing, origin, vector, basis, grid_spacing, target_size=None,
                   size_multiple=1):
    """Lattice shape ``(n, w, h)`` and centre for one view through a volume."""
    if grid_spacing is None or grid_spacing <= 0:
        raise ValueError("grid_spacing must be > 0")
    u1, u2 = basis
    n = _count(_half_extent(vector, shape, spacing), grid_spacing)
    if target_size is None:
        w = _count(_half_extent(u1, shape, spacing), grid_spacing, size_multiple)
        h = _count(_half_extent(u2, shape, spacing), grid_spacing, size_multiple)
    else:
        w, h = (int(t) for t in target_size)
        if w <= 0 or h <= 0:
            raise ValueError("target_size must be positive")
    return (n, w, h), volume_centre(shape, spacing, origin)


def extract_slices(v: Volume, ps: PlaneSet, view_index, target_size=None, grid_spacing=None,
                   label: Volume | None = None, size_multiple=1, fill=0.0) -> SliceStack:
    """Resample ``v`` (and optionally ``label``) on the lattice of one view.

    Intensities are trilinear, labels nearest-neighbour; lattice points outside
    the voxel boxes get ``fill`` / label 0. ``grid_spacing`` defaults to the finest
    voxel spacing; ``target_size=None`` sizes the plane to cover the bounding box,
    rounded up to ``size_multiple``, otherwise the plane is cropped/padded around
    the volume centre.
    """
    if min(v.shape) < 2:
        raise ValueError(f"degenerate volume of shape {v.shape}; every dimension needs >= 2 voxels")
    if label is not None and label.shape != v.shape:
        raise ValueError("label volume does not match intensity volume")
    gs = float(min(v.spacing)) if grid_spacing is None else float(grid_spacing)
    vector = np.asarray(ps.vectors[view_index], dtype=np.float64)
    basis = tuple(np.asarray(b, dtype=np.float64) for b in ps.in_plane_bases[view_index])
    lattice, centre = stack_geometry(v.shape, v.spacing, v.origin, vector, basis, gs,
                                     target_size, size_multiple)
    stack = SliceStack(np.empty(lattice), None, view_index, vector, basis, centre, gs)
    q = v.world_to_voxel(stack.grid_points)
    data = v.data if v.data.dtype == np.float64 else v.data.astype(np.float32)
    images = _trilinear(data, q, fill).astype(data.dtype, copy=False)
    labels = None
    if label is not None:
        labels = _nearest(label.data, q, 0).astype(np.uint8)
    stack.images = images
    stack.labels = labels
    return stack


def map_back(stack_predictions, stack: SliceStack, target: Volume):
    """Assign each voxel of ``target`` the prediction of its nearest lattice point.

    Distances are Euclidean in mm; ties go to the lowest ``(slice, row, col)``.
    Voxels farther than one grid step from every lattice point receive a
    background one-hot vector. Returns ``(d0, d1, d2, C)``.
    """
    pred = np.asarray(stack_predictions)
    if pred.size == 0 or pred.shape[0] == 0:
        raise ValueError("empty slice stack")
    if pred.ndim == 3:
        pred = pred[..., None]
    if pred.shape[:3] != tuple(stack.lattice_shape):
        raise ValueError(f"predictions {pred.shape[:3]} do not match lattice {stack.lattice_shape}")
    dims = np.asarray(stack.lattice_shape)
    gs = stack.grid_spacing
    rel = target.world_grid() - stack.centre
    frame = np.stack([stack.vector, stack.basis[0], stack.basis[1]])
    q = rel @ frame.T / gs + (dims - 1) / 2.0
    idx = np.clip(np.ceil(q - 0.5).astype(np.int64), 0, dims - 1)
    dist2 = np.sum((q - idx) ** 2, axis=-1)
    out = pred[idx[..., 0], idx[..., 1], idx[..., 2]]
    far = dist2 > 1.0 + 1e-9
    if np.any(far):
        background = np.zeros(pred.shape[-1], dtype=pred.dtype)
        background[0] = 1
        out[far] = background
    return out


def export_stack(stack: SliceStack, directory):
    """Write each slice as a 2D container plus ``geometry.json`` for inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gs = stack.grid_spacing
    for s in range(stack.lattice_shape[0]):
        write_container(directory / f"slice_{s:04d}_image", stack.images[s], (gs, gs), (0.0, 0.0),
                        INTENSITY)
        if stack.labels is not None:
            write_container(directory / f"slice_{s:04d}_label", stack.labels[s], (gs, gs),
                            (0.0, 0.0), LABEL)
    with open(directory / "geometry.json", "w", encoding="utf-8") as fh:
        json.dump(stack.geometry(), fh, indent=2)
